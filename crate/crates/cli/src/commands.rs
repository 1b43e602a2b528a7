use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::Serialize;

use dgad::checkpoint::load_checkpoint;
use dgad::data_io::{load_dataset, DatasetSpec, Split};
use dgad::evaluation::{
    discriminator_accuracy, evaluate_one_class, histogram_svg, roc_svg, run_ablation_grid, write_eval_outputs,
    EvalResult, GridOptions, Scorer, Subset,
};
use dgad::trainer::{latest_checkpoint, Trainer};

use crate::config::ExperimentConfig;

pub struct RunOptions {
    pub force: bool,
    pub resume: bool,
}

fn is_nonempty_dir(p: &Path) -> bool {
    fs::read_dir(p).map(|mut d| d.next().is_some()).unwrap_or(false)
}

/// Refuse to clobber `dir` unless forced; with force, clear it first.
fn prepare_output(dir: &Path, force: bool) -> Result<()> {
    if is_nonempty_dir(dir) {
        if !force {
            bail!("{} already exists; pass --force to overwrite", dir.display());
        }
        fs::remove_dir_all(dir).with_context(|| format!("clearing {}", dir.display()))?;
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(())
}

fn spec_for(cfg: &ExperimentConfig, class: u32, split: Split) -> DatasetSpec {
    DatasetSpec {
        normal_class: class,
        split,
        ..cfg.data.clone()
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    /// Seconds since the Unix epoch.
    started_at: u64,
    config: &'a ExperimentConfig,
}

fn write_manifest(cfg: &ExperimentConfig, dir: &Path, command: &str) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let started_at = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    write_json(
        &dir.join(format!("{command}_manifest.json")),
        &RunManifest {
            command,
            version: env!("CARGO_PKG_VERSION"),
            seed: cfg.train.seed,
            started_at,
            config: cfg,
        },
    )
}

pub fn train(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<()> {
    for &class in &cfg.run.classes {
        let dir = cfg.class_dir(class);
        let mut trainer = match latest_checkpoint(&dir).filter(|_| opts.resume) {
            Some(ckpt) => {
                let ck = load_checkpoint(&ckpt, Some(&cfg.train.net))?;
                log::info!("class {class}: resuming from {}", ckpt.display());
                Trainer::from_parts(cfg.train.clone(), ck.nets, ck.state)?
            }
            None => {
                prepare_output(&dir, opts.force)?;
                Trainer::new(cfg.train.clone())?
            }
        };
        let data = load_dataset(&spec_for(cfg, class, Split::Train))?;
        log::info!("class {class}: {} training images", data.len());
        write_manifest(cfg, &dir, "train")?;
        fs::write(dir.join("config.toml"), toml::to_string(cfg)?)?;
        let ckpt = trainer.train(&data.images()?, &dir)?;
        println!("class {class}: checkpoint {}", ckpt.display());
    }
    Ok(())
}

#[derive(Serialize)]
struct AccuracyReport {
    class_id: u32,
    normal_only: f64,
    all: f64,
}

/// One row per scorer: per-class AUCs, then their mean.
fn summary_csv(classes: &[u32], scorers: &[Scorer], results: &[EvalResult]) -> String {
    let mut out = String::from("scorer");
    for c in classes {
        out.push_str(&format!(",class_{c}"));
    }
    out.push_str(",mean\n");
    for &scorer in scorers {
        let aucs: Vec<f64> = classes
            .iter()
            .filter_map(|&c| results.iter().find(|r| r.scorer == scorer && r.class_id == c))
            .map(|r| r.auc)
            .collect();
        out.push_str(scorer.name());
        for a in &aucs {
            out.push_str(&format!(",{a:.6}"));
        }
        out.push_str(&format!(",{:.6}\n", aucs.iter().sum::<f64>() / aucs.len() as f64));
    }
    out
}

pub fn test(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<()> {
    let results_root = cfg.run.run_dir.join("results");
    let mut all: Vec<EvalResult> = Vec::new();
    for &class in &cfg.run.classes {
        let ckpt = latest_checkpoint(&cfg.class_dir(class)).with_context(|| {
            format!(
                "no checkpoint under {}; run `dgad train` first",
                cfg.class_dir(class).display()
            )
        })?;
        let ck = load_checkpoint(&ckpt, Some(&cfg.train.net))?;
        let out = cfg.results_dir(class);
        prepare_output(&out, opts.force)?;
        let train = load_dataset(&spec_for(cfg, class, Split::Train))?;
        let test = load_dataset(&spec_for(cfg, class, Split::Test))?;
        let mut class_results = Vec::new();
        for scorer in cfg.run.score.scorers() {
            let (res, records) =
                evaluate_one_class(&ck.nets, ck.config.protocol, Some(&train), &test, scorer, &cfg.eval)?;
            write_eval_outputs(&out, &res, &records)?;
            println!(
                "class {class} {}: AUC {:.4} ({:.1} im/s)",
                scorer.name(),
                res.auc,
                res.throughput
            );
            if class_results.is_empty() {
                // the first requested scorer doubles as the class's headline plots
                fs::write(out.join("roc.svg"), roc_svg(&res))?;
                fs::write(out.join("hist.svg"), histogram_svg(&records, scorer.name()))?;
            }
            class_results.push(res);
        }
        write_json(&out.join("eval.json"), &class_results)?;
        all.extend(class_results);
        if cfg.run.discriminator_accuracy {
            let bs = cfg.eval.batch_size;
            let report = AccuracyReport {
                class_id: class,
                normal_only: discriminator_accuracy(&ck.nets, ck.config.protocol, &test, Subset::NormalOnly, bs)?,
                all: discriminator_accuracy(&ck.nets, ck.config.protocol, &test, Subset::All, bs)?,
            };
            println!(
                "class {class} discriminator accuracy: normal {:.4}, all {:.4}",
                report.normal_only, report.all
            );
            write_json(&out.join("disc_accuracy.json"), &report)?;
        }
    }
    for scorer in cfg.run.score.scorers() {
        let aucs: Vec<f64> = all.iter().filter(|r| r.scorer == scorer).map(|r| r.auc).collect();
        let mean = aucs.iter().sum::<f64>() / aucs.len() as f64;
        println!("mean {}: AUC {mean:.4}", scorer.name());
    }
    write_manifest(cfg, &results_root, "test")?;
    let path = results_root.join("summary.csv");
    fs::write(&path, summary_csv(&cfg.run.classes, &cfg.run.score.scorers(), &all))
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn ablate(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<()> {
    let out = cfg.run.run_dir.join("ablation");
    prepare_output(&out, opts.force)?;
    write_manifest(cfg, &out, "ablate")?;
    let grid = GridOptions {
        scorers: cfg.run.score.scorers(),
        eval: cfg.eval.clone(),
        parallel: cfg.run.parallel,
    };
    let table = run_ablation_grid(&cfg.train, &cfg.run.variants, &cfg.data, &cfg.run.classes, &grid, &out)?;
    print!("{}", table.to_csv());
    Ok(())
}
