//! One-class evaluation: ROC/AUC, per-class scoring runs, discriminator accuracy and
//! the ablation grid.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::PadMode;
use crate::data_io::{load_dataset, Dataset, DatasetSpec, Split};
use crate::error::{DgadError, Result};
use crate::networks::Networks;
use crate::pretext::{
    apply_transform, block_argmax, enumerate_transforms, scoring_transforms, PretextLabel, Protocol, TransformSpec,
};
use crate::scoring::{
    dirichlet_score, fit_dirichlet_params, reconstruction_score, score_records, write_scores_csv, ScoreRecord,
    DEFAULT_LAMBDA_S,
};
use crate::tensor::Tensor;
use crate::trainer::{Restoration, TrainConfig, Trainer};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scorer {
    SRec,
    SDir,
}

impl Scorer {
    pub fn name(self) -> &'static str {
        match self {
            Scorer::SRec => "s_rec",
            Scorer::SDir => "s_dir",
        }
    }
}

/// AUC by the Mann-Whitney statistic (ties count 1/2) and the ROC curve.
///
/// Label 1 marks anomalies; higher scores mean more anomalous.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<(f64, Vec<(f64, f64)>)> {
    if scores.len() != labels.len() {
        return Err(DgadError::Shape("scores and labels differ in length".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(DgadError::InvalidArgument("NaN score".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.iter().filter(|&&l| l == 0).count();
    if n_pos + n_neg != labels.len() {
        return Err(DgadError::InvalidArgument("labels must be 0 or 1".into()));
    }
    if n_pos == 0 || n_neg == 0 {
        return Err(DgadError::InvalidArgument(
            "AUC needs both normal and anomalous samples".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    // descending sweep: each group of tied scores moves the curve diagonally
    let mut roc = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut area = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (mut dtp, mut dfp) = (0usize, 0usize);
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1 {
                dtp += 1;
            } else {
                dfp += 1;
            }
            i += 1;
        }
        // normals in this group rank below every anomaly seen so far; ties count half
        area += dfp as f64 * (tp as f64 + dtp as f64 / 2.0);
        tp += dtp;
        fp += dfp;
        roc.push((fp as f64 / n_neg as f64, tp as f64 / n_pos as f64));
    }
    let auc = area / (n_pos as f64 * n_neg as f64);
    Ok((auc, roc))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub class_id: u32,
    pub scorer: Scorer,
    pub auc: f64,
    pub roc: Vec<(f64, f64)>,
    /// Test images per second, compute only.
    pub throughput: f64,
    pub n_normal: usize,
    pub n_anomalous: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub lambda_s: f64,
    pub batch_size: usize,
    /// Protocol 3 only: rotated variants added to the 6 unrotated permutations for `s_dir`.
    pub dirichlet_extra_rotated: usize,
    pub dirichlet_seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            lambda_s: DEFAULT_LAMBDA_S,
            batch_size: 64,
            dirichlet_extra_rotated: 18,
            dirichlet_seed: 0,
        }
    }
}

pub fn dirichlet_transforms(protocol: Protocol, opts: &EvalOptions) -> Vec<(TransformSpec, PretextLabel)> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.dirichlet_seed);
    scoring_transforms(protocol, opts.dirichlet_extra_rotated, &mut rng)
}

/// Anomaly scores (higher = more anomalous) for every test image, plus elapsed seconds.
///
/// `s_dir` timing covers the training-set softmax pass and the fit, because the score
/// cannot be computed without them.
fn anomaly_scores(
    nets: &Networks<f32>,
    protocol: Protocol,
    scorer: Scorer,
    train: Option<&Tensor<f32>>,
    test: &Tensor<f32>,
    opts: &EvalOptions,
) -> Result<(Vec<f64>, f64)> {
    let bs = opts.batch_size.max(1);
    let (n, ..) = test.dims4()?;
    let warm: Vec<usize> = (0..n.min(bs)).collect();
    let warm = test.select(&warm);
    match scorer {
        Scorer::SRec => {
            reconstruction_score(nets, &warm, opts.lambda_s, bs)?;
            let t0 = Instant::now();
            let s = reconstruction_score(nets, test, opts.lambda_s, bs)?;
            Ok((s, t0.elapsed().as_secs_f64()))
        }
        Scorer::SDir => {
            let train =
                train.ok_or_else(|| DgadError::InvalidArgument("the Dirichlet score needs the training set".into()))?;
            let transforms = dirichlet_transforms(protocol, opts);
            crate::scoring::transformed_softmax(nets, &warm, &transforms[0].0, bs)?;
            let t0 = Instant::now();
            let params = fit_dirichlet_params(nets, train, &transforms, bs)?;
            let s = dirichlet_score(nets, test, protocol, &params, bs)?;
            let secs = t0.elapsed().as_secs_f64();
            Ok((s.into_iter().map(|v| -v).collect(), secs))
        }
    }
}

/// Score the whole test split (normal class 0, everything else 1) and compute the AUC.
pub fn evaluate_one_class(
    nets: &Networks<f32>,
    protocol: Protocol,
    train: Option<&Dataset>,
    test: &Dataset,
    scorer: Scorer,
    opts: &EvalOptions,
) -> Result<(EvalResult, Vec<ScoreRecord>)> {
    let labels = test.anomaly_labels();
    let n_anomalous = labels.iter().filter(|&&l| l == 1).count();
    let n_normal = labels.len() - n_anomalous;
    if n_normal == 0 {
        return Err(DgadError::Dataset(format!(
            "class {} is absent from the test split",
            test.normal_class
        )));
    }
    let train_images = match train {
        Some(t) => Some(t.images()?),
        None => None,
    };
    let images = test.images()?;
    let (scores, secs) = anomaly_scores(nets, protocol, scorer, train_images.as_ref(), &images, opts)?;
    let ids: Vec<String> = test.samples.iter().map(|s| s.sample_id.clone()).collect();
    let records = score_records(&ids, &labels, &scores)?;
    let norm: Vec<f64> = records.iter().map(|r| r.s_norm).collect();
    let (auc, roc) = roc_auc(&norm, &labels)?;
    Ok((
        EvalResult {
            class_id: test.normal_class,
            scorer,
            auc,
            roc,
            throughput: labels.len() as f64 / secs.max(1e-9),
            n_normal,
            n_anomalous,
        },
        records,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subset {
    NormalOnly,
    All,
}

/// Fraction of correct block-wise argmax predictions. `logits` is `(N, label_dim)`.
pub fn accuracy_from_logits(logits: &[f64], labels: &[PretextLabel], blocks: &[usize]) -> Result<f64> {
    let width: usize = blocks.iter().sum();
    if logits.len() != labels.len() * width {
        return Err(DgadError::Shape("logits do not match labels".into()));
    }
    let (mut correct, mut total) = (0usize, 0usize);
    for (row, label) in logits.chunks(width).zip(labels) {
        let pred = block_argmax(row, blocks);
        let truth = block_argmax(&label.bits.iter().map(|&b| b as f64).collect::<Vec<_>>(), blocks);
        correct += pred.iter().zip(&truth).filter(|(a, b)| a == b).count();
        total += blocks.len();
    }
    Ok(correct as f64 / total.max(1) as f64)
}

/// Accuracy of the discriminator's transformation classifier over every protocol
/// transformation of each test image in `subset`.
pub fn discriminator_accuracy(
    nets: &Networks<f32>,
    protocol: Protocol,
    test: &Dataset,
    subset: Subset,
    batch_size: usize,
) -> Result<f64> {
    let keep: Vec<usize> = test
        .samples
        .iter()
        .enumerate()
        .filter(|(_, s)| subset == Subset::All || s.class == test.normal_class)
        .map(|(i, _)| i)
        .collect();
    if keep.is_empty() {
        return Err(DgadError::Dataset("no test samples in the requested subset".into()));
    }
    let images = test.images()?.select(&keep);
    let blocks = protocol.label_blocks();
    let bs = batch_size.max(1);
    let (mut correct, mut total) = (0.0, 0usize);
    for (spec, label) in enumerate_transforms(protocol) {
        for start in (0..keep.len()).step_by(bs) {
            let idx: Vec<usize> = (start..(start + bs).min(keep.len())).collect();
            let x = apply_transform(&images.select(&idx), &spec)?;
            let logits: Vec<f64> = nets.classify(&x)?.data().iter().map(|&v| v as f64).collect();
            let labels = vec![label.clone(); idx.len()];
            correct += accuracy_from_logits(&logits, &labels, blocks)? * idx.len() as f64;
            total += idx.len();
        }
    }
    Ok(correct / total as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationVariant {
    GanOnly,
    DgadMinusCl,
    DgadZeroPad,
    DgadCoord,
    Dgad,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 5] = [
        AblationVariant::GanOnly,
        AblationVariant::DgadMinusCl,
        AblationVariant::DgadZeroPad,
        AblationVariant::DgadCoord,
        AblationVariant::Dgad,
    ];

    pub fn label(self) -> &'static str {
        match self {
            AblationVariant::GanOnly => "GAN",
            AblationVariant::DgadMinusCl => "DGAD - CL",
            AblationVariant::DgadZeroPad => "DGAD + zero-padding",
            AblationVariant::DgadCoord => "DGAD + coord",
            AblationVariant::Dgad => "DGAD",
        }
    }

    pub fn slug(self) -> &'static str {
        match self {
            AblationVariant::GanOnly => "gan_only",
            AblationVariant::DgadMinusCl => "dgad_minus_cl",
            AblationVariant::DgadZeroPad => "dgad_zero_pad",
            AblationVariant::DgadCoord => "dgad_coord",
            AblationVariant::Dgad => "dgad",
        }
    }

    /// `base` with this variant's deltas applied.
    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        match self {
            AblationVariant::GanOnly => {
                c.weights.lambda_cls = 0.0;
                c.restoration = Restoration::Pixel;
            }
            AblationVariant::DgadMinusCl => c.compactness_enabled = false,
            AblationVariant::DgadZeroPad => c.net.padding_mode = PadMode::Zero,
            AblationVariant::DgadCoord => c.net.use_coord = true,
            AblationVariant::Dgad => {}
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: AblationVariant,
    pub scorer: Scorer,
    /// AUC per class in the order of [`AblationTable::classes`].
    pub aucs: Vec<f64>,
    pub mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub classes: Vec<u32>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, variant: AblationVariant, scorer: Scorer) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant && r.scorer == scorer)
    }

    /// Variant rows, one column per class, then the mean.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,scorer");
        for c in &self.classes {
            let _ = write!(s, ",class_{c}");
        }
        s.push_str(",mean\n");
        for r in &self.rows {
            let _ = write!(s, "{},{}", r.variant.label(), r.scorer.name());
            for a in &r.aucs {
                let _ = write!(s, ",{a:.4}");
            }
            let _ = writeln!(s, ",{:.4}", r.mean);
        }
        s
    }
}

#[derive(Clone, Debug)]
pub struct GridOptions {
    pub scorers: Vec<Scorer>,
    pub eval: EvalOptions,
    /// Run (variant, class) cells on separate threads.
    pub parallel: bool,
}

/// One result cell of the grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub variant: AblationVariant,
    pub results: Vec<EvalResult>,
}

fn run_cell(
    base: &TrainConfig,
    variant: AblationVariant,
    data: &DatasetSpec,
    class: u32,
    opts: &GridOptions,
    out_dir: &Path,
) -> Result<CellResult> {
    let config = variant.apply(base);
    let cell_dir = out_dir.join(variant.slug()).join(format!("class_{class}"));
    let train_spec = DatasetSpec {
        normal_class: class,
        split: Split::Train,
        ..data.clone()
    };
    let test_spec = DatasetSpec {
        split: Split::Test,
        ..train_spec.clone()
    };
    let train = load_dataset(&train_spec)?;
    let test = load_dataset(&test_spec)?;
    let mut trainer = Trainer::new(config)?;
    trainer.train(&train.images()?, &cell_dir)?;
    let mut results = Vec::new();
    for &scorer in &opts.scorers {
        let (res, records) = evaluate_one_class(
            &trainer.nets,
            trainer.config.protocol,
            Some(&train),
            &test,
            scorer,
            &opts.eval,
        )?;
        write_eval_outputs(&cell_dir, &res, &records)?;
        results.push(res);
    }
    Ok(CellResult { variant, results })
}

/// Train and evaluate every variant on every class; writes per-cell outputs under
/// `out_dir/<variant>/class_K/` and `out_dir/ablation.csv`.
pub fn run_ablation_grid(
    base: &TrainConfig,
    variants: &[AblationVariant],
    data: &DatasetSpec,
    classes: &[u32],
    opts: &GridOptions,
    out_dir: &Path,
) -> Result<AblationTable> {
    fs::create_dir_all(out_dir).map_err(|e| DgadError::io(out_dir, e))?;
    let cells: Vec<(AblationVariant, u32)> = variants
        .iter()
        .flat_map(|&v| classes.iter().map(move |&c| (v, c)))
        .collect();
    let results: Vec<Result<CellResult>> = if opts.parallel {
        std::thread::scope(|s| {
            let handles: Vec<_> = cells
                .iter()
                .map(|&(v, c)| s.spawn(move || run_cell(base, v, data, c, opts, out_dir)))
                .collect();
            handles
                .into_iter()
                .map(|h| {
                    h.join()
                        .unwrap_or_else(|_| Err(DgadError::InvalidArgument("ablation cell panicked".into())))
                })
                .collect()
        })
    } else {
        cells
            .iter()
            .map(|&(v, c)| run_cell(base, v, data, c, opts, out_dir))
            .collect()
    };
    let results: Vec<CellResult> = results.into_iter().collect::<Result<_>>()?;

    let mut rows = Vec::new();
    for &variant in variants {
        for &scorer in &opts.scorers {
            let aucs: Vec<f64> = classes
                .iter()
                .map(|&c| {
                    results
                        .iter()
                        .filter(|r| r.variant == variant)
                        .flat_map(|r| &r.results)
                        .find(|e| e.class_id == c && e.scorer == scorer)
                        .map_or(f64::NAN, |e| e.auc)
                })
                .collect();
            let mean = aucs.iter().sum::<f64>() / aucs.len().max(1) as f64;
            rows.push(AblationRow {
                variant,
                scorer,
                aucs,
                mean,
            });
        }
    }
    let table = AblationTable {
        classes: classes.to_vec(),
        rows,
    };
    let csv = out_dir.join("ablation.csv");
    fs::write(&csv, table.to_csv()).map_err(|e| DgadError::io(&csv, e))?;
    Ok(table)
}

/// `eval_<scorer>.json`, `scores_<scorer>.csv`, `roc_<scorer>.svg` and `hist_<scorer>.svg` in `dir`.
pub fn write_eval_outputs(dir: &Path, result: &EvalResult, records: &[ScoreRecord]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| DgadError::io(dir, e))?;
    let name = result.scorer.name();
    let json = dir.join(format!("eval_{name}.json"));
    fs::write(&json, serde_json::to_string_pretty(result)?).map_err(|e| DgadError::io(&json, e))?;
    let csv = dir.join(format!("scores_{name}.csv"));
    write_scores_csv(&csv, records)?;
    let roc = dir.join(format!("roc_{name}.svg"));
    fs::write(&roc, roc_svg(result)).map_err(|e| DgadError::io(&roc, e))?;
    let hist = dir.join(format!("hist_{name}.svg"));
    fs::write(&hist, histogram_svg(records, name)).map_err(|e| DgadError::io(&hist, e))?;
    Ok(vec![json, csv, roc, hist])
}

const SVG_SIZE: f64 = 320.0;
const MARGIN: f64 = 40.0;

fn svg_open(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{w}\" viewBox=\"0 0 {w} {w}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{cx}\" y=\"20\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\">{title}</text>\n\
         <rect x=\"{m}\" y=\"{m}\" width=\"{p}\" height=\"{p}\" fill=\"none\" stroke=\"black\"/>\n",
        w = SVG_SIZE,
        cx = SVG_SIZE / 2.0,
        m = MARGIN,
        p = SVG_SIZE - 2.0 * MARGIN,
        title = title
    )
}

fn to_px(x: f64, y: f64) -> (f64, f64) {
    let p = SVG_SIZE - 2.0 * MARGIN;
    (MARGIN + x * p, SVG_SIZE - MARGIN - y * p)
}

pub fn roc_svg(result: &EvalResult) -> String {
    let mut s = svg_open(&format!(
        "ROC class {} ({}) AUC = {:.4}",
        result.class_id,
        result.scorer.name(),
        result.auc
    ));
    let (x0, y0) = to_px(0.0, 0.0);
    let (x1, y1) = to_px(1.0, 1.0);
    let _ = writeln!(
        s,
        "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y1}\" stroke=\"gray\" stroke-dasharray=\"4\"/>"
    );
    let pts: Vec<String> = result
        .roc
        .iter()
        .map(|&(f, t)| {
            let (x, y) = to_px(f, t);
            format!("{x:.2},{y:.2}")
        })
        .collect();
    let _ = writeln!(
        s,
        "<polyline points=\"{}\" fill=\"none\" stroke=\"steelblue\" stroke-width=\"2\"/>",
        pts.join(" ")
    );
    let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">false positive rate</text>", SVG_SIZE / 2.0, SVG_SIZE - 10.0);
    let _ = writeln!(s, "<text x=\"12\" y=\"{}\" transform=\"rotate(-90 12 {})\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">true positive rate</text>", SVG_SIZE / 2.0, SVG_SIZE / 2.0);
    s.push_str("</svg>\n");
    s
}

/// Normalized-score histograms of normal and anomalous samples, overlaid.
pub fn histogram_svg(records: &[ScoreRecord], scorer: &str) -> String {
    const BINS: usize = 20;
    let mut counts = [[0usize; BINS]; 2];
    for r in records {
        let b = ((r.s_norm * BINS as f64) as usize).min(BINS - 1);
        counts[(r.label == 1) as usize][b] += 1;
    }
    let totals = [
        counts[0].iter().sum::<usize>().max(1),
        counts[1].iter().sum::<usize>().max(1),
    ];
    let peak = (0..2)
        .flat_map(|k| counts[k].iter().map(move |&c| c as f64 / totals[k] as f64))
        .fold(1e-9, f64::max);
    let mut s = svg_open(&format!("normalized {scorer} scores"));
    for (k, color) in [(0, "seagreen"), (1, "crimson")] {
        for (b, &c) in counts[k].iter().enumerate() {
            let h = c as f64 / totals[k] as f64 / peak;
            let (x, y) = to_px(b as f64 / BINS as f64, h);
            let (x2, y0) = to_px((b + 1) as f64 / BINS as f64, 0.0);
            let _ = writeln!(
                s,
                "<rect x=\"{x:.2}\" y=\"{y:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"{color}\" fill-opacity=\"0.45\"/>",
                x2 - x,
                y0 - y
            );
        }
    }
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" fill=\"seagreen\">normal</text>",
        MARGIN + 6.0,
        MARGIN + 14.0
    );
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" fill=\"crimson\">anomalous</text>",
        MARGIN + 6.0,
        MARGIN + 28.0
    );
    s.push_str("</svg>\n");
    s
}
