//! Alternating adversarial training: one discriminator update followed by one
//! encoder/decoder update per batch, both on the same transforms.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{CompactnessPooling, Graph, ParamGroup, Var};
use crate::checkpoint;
use crate::data_io::random_zoom;
use crate::error::{DgadError, Result};
use crate::losses::{
    adversarial_loss_d, adversarial_loss_g, classification_loss_d, classification_loss_g, compactness_loss,
    reconstruction_loss, LossParts, LossReport, LossWeights,
};
use crate::networks::{NetConfig, Networks};
use crate::optim::{Adam, AdamConfig};
use crate::pretext::{apply_transforms, encode_label, normal_label, sample_transform, Protocol};
use crate::tensor::Tensor;

/// How the generator learns to undo transformations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Restoration {
    /// The discriminator's classifier demands the normal label on restored images.
    #[default]
    Discriminator,
    /// Pixel-level L1 between restored and original images; no classification losses.
    Pixel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub protocol: Protocol,
    pub net: NetConfig,
    pub weights: LossWeights,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub iterations: u64,
    /// When set, overrides `iterations` with `epochs` passes over the dataset.
    pub epochs: Option<u64>,
    pub seed: u64,
    /// Save a checkpoint every this many iterations; the final iteration is always saved.
    pub checkpoint_every: u64,
    pub compactness_enabled: bool,
    pub compactness_pooling: CompactnessPooling,
    pub restoration: Restoration,
    /// Random zoom in `[1.0, 1.2]` plus center crop on every training image.
    pub augment_zoom: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            protocol: Protocol::Rotation,
            net: NetConfig::default(),
            weights: LossWeights::default(),
            batch_size: 64,
            learning_rate: 1e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            iterations: 10_000,
            epochs: None,
            seed: 0,
            checkpoint_every: 0,
            compactness_enabled: true,
            compactness_pooling: CompactnessPooling::PerChannelMean,
            restoration: Restoration::Discriminator,
            augment_zoom: false,
        }
    }
}

impl TrainConfig {
    /// Validate and align the classifier width with the protocol.
    pub fn resolved(mut self) -> Result<Self> {
        self.net.label_dim = self.protocol.label_dim();
        self.net.validate()?;
        self.weights.validate()?;
        if self.batch_size < 2 {
            return Err(DgadError::Config("batch_size must be at least 2".into()));
        }
        if self.iterations == 0 || self.epochs == Some(0) {
            return Err(DgadError::Config("iterations and epochs must be >= 1".into()));
        }
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("adam_beta1", self.adam_beta1),
            ("adam_beta2", self.adam_beta2),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(DgadError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.adam_beta1 >= 1.0 || self.adam_beta2 >= 1.0 {
            return Err(DgadError::Config("Adam betas must be below 1".into()));
        }
        if self.protocol != Protocol::Rotation && !self.net.image_size.is_multiple_of(2) {
            return Err(DgadError::Config("jigsaw protocols need an even image size".into()));
        }
        Ok(self)
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            ..AdamConfig::default()
        }
    }

    /// Weights actually applied to the generator objective.
    pub fn effective_weights(&self) -> LossWeights {
        LossWeights {
            lambda_cmp: if self.compactness_enabled {
                self.weights.lambda_cmp
            } else {
                0.0
            },
            lambda_cls: match self.restoration {
                Restoration::Discriminator => self.weights.lambda_cls,
                Restoration::Pixel => 0.0,
            },
            ..self.weights
        }
    }

    pub fn total_iterations(&self, dataset_len: usize) -> u64 {
        match self.epochs {
            Some(e) => e * batches_per_epoch(dataset_len, self.batch_size) as u64,
            None => self.iterations,
        }
    }
}

/// Mutable optimisation state besides the network weights.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub iteration: u64,
    pub gen_opt: Adam<f32>,
    pub disc_opt: Adam<f32>,
    pub rng: ChaCha8Rng,
    /// Exponential moving average of the loss report.
    pub running: LossReport,
}

impl PartialEq for TrainState {
    fn eq(&self, other: &Self) -> bool {
        self.iteration == other.iteration
            && self.gen_opt == other.gen_opt
            && self.disc_opt == other.disc_opt
            && self.rng == other.rng
            && self.running == other.running
    }
}

impl TrainState {
    pub fn new(config: &TrainConfig, nets: &Networks<f32>) -> Self {
        TrainState {
            iteration: 0,
            gen_opt: Adam::new(config.adam(), &[&nets.encoder.store, &nets.decoder.store]),
            disc_opt: Adam::new(config.adam(), &[&nets.discriminator.store]),
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x5DEE_CE66_D1CE_5EED),
            running: LossReport::default(),
        }
    }
}

const RUNNING_DECAY: f64 = 0.98;

/// Gradient squared norms per parameter group for each phase of a step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PhaseGradients {
    pub encoder: f64,
    pub decoder: f64,
    pub discriminator: f64,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub nets: Networks<f32>,
    pub state: TrainState,
}

struct Forward {
    graph: Graph<f32>,
    x_r: Var,
    x_t: Var,
    z_r: Var,
    z_t: Var,
    xh_r: Var,
    xh_t: Var,
    zh_t: Var,
}

fn finite(term: &str, v: f64, iteration: u64, dump: &dyn Fn() -> String) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(DgadError::NonFinite {
            term: term.to_string(),
            iteration,
            detail: dump(),
        })
    }
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        let config = config.resolved()?;
        let nets = Networks::new(&config.net, config.seed)?;
        let state = TrainState::new(&config, &nets);
        Ok(Trainer { config, nets, state })
    }

    pub fn from_parts(config: TrainConfig, nets: Networks<f32>, state: TrainState) -> Result<Self> {
        let config = config.resolved()?;
        if nets.config != config.net {
            return Err(DgadError::Config(
                "network configuration does not match the training configuration".into(),
            ));
        }
        Ok(Trainer { config, nets, state })
    }

    fn generator_forward(&self, x_r: &Tensor<f32>, x_t: Tensor<f32>) -> Result<Forward> {
        let mut g = Graph::new();
        g.freeze(ParamGroup::Discriminator);
        let xr = g.constant(x_r.clone());
        let xt = g.constant(x_t);
        let z_r = self.nets.encoder.forward(&mut g, xr)?;
        let z_t = self.nets.encoder.forward(&mut g, xt)?;
        let xh_r = self.nets.decoder.forward(&mut g, z_r)?;
        let xh_t = self.nets.decoder.forward(&mut g, z_t)?;
        let zh_t = self.nets.encoder.forward(&mut g, xh_t)?;
        Ok(Forward {
            graph: g,
            x_r: xr,
            x_t: xt,
            z_r,
            z_t,
            xh_r,
            xh_t,
            zh_t,
        })
    }

    /// One discriminator update then one encoder/decoder update on `batch`.
    pub fn train_step(&mut self, batch: &Tensor<f32>) -> Result<LossReport> {
        self.step_impl(batch, None)
    }

    /// Like [`Trainer::train_step`], also reporting which groups received gradient in each phase.
    pub fn train_step_probed(&mut self, batch: &Tensor<f32>) -> Result<(LossReport, [PhaseGradients; 2])> {
        let mut probes = [PhaseGradients::default(); 2];
        let r = self.step_impl(batch, Some(&mut probes))?;
        Ok((r, probes))
    }

    fn step_impl(&mut self, batch: &Tensor<f32>, mut probes: Option<&mut [PhaseGradients; 2]>) -> Result<LossReport> {
        let (n, c, h, w) = batch.dims4()?;
        let cfg = &self.config;
        if n < 2 {
            return Err(DgadError::InvalidArgument(
                "train_step needs at least 2 images for the compactness loss".into(),
            ));
        }
        if c != cfg.net.image_channels || h != cfg.net.image_size || w != cfg.net.image_size {
            return Err(DgadError::Shape(format!(
                "batch {:?} does not match network input (n, {}, {s}, {s})",
                batch.shape(),
                cfg.net.image_channels,
                s = cfg.net.image_size
            )));
        }
        let iteration = self.state.iteration + 1;
        let protocol = cfg.protocol;
        let weights = cfg.effective_weights();
        let use_cls = cfg.restoration == Restoration::Discriminator;

        let batch = if cfg.augment_zoom {
            let scales: Vec<f64> = (0..n)
                .map(|_| rand::Rng::gen_range(&mut self.state.rng, 1.0..=1.2))
                .collect();
            let imgs: Result<Vec<_>> = batch
                .unstack()
                .iter()
                .zip(&scales)
                .map(|(img, &s)| random_zoom(img, s))
                .collect();
            Tensor::stack(&imgs?)?
        } else {
            batch.clone()
        };
        let specs: Vec<_> = (0..n)
            .map(|_| sample_transform(protocol, &mut self.state.rng))
            .collect();
        let labels_t: Vec<_> = specs.iter().map(encode_label).collect();
        let x_t = apply_transforms(&batch, &specs)?;

        let mut fwd = self.generator_forward(&batch, x_t)?;

        // discriminator phase on detached generator outputs
        self.nets.discriminator.power_iteration(1);
        let mut dg = Graph::new();
        dg.freeze(ParamGroup::Encoder);
        dg.freeze(ParamGroup::Decoder);
        let vals = |v: Var| fwd.graph.value(v).clone();
        let (xr, zr) = (dg.constant(vals(fwd.x_r)), dg.constant(vals(fwd.z_r)));
        let (xt, zt) = (dg.constant(vals(fwd.x_t)), dg.constant(vals(fwd.z_t)));
        let (xht, zht) = (dg.constant(vals(fwd.xh_t)), dg.constant(vals(fwd.zh_t)));
        let disc = &self.nets.discriminator;
        let real = disc.forward(&mut dg, xr, zr)?;
        let fake = disc.forward(&mut dg, xht, zht)?;
        let adv_d = adversarial_loss_d(&mut dg, real.adv, fake.adv)?;
        let mut d_terms = vec![(1.0, adv_d)];
        let cls_d = if use_cls {
            let trans = disc.forward(&mut dg, xt, zt)?;
            let l = classification_loss_d(&mut dg, protocol, trans.class_logits, &labels_t)?;
            d_terms.push((weights.lambda_cls, l));
            Some(l)
        } else {
            None
        };
        let total_d = dg.weighted_sum(&d_terms)?;
        let dump_d = || {
            format!(
                "adv_d={:?} cls_d={:?}",
                dg.value(adv_d).item(),
                cls_d.map(|v| dg.value(v).item())
            )
        };
        let adv_d_v = finite("adv_d", dg.value(adv_d).item() as f64, iteration, &dump_d)?;
        let cls_d_v = match cls_d {
            Some(v) => finite("cls_d", dg.value(v).item() as f64, iteration, &dump_d)?,
            None => 0.0,
        };
        let d_grads = dg.backward(total_d)?;
        if let Some(p) = probes.as_deref_mut() {
            p[0] = PhaseGradients {
                encoder: d_grads.group_sq_norm(ParamGroup::Encoder) as f64,
                decoder: d_grads.group_sq_norm(ParamGroup::Decoder) as f64,
                discriminator: d_grads.group_sq_norm(ParamGroup::Discriminator) as f64,
            };
        }
        let d_grads = d_grads.into_param_grads();
        self.state
            .disc_opt
            .update(&mut [&mut self.nets.discriminator.store], &d_grads)?;

        // generator phase against the updated, frozen discriminator
        let g = &mut fwd.graph;
        let disc = &self.nets.discriminator;
        let restored = disc.forward(g, fwd.xh_t, fwd.zh_t)?;
        let rec_r = reconstruction_loss(g, fwd.x_r, fwd.xh_r)?;
        let rec = match cfg.restoration {
            Restoration::Discriminator => rec_r,
            Restoration::Pixel => {
                let rec_t = reconstruction_loss(g, fwd.x_r, fwd.xh_t)?;
                g.add(rec_r, rec_t)?
            }
        };
        let cmp = compactness_loss(g, fwd.z_r, cfg.compactness_pooling)?;
        let adv_g = adversarial_loss_g(g, restored.adv);
        let mut g_terms = vec![(1.0, adv_g), (weights.lambda_rec, rec)];
        if weights.lambda_cmp != 0.0 {
            g_terms.push((weights.lambda_cmp, cmp));
        }
        let cls_g = if use_cls {
            let trans = disc.forward(g, fwd.x_t, fwd.z_t)?;
            let l = classification_loss_g(
                g,
                protocol,
                trans.class_logits,
                &labels_t,
                restored.class_logits,
                &normal_label(protocol),
            )?;
            g_terms.push((weights.lambda_cls, l));
            Some(l)
        } else {
            None
        };
        let total_g = g.weighted_sum(&g_terms)?;
        let gv = |v: Var| g.value(v).item() as f64;
        let dump_g = || {
            format!(
                "rec={:?} cmp={:?} adv_g={:?} cls_g={:?}",
                gv(rec),
                gv(cmp),
                gv(adv_g),
                cls_g.map(gv)
            )
        };
        let parts = LossParts {
            rec: finite("rec", gv(rec), iteration, &dump_g)?,
            cls_d: cls_d_v,
            cls_g: match cls_g {
                Some(v) => finite("cls_g", gv(v), iteration, &dump_g)?,
                None => 0.0,
            },
            cmp: finite("cmp", gv(cmp), iteration, &dump_g)?,
            adv_d: adv_d_v,
            adv_g: finite("adv_g", gv(adv_g), iteration, &dump_g)?,
        };
        finite("total_g", gv(total_g), iteration, &dump_g)?;
        let g_grads = g.backward(total_g)?;
        if let Some(p) = probes {
            p[1] = PhaseGradients {
                encoder: g_grads.group_sq_norm(ParamGroup::Encoder) as f64,
                decoder: g_grads.group_sq_norm(ParamGroup::Decoder) as f64,
                discriminator: g_grads.group_sq_norm(ParamGroup::Discriminator) as f64,
            };
        }
        let g_grads = g_grads.into_param_grads();
        self.state.gen_opt.update(
            &mut [&mut self.nets.encoder.store, &mut self.nets.decoder.store],
            &g_grads,
        )?;

        let report = LossReport::from_parts(parts, &weights)?;
        self.state.iteration = iteration;
        self.state.running = if iteration == 1 {
            report
        } else {
            blend(&self.state.running, &report)
        };
        Ok(report)
    }

    /// Train on `images` until the configured budget, writing metrics and checkpoints
    /// under `run_dir`. Resumes from `self.state.iteration`. Returns the final checkpoint.
    pub fn train(&mut self, images: &Tensor<f32>, run_dir: &Path) -> Result<PathBuf> {
        let (n, ..) = images.dims4()?;
        if n == 0 {
            return Err(DgadError::Dataset("training set is empty".into()));
        }
        if n < 2 {
            return Err(DgadError::Dataset("training set needs at least 2 images".into()));
        }
        fs::create_dir_all(run_dir).map_err(|e| DgadError::io(run_dir, e))?;
        let total = self.config.total_iterations(n);
        let metrics_path = run_dir.join("metrics.csv");
        let mut log = open_metrics(&metrics_path, self.state.iteration)?;
        let schedule = BatchSchedule::new(n, self.config.batch_size, self.config.seed);
        let mut last = None;
        while self.state.iteration < total {
            let idx = schedule.batch(self.state.iteration);
            let batch = images.select(&idx);
            let report = self.train_step(&batch)?;
            let it = self.state.iteration;
            writeln!(log, "{}", report.csv_row(it)).map_err(|e| DgadError::io(&metrics_path, e))?;
            if it.is_multiple_of(100) || it == total {
                log::info!(
                    "iter {it}/{total} rec {:.4} cls_d {:.4} cls_g {:.4} cmp {:.4} adv_d {:.4} adv_g {:.4}",
                    report.rec,
                    report.cls_d,
                    report.cls_g,
                    report.cmp,
                    report.adv_d,
                    report.adv_g
                );
            }
            let every = self.config.checkpoint_every;
            if (every > 0 && it.is_multiple_of(every)) || it == total {
                log.flush().map_err(|e| DgadError::io(&metrics_path, e))?;
                let dir = checkpoint_dir(run_dir, it);
                checkpoint::save_checkpoint(&self.config, &self.state, &self.nets, &dir)?;
                last = Some(dir);
            }
        }
        log.flush().map_err(|e| DgadError::io(&metrics_path, e))?;
        match last {
            Some(p) => Ok(p),
            None => {
                let dir = checkpoint_dir(run_dir, self.state.iteration);
                if !dir.exists() {
                    checkpoint::save_checkpoint(&self.config, &self.state, &self.nets, &dir)?;
                }
                Ok(dir)
            }
        }
    }
}

fn blend(avg: &LossReport, new: &LossReport) -> LossReport {
    let m = |a: f64, b: f64| RUNNING_DECAY * a + (1.0 - RUNNING_DECAY) * b;
    LossReport {
        rec: m(avg.rec, new.rec),
        cls_d: m(avg.cls_d, new.cls_d),
        cls_g: m(avg.cls_g, new.cls_g),
        cmp: m(avg.cmp, new.cmp),
        adv_d: m(avg.adv_d, new.adv_d),
        adv_g: m(avg.adv_g, new.adv_g),
        total_d: m(avg.total_d, new.total_d),
        total_g: m(avg.total_g, new.total_g),
    }
}

pub fn checkpoint_dir(run_dir: &Path, iteration: u64) -> PathBuf {
    run_dir.join(format!("ckpt-{iteration}"))
}

/// Newest `ckpt-N` directory under `run_dir`.
pub fn latest_checkpoint(run_dir: &Path) -> Option<PathBuf> {
    let entries = fs::read_dir(run_dir).ok()?;
    entries
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            let it: u64 = name.strip_prefix("ckpt-")?.parse().ok()?;
            Some((it, e.path()))
        })
        .max_by_key(|(it, _)| *it)
        .map(|(_, p)| p)
}

/// Metrics log positioned after row `keep_through`; later rows from an interrupted run are dropped.
fn open_metrics(path: &Path, keep_through: u64) -> Result<File> {
    let mut kept = vec![LossReport::CSV_HEADER.to_string()];
    if keep_through > 0 && path.exists() {
        let f = File::open(path).map_err(|e| DgadError::io(path, e))?;
        for line in BufReader::new(f).lines().skip(1) {
            let line = line.map_err(|e| DgadError::io(path, e))?;
            let it: u64 = line
                .split(',')
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| DgadError::Dataset(format!("malformed metrics row `{line}`")))?;
            if it <= keep_through {
                kept.push(line);
            }
        }
    }
    let mut f = OpenOptions::new()
        .create(true)
        .write(true)
        .truncate(true)
        .open(path)
        .map_err(|e| DgadError::io(path, e))?;
    for line in kept {
        writeln!(f, "{line}").map_err(|e| DgadError::io(path, e))?;
    }
    Ok(f)
}

/// Deterministic batch order: each epoch is a fresh seeded shuffle cut into
/// `batch_size` chunks, a trailing single image joining the previous chunk.
#[derive(Clone, Debug)]
pub struct BatchSchedule {
    len: usize,
    batch_size: usize,
    seed: u64,
}

pub fn batches_per_epoch(len: usize, batch_size: usize) -> usize {
    let bs = batch_size.min(len).max(1);
    let full = len / bs;
    let rest = len % bs;
    if rest >= 2 || full == 0 {
        full + 1
    } else {
        full
    }
}

impl BatchSchedule {
    pub fn new(len: usize, batch_size: usize, seed: u64) -> Self {
        BatchSchedule {
            len,
            batch_size: batch_size.min(len),
            seed,
        }
    }

    pub fn epoch_order(&self, epoch: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ epoch);
        let mut idx: Vec<usize> = (0..self.len).collect();
        idx.shuffle(&mut rng);
        idx
    }

    pub fn epoch_batches(&self, epoch: u64) -> Vec<Vec<usize>> {
        let order = self.epoch_order(epoch);
        let mut chunks: Vec<Vec<usize>> = order.chunks(self.batch_size).map(|c| c.to_vec()).collect();
        if chunks.len() > 1 && chunks.last().is_some_and(|c| c.len() < 2) {
            let tail = chunks.pop().unwrap();
            chunks.last_mut().unwrap().extend(tail);
        }
        chunks
    }

    /// Indices of the batch used at zero-based step `step`.
    pub fn batch(&self, step: u64) -> Vec<usize> {
        let per = batches_per_epoch(self.len, self.batch_size) as u64;
        let (epoch, k) = (step / per, (step % per) as usize);
        self.epoch_batches(epoch).swap_remove(k)
    }
}
