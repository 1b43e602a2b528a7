//! Test-time anomaly scores: reconstruction error and the Dirichlet normality score.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::function::gamma::digamma;

use crate::autograd::block_softmax;
use crate::error::{DgadError, Result};
use crate::networks::Networks;
use crate::pretext::{apply_transform, PretextLabel, Protocol, TransformSpec};
use crate::tensor::Tensor;

pub const DEFAULT_LAMBDA_S: f64 = 10.0;
pub const SIMPLEX_CLIP: f64 = 1e-6;
const FIT_TOLERANCE: f64 = 1e-6;
const FIT_MAX_ITERS: usize = 1000;

/// Per-sample `mean|x - x_hat| + lambda_s * mean|z - z_hat|` from precomputed tensors.
pub fn reconstruction_score_from(
    x: &Tensor<f32>,
    x_hat: &Tensor<f32>,
    z: &Tensor<f32>,
    z_hat: &Tensor<f32>,
    lambda_s: f64,
) -> Result<Vec<f64>> {
    x.expect_same_shape(x_hat)?;
    z.expect_same_shape(z_hat)?;
    let n = x.shape()[0];
    if z.shape()[0] != n {
        return Err(DgadError::Shape("image and latent batches differ in size".into()));
    }
    let mean_abs = |a: &[f32], b: &[f32]| -> f64 {
        a.iter().zip(b).map(|(&p, &q)| (p as f64 - q as f64).abs()).sum::<f64>() / a.len().max(1) as f64
    };
    Ok((0..n)
        .map(|i| mean_abs(x.sample(i), x_hat.sample(i)) + lambda_s * mean_abs(z.sample(i), z_hat.sample(i)))
        .collect())
}

/// Reconstruction anomaly score of every image in `(N, C, H, W)` `images`.
pub fn reconstruction_score(
    nets: &Networks<f32>,
    images: &Tensor<f32>,
    lambda_s: f64,
    batch_size: usize,
) -> Result<Vec<f64>> {
    let (n, ..) = images.dims4()?;
    let mut out = Vec::with_capacity(n);
    for idx in batches(n, batch_size) {
        let x = images.select(&idx);
        let (z, x_hat, z_hat) = nets.reconstruct(&x)?;
        out.extend(reconstruction_score_from(&x, &x_hat, &z, &z_hat, lambda_s)?);
    }
    Ok(out)
}

fn batches(n: usize, batch_size: usize) -> impl Iterator<Item = Vec<usize>> {
    let bs = batch_size.max(1);
    (0..n).step_by(bs).map(move |s| (s..(s + bs).min(n)).collect())
}

/// Min-max normalization onto `[0, 1]`; all-equal input gives all 0.5.
pub fn normalize_scores(scores: &[f64]) -> Vec<f64> {
    let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if scores.is_empty() {
        return Vec::new();
    }
    if max.partial_cmp(&min) != Some(std::cmp::Ordering::Greater) {
        log::warn!("all {} scores are equal; normalized scores set to 0.5", scores.len());
        return vec![0.5; scores.len()];
    }
    scores.iter().map(|s| (s - min) / (max - min)).collect()
}

fn trigamma(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < 10.0 {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let x2 = 1.0 / (x * x);
    acc + 1.0 / x + x2 / 2.0 + x2 / x * (1.0 / 6.0 - x2 * (1.0 / 30.0 - x2 * (1.0 / 42.0 - x2 / 30.0)))
}

fn inv_digamma(y: f64) -> f64 {
    let mut x = if y >= -2.22 {
        y.exp() + 0.5
    } else {
        -1.0 / (y - digamma(1.0))
    };
    for _ in 0..6 {
        x -= (digamma(x) - y) / trigamma(x);
        x = x.max(1e-12);
    }
    x
}

/// Clip each block of `p` to `[SIMPLEX_CLIP, 1 - SIMPLEX_CLIP]` and renormalize.
pub fn clip_to_simplex(p: &mut [f64], blocks: &[usize]) {
    let mut start = 0;
    for &bw in blocks {
        let seg = &mut p[start..start + bw];
        for v in seg.iter_mut() {
            *v = v.clamp(SIMPLEX_CLIP, 1.0 - SIMPLEX_CLIP);
        }
        let s: f64 = seg.iter().sum();
        for v in seg.iter_mut() {
            *v /= s;
        }
        start += bw;
    }
}

/// Maximum-likelihood Dirichlet concentration for points on one simplex.
///
/// Inputs are clipped and renormalized first. Uses the fixed point
/// `alpha_k <- psi^-1(psi(sum alpha) + mean log p_k)`.
pub fn fit_dirichlet(samples: &[Vec<f64>]) -> Result<Vec<f64>> {
    let k = samples.first().map_or(0, |s| s.len());
    if k < 2 {
        return Err(DgadError::InvalidArgument("Dirichlet needs at least 2 classes".into()));
    }
    if samples.len() < k {
        return Err(DgadError::InvalidArgument(format!(
            "{} samples are fewer than the {k} classes",
            samples.len()
        )));
    }
    if samples.iter().any(|s| s.len() != k) {
        return Err(DgadError::Shape("softmax vectors of different lengths".into()));
    }
    let n = samples.len() as f64;
    let mut mean = vec![0.0; k];
    let mut mean_log = vec![0.0; k];
    let mut sq0 = 0.0;
    for s in samples {
        let mut p = s.clone();
        clip_to_simplex(&mut p, &[k]);
        for j in 0..k {
            mean[j] += p[j] / n;
            mean_log[j] += p[j].ln() / n;
        }
        sq0 += p[0] * p[0] / n;
    }
    // moment-matching start
    let var0 = sq0 - mean[0] * mean[0];
    let mut precision = (mean[0] - sq0) / var0;
    if !(precision.is_finite() && precision > 0.0) {
        precision = 1.0;
    }
    let mut alpha: Vec<f64> = mean.iter().map(|m| (m * precision).max(1e-3)).collect();
    for _ in 0..FIT_MAX_ITERS {
        let psi_sum = digamma(alpha.iter().sum());
        let next: Vec<f64> = mean_log.iter().map(|&ml| inv_digamma(psi_sum + ml)).collect();
        let change = next
            .iter()
            .zip(&alpha)
            .map(|(a, b)| ((a - b) / b).abs())
            .fold(0.0, f64::max);
        alpha = next;
        if change < FIT_TOLERANCE {
            break;
        }
    }
    if alpha.iter().any(|a| !(a.is_finite() && *a > 0.0)) {
        return Err(DgadError::NonFinite {
            term: "dirichlet".into(),
            iteration: 0,
            detail: format!("{alpha:?}"),
        });
    }
    Ok(alpha)
}

/// Concentrations fitted per transformation, each the concatenation of per-block vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirichletParams {
    pub protocol: Protocol,
    pub transforms: Vec<TransformSpec>,
    pub alphas: Vec<Vec<f64>>,
}

impl DirichletParams {
    pub fn validate(&self) -> Result<()> {
        let dim = self.protocol.label_dim();
        if self.transforms.len() != self.alphas.len() || self.transforms.is_empty() {
            return Err(DgadError::InvalidArgument(
                "one alpha vector per transform required".into(),
            ));
        }
        for (t, a) in self.transforms.iter().zip(&self.alphas) {
            if t.protocol != self.protocol || a.len() != dim {
                return Err(DgadError::InvalidArgument(format!(
                    "transform {t:?} does not belong to protocol {:?}",
                    self.protocol
                )));
            }
            if a.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                return Err(DgadError::InvalidArgument("concentrations must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Clipped block-softmax of `D_cls(T(x), En(T(x)))` for every image, one row per image.
pub fn transformed_softmax(
    nets: &Networks<f32>,
    images: &Tensor<f32>,
    spec: &TransformSpec,
    batch_size: usize,
) -> Result<Vec<Vec<f64>>> {
    let (n, ..) = images.dims4()?;
    let blocks = spec.protocol.label_blocks();
    let dim = spec.protocol.label_dim();
    if nets.config.label_dim != dim {
        return Err(DgadError::InvalidArgument(format!(
            "network head width {} does not match protocol {:?}",
            nets.config.label_dim, spec.protocol
        )));
    }
    let mut rows = Vec::with_capacity(n);
    for idx in batches(n, batch_size) {
        let x = apply_transform(&images.select(&idx), spec)?;
        let logits: Vec<f64> = nets.classify(&x)?.data().iter().map(|&v| v as f64).collect();
        let probs = block_softmax(&logits, dim, blocks);
        for row in probs.chunks(dim) {
            let mut p = row.to_vec();
            clip_to_simplex(&mut p, blocks);
            rows.push(p);
        }
    }
    Ok(rows)
}

/// Fit one Dirichlet per transformation from training-set softmax outputs.
pub fn fit_dirichlet_params(
    nets: &Networks<f32>,
    train_images: &Tensor<f32>,
    transforms: &[(TransformSpec, PretextLabel)],
    batch_size: usize,
) -> Result<DirichletParams> {
    let protocol = transforms
        .first()
        .map(|(t, _)| t.protocol)
        .ok_or_else(|| DgadError::InvalidArgument("no transforms".into()))?;
    let blocks = protocol.label_blocks();
    let mut alphas = Vec::with_capacity(transforms.len());
    for (spec, _) in transforms {
        let rows = transformed_softmax(nets, train_images, spec, batch_size)?;
        alphas.push(fit_blocks(&rows, blocks)?);
    }
    let params = DirichletParams {
        protocol,
        transforms: transforms.iter().map(|(t, _)| *t).collect(),
        alphas,
    };
    params.validate()?;
    Ok(params)
}

/// Fit each block of the label layout separately and concatenate.
pub fn fit_blocks(rows: &[Vec<f64>], blocks: &[usize]) -> Result<Vec<f64>> {
    let mut alpha = Vec::new();
    let mut start = 0;
    for &bw in blocks {
        let seg: Vec<Vec<f64>> = rows.iter().map(|r| r[start..start + bw].to_vec()).collect();
        alpha.extend(fit_dirichlet(&seg)?);
        start += bw;
    }
    Ok(alpha)
}

/// `sum_i (alpha_i - 1) . log y_i` for one image, given its softmax per transformation.
pub fn dirichlet_score_from_softmax(alphas: &[Vec<f64>], softmaxes: &[Vec<f64>]) -> Result<f64> {
    if alphas.len() != softmaxes.len() {
        return Err(DgadError::Shape("one softmax per transformation required".into()));
    }
    let mut s = 0.0;
    for (a, y) in alphas.iter().zip(softmaxes) {
        if a.len() != y.len() {
            return Err(DgadError::Shape("alpha and softmax widths differ".into()));
        }
        s += a.iter().zip(y).map(|(ai, yi)| (ai - 1.0) * yi.ln()).sum::<f64>();
    }
    Ok(s)
}

/// Normality score (higher is more normal) of every image.
pub fn dirichlet_score(
    nets: &Networks<f32>,
    images: &Tensor<f32>,
    protocol: Protocol,
    params: &DirichletParams,
    batch_size: usize,
) -> Result<Vec<f64>> {
    params.validate()?;
    if params.protocol != protocol {
        return Err(DgadError::InvalidArgument(format!(
            "Dirichlet parameters were fitted for {:?}, not {:?}",
            params.protocol, protocol
        )));
    }
    let (n, ..) = images.dims4()?;
    let mut per_transform = Vec::with_capacity(params.transforms.len());
    for spec in &params.transforms {
        per_transform.push(transformed_softmax(nets, images, spec, batch_size)?);
    }
    (0..n)
        .map(|i| {
            let ys: Vec<Vec<f64>> = per_transform.iter().map(|rows| rows[i].clone()).collect();
            dirichlet_score_from_softmax(&params.alphas, &ys)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub sample_id: String,
    pub label: u8,
    pub s_raw: f64,
    pub s_norm: f64,
}

/// Build records from anomaly scores (higher = more anomalous), applying min-max normalization.
pub fn score_records(ids: &[String], labels: &[u8], anomaly: &[f64]) -> Result<Vec<ScoreRecord>> {
    if ids.len() != labels.len() || ids.len() != anomaly.len() {
        return Err(DgadError::Shape("ids, labels and scores differ in length".into()));
    }
    let norm = normalize_scores(anomaly);
    Ok(ids
        .iter()
        .zip(labels)
        .zip(anomaly.iter().zip(&norm))
        .map(|((id, &label), (&s_raw, &s_norm))| ScoreRecord {
            sample_id: id.clone(),
            label,
            s_raw,
            s_norm,
        })
        .collect())
}

/// CSV `sample_id,label,s_raw,s_norm`, rows sorted by sample id.
pub fn write_scores_csv(path: &Path, records: &[ScoreRecord]) -> Result<()> {
    let mut sorted: Vec<&ScoreRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    let mut out = String::from("sample_id,label,s_raw,s_norm\n");
    for r in sorted {
        out.push_str(&format!("{},{},{:?},{:?}\n", r.sample_id, r.label, r.s_raw, r.s_norm));
    }
    let mut f = std::fs::File::create(path).map_err(|e| DgadError::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| DgadError::io(path, e))
}
