//! Training objectives. Each function appends its loss to a [`Graph`] and returns
//! the scalar node, so the caller decides which parameter groups receive gradients.

use serde::{Deserialize, Serialize};

use crate::autograd::{CompactnessPooling, Graph, Var};
use crate::error::{DgadError, Result};
use crate::pretext::{labels_tensor, PretextLabel, Protocol};
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_cls: f64,
    pub lambda_rec: f64,
    pub lambda_cmp: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_cls: 10.0,
            lambda_rec: 20.0,
            lambda_cmp: 100.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_cls", self.lambda_cls),
            ("lambda_rec", self.lambda_rec),
            ("lambda_cmp", self.lambda_cmp),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(DgadError::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Unweighted loss terms of one training step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub rec: f64,
    pub cls_d: f64,
    pub cls_g: f64,
    pub cmp: f64,
    pub adv_d: f64,
    pub adv_g: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub rec: f64,
    pub cls_d: f64,
    pub cls_g: f64,
    pub cmp: f64,
    pub adv_d: f64,
    pub adv_g: f64,
    pub total_d: f64,
    pub total_g: f64,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "iteration,rec,cls_d,cls_g,cmp,adv_d,adv_g,total_d,total_g";

    pub fn from_parts(parts: LossParts, weights: &LossWeights) -> Result<Self> {
        let (total_d, total_g) = total_losses(&parts, weights)?;
        Ok(LossReport {
            rec: parts.rec,
            cls_d: parts.cls_d,
            cls_g: parts.cls_g,
            cmp: parts.cmp,
            adv_d: parts.adv_d,
            adv_g: parts.adv_g,
            total_d,
            total_g,
        })
    }

    pub fn fields(&self) -> [(&'static str, f64); 8] {
        [
            ("rec", self.rec),
            ("cls_d", self.cls_d),
            ("cls_g", self.cls_g),
            ("cmp", self.cmp),
            ("adv_d", self.adv_d),
            ("adv_g", self.adv_g),
            ("total_d", self.total_d),
            ("total_g", self.total_g),
        ]
    }

    /// One metrics-log row. `{:?}` prints the shortest string that round-trips.
    pub fn csv_row(&self, iteration: u64) -> String {
        let mut row = iteration.to_string();
        for (_, v) in self.fields() {
            row.push(',');
            row.push_str(&format!("{v:?}"));
        }
        row
    }
}

/// `(total_d, total_g)`: `adv_d + l_cls * cls_d` and
/// `adv_g + l_cls * cls_g + l_rec * rec + l_cmp * cmp`.
pub fn total_losses(parts: &LossParts, weights: &LossWeights) -> Result<(f64, f64)> {
    weights.validate()?;
    let total_d = parts.adv_d + weights.lambda_cls * parts.cls_d;
    let total_g = parts.adv_g
        + weights.lambda_cls * parts.cls_g
        + weights.lambda_rec * parts.rec
        + weights.lambda_cmp * parts.cmp;
    Ok((total_d, total_g))
}

/// Mean absolute error between originals and their reconstructions.
pub fn reconstruction_loss<T: Real>(g: &mut Graph<T>, x_r: Var, x_hat_r: Var) -> Result<Var> {
    g.l1(x_r, x_hat_r)
}

fn check_labels(protocol: Protocol, labels: &[PretextLabel], logits_shape: &[usize]) -> Result<()> {
    let dim = protocol.label_dim();
    if logits_shape != [labels.len(), dim] || labels.iter().any(|l| l.bits.len() != dim) {
        return Err(DgadError::Shape(format!(
            "logits {:?} vs {} labels of protocol {:?} (width {dim})",
            logits_shape,
            labels.len(),
            protocol
        )));
    }
    Ok(())
}

/// Cross-entropy of the true transformation labels; summed over blocks for multi-hot labels.
pub fn classification_loss_d<T: Real>(
    g: &mut Graph<T>,
    protocol: Protocol,
    class_logits: Var,
    labels: &[PretextLabel],
) -> Result<Var> {
    check_labels(protocol, labels, g.value(class_logits).shape())?;
    let targets = labels_tensor::<T>(labels)?;
    g.block_cross_entropy(class_logits, targets, protocol.label_blocks())
}

/// Generator classification loss: true labels on `(x_t, z_t)` plus the normal label on
/// the restored pair. Callers freeze the discriminator and pass logits computed from
/// `(x_t, z_t)` where only `z_t` carries gradient.
pub fn classification_loss_g<T: Real>(
    g: &mut Graph<T>,
    protocol: Protocol,
    logits_on_xt: Var,
    labels_t: &[PretextLabel],
    logits_on_restored: Var,
    normal_label: &PretextLabel,
) -> Result<Var> {
    let first = classification_loss_d(g, protocol, logits_on_xt, labels_t)?;
    let n = g.value(logits_on_restored).shape().first().copied().unwrap_or(0);
    let normal = vec![normal_label.clone(); n];
    let second = classification_loss_d(g, protocol, logits_on_restored, &normal)?;
    g.add(first, second)
}

/// Square root of the channel-averaged batch variance of per-channel latent means.
pub fn compactness_loss<T: Real>(g: &mut Graph<T>, z_r: Var, pooling: CompactnessPooling) -> Result<Var> {
    g.compactness(z_r, pooling)
}

/// Hinge loss for the discriminator: `E[max(0, 1 - real)] + E[max(0, 1 + fake)]`.
pub fn adversarial_loss_d<T: Real>(g: &mut Graph<T>, adv_real: Var, adv_fake: Var) -> Result<Var> {
    let real = g.hinge(adv_real, -1.0);
    let fake = g.hinge(adv_fake, 1.0);
    g.add(real, fake)
}

/// `-E[fake]`.
pub fn adversarial_loss_g<T: Real>(g: &mut Graph<T>, adv_fake: Var) -> Var {
    let m = g.mean(adv_fake);
    g.scale(m, -1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pretext::{encode_label, normal_label, TransformSpec};
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar(g: &Graph<f64>, v: Var) -> f64 {
        g.value(v).item()
    }

    #[test]
    fn reconstruction_examples() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::full(&[2, 1, 2, 2], 1.0));
        let b = g.constant(Tensor::zeros(&[2, 1, 2, 2]));
        let same = reconstruction_loss(&mut g, a, a).unwrap();
        assert_eq!(scalar(&g, same), 0.0);
        let unit = reconstruction_loss(&mut g, a, b).unwrap();
        assert_eq!(scalar(&g, unit), 1.0);
        let c = g.constant(Tensor::zeros(&[2, 1, 2, 3]));
        assert!(reconstruction_loss(&mut g, a, c).is_err());
    }

    #[test]
    fn reconstruction_matches_elementwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xa: Vec<f64> = (0..60).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let xb: Vec<f64> = (0..60).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let oracle = xa.iter().zip(&xb).map(|(p, q)| (p - q).abs()).sum::<f64>() / 60.0;
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::new(&[3, 1, 4, 5], xa).unwrap());
        let b = g.constant(Tensor::new(&[3, 1, 4, 5], xb).unwrap());
        let l = reconstruction_loss(&mut g, a, b).unwrap();
        assert!((scalar(&g, l) - oracle).abs() < 1e-14);
    }

    fn labels(specs: &[TransformSpec]) -> Vec<PretextLabel> {
        specs.iter().map(encode_label).collect()
    }

    #[test]
    fn cross_entropy_trivial_cases() {
        let mut g = Graph::<f64>::new();
        let lab = labels(&[TransformSpec::rotation(2)]);
        let sure = g.constant(Tensor::new(&[1, 4], vec![-50.0, -50.0, 50.0, -50.0]).unwrap());
        let l = classification_loss_d(&mut g, Protocol::Rotation, sure, &lab).unwrap();
        assert!(scalar(&g, l) < 1e-6);
        let flat = g.constant(Tensor::zeros(&[1, 4]));
        let l = classification_loss_d(&mut g, Protocol::Rotation, flat, &lab).unwrap();
        assert!((scalar(&g, l) - 4f64.ln()).abs() < 1e-12);
        assert!((scalar(&g, l) - 1.3863).abs() < 1e-4);
        let wrong = g.constant(Tensor::zeros(&[1, 6]));
        assert!(classification_loss_d(&mut g, Protocol::Rotation, wrong, &lab).is_err());
    }

    #[test]
    fn cross_entropy_matches_softmax_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for protocol in [Protocol::Rotation, Protocol::Jigsaw, Protocol::JigsawRotation] {
            let n = 5;
            let dim = protocol.label_dim();
            let logits: Vec<f64> = (0..n * dim).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let specs: Vec<_> = (0..n)
                .map(|_| crate::pretext::sample_transform(protocol, &mut rng))
                .collect();
            let lab = labels(&specs);
            // brute force: softmax each block, take -log at the hot index
            let mut oracle = 0.0;
            for (i, l) in lab.iter().enumerate() {
                let mut start = 0;
                for &bw in protocol.label_blocks() {
                    let row = &logits[i * dim + start..i * dim + start + bw];
                    let z: f64 = row.iter().map(|v| v.exp()).sum();
                    let hot = (0..bw).find(|&j| l.bits[start + j] == 1).unwrap();
                    oracle -= (row[hot].exp() / z).ln();
                    start += bw;
                }
            }
            oracle /= n as f64;
            let mut g = Graph::<f64>::new();
            let lv = g.constant(Tensor::new(&[n, dim], logits).unwrap());
            let l = classification_loss_d(&mut g, protocol, lv, &lab).unwrap();
            assert!((scalar(&g, l) - oracle).abs() < 1e-12, "{protocol:?}");
        }
    }

    #[test]
    fn generator_classification_is_sum_of_terms() {
        let mut g = Graph::<f64>::new();
        let lab = labels(&[TransformSpec::rotation(1), TransformSpec::rotation(3)]);
        let normal = normal_label(Protocol::Rotation);
        let a = g.constant(Tensor::from_fn(&[2, 4], |i| (i as f64 * 0.7).sin()));
        let b = g.constant(Tensor::from_fn(&[2, 4], |i| (i as f64 * 1.3).cos()));
        let both = classification_loss_g(&mut g, Protocol::Rotation, a, &lab, b, &normal).unwrap();
        let t1 = classification_loss_d(&mut g, Protocol::Rotation, a, &lab).unwrap();
        let t2 = classification_loss_d(&mut g, Protocol::Rotation, b, &[normal.clone(), normal]).unwrap();
        assert!((scalar(&g, both) - scalar(&g, t1) - scalar(&g, t2)).abs() < 1e-12);

        let mut g = Graph::<f64>::new();
        let lab = labels(&[TransformSpec::rotation(1)]);
        let sure_t = g.constant(Tensor::new(&[1, 4], vec![-60.0, 60.0, -60.0, -60.0]).unwrap());
        let sure_r = g.constant(Tensor::new(&[1, 4], vec![60.0, -60.0, -60.0, -60.0]).unwrap());
        let l = classification_loss_g(
            &mut g,
            Protocol::Rotation,
            sure_t,
            &lab,
            sure_r,
            &normal_label(Protocol::Rotation),
        )
        .unwrap();
        assert!(scalar(&g, l) < 1e-6);
    }

    #[test]
    fn compactness_examples() {
        let mut g = Graph::<f64>::new();
        let same = g.constant(Tensor::full(&[3, 2, 2, 2], 0.4));
        let l = compactness_loss(&mut g, same, CompactnessPooling::PerChannelMean).unwrap();
        assert_eq!(scalar(&g, l), 0.0);

        // one channel, spatial means 0 and 2: batch mean 1, population variance 1
        let z = Tensor::new(&[2, 1, 1, 2], vec![-1.0, 1.0, 1.5, 2.5]).unwrap();
        let zv = g.constant(z.clone());
        let l = compactness_loss(&mut g, zv, CompactnessPooling::PerChannelMean).unwrap();
        assert!((scalar(&g, l) - 1.0).abs() < 1e-12);

        let shifted = g.constant(z.map(|v| v + 3.25));
        let l2 = compactness_loss(&mut g, shifted, CompactnessPooling::PerChannelMean).unwrap();
        assert!((scalar(&g, l2) - 1.0).abs() < 1e-12);

        let single = g.constant(Tensor::zeros(&[1, 2, 2, 2]));
        assert!(compactness_loss(&mut g, single, CompactnessPooling::PerChannelMean).is_err());
    }

    #[test]
    fn compactness_channel_pooling_variant() {
        // pooling across channels: sample 0 map [0, 2], sample 1 map [2, 2]
        let z = Tensor::new(&[2, 2, 1, 2], vec![-1.0, 1.0, 1.0, 3.0, 2.0, 2.0, 2.0, 2.0]).unwrap();
        let mut g = Graph::<f64>::new();
        let zv = g.constant(z);
        let l = compactness_loss(&mut g, zv, CompactnessPooling::AcrossChannels).unwrap();
        // per position variances: pos0 {0,2} -> 1, pos1 {2,2} -> 0; mean 0.5
        assert!((scalar(&g, l) - 0.5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn hinge_examples() {
        let mut g = Graph::<f64>::new();
        let c = |g: &mut Graph<f64>, v: f64| g.constant(Tensor::new(&[1, 1], vec![v]).unwrap());
        for (real, fake, expect) in [(1.0, -1.0, 0.0), (0.0, 0.0, 2.0), (-3.0, 5.0, 10.0)] {
            let (r, f) = (c(&mut g, real), c(&mut g, fake));
            let l = adversarial_loss_d(&mut g, r, f).unwrap();
            assert_eq!(scalar(&g, l), expect);
        }
    }

    #[test]
    fn generator_adversarial_examples() {
        let mut g = Graph::<f64>::new();
        let zero = g.constant(Tensor::zeros(&[3, 1]));
        let l = adversarial_loss_g(&mut g, zero);
        assert_eq!(scalar(&g, l), 0.0);
        let two_four = g.constant(Tensor::new(&[2, 1], vec![2.0, 4.0]).unwrap());
        let l = adversarial_loss_g(&mut g, two_four);
        assert_eq!(scalar(&g, l), -3.0);
        // finite-difference sign: raising a fake score lowers the loss
        let h = 1e-3;
        let up = g.constant(Tensor::new(&[2, 1], vec![2.0 + h, 4.0]).unwrap());
        let lu = adversarial_loss_g(&mut g, up);
        assert!((scalar(&g, lu) - scalar(&g, l)) / h < 0.0);
    }

    #[test]
    fn totals() {
        let w = LossWeights::default();
        assert_eq!(total_losses(&LossParts::default(), &w).unwrap(), (0.0, 0.0));
        let unit = LossParts {
            rec: 1.0,
            cls_d: 1.0,
            cls_g: 1.0,
            cmp: 1.0,
            adv_d: 1.0,
            adv_g: 1.0,
        };
        assert_eq!(total_losses(&unit, &w).unwrap(), (11.0, 131.0));
        let bad = LossWeights { lambda_rec: -1.0, ..w };
        assert!(total_losses(&unit, &bad).is_err());
        let r = LossReport::from_parts(unit, &w).unwrap();
        assert_eq!(r.csv_row(7), "7,1.0,1.0,1.0,1.0,1.0,1.0,11.0,131.0");
    }
}
