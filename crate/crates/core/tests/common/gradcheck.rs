//! Analytic gradients of every loss against central finite differences on a tiny f64 network.

use dgad::autograd::{CompactnessPooling, Graph, PadMode, ParamGroup, Var};
use dgad::losses::{
    adversarial_loss_d, adversarial_loss_g, classification_loss_d, classification_loss_g, compactness_loss,
    reconstruction_loss,
};
use dgad::networks::{NetConfig, Networks, ParamStore};
use dgad::pretext::{apply_transforms, encode_label, normal_label, sample_transform, PretextLabel, Protocol};
use dgad::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-6;
const TOL: f64 = 1e-3;
/// Coordinates whose finite difference changes with the step size straddle a kink of
/// relu/abs/hinge; those are skipped, but only a few may be.
const MAX_KINKED: f64 = 0.05;

#[derive(Clone, Copy, Debug)]
enum Loss {
    Rec,
    ClsD,
    ClsG,
    Cmp,
    AdvD,
    AdvG,
}

struct Setup {
    protocol: Protocol,
    x_r: Tensor<f64>,
    x_t: Tensor<f64>,
    labels: Vec<PretextLabel>,
}

fn tiny(protocol: Protocol, padding: PadMode, coord: bool) -> NetConfig {
    NetConfig {
        image_size: 16,
        image_channels: 1,
        latent_channels: if coord { 1 } else { 2 },
        base_width: 1,
        padding_mode: padding,
        use_coord: coord,
        label_dim: protocol.label_dim(),
    }
}

fn setup(protocol: Protocol, seed: u64) -> Setup {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x_r = Tensor::from_fn(&[3, 1, 16, 16], |_| rng.gen_range(-1.0..1.0));
    let specs: Vec<_> = (0..3).map(|_| sample_transform(protocol, &mut rng)).collect();
    let labels = specs.iter().map(encode_label).collect();
    let x_t = apply_transforms(&x_r, &specs).unwrap();
    Setup {
        protocol,
        x_r,
        x_t,
        labels,
    }
}

/// Builds `loss` with the gradient routing used in training: discriminator losses see
/// generator outputs as constants, generator losses see a frozen discriminator.
fn build(nets: &Networks<f64>, s: &Setup, loss: Loss) -> (Graph<f64>, Var) {
    let mut g = Graph::new();
    let d_side = matches!(loss, Loss::ClsD | Loss::AdvD);
    if d_side {
        g.freeze(ParamGroup::Encoder);
        g.freeze(ParamGroup::Decoder);
    } else {
        g.freeze(ParamGroup::Discriminator);
    }
    let xr = g.constant(s.x_r.clone());
    let xt = g.constant(s.x_t.clone());
    let z_r = nets.encoder.forward(&mut g, xr).unwrap();
    let z_t = nets.encoder.forward(&mut g, xt).unwrap();
    let xh_r = nets.decoder.forward(&mut g, z_r).unwrap();
    let xh_t = nets.decoder.forward(&mut g, z_t).unwrap();
    let zh_t = nets.encoder.forward(&mut g, xh_t).unwrap();
    let d = &nets.discriminator;
    let p = s.protocol;
    let out = match loss {
        Loss::Rec => reconstruction_loss(&mut g, xr, xh_r).unwrap(),
        Loss::Cmp => compactness_loss(&mut g, z_r, CompactnessPooling::PerChannelMean).unwrap(),
        Loss::AdvG => {
            let fake = d.forward(&mut g, xh_t, zh_t).unwrap();
            adversarial_loss_g(&mut g, fake.adv)
        }
        Loss::ClsG => {
            let on_t = d.forward(&mut g, xt, z_t).unwrap();
            let restored = d.forward(&mut g, xh_t, zh_t).unwrap();
            classification_loss_g(
                &mut g,
                p,
                on_t.class_logits,
                &s.labels,
                restored.class_logits,
                &normal_label(p),
            )
            .unwrap()
        }
        Loss::ClsD => {
            let zt = g.detach(z_t);
            let on_t = d.forward(&mut g, xt, zt).unwrap();
            classification_loss_d(&mut g, p, on_t.class_logits, &s.labels).unwrap()
        }
        Loss::AdvD => {
            let (zr, xht, zht) = (g.detach(z_r), g.detach(xh_t), g.detach(zh_t));
            let real = d.forward(&mut g, xr, zr).unwrap();
            let fake = d.forward(&mut g, xht, zht).unwrap();
            adversarial_loss_d(&mut g, real.adv, fake.adv).unwrap()
        }
    };
    (g, out)
}

fn value(nets: &Networks<f64>, s: &Setup, loss: Loss) -> f64 {
    let (g, v) = build(nets, s, loss);
    g.value(v).item()
}

fn store_mut(nets: &mut Networks<f64>, group: ParamGroup) -> &mut ParamStore<f64> {
    match group {
        ParamGroup::Encoder => &mut nets.encoder.store,
        ParamGroup::Decoder => &mut nets.decoder.store,
        ParamGroup::Discriminator => &mut nets.discriminator.store,
    }
}

/// Relative error `|a - n| / max(|a|, |n|)` over the sampled coordinates of each group that
/// should receive gradient; groups that should not must get exactly none.
fn check(nets: &Networks<f64>, s: &Setup, loss: Loss, expect: &[ParamGroup]) {
    let (g, v) = build(nets, s, loss);
    let grads = g.backward(v).unwrap();
    let roundoff = 1e-7 * g.value(v).item().abs().max(1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for group in [ParamGroup::Encoder, ParamGroup::Decoder, ParamGroup::Discriminator] {
        let norm = grads.group_sq_norm(group);
        if !expect.contains(&group) {
            assert_eq!(norm, 0.0, "{loss:?} leaked gradient into {group:?}");
            continue;
        }
        assert!(norm > 0.0, "{loss:?} gave no gradient to {group:?}");
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        let (mut total, mut kinked) = (0usize, 0usize);
        let n_params = store_mut(&mut nets.clone(), group).params.len();
        for idx in 0..n_params {
            let a = grads.param((group, idx)).cloned();
            let len = store_mut(&mut nets.clone(), group).params[idx].value.numel();
            let picks: Vec<usize> = if len <= 6 {
                (0..len).collect()
            } else {
                (0..6).map(|_| rng.gen_range(0..len)).collect()
            };
            for j in picks {
                let fd = |h: f64| {
                    let mut plus = nets.clone();
                    store_mut(&mut plus, group).params[idx].value.data_mut()[j] += h;
                    let mut minus = nets.clone();
                    store_mut(&mut minus, group).params[idx].value.data_mut()[j] -= h;
                    (value(&plus, s, loss) - value(&minus, s, loss)) / (2.0 * h)
                };
                let (coarse, fine) = (fd(H), fd(H / 10.0));
                total += 1;
                // f64 roundoff in a difference quotient at step H / 10 is about 1e-9 * |loss|
                if (coarse - fine).abs() > 1e-4 * coarse.abs().max(fine.abs()) + roundoff {
                    kinked += 1;
                    continue;
                }
                numeric.push(coarse);
                analytic.push(a.as_ref().map_or(0.0, |t| t.data()[j]));
            }
        }
        let diff: f64 = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n).powi(2))
            .sum::<f64>()
            .sqrt();
        let scale = analytic
            .iter()
            .map(|a| a * a)
            .sum::<f64>()
            .sqrt()
            .max(numeric.iter().map(|n| n * n).sum::<f64>().sqrt());
        let rel = diff / scale.max(1e-12);
        assert!(
            (kinked as f64) <= MAX_KINKED * total as f64,
            "{loss:?} on {group:?}: {kinked} of {total} coordinates straddle a kink"
        );
        assert!(
            rel < TOL,
            "{loss:?} on {group:?}: relative error {rel:e} over {} coordinates",
            analytic.len()
        );
    }
}

pub fn check_all(protocol: Protocol, padding: PadMode, coord: bool, seed: u64) {
    let cfg = tiny(protocol, padding, coord);
    let mut nets = Networks::<f64>::new(&cfg, seed).unwrap();
    let total: usize = nets.stores().iter().map(|s| s.num_parameters()).sum();
    // coordinate channels widen every conv input, which costs a few hundred parameters
    let budget = if coord { 5500 } else { 5000 };
    assert!(total <= budget, "tiny network has {total} parameters");
    nets.discriminator.power_iteration(20);
    let s = setup(protocol, seed);
    use ParamGroup::*;
    check(&nets, &s, Loss::Rec, &[Encoder, Decoder]);
    check(&nets, &s, Loss::Cmp, &[Encoder]);
    check(&nets, &s, Loss::AdvG, &[Encoder, Decoder]);
    check(&nets, &s, Loss::ClsG, &[Encoder, Decoder]);
    check(&nets, &s, Loss::ClsD, &[Discriminator]);
    check(&nets, &s, Loss::AdvD, &[Discriminator]);
}
