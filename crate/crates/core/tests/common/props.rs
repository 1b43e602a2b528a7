//! Invariants checked by the property suite, shared with the acceptance run.

use std::collections::HashSet;

use dgad::autograd::{CompactnessPooling, Graph, PadMode};
use dgad::data_io::{preprocess, RawImage};
use dgad::evaluation::roc_auc;
use dgad::losses::{
    adversarial_loss_d, adversarial_loss_g, classification_loss_d, compactness_loss, reconstruction_loss, total_losses,
    LossParts, LossWeights,
};
use dgad::networks::{NetConfig, Networks};
use dgad::pretext::{
    apply_transform, decode_label, encode_label, enumerate_transforms, rotate, Protocol, TransformSpec,
};
use dgad::scoring::{normalize_scores, reconstruction_score_from};
use dgad::trainer::{BatchSchedule, TrainConfig, Trainer};
use dgad::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const PROTOCOLS: [Protocol; 3] = [Protocol::Rotation, Protocol::Jigsaw, Protocol::JigsawRotation];

/// `(C, S, S)` image with even side so every protocol applies.
fn square_image() -> impl Strategy<Value = Tensor<f64>> {
    (1usize..=3, 1usize..=4).prop_flat_map(|(c, half)| {
        let s = 2 * half;
        prop::collection::vec(-1.0f64..1.0, c * s * s).prop_map(move |d| Tensor::new(&[c, s, s], d).unwrap())
    })
}

fn any_spec() -> impl Strategy<Value = TransformSpec> {
    (0usize..3, 0u8..4, 0u8..6, [0u8..4, 0u8..4, 0u8..4]).prop_map(|(p, k, perm, rots)| match PROTOCOLS[p] {
        Protocol::Rotation => TransformSpec::rotation(k),
        Protocol::Jigsaw => TransformSpec::jigsaw(perm),
        Protocol::JigsawRotation => TransformSpec::jigsaw_rotation(perm, rots),
    })
}

fn sorted_bits(t: &Tensor<f64>) -> Vec<u64> {
    let mut v: Vec<u64> = t.data().iter().map(|x| x.to_bits()).collect();
    v.sort_unstable();
    v
}

fn brute_force_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1.0;
                if si > sj {
                    wins += 1.0;
                } else if si == sj {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

/// Scores drawn from a small grid so ties are common, with both labels present.
fn scored_instance() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
    (2usize..=200)
        .prop_flat_map(|n| {
            (
                prop::collection::vec(0u32..25, n),
                prop::collection::vec(0u8..2, n),
                0usize..n,
                0usize..n,
            )
        })
        .prop_filter("two distinct positions", |(_, _, a, b)| a != b)
        .prop_map(|(s, mut l, a, b)| {
            l[a] = 0;
            l[b] = 1;
            (s.into_iter().map(|v| v as f64 / 4.0).collect(), l)
        })
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::with_cases(500) })]

    fn rotations_compose_as_a_cyclic_group(img in square_image(), k1 in 0u8..4, k2 in 0u8..4) {
        let batch = img.clone().reshape(&[1, img.shape()[0], img.shape()[1], img.shape()[2]]).unwrap();
        let lhs = rotate(&rotate(&batch, k2).unwrap(), k1).unwrap();
        let rhs = rotate(&batch, (k1 + k2) % 4).unwrap();
        prop_assert_eq!(lhs, rhs);
    }

    fn transforms_preserve_the_pixel_multiset(img in square_image(), spec in any_spec()) {
        let batch = img.clone().reshape(&[1, img.shape()[0], img.shape()[1], img.shape()[2]]).unwrap();
        let out = apply_transform(&batch, &spec).unwrap();
        prop_assert_eq!(out.shape(), batch.shape());
        prop_assert_eq!(sorted_bits(&out), sorted_bits(&batch));
    }

    fn jigsaw_never_touches_the_top_left_quadrant(img in square_image(), spec in any_spec()) {
        prop_assume!(spec.protocol != Protocol::Rotation);
        let (c, s) = (img.shape()[0], img.shape()[1]);
        let batch = img.clone().reshape(&[1, c, s, s]).unwrap();
        let out = apply_transform(&batch, &spec).unwrap();
        let h = s / 2;
        for ch in 0..c {
            for y in 0..h {
                for x in 0..h {
                    let i = (ch * s + y) * s + x;
                    prop_assert_eq!(out.data()[i], batch.data()[i]);
                }
            }
        }
    }

    fn label_width_matches_the_protocol(spec in any_spec()) {
        let label = encode_label(&spec);
        prop_assert_eq!(label.bits.len(), spec.protocol.label_dim());
        prop_assert_eq!(label.is_normal, spec.is_identity());
    }

    fn auc_equals_pair_counting((scores, labels) in scored_instance()) {
        let (auc, roc) = roc_auc(&scores, &labels).unwrap();
        prop_assert!((auc - brute_force_auc(&scores, &labels)).abs() < 1e-12);
        prop_assert_eq!(roc.first().copied(), Some((0.0, 0.0)));
        prop_assert_eq!(roc.last().copied(), Some((1.0, 1.0)));
    }

    fn auc_is_invariant_under_increasing_maps((scores, labels) in scored_instance(), a in 0.1f64..10.0, b in -5.0f64..5.0) {
        let (auc, _) = roc_auc(&scores, &labels).unwrap();
        let mapped: Vec<f64> = scores.iter().map(|s| (a * s + b).exp()).collect();
        let (auc_mapped, _) = roc_auc(&mapped, &labels).unwrap();
        prop_assert_eq!(auc, auc_mapped);
        let (auc_norm, _) = roc_auc(&normalize_scores(&scores), &labels).unwrap();
        prop_assert_eq!(auc, auc_norm);
    }

    fn normalization_is_idempotent_and_order_preserving(scores in prop::collection::vec(-1e3f64..1e3, 2..100)) {
        let n = normalize_scores(&scores);
        prop_assert!(n.iter().all(|v| (0.0..=1.0).contains(v)));
        let distinct = scores.iter().any(|&s| s != scores[0]);
        if distinct {
            let again = normalize_scores(&n);
            for (a, b) in again.iter().zip(&n) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            for i in 0..scores.len() {
                for j in 0..scores.len() {
                    if scores[i] < scores[j] {
                        prop_assert!(n[i] < n[j]);
                    }
                }
            }
        } else {
            prop_assert!(n.iter().all(|&v| v == 0.5));
        }
    }

    fn reconstruction_score_is_nonnegative_and_monotone(
        x in prop::collection::vec(-1.0f32..1.0, 2 * 16),
        xh in prop::collection::vec(-1.0f32..1.0, 2 * 16),
        z in prop::collection::vec(-1.0f32..1.0, 2 * 4),
        zh in prop::collection::vec(-1.0f32..1.0, 2 * 4),
        pos in 0usize..16,
        push in 0.01f32..1.0,
    ) {
        let t = |d: &Vec<f32>, c: usize| Tensor::new(&[2, c, 2, 2], d.clone()).unwrap();
        let (x, xh, z, zh) = (t(&x, 4), t(&xh, 4), t(&z, 1), t(&zh, 1));
        let base = reconstruction_score_from(&x, &xh, &z, &zh, 10.0).unwrap();
        prop_assert!(base.iter().all(|&s| s >= 0.0));
        // move one reconstructed pixel of sample 0 further from its original
        let mut worse = xh.clone();
        let d = x.data()[pos] - worse.data()[pos];
        worse.data_mut()[pos] -= if d >= 0.0 { push } else { -push };
        let after = reconstruction_score_from(&x, &worse, &z, &zh, 10.0).unwrap();
        prop_assert!(after[0] > base[0]);
        prop_assert_eq!(after[1], base[1]);
        let mut worse_z = zh.clone();
        let dz = z.data()[0] - worse_z.data()[0];
        worse_z.data_mut()[0] -= if dz >= 0.0 { push } else { -push };
        let after_z = reconstruction_score_from(&x, &xh, &z, &worse_z, 10.0).unwrap();
        prop_assert!(after_z[0] > base[0]);
    }

    fn losses_are_nonnegative(
        a in prop::collection::vec(-3.0f64..3.0, 3 * 2 * 2 * 2),
        b in prop::collection::vec(-3.0f64..3.0, 3 * 2 * 2 * 2),
        logits in prop::collection::vec(-5.0f64..5.0, 3 * 18),
        adv in prop::collection::vec(-4.0f64..4.0, 6),
        specs in prop::collection::vec(any_spec(), 3),
    ) {
        let mut g = Graph::<f64>::new();
        let av = g.input(Tensor::new(&[3, 2, 2, 2], a).unwrap());
        let bv = g.input(Tensor::new(&[3, 2, 2, 2], b).unwrap());
        let rec = reconstruction_loss(&mut g, av, bv).unwrap();
        let cmp = compactness_loss(&mut g, av, CompactnessPooling::PerChannelMean).unwrap();
        let cmp_c = compactness_loss(&mut g, av, CompactnessPooling::AcrossChannels).unwrap();
        let real = g.input(Tensor::new(&[3, 1], adv[..3].to_vec()).unwrap());
        let fake = g.input(Tensor::new(&[3, 1], adv[3..].to_vec()).unwrap());
        let adv_d = adversarial_loss_d(&mut g, real, fake).unwrap();
        let mut out = vec![rec, cmp, cmp_c, adv_d];
        for p in PROTOCOLS {
            let labels: Vec<_> = specs
                .iter()
                .map(|s| match p {
                    Protocol::Rotation => TransformSpec::rotation(s.rotation_k),
                    Protocol::Jigsaw => TransformSpec::jigsaw(s.perm_index),
                    Protocol::JigsawRotation => TransformSpec::jigsaw_rotation(s.perm_index, s.partition_rotations),
                })
                .map(|s| encode_label(&s))
                .collect();
            let w = p.label_dim();
            let l: Vec<f64> = (0..3).flat_map(|i| logits[i * 18..i * 18 + w].to_vec()).collect();
            let lv = g.input(Tensor::new(&[3, w], l).unwrap());
            out.push(classification_loss_d(&mut g, p, lv, &labels).unwrap());
        }
        for v in out {
            let x = g.value(v).item();
            prop_assert!(x >= 0.0 && x.is_finite(), "loss {}", x);
        }
    }

    fn compactness_ignores_a_common_shift(
        z in prop::collection::vec(-2.0f64..2.0, 4 * 3 * 2 * 2),
        shift in -10.0f64..10.0,
    ) {
        let mut g = Graph::<f64>::new();
        let zv = g.input(Tensor::new(&[4, 3, 2, 2], z.clone()).unwrap());
        let shifted = g.input(Tensor::new(&[4, 3, 2, 2], z.iter().map(|v| v + shift).collect()).unwrap());
        let first: Vec<f64> = z[..12].to_vec();
        let same = g.input(Tensor::new(&[4, 3, 2, 2], first.repeat(4)).unwrap());
        for pooling in [CompactnessPooling::PerChannelMean, CompactnessPooling::AcrossChannels] {
            let a = compactness_loss(&mut g, zv, pooling).unwrap();
            let b = compactness_loss(&mut g, shifted, pooling).unwrap();
            let c = compactness_loss(&mut g, same, pooling).unwrap();
            prop_assert!((g.value(a).item() - g.value(b).item()).abs() < 1e-9);
            prop_assert_eq!(g.value(c).item(), 0.0);
        }
    }

    fn preprocessing_stays_in_range(
        (w, h, c, pixels) in (1usize..40, 1usize..40, prop::sample::select(vec![1usize, 3]))
            .prop_flat_map(|(w, h, c)| (Just(w), Just(h), Just(c), prop::collection::vec(any::<u8>(), w * h * c))),
        target in prop::sample::select(vec![8usize, 16, 32]),
        out_c in prop::sample::select(vec![1usize, 3]),
        seed in any::<u64>(),
        augment in any::<bool>(),
    ) {
        let raw = RawImage::new(w, h, c, pixels).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = preprocess(&raw, target, out_c, if augment { Some(&mut rng) } else { None }).unwrap();
        prop_assert_eq!(t.shape(), &[out_c, target, target]);
        prop_assert!(t.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    fn every_epoch_delivers_every_sample_once(len in 2usize..300, bs in 2usize..70, seed in any::<u64>(), epoch in 0u64..5) {
        let sched = BatchSchedule::new(len, bs, seed);
        let batches = sched.epoch_batches(epoch);
        prop_assert_eq!(batches.iter().map(Vec::len).sum::<usize>(), len);
        prop_assert!(batches.iter().all(|b| b.len() >= 2));
        let mut seen: Vec<usize> = batches.concat();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..len).collect::<Vec<_>>());
        let per = batches.len() as u64;
        for (k, b) in batches.iter().enumerate() {
            prop_assert_eq!(&sched.batch(epoch * per + k as u64), b);
        }
    }
}

pub fn label_codec_is_injective_and_decodes_back() {
    for p in PROTOCOLS {
        let all = enumerate_transforms(p);
        let mut seen = HashSet::new();
        for (spec, label) in &all {
            assert!(seen.insert(label.bits.clone()), "{p:?}: duplicate label for {spec:?}");
            let scores: Vec<f64> = label.bits.iter().map(|&b| b as f64).collect();
            assert_eq!(&decode_label(p, &scores).unwrap(), spec);
        }
        assert_eq!(all.len(), p.num_transforms());
    }
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::with_cases(24) })]

    fn networks_accept_any_batch_size(n in 1usize..5, seed in any::<u64>(), zero in any::<bool>(), coord in any::<bool>()) {
        let cfg = NetConfig {
            image_size: 8,
            image_channels: 1,
            latent_channels: 3,
            base_width: 1,
            padding_mode: if zero { PadMode::Zero } else { PadMode::Symmetric },
            use_coord: coord,
            label_dim: 6,
        };
        let nets = Networks::<f32>::new(&cfg, seed).unwrap();
        let x = Tensor::from_fn(&[n, 1, 8, 8], |i| ((i * 37 % 17) as f32 / 8.5) - 1.0);
        let (z, xh, zh) = nets.reconstruct(&x).unwrap();
        prop_assert_eq!(z.shape(), &[n, 3, 2, 2]);
        prop_assert_eq!(xh.shape(), x.shape());
        prop_assert_eq!(zh.shape(), z.shape());
        prop_assert!(xh.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        let logits = nets.classify(&x).unwrap();
        prop_assert_eq!(logits.shape(), &[n, 6]);
        let (z2, xh2, _) = nets.reconstruct(&x).unwrap();
        prop_assert_eq!(z2, z);
        prop_assert_eq!(xh2, xh);
    }
}

fn scalar(g: &Graph<f64>, v: dgad::autograd::Var) -> f64 {
    g.value(v).item()
}

/// Hand-computed loss values.
fn loss_hand_oracles() {
    let mut g = Graph::<f64>::new();
    let ones = g.constant(Tensor::full(&[2, 1, 2, 2], 1.0));
    let zeros = g.constant(Tensor::zeros(&[2, 1, 2, 2]));
    let l = reconstruction_loss(&mut g, ones, zeros).unwrap();
    assert_eq!(scalar(&g, l), 1.0);

    let c = |g: &mut Graph<f64>, v: f64| g.constant(Tensor::new(&[1, 1], vec![v]).unwrap());
    for (real, fake, expect) in [(1.0, -1.0, 0.0), (0.0, 0.0, 2.0), (-3.0, 5.0, 10.0)] {
        let (r, f) = (c(&mut g, real), c(&mut g, fake));
        let l = adversarial_loss_d(&mut g, r, f).unwrap();
        assert_eq!(scalar(&g, l), expect);
    }
    let fake = g.constant(Tensor::new(&[2, 1], vec![2.0, 4.0]).unwrap());
    let l = adversarial_loss_g(&mut g, fake);
    assert_eq!(scalar(&g, l), -3.0);

    let label = [encode_label(&TransformSpec::rotation(2))];
    let flat = g.constant(Tensor::zeros(&[1, 4]));
    let l = classification_loss_d(&mut g, Protocol::Rotation, flat, &label).unwrap();
    assert!((scalar(&g, l) - 4f64.ln()).abs() < 1e-12);
    let sure = g.constant(Tensor::new(&[1, 4], vec![-50.0, -50.0, 50.0, -50.0]).unwrap());
    let l = classification_loss_d(&mut g, Protocol::Rotation, sure, &label).unwrap();
    assert!(scalar(&g, l) < 1e-6);

    // spatial means 0 and 2 in one channel: population variance 1
    let z = g.constant(Tensor::new(&[2, 1, 1, 2], vec![-1.0, 1.0, 1.5, 2.5]).unwrap());
    let l = compactness_loss(&mut g, z, CompactnessPooling::PerChannelMean).unwrap();
    assert!((scalar(&g, l) - 1.0).abs() < 1e-12);

    let unit = LossParts {
        rec: 1.0,
        cls_d: 1.0,
        cls_g: 1.0,
        cmp: 1.0,
        adv_d: 1.0,
        adv_g: 1.0,
    };
    assert_eq!(total_losses(&unit, &LossWeights::default()).unwrap(), (11.0, 131.0));
}

/// The discriminator phase touches only the discriminator and the generator phase only
/// the encoder and decoder.
fn gradient_routing_probes() {
    for protocol in PROTOCOLS {
        let cfg = TrainConfig {
            protocol,
            net: NetConfig {
                image_size: 8,
                image_channels: 1,
                latent_channels: 2,
                base_width: 1,
                ..NetConfig::default()
            },
            batch_size: 4,
            iterations: 1,
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(cfg).unwrap();
        let x = Tensor::from_fn(&[4, 1, 8, 8], |i| ((i * 29 % 23) as f32 / 11.5) - 1.0);
        let (_, probes) = t.train_step_probed(&x).unwrap();
        assert_eq!(probes[0].encoder, 0.0);
        assert_eq!(probes[0].decoder, 0.0);
        assert!(probes[0].discriminator > 0.0);
        assert_eq!(probes[1].discriminator, 0.0);
        assert!(probes[1].encoder > 0.0 && probes[1].decoder > 0.0);
    }
}

/// Every property, by name.
pub fn all() -> Vec<(&'static str, fn())> {
    vec![
        (
            "rotations_compose_as_a_cyclic_group",
            rotations_compose_as_a_cyclic_group,
        ),
        (
            "transforms_preserve_the_pixel_multiset",
            transforms_preserve_the_pixel_multiset,
        ),
        (
            "jigsaw_never_touches_the_top_left_quadrant",
            jigsaw_never_touches_the_top_left_quadrant,
        ),
        ("label_width_matches_the_protocol", label_width_matches_the_protocol),
        ("auc_equals_pair_counting", auc_equals_pair_counting),
        (
            "auc_is_invariant_under_increasing_maps",
            auc_is_invariant_under_increasing_maps,
        ),
        (
            "normalization_is_idempotent_and_order_preserving",
            normalization_is_idempotent_and_order_preserving,
        ),
        (
            "reconstruction_score_is_nonnegative_and_monotone",
            reconstruction_score_is_nonnegative_and_monotone,
        ),
        ("losses_are_nonnegative", losses_are_nonnegative),
        ("compactness_ignores_a_common_shift", compactness_ignores_a_common_shift),
        ("preprocessing_stays_in_range", preprocessing_stays_in_range),
        (
            "every_epoch_delivers_every_sample_once",
            every_epoch_delivers_every_sample_once,
        ),
        (
            "label_codec_is_injective_and_decodes_back",
            label_codec_is_injective_and_decodes_back,
        ),
        ("networks_accept_any_batch_size", networks_accept_any_batch_size),
        ("loss_hand_oracles", loss_hand_oracles),
        ("gradient_routing_probes", gradient_routing_probes),
    ]
}

/// Run one property by name.
pub fn run(name: &str) {
    let (_, f) = all().into_iter().find(|(n, _)| *n == name).expect("known property");
    f();
}
