//! Geometric pretext tasks: whole-image rotation, 2x2 jigsaw, and jigsaw with
//! per-partition rotation, together with their label encodings.
//!
//! Conventions:
//! - rotations are counter-clockwise in steps of 90 degrees;
//! - quadrants are numbered top-left (0), top-right (1), bottom-left (2),
//!   bottom-right (3); the top-left quadrant never moves or rotates;
//! - a permutation `p` over the movable quadrants places the content of movable
//!   quadrant `p[j]` at movable slot `j`, slots being ordered TR, BL, BR.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DgadError, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Protocol 1: whole-image rotation, 4-way one-hot label.
    #[default]
    Rotation,
    /// Protocol 2: 2x2 jigsaw, 6-way one-hot label.
    Jigsaw,
    /// Protocol 3: jigsaw plus per-partition rotation, 18-bit multi-hot label.
    JigsawRotation,
}

impl Protocol {
    pub fn from_number(n: u8) -> Result<Self> {
        match n {
            1 => Ok(Protocol::Rotation),
            2 => Ok(Protocol::Jigsaw),
            3 => Ok(Protocol::JigsawRotation),
            _ => Err(DgadError::Config(format!("protocol must be 1, 2 or 3, got {n}"))),
        }
    }

    pub fn number(self) -> u8 {
        match self {
            Protocol::Rotation => 1,
            Protocol::Jigsaw => 2,
            Protocol::JigsawRotation => 3,
        }
    }

    pub fn label_dim(self) -> usize {
        self.label_blocks().iter().sum()
    }

    /// Widths of the mutually exclusive label blocks.
    pub fn label_blocks(self) -> &'static [usize] {
        match self {
            Protocol::Rotation => &[4],
            Protocol::Jigsaw => &[6],
            Protocol::JigsawRotation => &[6, 4, 4, 4],
        }
    }

    pub fn num_transforms(self) -> usize {
        match self {
            Protocol::Rotation => 4,
            Protocol::Jigsaw => 6,
            Protocol::JigsawRotation => 6 * 64,
        }
    }

    pub fn identity(self) -> TransformSpec {
        TransformSpec {
            protocol: self,
            rotation_k: 0,
            perm_index: 0,
            partition_rotations: [0; 3],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TransformSpec {
    pub protocol: Protocol,
    pub rotation_k: u8,
    pub perm_index: u8,
    pub partition_rotations: [u8; 3],
}

impl TransformSpec {
    pub fn rotation(k: u8) -> Self {
        TransformSpec {
            rotation_k: k,
            ..Protocol::Rotation.identity()
        }
    }

    pub fn jigsaw(perm_index: u8) -> Self {
        TransformSpec {
            perm_index,
            ..Protocol::Jigsaw.identity()
        }
    }

    pub fn jigsaw_rotation(perm_index: u8, partition_rotations: [u8; 3]) -> Self {
        TransformSpec {
            perm_index,
            partition_rotations,
            ..Protocol::JigsawRotation.identity()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self.protocol {
            Protocol::Rotation => self.rotation_k < 4 && self.perm_index == 0 && self.partition_rotations == [0; 3],
            Protocol::Jigsaw => self.rotation_k == 0 && self.perm_index < 6 && self.partition_rotations == [0; 3],
            Protocol::JigsawRotation => {
                self.rotation_k == 0 && self.perm_index < 6 && self.partition_rotations.iter().all(|&r| r < 4)
            }
        };
        if ok {
            Ok(())
        } else {
            Err(DgadError::InvalidArgument(format!("invalid transform {self:?}")))
        }
    }

    pub fn is_identity(&self) -> bool {
        self.rotation_k == 0 && self.perm_index == 0 && self.partition_rotations == [0; 3]
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct PretextLabel {
    pub bits: Vec<u8>,
    pub is_normal: bool,
}

impl PretextLabel {
    pub fn to_row<T: Real>(&self) -> Vec<T> {
        self.bits
            .iter()
            .map(|&b| if b == 1 { T::one() } else { T::zero() })
            .collect()
    }
}

/// `(batch, label_dim)` target matrix.
pub fn labels_tensor<T: Real>(labels: &[PretextLabel]) -> Result<Tensor<T>> {
    let width = labels.first().map_or(0, |l| l.bits.len());
    let data: Vec<T> = labels.iter().flat_map(|l| l.to_row::<T>()).collect();
    Tensor::new(&[labels.len(), width], data)
}

const PERMUTATIONS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];

/// The six orderings of the movable quadrants, identity first.
pub fn jigsaw_permutations() -> [[usize; 3]; 6] {
    PERMUTATIONS
}

/// Rotate every `h x w` plane of a `(batch, channels, h, w)` batch by `k * 90` degrees CCW.
pub fn rotate<T: Real>(image: &Tensor<T>, k: u8) -> Result<Tensor<T>> {
    let (n, c, h, w) = image.dims4()?;
    if h != w {
        return Err(DgadError::InvalidArgument(format!(
            "rotation needs square images, got {h}x{w}"
        )));
    }
    let mut out = image.clone();
    for (src, dst) in image.data().chunks(h * w).zip(out.data_mut().chunks_mut(h * w)) {
        rotate_square(src, h, w, 0, 0, h, k, dst, w, 0, 0);
    }
    debug_assert_eq!(out.numel(), n * c * h * w);
    Ok(out)
}

/// Copy the `size x size` block of `src` at `(sy, sx)` into `dst` at `(dy, dx)`,
/// rotated `k * 90` degrees counter-clockwise.
#[allow(clippy::too_many_arguments)]
fn rotate_square<T: Copy>(
    src: &[T],
    _src_h: usize,
    src_w: usize,
    sy: usize,
    sx: usize,
    size: usize,
    k: u8,
    dst: &mut [T],
    dst_w: usize,
    dy: usize,
    dx: usize,
) {
    let last = size - 1;
    for i in 0..size {
        for j in 0..size {
            // out[i][j] takes in[r][c]; one CCW turn maps out[i][j] <- in[j][last - i]
            let (r, c) = match k % 4 {
                0 => (i, j),
                1 => (j, last - i),
                2 => (last - i, last - j),
                _ => (last - j, i),
            };
            dst[(dy + i) * dst_w + dx + j] = src[(sy + r) * src_w + sx + c];
        }
    }
}

fn quadrant_origin(q: usize, half_h: usize, half_w: usize) -> (usize, usize) {
    ((q / 2) * half_h, (q % 2) * half_w)
}

/// Apply one transform to every image of the batch.
pub fn apply_transform<T: Real>(image: &Tensor<T>, spec: &TransformSpec) -> Result<Tensor<T>> {
    spec.validate()?;
    let (_, _, h, w) = image.dims4()?;
    match spec.protocol {
        Protocol::Rotation => rotate(image, spec.rotation_k),
        Protocol::Jigsaw | Protocol::JigsawRotation => {
            if h % 2 != 0 || w % 2 != 0 {
                return Err(DgadError::InvalidArgument(format!(
                    "jigsaw needs even spatial size, got {h}x{w}"
                )));
            }
            if spec.protocol == Protocol::JigsawRotation && h != w {
                return Err(DgadError::InvalidArgument(format!(
                    "partition rotation needs square images, got {h}x{w}"
                )));
            }
            let (hh, hw) = (h / 2, w / 2);
            let perm = PERMUTATIONS[spec.perm_index as usize];
            let mut out = image.clone();
            for (src, dst) in image.data().chunks(h * w).zip(out.data_mut().chunks_mut(h * w)) {
                for (slot, &from) in perm.iter().enumerate() {
                    let (dy, dx) = quadrant_origin(slot + 1, hh, hw);
                    let (sy, sx) = quadrant_origin(from + 1, hh, hw);
                    let k = spec.partition_rotations[slot];
                    if hh == hw {
                        rotate_square(src, h, w, sy, sx, hh, k, dst, w, dy, dx);
                    } else {
                        for r in 0..hh {
                            dst[(dy + r) * w + dx..(dy + r) * w + dx + hw]
                                .copy_from_slice(&src[(sy + r) * w + sx..(sy + r) * w + sx + hw]);
                        }
                    }
                }
            }
            Ok(out)
        }
    }
}

/// Apply `specs[i]` to image `i`.
pub fn apply_transforms<T: Real>(batch: &Tensor<T>, specs: &[TransformSpec]) -> Result<Tensor<T>> {
    let (n, c, h, w) = batch.dims4()?;
    if specs.len() != n {
        return Err(DgadError::InvalidArgument(format!(
            "{} transforms for a batch of {n}",
            specs.len()
        )));
    }
    let mut out = Vec::with_capacity(batch.numel());
    for (i, spec) in specs.iter().enumerate() {
        let one = Tensor::new(&[1, c, h, w], batch.sample(i).to_vec())?;
        out.extend_from_slice(apply_transform(&one, spec)?.data());
    }
    Tensor::new(batch.shape(), out)
}

/// Draw a transform uniformly from the protocol's full transform set.
pub fn sample_transform(protocol: Protocol, rng: &mut impl Rng) -> TransformSpec {
    match protocol {
        Protocol::Rotation => TransformSpec::rotation(rng.gen_range(0..4)),
        Protocol::Jigsaw => TransformSpec::jigsaw(rng.gen_range(0..6)),
        Protocol::JigsawRotation => TransformSpec::jigsaw_rotation(
            rng.gen_range(0..6),
            [rng.gen_range(0..4), rng.gen_range(0..4), rng.gen_range(0..4)],
        ),
    }
}

fn one_hot(width: usize, hot: usize, out: &mut Vec<u8>) {
    out.extend((0..width).map(|i| u8::from(i == hot)));
}

pub fn encode_label(spec: &TransformSpec) -> PretextLabel {
    let mut bits = Vec::with_capacity(spec.protocol.label_dim());
    match spec.protocol {
        Protocol::Rotation => one_hot(4, spec.rotation_k as usize, &mut bits),
        Protocol::Jigsaw => one_hot(6, spec.perm_index as usize, &mut bits),
        Protocol::JigsawRotation => {
            one_hot(6, spec.perm_index as usize, &mut bits);
            for &r in &spec.partition_rotations {
                one_hot(4, r as usize, &mut bits);
            }
        }
    }
    PretextLabel {
        bits,
        is_normal: spec.is_identity(),
    }
}

/// The label `c_r` of an untransformed image.
pub fn normal_label(protocol: Protocol) -> PretextLabel {
    encode_label(&protocol.identity())
}

/// Invert [`encode_label`] (argmax per block), so it also decodes soft predictions.
pub fn decode_label<T: Real>(protocol: Protocol, scores: &[T]) -> Result<TransformSpec> {
    if scores.len() != protocol.label_dim() {
        return Err(DgadError::Shape(format!(
            "label of width {} for protocol {:?}",
            scores.len(),
            protocol
        )));
    }
    let picks = block_argmax(scores, protocol.label_blocks());
    Ok(match protocol {
        Protocol::Rotation => TransformSpec::rotation(picks[0] as u8),
        Protocol::Jigsaw => TransformSpec::jigsaw(picks[0] as u8),
        Protocol::JigsawRotation => {
            TransformSpec::jigsaw_rotation(picks[0] as u8, [picks[1] as u8, picks[2] as u8, picks[3] as u8])
        }
    })
}

/// Index of the largest entry inside each block; first index wins ties.
pub fn block_argmax<T: Real>(scores: &[T], blocks: &[usize]) -> Vec<usize> {
    let mut start = 0;
    blocks
        .iter()
        .map(|&bw| {
            let seg = &scores[start..start + bw];
            start += bw;
            seg.iter()
                .enumerate()
                .fold(
                    (0, T::neg_infinity()),
                    |(bi, bv), (i, &v)| {
                        if v > bv {
                            (i, v)
                        } else {
                            (bi, bv)
                        }
                    },
                )
                .0
        })
        .collect()
}

/// Every transform of the protocol with its label, identity first.
pub fn enumerate_transforms(protocol: Protocol) -> Vec<(TransformSpec, PretextLabel)> {
    let specs: Vec<TransformSpec> = match protocol {
        Protocol::Rotation => (0..4).map(TransformSpec::rotation).collect(),
        Protocol::Jigsaw => (0..6).map(TransformSpec::jigsaw).collect(),
        Protocol::JigsawRotation => {
            let mut v = Vec::with_capacity(384);
            for p in 0..6 {
                for r in 0..64u8 {
                    v.push(TransformSpec::jigsaw_rotation(p, [r / 16, (r / 4) % 4, r % 4]));
                }
            }
            v
        }
    };
    specs
        .into_iter()
        .map(|s| {
            let l = encode_label(&s);
            (s, l)
        })
        .collect()
}

/// Transform set used for Dirichlet scoring. Protocols 1 and 2 use every transform.
/// Protocol 3 uses the six unrotated permutations plus `extra_rotated` distinct
/// rotated variants drawn with `rng`.
pub fn scoring_transforms(
    protocol: Protocol,
    extra_rotated: usize,
    rng: &mut impl Rng,
) -> Vec<(TransformSpec, PretextLabel)> {
    let all = enumerate_transforms(protocol);
    if protocol != Protocol::JigsawRotation {
        return all;
    }
    let (mut chosen, rotated): (Vec<_>, Vec<_>) = all.into_iter().partition(|(s, _)| s.partition_rotations == [0; 3]);
    let mut pool = rotated;
    let take = extra_rotated.min(pool.len());
    for _ in 0..take {
        let i = rng.gen_range(0..pool.len());
        chosen.push(pool.swap_remove(i));
    }
    chosen
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn plane(h: usize, w: usize, vals: &[f64]) -> Tensor<f64> {
        Tensor::new(&[1, 1, h, w], vals.to_vec()).unwrap()
    }

    #[test]
    fn rotate_2x2_ccw_index_oracle() {
        // brute force: CCW quarter turn sends in[r][c] to out[w-1-c][r]
        let vals = [1.0, 2.0, 3.0, 4.0]; // [[a,b],[c,d]]
        let mut expect = [0.0; 4];
        for r in 0..2 {
            for c in 0..2 {
                expect[(1 - c) * 2 + r] = vals[r * 2 + c];
            }
        }
        assert_eq!(expect, [2.0, 4.0, 1.0, 3.0]); // [[b,d],[a,c]]
        let out = rotate(&plane(2, 2, &vals), 1).unwrap();
        assert_eq!(out.data(), &expect);
    }

    #[test]
    fn rotate_identity_and_closure() {
        let img = Tensor::<f64>::from_fn(&[2, 3, 5, 5], |i| i as f64);
        assert_eq!(rotate(&img, 0).unwrap(), img);
        assert_eq!(rotate(&rotate(&img, 1).unwrap(), 3).unwrap(), img);
    }

    #[test]
    fn rotate_rejects_non_square() {
        let img = Tensor::<f64>::zeros(&[1, 1, 2, 3]);
        let err = rotate(&img, 1).unwrap_err().to_string();
        assert!(err.contains("square"), "{err}");
    }

    #[test]
    fn permutation_catalogue() {
        let perms = jigsaw_permutations();
        assert_eq!(perms[0], [0, 1, 2]);
        // all 3! permutations, each non-identity one displacing at least two elements
        let mut brute = Vec::new();
        for a in 0..3 {
            for b in 0..3 {
                for c in 0..3 {
                    if a != b && b != c && a != c {
                        brute.push([a, b, c]);
                    }
                }
            }
        }
        let displaced_ok = brute
            .iter()
            .filter(|p| p.iter().enumerate().filter(|(i, &v)| *i != v).count() >= 2)
            .count();
        assert_eq!(displaced_ok + 1, 6);
        for p in &perms {
            assert!(brute.contains(p));
            let mut inv = [0; 3];
            for (i, &v) in p.iter().enumerate() {
                inv[v] = i;
            }
            let composed: Vec<usize> = (0..3).map(|i| p[inv[i]]).collect();
            assert_eq!(composed, vec![0, 1, 2]);
        }
    }

    fn quadrant_image() -> Tensor<f64> {
        // 4x4, quadrant constants TL=1, TR=2, BL=3, BR=4
        Tensor::from_fn(&[1, 1, 4, 4], |i| {
            let (r, c) = (i / 4, i % 4);
            1.0 + (2 * (r / 2) + c / 2) as f64
        })
    }

    #[test]
    fn jigsaw_swap_tr_bl_oracle() {
        let img = quadrant_image();
        // permutation [1, 0, 2] swaps movable quadrants TR and BL
        assert_eq!(PERMUTATIONS[2], [1, 0, 2]);
        let out = apply_transform(&img, &TransformSpec::jigsaw(2)).unwrap();
        let expect = Tensor::from_fn(&[1, 1, 4, 4], |i| {
            let q = 2 * ((i / 4) / 2) + (i % 4) / 2;
            let src_q = match q {
                1 => 2,
                2 => 1,
                other => other,
            };
            1.0 + src_q as f64
        });
        assert_eq!(out, expect);
    }

    #[test]
    fn jigsaw_two_cycle_is_involution() {
        let img = Tensor::<f64>::from_fn(&[2, 1, 6, 6], |i| (i * 13 % 17) as f64);
        // [0, 2, 1] swaps the contents of BL and BR
        let spec = TransformSpec::jigsaw(1);
        let once = apply_transform(&img, &spec).unwrap();
        assert_ne!(once, img);
        assert_eq!(apply_transform(&once, &spec).unwrap(), img);
    }

    #[test]
    fn jigsaw_rejects_odd_size() {
        let img = Tensor::<f64>::zeros(&[1, 1, 5, 5]);
        assert!(apply_transform(&img, &TransformSpec::jigsaw(1)).is_err());
    }

    #[test]
    fn identity_spec_leaves_input_unchanged() {
        let img = Tensor::<f64>::from_fn(&[1, 2, 4, 4], |i| i as f64);
        for p in [Protocol::Rotation, Protocol::Jigsaw, Protocol::JigsawRotation] {
            assert_eq!(apply_transform(&img, &p.identity()).unwrap(), img);
        }
    }

    #[test]
    fn jigsaw_rotation_rotates_moved_partitions() {
        let img = Tensor::<f64>::from_fn(&[1, 1, 4, 4], |i| i as f64);
        let spec = TransformSpec::jigsaw_rotation(0, [1, 0, 0]);
        let out = apply_transform(&img, &spec).unwrap();
        // TR quadrant [[2,3],[6,7]] rotated CCW -> [[3,7],[2,6]]
        let d = out.data();
        assert_eq!([d[2], d[3], d[6], d[7]], [3.0, 7.0, 2.0, 6.0]);
        assert_eq!([d[0], d[1], d[4], d[5]], [0.0, 1.0, 4.0, 5.0]);
    }

    #[test]
    fn label_examples() {
        let l = encode_label(&TransformSpec::rotation(0));
        assert_eq!(l.bits, vec![1, 0, 0, 0]);
        assert!(l.is_normal);
        let l = encode_label(&TransformSpec::rotation(2));
        assert_eq!(l.bits, vec![0, 0, 1, 0]);
        assert!(!l.is_normal);

        // layout [perm 6 | slot1 4 | slot2 4 | slot3 4]
        let l = encode_label(&TransformSpec::jigsaw_rotation(0, [0, 1, 0]));
        let offsets = [0, 6, 10, 14];
        let picks = [0, 0, 1, 0];
        let expect: Vec<usize> = offsets.iter().zip(picks).map(|(o, p)| o + p).collect();
        let set: Vec<usize> = (0..18).filter(|&i| l.bits[i] == 1).collect();
        assert_eq!(set, expect);
        assert_eq!(set, vec![0, 6, 11, 14]);
    }

    #[test]
    fn enumeration_sizes_and_normal_first() {
        for (p, n) in [
            (Protocol::Rotation, 4),
            (Protocol::Jigsaw, 6),
            (Protocol::JigsawRotation, 384),
        ] {
            let all = enumerate_transforms(p);
            assert_eq!(all.len(), n);
            assert_eq!(all.len(), p.num_transforms());
            assert!(all[0].1.is_normal);
            assert_eq!(all[0].1, normal_label(p));
            let distinct: std::collections::HashSet<_> = all.iter().map(|(_, l)| &l.bits).collect();
            assert_eq!(distinct.len(), n);
        }
    }

    #[test]
    fn sampling_is_deterministic_and_bounded() {
        let mut a = ChaCha8Rng::seed_from_u64(9);
        let mut b = ChaCha8Rng::seed_from_u64(9);
        for p in [Protocol::Rotation, Protocol::Jigsaw, Protocol::JigsawRotation] {
            for _ in 0..20 {
                let s = sample_transform(p, &mut a);
                assert_eq!(s, sample_transform(p, &mut b));
                s.validate().unwrap();
            }
        }
    }

    #[test]
    fn jigsaw_rotation_distinct_specs_bounded_by_384() {
        let mut seen = std::collections::HashSet::new();
        for seed in 0..2000u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..4 {
                seen.insert(sample_transform(Protocol::JigsawRotation, &mut rng));
            }
        }
        assert!(seen.len() <= 384);
        assert_eq!(seen.len(), 384);
    }

    #[test]
    fn rotation_class_frequencies_are_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut counts = [0usize; 4];
        let draws = 10_000;
        for _ in 0..draws {
            counts[sample_transform(Protocol::Rotation, &mut rng).rotation_k as usize] += 1;
        }
        let expected = draws as f64 / 4.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // chi-square critical value, 3 dof, alpha = 0.001
        assert!(chi2 < 16.27, "chi2 = {chi2}");
        for c in counts {
            assert!((c as f64 / draws as f64 - 0.25).abs() <= 0.02);
        }
    }

    #[test]
    fn scoring_subset_for_protocol_three() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sub = scoring_transforms(Protocol::JigsawRotation, 18, &mut rng);
        assert_eq!(sub.len(), 24);
        assert!(sub[0].1.is_normal);
        let distinct: std::collections::HashSet<_> = sub.iter().map(|(s, _)| *s).collect();
        assert_eq!(distinct.len(), 24);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(scoring_transforms(Protocol::Jigsaw, 18, &mut rng).len(), 6);
    }
}
