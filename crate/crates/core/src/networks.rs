//! Encoder, decoder and joint `(x, z)` discriminator.
//!
//! The encoder maps `(n, c, s, s)` images to `(n, latent, s/4, s/4)` codes in
//! `[-1, 1]`; the decoder mirrors it. The discriminator downsamples `x` twice,
//! concatenates `z` along channels and ends in two dense heads: a scalar
//! adversarial score and the pretext-class logits.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, PadMode, ParamGroup, Var};
use crate::error::{DgadError, Result};
use crate::pretext::Protocol;
use crate::tensor::{Real, Tensor};

const LEAKY_SLOPE: f64 = 0.01;
const RESIDUAL_BLOCKS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub image_size: usize,
    pub image_channels: usize,
    pub latent_channels: usize,
    pub base_width: usize,
    pub padding_mode: PadMode,
    pub use_coord: bool,
    pub label_dim: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            image_size: 32,
            image_channels: 3,
            latent_channels: 128,
            base_width: 64,
            padding_mode: PadMode::Symmetric,
            use_coord: false,
            label_dim: Protocol::Rotation.label_dim(),
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 || !self.image_size.is_multiple_of(4) {
            return Err(DgadError::Config(format!(
                "image_size must be a multiple of 4 and at least 8, got {}",
                self.image_size
            )));
        }
        if !matches!(self.image_channels, 1 | 3) {
            return Err(DgadError::Config(format!(
                "image_channels must be 1 or 3, got {}",
                self.image_channels
            )));
        }
        if self.latent_channels == 0 || self.base_width == 0 || self.label_dim == 0 {
            return Err(DgadError::Config(
                "latent_channels, base_width and label_dim must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn latent_size(&self) -> usize {
        self.image_size / 4
    }
}

/// Two channels of row and column coordinates, each linearly spaced over `[-1, 1]`.
/// A length-1 axis maps to `-1`.
pub fn coord_channels<T: Real>(height: usize, width: usize) -> Tensor<T> {
    let lin = |i: usize, len: usize| -> T {
        if len <= 1 {
            -T::one()
        } else {
            T::lit(-1.0 + 2.0 * i as f64 / (len - 1) as f64)
        }
    };
    let hw = height * width;
    Tensor::from_fn(&[1, 2, height, width], |idx| {
        let (ch, pos) = (idx / hw, idx % hw);
        if ch == 0 {
            lin(pos / width, height)
        } else {
            lin(pos % width, width)
        }
    })
}

/// Pad a feature map on a fresh graph; see [`Graph::pad`].
pub fn pad_features<T: Real>(feature: &Tensor<T>, amount: usize, mode: PadMode) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let x = g.constant(feature.clone());
    let y = g.pad(x, amount, mode)?;
    Ok(g.value(y).clone())
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Trainable tensors of one network plus non-trainable buffers
/// (spectral-norm power-iteration vectors).
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    pub group: ParamGroup,
    pub params: Vec<NamedTensor<T>>,
    pub buffers: Vec<NamedTensor<T>>,
}

impl<T: Real> ParamStore<T> {
    fn new(group: ParamGroup) -> Self {
        ParamStore {
            group,
            params: Vec::new(),
            buffers: Vec::new(),
        }
    }

    fn add(&mut self, name: String, value: Tensor<T>) -> usize {
        self.params.push(NamedTensor { name, value });
        self.params.len() - 1
    }

    fn add_buffer(&mut self, name: String, value: Tensor<T>) -> usize {
        self.buffers.push(NamedTensor { name, value });
        self.buffers.len() - 1
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    fn var(&self, g: &mut Graph<T>, idx: usize) -> Var {
        g.param((self.group, idx), &self.params[idx].value)
    }

    /// Copy of this store with every tensor converted to `U`.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        let conv = |v: &Vec<NamedTensor<T>>| {
            v.iter()
                .map(|p| NamedTensor {
                    name: p.name.clone(),
                    value: p.value.cast(),
                })
                .collect()
        };
        ParamStore {
            group: self.group,
            params: conv(&self.params),
            buffers: conv(&self.buffers),
        }
    }

    /// Replace tensor values, checking names and shapes.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        let check = |a: &[NamedTensor<T>], b: &[NamedTensor<T>]| -> Result<()> {
            if a.len() != b.len() {
                return Err(DgadError::Shape(format!(
                    "{:?}: expected {} tensors, got {}",
                    self.group,
                    a.len(),
                    b.len()
                )));
            }
            for (x, y) in a.iter().zip(b) {
                if x.name != y.name || x.value.shape() != y.value.shape() {
                    return Err(DgadError::Shape(format!(
                        "{:?}: tensor `{}` {:?} does not match `{}` {:?}",
                        self.group,
                        x.name,
                        x.value.shape(),
                        y.name,
                        y.value.shape()
                    )));
                }
            }
            Ok(())
        };
        check(&self.params, &other.params)?;
        check(&self.buffers, &other.buffers)?;
        self.params = other.params.clone();
        self.buffers = other.buffers.clone();
        Ok(())
    }
}

/// Per-forward settings shared by every layer of a network.
#[derive(Clone, Copy, Debug)]
struct LayerCtx {
    pad: PadMode,
    coord: bool,
}

#[derive(Clone, Debug)]
struct Conv {
    w: usize,
    b: usize,
    stride: usize,
    pad: usize,
    /// `(u, v)` buffer indices when spectrally normalized.
    sn: Option<(usize, usize)>,
}

fn glorot<T: Real>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(shape, |_| T::lit(rng.gen_range(-limit..limit)))
}

fn normalize<T: Real>(v: &mut [T]) {
    let n = v.iter().map(|&x| x * x).sum::<T>().sqrt();
    let n = n.max(T::lit(1e-12));
    v.iter_mut().for_each(|x| *x /= n);
}

/// One power-iteration step on `w` viewed as `(rows, cols)`, updating `u` and `v`.
fn power_iteration_step<T: Real>(w: &[T], u: &mut [T], v: &mut [T]) {
    let cols = v.len();
    for (c, vc) in v.iter_mut().enumerate() {
        *vc = u.iter().enumerate().map(|(r, &ur)| ur * w[r * cols + c]).sum();
    }
    normalize(v);
    for (r, ur) in u.iter_mut().enumerate() {
        *ur = w[r * cols..(r + 1) * cols]
            .iter()
            .zip(v.iter())
            .map(|(&a, &b)| a * b)
            .sum();
    }
    normalize(u);
}

const SN_WARMUP: usize = 15;

fn init_sn_buffers<T: Real>(store: &mut ParamStore<T>, name: &str, w_idx: usize, rng: &mut impl Rng) -> (usize, usize) {
    let w = &store.params[w_idx].value;
    let rows = w.shape()[0];
    let cols = w.numel() / rows;
    let mut u: Vec<T> = (0..rows).map(|_| T::lit(rng.gen_range(-1.0..1.0))).collect();
    normalize(&mut u);
    let mut v = vec![T::zero(); cols];
    // warm start so the estimate is already close before the first update
    for _ in 0..SN_WARMUP {
        power_iteration_step(w.data(), &mut u, &mut v);
    }
    let ui = store.add_buffer(format!("{name}.sn_u"), Tensor::new(&[rows], u).unwrap());
    let vi = store.add_buffer(format!("{name}.sn_v"), Tensor::new(&[cols], v).unwrap());
    (ui, vi)
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        coord: bool,
        spectral: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let in_c = in_c + if coord { 2 } else { 0 };
        let w = store.add(
            format!("{name}.weight"),
            glorot(&[out_c, in_c, k, k], in_c * k * k, out_c * k * k, rng),
        );
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[out_c]));
        let sn = spectral.then(|| init_sn_buffers(store, name, w, rng));
        // "same" output size for stride 1; exact halving for 4x4 stride 2
        let pad = if stride == 1 { k / 2 } else { (k - stride) / 2 };
        Conv { w, b, stride, pad, sn }
    }

    fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, ctx: LayerCtx) -> Result<Var> {
        let x = if ctx.coord {
            let (n, _, h, w) = g.value(x).dims4()?;
            let one = coord_channels::<T>(h, w);
            let mut data = Vec::with_capacity(n * one.numel());
            for _ in 0..n {
                data.extend_from_slice(one.data());
            }
            let c = g.constant(Tensor::new(&[n, 2, h, w], data)?);
            g.concat_channels(x, c)?
        } else {
            x
        };
        let x = g.pad(x, self.pad, ctx.pad)?;
        let mut w = store.var(g, self.w);
        if let Some((u, v)) = self.sn {
            w = g.spectral_norm(w, store.buffers[u].value.data(), store.buffers[v].value.data())?;
        }
        let b = store.var(g, self.b);
        g.conv2d(x, w, Some(b), self.stride)
    }

    fn power_iteration<T: Real>(&self, store: &mut ParamStore<T>, steps: usize) {
        let Some((u, v)) = self.sn else { return };
        let w = store.params[self.w].value.data().to_vec();
        let mut uu = store.buffers[u].value.data().to_vec();
        let mut vv = store.buffers[v].value.data().to_vec();
        for _ in 0..steps {
            power_iteration_step(&w, &mut uu, &mut vv);
        }
        store.buffers[u].value.data_mut().copy_from_slice(&uu);
        store.buffers[v].value.data_mut().copy_from_slice(&vv);
    }
}

#[derive(Clone, Debug)]
struct Norm {
    gamma: usize,
    beta: usize,
}

impl Norm {
    fn new<T: Real>(store: &mut ParamStore<T>, name: &str, c: usize) -> Self {
        Norm {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[c], T::one())),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[c])),
        }
    }

    fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let gamma = store.var(g, self.gamma);
        let beta = store.var(g, self.beta);
        g.instance_norm(x, gamma, beta)
    }
}

/// Conv, instance norm, ReLU.
#[derive(Clone, Debug)]
struct ConvNormRelu {
    conv: Conv,
    norm: Norm,
}

impl ConvNormRelu {
    #[allow(clippy::too_many_arguments)]
    fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        coord: bool,
        rng: &mut impl Rng,
    ) -> Self {
        ConvNormRelu {
            conv: Conv::new(store, name, in_c, out_c, k, stride, coord, false, rng),
            norm: Norm::new(store, &format!("{name}.in"), out_c),
        }
    }

    fn forward<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var, ctx: LayerCtx) -> Result<Var> {
        let y = self.conv.forward(g, s, x, ctx)?;
        let y = self.norm.forward(g, s, y)?;
        Ok(g.relu(y))
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    a: ConvNormRelu,
    b: Conv,
    norm: Norm,
}

impl ResBlock {
    fn new<T: Real>(store: &mut ParamStore<T>, name: &str, c: usize, coord: bool, rng: &mut impl Rng) -> Self {
        ResBlock {
            a: ConvNormRelu::new(store, &format!("{name}.a"), c, c, 3, 1, coord, rng),
            b: Conv::new(store, &format!("{name}.b"), c, c, 3, 1, coord, false, rng),
            norm: Norm::new(store, &format!("{name}.b.in"), c),
        }
    }

    fn forward<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var, ctx: LayerCtx) -> Result<Var> {
        let y = self.a.forward(g, s, x, ctx)?;
        let y = self.b.forward(g, s, y, ctx)?;
        let y = self.norm.forward(g, s, y)?;
        g.add(x, y)
    }
}

fn ctx_of(cfg: &NetConfig) -> LayerCtx {
    LayerCtx {
        pad: cfg.padding_mode,
        coord: cfg.use_coord,
    }
}

#[derive(Clone, Debug)]
pub struct Encoder<T: Real = f32> {
    cfg: NetConfig,
    pub store: ParamStore<T>,
    stem: ConvNormRelu,
    down: [ConvNormRelu; 2],
    res: Vec<ResBlock>,
    out: Conv,
}

impl<T: Real> Encoder<T> {
    pub fn new(cfg: &NetConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.base_width;
        let co = cfg.use_coord;
        let mut s = ParamStore::new(ParamGroup::Encoder);
        let stem = ConvNormRelu::new(&mut s, "enc.stem", cfg.image_channels, w, 7, 1, co, rng);
        let down = [
            ConvNormRelu::new(&mut s, "enc.down1", w, 2 * w, 4, 2, co, rng),
            ConvNormRelu::new(&mut s, "enc.down2", 2 * w, 4 * w, 4, 2, co, rng),
        ];
        let res = (0..RESIDUAL_BLOCKS)
            .map(|i| ResBlock::new(&mut s, &format!("enc.res{i}"), 4 * w, co, rng))
            .collect();
        let out = Conv::new(&mut s, "enc.out", 4 * w, cfg.latent_channels, 3, 1, co, false, rng);
        Ok(Encoder {
            cfg: cfg.clone(),
            store: s,
            stem,
            down,
            res,
            out,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let (_, c, h, w) = g.value(x).dims4()?;
        if c != self.cfg.image_channels || h != self.cfg.image_size || w != self.cfg.image_size {
            return Err(DgadError::Shape(format!(
                "encoder expects (n, {}, {s}, {s}), got {:?}",
                self.cfg.image_channels,
                g.value(x).shape(),
                s = self.cfg.image_size
            )));
        }
        let ctx = ctx_of(&self.cfg);
        let s = &self.store;
        let mut y = self.stem.forward(g, s, x, ctx)?;
        for d in &self.down {
            y = d.forward(g, s, y, ctx)?;
        }
        for r in &self.res {
            y = r.forward(g, s, y, ctx)?;
        }
        let y = self.out.forward(g, s, y, ctx)?;
        Ok(g.tanh(y))
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_parameters()
    }
}

#[derive(Clone, Debug)]
pub struct Decoder<T: Real = f32> {
    cfg: NetConfig,
    pub store: ParamStore<T>,
    stem: ConvNormRelu,
    res: Vec<ResBlock>,
    up: [ConvNormRelu; 2],
    out: Conv,
}

impl<T: Real> Decoder<T> {
    pub fn new(cfg: &NetConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.base_width;
        let co = cfg.use_coord;
        let mut s = ParamStore::new(ParamGroup::Decoder);
        let stem = ConvNormRelu::new(&mut s, "dec.stem", cfg.latent_channels, 4 * w, 3, 1, co, rng);
        let res = (0..RESIDUAL_BLOCKS)
            .map(|i| ResBlock::new(&mut s, &format!("dec.res{i}"), 4 * w, co, rng))
            .collect();
        let up = [
            ConvNormRelu::new(&mut s, "dec.up1", 4 * w, 2 * w, 5, 1, co, rng),
            ConvNormRelu::new(&mut s, "dec.up2", 2 * w, w, 5, 1, co, rng),
        ];
        let out = Conv::new(&mut s, "dec.out", w, cfg.image_channels, 7, 1, co, false, rng);
        Ok(Decoder {
            cfg: cfg.clone(),
            store: s,
            stem,
            res,
            up,
            out,
        })
    }

    pub fn forward(&self, g: &mut Graph<T>, z: Var) -> Result<Var> {
        let (_, c, h, w) = g.value(z).dims4()?;
        let ls = self.cfg.latent_size();
        if c != self.cfg.latent_channels || h != ls || w != ls {
            return Err(DgadError::Shape(format!(
                "decoder expects (n, {}, {ls}, {ls}), got {:?}",
                self.cfg.latent_channels,
                g.value(z).shape()
            )));
        }
        let ctx = ctx_of(&self.cfg);
        let s = &self.store;
        let mut y = self.stem.forward(g, s, z, ctx)?;
        for r in &self.res {
            y = r.forward(g, s, y, ctx)?;
        }
        for u in &self.up {
            y = g.upsample2x(y)?;
            y = u.forward(g, s, y, ctx)?;
        }
        let y = self.out.forward(g, s, y, ctx)?;
        Ok(g.tanh(y))
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_parameters()
    }
}

/// Adversarial score `(n, 1)` and class logits `(n, label_dim)`.
#[derive(Clone, Copy, Debug)]
pub struct DiscriminatorOutput {
    pub adv: Var,
    pub class_logits: Var,
}

#[derive(Clone, Debug)]
struct Dense {
    w: usize,
    b: usize,
    sn: (usize, usize),
}

impl Dense {
    fn new<T: Real>(store: &mut ParamStore<T>, name: &str, i: usize, o: usize, rng: &mut impl Rng) -> Self {
        let w = store.add(format!("{name}.weight"), glorot(&[o, i], i, o, rng));
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[o]));
        let sn = init_sn_buffers(store, name, w, rng);
        Dense { w, b, sn }
    }

    fn forward<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = s.var(g, self.w);
        let w = g.spectral_norm(w, s.buffers[self.sn.0].value.data(), s.buffers[self.sn.1].value.data())?;
        let b = s.var(g, self.b);
        g.linear(x, w, Some(b))
    }

    fn as_conv(&self) -> Conv {
        Conv {
            w: self.w,
            b: self.b,
            stride: 1,
            pad: 0,
            sn: Some(self.sn),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Discriminator<T: Real = f32> {
    cfg: NetConfig,
    pub store: ParamStore<T>,
    x_path: [Conv; 2],
    joint: [Conv; 3],
    adv_head: Dense,
    cls_head: Dense,
}

impl<T: Real> Discriminator<T> {
    pub fn new(cfg: &NetConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.base_width;
        let co = cfg.use_coord;
        let mut s = ParamStore::new(ParamGroup::Discriminator);
        let x_path = [
            Conv::new(&mut s, "disc.x1", cfg.image_channels, w, 4, 2, co, true, rng),
            Conv::new(&mut s, "disc.x2", w, 2 * w, 4, 2, co, true, rng),
        ];
        let joint = [
            Conv::new(
                &mut s,
                "disc.j1",
                2 * w + cfg.latent_channels,
                4 * w,
                4,
                2,
                co,
                true,
                rng,
            ),
            Conv::new(&mut s, "disc.j2", 4 * w, 8 * w, 3, 1, co, true, rng),
            Conv::new(&mut s, "disc.j3", 8 * w, 4 * w, 3, 1, co, true, rng),
        ];
        let adv_head = Dense::new(&mut s, "disc.adv", 4 * w, 1, rng);
        let cls_head = Dense::new(&mut s, "disc.cls", 4 * w, cfg.label_dim, rng);
        Ok(Discriminator {
            cfg: cfg.clone(),
            store: s,
            x_path,
            joint,
            adv_head,
            cls_head,
        })
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var, z: Var) -> Result<DiscriminatorOutput> {
        let ctx = ctx_of(&self.cfg);
        let s = &self.store;
        let mut h = x;
        for c in &self.x_path {
            h = c.forward(g, s, h, ctx)?;
            h = g.leaky_relu(h, LEAKY_SLOPE);
        }
        let (hs, zs) = (g.value(h).shape().to_vec(), g.value(z).shape().to_vec());
        if hs.len() != 4 || zs.len() != 4 || hs[0] != zs[0] || hs[2..] != zs[2..] {
            return Err(DgadError::Shape(format!(
                "latent {zs:?} does not match downsampled image features {hs:?}"
            )));
        }
        h = g.concat_channels(h, z)?;
        for c in &self.joint {
            h = c.forward(g, s, h, ctx)?;
            h = g.leaky_relu(h, LEAKY_SLOPE);
        }
        let pooled = g.global_avg_pool(h)?;
        let adv = self.adv_head.forward(g, s, pooled)?;
        let class_logits = self.cls_head.forward(g, s, pooled)?;
        Ok(DiscriminatorOutput { adv, class_logits })
    }

    /// Refine every spectral-norm estimate by `steps` power-iteration steps.
    pub fn power_iteration(&mut self, steps: usize) {
        let layers: Vec<Conv> = self
            .x_path
            .iter()
            .chain(&self.joint)
            .cloned()
            .chain([self.adv_head.as_conv(), self.cls_head.as_conv()])
            .collect();
        for l in layers {
            l.power_iteration(&mut self.store, steps);
        }
    }

    /// Spectrally normalized weight matrices `(rows, cols)` as currently used in forward passes.
    pub fn normalized_weights(&self) -> Vec<(usize, usize, Vec<T>)> {
        let layers = self
            .x_path
            .iter()
            .chain(&self.joint)
            .cloned()
            .chain([self.adv_head.as_conv(), self.cls_head.as_conv()]);
        layers
            .map(|l| {
                let (u, v) = l.sn.expect("all discriminator layers are normalized");
                let w = &self.store.params[l.w].value;
                let rows = w.shape()[0];
                let cols = w.numel() / rows;
                let (uu, vv) = (self.store.buffers[u].value.data(), self.store.buffers[v].value.data());
                let sigma: T = (0..rows)
                    .map(|r| uu[r] * (0..cols).map(|c| w.data()[r * cols + c] * vv[c]).sum::<T>())
                    .sum();
                (rows, cols, w.data().iter().map(|&x| x / sigma).collect())
            })
            .collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_parameters()
    }
}

/// The three networks trained together.
#[derive(Clone, Debug)]
pub struct Networks<T: Real = f32> {
    pub config: NetConfig,
    pub encoder: Encoder<T>,
    pub decoder: Decoder<T>,
    pub discriminator: Discriminator<T>,
}

impl<T: Real> Networks<T> {
    pub fn new(config: &NetConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Networks {
            config: config.clone(),
            encoder: Encoder::new(config, &mut rng)?,
            decoder: Decoder::new(config, &mut rng)?,
            discriminator: Discriminator::new(config, &mut rng)?,
        })
    }

    pub fn stores(&self) -> [&ParamStore<T>; 3] {
        [&self.encoder.store, &self.decoder.store, &self.discriminator.store]
    }

    /// Inference graph in which no parameter tracks gradients.
    pub fn inference_graph() -> Graph<T> {
        let mut g = Graph::new();
        g.freeze(ParamGroup::Encoder);
        g.freeze(ParamGroup::Decoder);
        g.freeze(ParamGroup::Discriminator);
        g
    }

    pub fn encode(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Self::inference_graph();
        let xv = g.constant(x.clone());
        let z = self.encoder.forward(&mut g, xv)?;
        Ok(g.value(z).clone())
    }

    pub fn decode(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Self::inference_graph();
        let zv = g.constant(z.clone());
        let x = self.decoder.forward(&mut g, zv)?;
        Ok(g.value(x).clone())
    }

    /// `(z, x_hat, z_hat)` with `z = En(x)`, `x_hat = De(z)`, `z_hat = En(x_hat)`.
    pub fn reconstruct(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
        let mut g = Self::inference_graph();
        let xv = g.constant(x.clone());
        let z = self.encoder.forward(&mut g, xv)?;
        let xh = self.decoder.forward(&mut g, z)?;
        let zh = self.encoder.forward(&mut g, xh)?;
        Ok((g.value(z).clone(), g.value(xh).clone(), g.value(zh).clone()))
    }

    /// Class logits of `D(x, En(x))`.
    pub fn classify(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Self::inference_graph();
        let xv = g.constant(x.clone());
        let z = self.encoder.forward(&mut g, xv)?;
        let out = self.discriminator.forward(&mut g, xv, z)?;
        Ok(g.value(out.class_logits).clone())
    }

    pub fn cast<U: Real>(&self) -> Networks<U> {
        let mut out = Networks::<U>::new(&self.config, 0).expect("config already validated");
        out.encoder.store = self.encoder.store.cast();
        out.decoder.store = self.decoder.store.cast();
        out.discriminator.store = self.discriminator.store.cast();
        out
    }
}
