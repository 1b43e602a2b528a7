//! Tape-based reverse-mode differentiation over NCHW tensors.
//!
//! A [`Graph`] records every operation applied during a forward pass. Nodes are
//! appended in evaluation order, so walking the tape backwards is a valid
//! topological order for [`Graph::backward`].

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{DgadError, Result};
use crate::tensor::{matmul_into, Real, Tensor, Trans};

/// Owner of a parameter. Gradient routing is expressed by freezing whole groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    Encoder,
    Decoder,
    Discriminator,
}

pub type ParamKey = (ParamGroup, usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Border handling for [`Graph::pad`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PadMode {
    /// Edge-inclusive mirror: `[a, b, c]` padded by 1 is `[a, a, b, c, c]`.
    #[default]
    Symmetric,
    Zero,
}

/// How the compactness statistic pools a latent map before the batch variance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CompactnessPooling {
    /// Spatial mean per channel, one value per channel.
    #[default]
    PerChannelMean,
    /// Mean across channels, one value per spatial position.
    AcrossChannels,
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
    },
    Pad {
        x: Var,
        rows: Vec<Option<usize>>,
        cols: Vec<Option<usize>>,
    },
    InstanceNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Relu(Var),
    LeakyRelu(Var, T),
    Tanh(Var),
    Add(Var, Var),
    ConcatChannels(Var, Var),
    Upsample2x {
        x: Var,
        rows: Vec<(usize, usize, T)>,
        cols: Vec<(usize, usize, T)>,
    },
    GlobalAvgPool(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    SpectralNorm {
        w: Var,
        u: Vec<T>,
        v: Vec<T>,
        sigma: T,
    },
    L1(Var, Var),
    BlockCrossEntropy {
        logits: Var,
        targets: Tensor<T>,
        blocks: Vec<usize>,
        probs: Vec<T>,
    },
    Hinge {
        x: Var,
        sign: T,
    },
    Mean(Var),
    Scale(Var, T),
    Compactness {
        z: Var,
        pooling: CompactnessPooling,
        centered: Vec<T>,
        features: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    params: BTreeMap<ParamKey, Var>,
    frozen: BTreeSet<ParamGroup>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward pass.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: BTreeMap<ParamKey, Var>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, key: ParamKey) -> Option<&Tensor<T>> {
        self.params.get(&key).and_then(|&v| self.get(v))
    }

    /// Squared L2 norm of all gradients reaching parameters of `group`.
    pub fn group_sq_norm(&self, group: ParamGroup) -> T {
        self.params
            .iter()
            .filter(|(k, _)| k.0 == group)
            .filter_map(|(_, &v)| self.get(v))
            .map(|g| g.sq_norm())
            .sum()
    }

    pub fn into_param_grads(mut self) -> BTreeMap<ParamKey, Tensor<T>> {
        let mut out = BTreeMap::new();
        for (k, v) in &self.params {
            if let Some(g) = self.grads[v.0].take() {
                out.insert(*k, g);
            }
        }
        out
    }
}

fn shape_err<V>(msg: String) -> Result<V> {
    Err(DgadError::Shape(msg))
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: BTreeMap::new(),
            frozen: BTreeSet::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Parameters of a frozen group enter the graph as constants.
    pub fn freeze(&mut self, group: ParamGroup) {
        self.frozen.insert(group);
    }

    pub fn unfreeze(&mut self, group: ParamGroup) {
        self.frozen.remove(&group);
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked, for probing gradients w.r.t. inputs.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Register (or fetch the cached leaf for) a parameter.
    pub fn param(&mut self, key: ParamKey, t: &Tensor<T>) -> Var {
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let trainable = !self.frozen.contains(&key.0);
        let v = self.push(t.clone(), Op::Leaf, trainable);
        if trainable {
            self.params.insert(key, v);
        }
        v
    }

    /// Same value, no gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let (n, c, h, wd) = self.value(x).dims4()?;
        let (o, c2, kh, kw) = self.value(w).dims4()?;
        if c != c2 || h < kh || wd < kw || stride == 0 {
            return shape_err(format!(
                "conv2d: input {:?} incompatible with kernel {:?} stride {}",
                self.value(x).shape(),
                self.value(w).shape(),
                stride
            ));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [o] {
                return shape_err(format!("conv2d bias shape {:?}", self.value(b).shape()));
            }
        }
        let ho = (h - kh) / stride + 1;
        let wo = (wd - kw) / stride + 1;
        let ckk = c * kh * kw;
        let hw = ho * wo;
        // one GEMM over the whole batch: columns are laid out as (ckk, n * hw)
        let nhw = n * hw;
        let mut col = vec![T::zero(); ckk * nhw];
        let mut tmp = vec![T::zero(); o * nhw];
        let mut out = vec![T::zero(); n * o * hw];
        {
            let xv = self.value(x);
            let geom = ColGeom {
                c,
                h,
                w: wd,
                kh,
                kw,
                stride,
                ho,
                wo,
                stride_row: nhw,
            };
            for ni in 0..n {
                im2col(xv.sample(ni), &geom, ni * hw, &mut col);
            }
            matmul_into(
                o,
                ckk,
                nhw,
                self.value(w).data(),
                Trans::No,
                &col,
                Trans::No,
                T::zero(),
                &mut tmp,
            );
            let bv = b.map(|b| self.value(b).data());
            for ni in 0..n {
                for oi in 0..o {
                    let bias = bv.map_or(T::zero(), |bv| bv[oi]);
                    let src = &tmp[oi * nhw + ni * hw..oi * nhw + (ni + 1) * hw];
                    let dst = &mut out[(ni * o + oi) * hw..(ni * o + oi + 1) * hw];
                    for (d, &v) in dst.iter_mut().zip(src) {
                        *d = v + bias;
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let value = Tensor::new(&[n, o, ho, wo], out)?;
        Ok(self.push(value, Op::Conv2d { x, w, b, stride }, rg))
    }

    /// Pad both spatial axes by `amount` on every side.
    pub fn pad(&mut self, x: Var, amount: usize, mode: PadMode) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if amount > h || amount > w {
            return Err(DgadError::InvalidArgument(format!(
                "pad amount {amount} exceeds spatial size {h}x{w}"
            )));
        }
        if amount == 0 {
            return Ok(x);
        }
        let rows = pad_index(h, amount, mode);
        let cols = pad_index(w, amount, mode);
        let (ph, pw) = (rows.len(), cols.len());
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); n * c * ph * pw];
        for plane in 0..n * c {
            let src = &xv[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * ph * pw..(plane + 1) * ph * pw];
            for (py, ry) in rows.iter().enumerate() {
                if let Some(sy) = ry {
                    for (px, rx) in cols.iter().enumerate() {
                        if let Some(sx) = rx {
                            dst[py * pw + px] = src[sy * w + sx];
                        }
                    }
                }
            }
        }
        let rg = self.rg(x);
        let value = Tensor::new(&[n, c, ph, pw], out)?;
        Ok(self.push(value, Op::Pad { x, rows, cols }, rg))
    }

    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return shape_err(format!("instance norm affine params must have shape [{c}]"));
        }
        let eps = T::lit(1e-5);
        let hw = h * w;
        let hw_t = T::from_usize(hw).unwrap();
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        let mut inv_std = vec![T::zero(); n * c];
        for plane in 0..n * c {
            let ch = plane % c;
            let s = &xv[plane * hw..(plane + 1) * hw];
            let mean = s.iter().copied().sum::<T>() / hw_t;
            let var = s.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / hw_t;
            let is = T::one() / (var + eps).sqrt();
            inv_std[plane] = is;
            for i in 0..hw {
                let xh = (s[i] - mean) * is;
                xhat[plane * hw + i] = xh;
                out[plane * hw + i] = xh * gv[ch] + bv[ch];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let value = Tensor::new(&[n, c, h, w], out)?;
        Ok(self.push(
            value,
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(T::zero()));
        let rg = self.rg(x);
        self.push(value, Op::Relu(x), rg)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let s = T::lit(slope);
        let value = self.value(x).map(|v| if v > T::zero() { v } else { v * s });
        let rg = self.rg(x);
        self.push(value, Op::LeakyRelu(x, s), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.tanh());
        let rg = self.rg(x);
        self.push(value, Op::Tanh(x), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |p, q| p + q)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::lit(c);
        let value = self.value(x).map(|v| v * c);
        let rg = self.rg(x);
        self.push(value, Op::Scale(x, c), rg)
    }

    /// `sum_i w_i * x_i` over same-shaped terms.
    pub fn weighted_sum(&mut self, terms: &[(f64, Var)]) -> Result<Var> {
        let (&(w0, first), rest) = terms
            .split_first()
            .ok_or_else(|| DgadError::InvalidArgument("empty weighted sum".into()))?;
        let mut acc = self.scale(first, w0);
        for &(w, v) in rest {
            let s = self.scale(v, w);
            acc = self.add(acc, s)?;
        }
        Ok(acc)
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, c1, h, w) = self.value(a).dims4()?;
        let (n2, c2, h2, w2) = self.value(b).dims4()?;
        if n != n2 || h != h2 || w != w2 {
            return shape_err(format!(
                "concat_channels: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            ));
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * (c1 + c2) * hw);
        for ni in 0..n {
            out.extend_from_slice(self.value(a).sample(ni));
            out.extend_from_slice(self.value(b).sample(ni));
        }
        let rg = self.rg(a) || self.rg(b);
        let value = Tensor::new(&[n, c1 + c2, h, w], out)?;
        Ok(self.push(value, Op::ConcatChannels(a, b), rg))
    }

    /// Bilinear 2x upsampling with half-pixel centers and edge clamping.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let rows = bilinear_taps::<T>(h);
        let cols = bilinear_taps::<T>(w);
        let (oh, ow) = (2 * h, 2 * w);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); n * c * oh * ow];
        let mut tmp = vec![T::zero(); h * ow];
        for plane in 0..n * c {
            let src = &xv[plane * h * w..(plane + 1) * h * w];
            for y in 0..h {
                for (ox, &(i0, i1, f)) in cols.iter().enumerate() {
                    tmp[y * ow + ox] = src[y * w + i0] * (T::one() - f) + src[y * w + i1] * f;
                }
            }
            let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
            for (oy, &(i0, i1, f)) in rows.iter().enumerate() {
                for ox in 0..ow {
                    dst[oy * ow + ox] = tmp[i0 * ow + ox] * (T::one() - f) + tmp[i1 * ow + ox] * f;
                }
            }
        }
        let rg = self.rg(x);
        let value = Tensor::new(&[n, c, oh, ow], out)?;
        Ok(self.push(value, Op::Upsample2x { x, rows, cols }, rg))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let hw = h * w;
        let inv = T::one() / T::from_usize(hw).unwrap();
        let xv = self.value(x).data();
        let out = (0..n * c)
            .map(|p| xv[p * hw..(p + 1) * hw].iter().copied().sum::<T>() * inv)
            .collect();
        let rg = self.rg(x);
        let value = Tensor::new(&[n, c], out)?;
        Ok(self.push(value, Op::GlobalAvgPool(x), rg))
    }

    /// `x (n, k) * w^T (k, o) + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.value(x).shape(), self.value(w).shape());
        let (n, k, o) = match (xs, ws) {
            ([n, k], [o, k2]) if k == k2 => (*n, *k, *o),
            _ => return shape_err(format!("linear: input {xs:?} weight {ws:?}")),
        };
        let mut out = vec![T::zero(); n * o];
        matmul_into(
            n,
            k,
            o,
            self.value(x).data(),
            Trans::No,
            self.value(w).data(),
            Trans::Yes,
            T::zero(),
            &mut out,
        );
        if let Some(b) = b {
            let bv = self.value(b).data();
            if bv.len() != o {
                return shape_err(format!("linear bias length {} != {o}", bv.len()));
            }
            for row in out.chunks_mut(o) {
                for (v, &bb) in row.iter_mut().zip(bv) {
                    *v += bb;
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let value = Tensor::new(&[n, o], out)?;
        Ok(self.push(value, Op::Linear { x, w, b }, rg))
    }

    /// `w / sigma` with `sigma = u^T W v`, `W` being `w` flattened to `(rows, rest)`.
    /// `u` and `v` are treated as constants.
    pub fn spectral_norm(&mut self, w: Var, u: &[T], v: &[T]) -> Result<Var> {
        let wv = self.value(w);
        let rows = wv.shape()[0];
        let cols = wv.numel() / rows;
        if u.len() != rows || v.len() != cols {
            return shape_err(format!(
                "spectral_norm: u/v lengths {}/{} for weight {:?}",
                u.len(),
                v.len(),
                wv.shape()
            ));
        }
        let sigma = bilinear_form(wv.data(), u, v);
        if sigma.abs().partial_cmp(&T::zero()) != Some(std::cmp::Ordering::Greater) {
            return Err(DgadError::InvalidArgument(
                "spectral_norm: degenerate singular value estimate".into(),
            ));
        }
        let value = wv.map(|x| x / sigma);
        let rg = self.rg(w);
        Ok(self.push(
            value,
            Op::SpectralNorm {
                w,
                u: u.to_vec(),
                v: v.to_vec(),
                sigma,
            },
            rg,
        ))
    }

    /// Mean absolute difference over all elements.
    pub fn l1(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.value(a).zip_map(self.value(b), |p, q| (p - q).abs())?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(d.mean()), Op::L1(a, b), rg))
    }

    /// Mean over the batch of summed per-block softmax cross-entropies.
    /// `blocks` lists block widths; a one-hot label is a single block.
    pub fn block_cross_entropy(&mut self, logits: Var, targets: Tensor<T>, blocks: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (n, l) = match lv.shape() {
            [n, l] => (*n, *l),
            s => return shape_err(format!("cross entropy logits must be rank 2, got {s:?}")),
        };
        if targets.shape() != lv.shape() || blocks.iter().sum::<usize>() != l {
            return shape_err(format!(
                "cross entropy: logits {:?}, targets {:?}, blocks {:?}",
                lv.shape(),
                targets.shape(),
                blocks
            ));
        }
        let probs = block_softmax(lv.data(), l, blocks);
        let mut loss = T::zero();
        for (p, t) in probs.iter().zip(targets.data()) {
            if *t != T::zero() {
                loss -= *t * p.max(T::min_positive_value()).ln();
            }
        }
        let loss = loss / T::from_usize(n).unwrap();
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BlockCrossEntropy {
                logits,
                targets,
                blocks: blocks.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// `mean(max(0, 1 + sign * x))`.
    pub fn hinge(&mut self, x: Var, sign: f64) -> Var {
        let s = T::lit(sign);
        let xv = self.value(x);
        let loss = xv.data().iter().map(|&v| (T::one() + s * v).max(T::zero())).sum::<T>()
            / T::from_usize(xv.numel()).unwrap();
        let rg = self.rg(x);
        self.push(Tensor::scalar(loss), Op::Hinge { x, sign: s }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let m = self.value(x).mean();
        let rg = self.rg(x);
        self.push(Tensor::scalar(m), Op::Mean(x), rg)
    }

    /// Square root of the mean (over pooled features) batch variance of pooled latents.
    pub fn compactness(&mut self, z: Var, pooling: CompactnessPooling) -> Result<Var> {
        let (n, c, h, w) = self.value(z).dims4()?;
        if n < 2 {
            return Err(DgadError::InvalidArgument(
                "compactness needs a batch of at least 2 encodings".into(),
            ));
        }
        let hw = h * w;
        let zv = self.value(z).data();
        let (features, mut f) = match pooling {
            CompactnessPooling::PerChannelMean => {
                let inv = T::one() / T::from_usize(hw).unwrap();
                let f: Vec<T> = (0..n * c)
                    .map(|p| zv[p * hw..(p + 1) * hw].iter().copied().sum::<T>() * inv)
                    .collect();
                (c, f)
            }
            CompactnessPooling::AcrossChannels => {
                let inv = T::one() / T::from_usize(c).unwrap();
                let mut f = vec![T::zero(); n * hw];
                for ni in 0..n {
                    for ci in 0..c {
                        let s = &zv[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
                        for (acc, &v) in f[ni * hw..(ni + 1) * hw].iter_mut().zip(s) {
                            *acc += v;
                        }
                    }
                }
                f.iter_mut().for_each(|v| *v *= inv);
                (hw, f)
            }
        };
        let n_t = T::from_usize(n).unwrap();
        for d in 0..features {
            // shift by the first sample so identical encodings center to exactly zero
            let reference = f[d];
            for i in 0..n {
                f[i * features + d] -= reference;
            }
            let mu = (0..n).map(|i| f[i * features + d]).sum::<T>() / n_t;
            for i in 0..n {
                f[i * features + d] -= mu;
            }
        }
        let var = f.iter().map(|&v| v * v).sum::<T>() / (n_t * T::from_usize(features).unwrap());
        let rg = self.rg(z);
        Ok(self.push(
            Tensor::scalar(var.sqrt()),
            Op::Compactness {
                z,
                pooling,
                centered: f,
                features,
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return shape_err(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backprop_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            &Op::Conv2d { x, w, b, stride } => {
                let xv = self.value(x);
                let wv = self.value(w);
                let (n, c, h, wd) = xv.dims4()?;
                let (o, _, kh, kw) = wv.dims4()?;
                let (_, _, ho, wo) = node.value.dims4()?;
                let ckk = c * kh * kw;
                let hw = ho * wo;
                let gd = g.data();
                if let Some(b) = b.filter(|&b| self.rg(b)) {
                    let mut db = vec![T::zero(); o];
                    for ni in 0..n {
                        for (oi, d) in db.iter_mut().enumerate() {
                            let base = (ni * o + oi) * hw;
                            *d += gd[base..base + hw].iter().copied().sum::<T>();
                        }
                    }
                    self.accumulate(grads, b, Tensor::new(&[o], db)?);
                }
                let need_w = self.rg(w);
                let need_x = self.rg(x);
                if !need_w && !need_x {
                    return Ok(());
                }
                let nhw = n * hw;
                let geom = ColGeom {
                    c,
                    h,
                    w: wd,
                    kh,
                    kw,
                    stride,
                    ho,
                    wo,
                    stride_row: nhw,
                };
                // gradient regrouped as (o, n * hw) to match the forward column layout
                let mut gt = vec![T::zero(); o * nhw];
                for ni in 0..n {
                    for oi in 0..o {
                        gt[oi * nhw + ni * hw..oi * nhw + (ni + 1) * hw]
                            .copy_from_slice(&gd[(ni * o + oi) * hw..(ni * o + oi + 1) * hw]);
                    }
                }
                let mut col = vec![T::zero(); ckk * nhw];
                let mut dw = if need_w { vec![T::zero(); o * ckk] } else { Vec::new() };
                let mut dx = if need_x {
                    vec![T::zero(); xv.numel()]
                } else {
                    Vec::new()
                };
                if need_w {
                    for ni in 0..n {
                        im2col(xv.sample(ni), &geom, ni * hw, &mut col);
                    }
                    matmul_into(o, nhw, ckk, &gt, Trans::No, &col, Trans::Yes, T::zero(), &mut dw);
                }
                if need_x {
                    matmul_into(ckk, o, nhw, wv.data(), Trans::Yes, &gt, Trans::No, T::zero(), &mut col);
                    let chw = c * h * wd;
                    for ni in 0..n {
                        col2im(&col, &geom, ni * hw, &mut dx[ni * chw..(ni + 1) * chw]);
                    }
                }
                if need_w {
                    self.accumulate(grads, w, Tensor::new(wv.shape(), dw)?);
                }
                if need_x {
                    self.accumulate(grads, x, Tensor::new(xv.shape(), dx)?);
                }
            }
            Op::Pad { x, rows, cols } => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let (ph, pw) = (rows.len(), cols.len());
                let mut dx = vec![T::zero(); n * c * h * w];
                let gd = g.data();
                for plane in 0..n * c {
                    let src = &gd[plane * ph * pw..(plane + 1) * ph * pw];
                    let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
                    for (py, ry) in rows.iter().enumerate() {
                        if let Some(sy) = ry {
                            for (px, rx) in cols.iter().enumerate() {
                                if let Some(sx) = rx {
                                    dst[sy * w + sx] += src[py * pw + px];
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(&[n, c, h, w], dx)?);
            }
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let hw = h * w;
                let hw_t = T::from_usize(hw).unwrap();
                let gv = self.value(*gamma).data();
                let gd = g.data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut dx = vec![T::zero(); n * c * hw];
                for plane in 0..n * c {
                    let ch = plane % c;
                    let dy = &gd[plane * hw..(plane + 1) * hw];
                    let xh = &xhat[plane * hw..(plane + 1) * hw];
                    let mut sum_dy = T::zero();
                    let mut sum_dy_xh = T::zero();
                    for k in 0..hw {
                        sum_dy += dy[k];
                        sum_dy_xh += dy[k] * xh[k];
                    }
                    dgamma[ch] += sum_dy_xh;
                    dbeta[ch] += sum_dy;
                    let scale = gv[ch] * inv_std[plane] / hw_t;
                    for k in 0..hw {
                        dx[plane * hw + k] = scale * (hw_t * dy[k] - sum_dy - xh[k] * sum_dy_xh);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(&[n, c, h, w], dx)?);
                self.accumulate(grads, *gamma, Tensor::new(&[c], dgamma)?);
                self.accumulate(grads, *beta, Tensor::new(&[c], dbeta)?);
            }
            Op::Relu(x) => {
                let dx = node
                    .value
                    .zip_map(g, |y, d| if y > T::zero() { d } else { T::zero() })?;
                self.accumulate(grads, *x, dx);
            }
            Op::LeakyRelu(x, s) => {
                let s = *s;
                let dx = self
                    .value(*x)
                    .zip_map(g, |v, d| if v > T::zero() { d } else { d * s })?;
                self.accumulate(grads, *x, dx);
            }
            Op::Tanh(x) => {
                let dx = node.value.zip_map(g, |y, d| d * (T::one() - y * y))?;
                self.accumulate(grads, *x, dx);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Scale(x, c) => {
                let c = *c;
                self.accumulate(grads, *x, g.map(|d| d * c));
            }
            Op::ConcatChannels(a, b) => {
                let (n, c1, h, w) = self.value(*a).dims4()?;
                let c2 = self.value(*b).dims4()?.1;
                let hw = h * w;
                let mut da = Vec::with_capacity(n * c1 * hw);
                let mut db = Vec::with_capacity(n * c2 * hw);
                for ni in 0..n {
                    let s = g.sample(ni);
                    da.extend_from_slice(&s[..c1 * hw]);
                    db.extend_from_slice(&s[c1 * hw..]);
                }
                self.accumulate(grads, *a, Tensor::new(&[n, c1, h, w], da)?);
                self.accumulate(grads, *b, Tensor::new(&[n, c2, h, w], db)?);
            }
            Op::Upsample2x { x, rows, cols } => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let (oh, ow) = (2 * h, 2 * w);
                let gd = g.data();
                let mut dx = vec![T::zero(); n * c * h * w];
                let mut tmp = vec![T::zero(); h * ow];
                for plane in 0..n * c {
                    tmp.iter_mut().for_each(|v| *v = T::zero());
                    let src = &gd[plane * oh * ow..(plane + 1) * oh * ow];
                    for (oy, &(i0, i1, f)) in rows.iter().enumerate() {
                        for ox in 0..ow {
                            let d = src[oy * ow + ox];
                            tmp[i0 * ow + ox] += d * (T::one() - f);
                            tmp[i1 * ow + ox] += d * f;
                        }
                    }
                    let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
                    for y in 0..h {
                        for (ox, &(i0, i1, f)) in cols.iter().enumerate() {
                            let d = tmp[y * ow + ox];
                            dst[y * w + i0] += d * (T::one() - f);
                            dst[y * w + i1] += d * f;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(&[n, c, h, w], dx)?);
            }
            Op::GlobalAvgPool(x) => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let hw = h * w;
                let inv = T::one() / T::from_usize(hw).unwrap();
                let gd = g.data();
                let dx = Tensor::from_fn(&[n, c, h, w], |i| gd[i / hw] * inv);
                self.accumulate(grads, *x, dx);
            }
            &Op::Linear { x, w, b } => {
                let xv = self.value(x);
                let wv = self.value(w);
                let (n, k) = (xv.shape()[0], xv.shape()[1]);
                let o = wv.shape()[0];
                if self.rg(x) {
                    let mut dx = vec![T::zero(); n * k];
                    matmul_into(n, o, k, g.data(), Trans::No, wv.data(), Trans::No, T::zero(), &mut dx);
                    self.accumulate(grads, x, Tensor::new(&[n, k], dx)?);
                }
                if self.rg(w) {
                    let mut dw = vec![T::zero(); o * k];
                    matmul_into(o, n, k, g.data(), Trans::Yes, xv.data(), Trans::No, T::zero(), &mut dw);
                    self.accumulate(grads, w, Tensor::new(&[o, k], dw)?);
                }
                if let Some(b) = b {
                    let mut db = vec![T::zero(); o];
                    for row in g.data().chunks(o) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, b, Tensor::new(&[o], db)?);
                }
            }
            Op::SpectralNorm { w, u, v, sigma } => {
                let wv = self.value(*w);
                let cols = v.len();
                let inner: T = g.data().iter().zip(node.value.data()).map(|(&a, &b)| a * b).sum();
                let sigma = *sigma;
                let dw = Tensor::from_fn(wv.shape(), |idx| {
                    let (r, cc) = (idx / cols, idx % cols);
                    (g.data()[idx] - inner * u[r] * v[cc]) / sigma
                });
                self.accumulate(grads, *w, dw);
            }
            Op::L1(a, b) => {
                let av = self.value(*a);
                let inv = T::one() / T::from_usize(av.numel()).unwrap();
                let d = g.item() * inv;
                let sgn = av.zip_map(self.value(*b), |p, q| {
                    if p > q {
                        d
                    } else if p < q {
                        -d
                    } else {
                        T::zero()
                    }
                })?;
                if self.rg(*b) {
                    self.accumulate(grads, *b, sgn.map(|v| -v));
                }
                self.accumulate(grads, *a, sgn);
            }
            Op::BlockCrossEntropy {
                logits,
                targets,
                blocks,
                probs,
            } => {
                let shape = targets.shape();
                let (n, l) = (shape[0], shape[1]);
                let scale = g.item() / T::from_usize(n).unwrap();
                let td = targets.data();
                let mut dl = vec![T::zero(); n * l];
                for row in 0..n {
                    let mut start = 0;
                    for &bw in blocks {
                        let r = row * l + start..row * l + start + bw;
                        let mass: T = td[r.clone()].iter().copied().sum();
                        for k in r {
                            dl[k] = (probs[k] * mass - td[k]) * scale;
                        }
                        start += bw;
                    }
                }
                self.accumulate(grads, *logits, Tensor::new(shape, dl)?);
            }
            Op::Hinge { x, sign } => {
                let xv = self.value(*x);
                let d = g.item() / T::from_usize(xv.numel()).unwrap();
                let s = *sign;
                let dx = xv.map(|v| if T::one() + s * v > T::zero() { s * d } else { T::zero() });
                self.accumulate(grads, *x, dx);
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                let d = g.item() / T::from_usize(xv.numel()).unwrap();
                self.accumulate(grads, *x, Tensor::full(xv.shape(), d));
            }
            Op::Compactness {
                z,
                pooling,
                centered,
                features,
            } => {
                let (n, c, h, w) = self.value(*z).dims4()?;
                let hw = h * w;
                let out = node.value.item();
                if out <= T::zero() {
                    // sqrt is not differentiable at 0; a collapsed batch contributes no gradient
                    self.accumulate(grads, *z, Tensor::zeros(&[n, c, h, w]));
                    return Ok(());
                }
                let nd = T::from_usize(n * features).unwrap();
                // d out / d f = (f - mu) / (N * D * out)
                let k = g.item() / (nd * out);
                let df: Vec<T> = centered.iter().map(|&v| v * k).collect();
                let dz = match pooling {
                    CompactnessPooling::PerChannelMean => {
                        let inv = T::one() / T::from_usize(hw).unwrap();
                        Tensor::from_fn(&[n, c, h, w], |i| df[i / hw] * inv)
                    }
                    CompactnessPooling::AcrossChannels => {
                        let inv = T::one() / T::from_usize(c).unwrap();
                        Tensor::from_fn(&[n, c, h, w], |i| {
                            let ni = i / (c * hw);
                            df[ni * hw + i % hw] * inv
                        })
                    }
                };
                self.accumulate(grads, *z, dz);
            }
        }
        Ok(())
    }
}

/// Source index per padded position, `None` for zero fill.
pub(crate) fn pad_index(len: usize, amount: usize, mode: PadMode) -> Vec<Option<usize>> {
    let len_i = len as isize;
    (0..len + 2 * amount)
        .map(|p| {
            let q = p as isize - amount as isize;
            if (0..len_i).contains(&q) {
                Some(q as usize)
            } else {
                match mode {
                    PadMode::Zero => None,
                    PadMode::Symmetric if q < 0 => Some((-q - 1) as usize),
                    PadMode::Symmetric => Some((2 * len_i - q - 1) as usize),
                }
            }
        })
        .collect()
}

fn bilinear_taps<T: Real>(len: usize) -> Vec<(usize, usize, T)> {
    (0..2 * len)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            (i0, i1, T::lit(src - i0 as f64))
        })
        .collect()
}

pub(crate) fn block_softmax<T: Real>(logits: &[T], width: usize, blocks: &[usize]) -> Vec<T> {
    let mut out = vec![T::zero(); logits.len()];
    for (row_in, row_out) in logits.chunks(width).zip(out.chunks_mut(width)) {
        let mut start = 0;
        for &bw in blocks {
            let seg = &row_in[start..start + bw];
            let m = seg.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for (o, &v) in row_out[start..start + bw].iter_mut().zip(seg) {
                *o = (v - m).exp();
                total += *o;
            }
            for o in &mut row_out[start..start + bw] {
                *o /= total;
            }
            start += bw;
        }
    }
    out
}

fn bilinear_form<T: Real>(w: &[T], u: &[T], v: &[T]) -> T {
    let cols = v.len();
    u.iter()
        .enumerate()
        .map(|(r, &ur)| {
            ur * w[r * cols..(r + 1) * cols]
                .iter()
                .zip(v)
                .map(|(&a, &b)| a * b)
                .sum::<T>()
        })
        .sum()
}

/// Convolution geometry for column buffers whose rows hold `stride_row` entries.
struct ColGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    ho: usize,
    wo: usize,
    stride_row: usize,
}

/// Unfold one `(c, h, w)` sample into columns `offset..offset + ho * wo` of `col`.
fn im2col<T: Real>(x: &[T], g: &ColGeom, offset: usize, col: &mut [T]) {
    let (h, w, wo) = (g.h, g.w, g.wo);
    for ci in 0..g.c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * g.stride_row + offset..row * g.stride_row + offset + g.ho * wo];
                for oy in 0..g.ho {
                    let src = &plane[(oy * g.stride + ki) * w..(oy * g.stride + ki + 1) * w];
                    let d = &mut dst[oy * wo..(oy + 1) * wo];
                    if g.stride == 1 {
                        d.copy_from_slice(&src[kj..kj + wo]);
                    } else {
                        for (ox, v) in d.iter_mut().enumerate() {
                            *v = src[ox * g.stride + kj];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulate columns back into one sample.
fn col2im<T: Real>(col: &[T], g: &ColGeom, offset: usize, x: &mut [T]) {
    let (h, w, wo) = (g.h, g.w, g.wo);
    for ci in 0..g.c {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &col[row * g.stride_row + offset..row * g.stride_row + offset + g.ho * wo];
                for oy in 0..g.ho {
                    let base = (oy * g.stride + ki) * w + kj;
                    let s = &src[oy * wo..(oy + 1) * wo];
                    if g.stride == 1 {
                        for (d, &v) in plane[base..base + wo].iter_mut().zip(s) {
                            *d += v;
                        }
                    } else {
                        for (ox, &v) in s.iter().enumerate() {
                            plane[base + ox * g.stride] += v;
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symmetric_pad_row_matches_reflect_oracle() {
        let idx = pad_index(3, 1, PadMode::Symmetric);
        assert_eq!(idx, vec![Some(0), Some(0), Some(1), Some(2), Some(2)]);
        let idx = pad_index(3, 1, PadMode::Zero);
        assert_eq!(idx, vec![None, Some(0), Some(1), Some(2), None]);
    }

    #[test]
    fn pad_rejects_amount_beyond_size() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, 1, 2, 2]));
        assert!(g.pad(x, 3, PadMode::Zero).is_err());
        assert!(g.pad(x, 2, PadMode::Symmetric).is_ok());
    }

    #[test]
    fn conv2d_matches_direct_sum() {
        let mut g = Graph::<f64>::new();
        let xt = Tensor::from_fn(&[2, 2, 5, 5], |i| ((i * 7) % 11) as f64 - 5.0);
        let wt = Tensor::from_fn(&[3, 2, 3, 3], |i| ((i * 5) % 7) as f64 * 0.1 - 0.3);
        let bt = Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let x = g.constant(xt.clone());
        let w = g.constant(wt.clone());
        let b = g.constant(bt.clone());
        let y = g.conv2d(x, w, Some(b), 2).unwrap();
        let yv = g.value(y);
        assert_eq!(yv.shape(), &[2, 3, 2, 2]);
        for n in 0..2 {
            for o in 0..3 {
                for oy in 0..2 {
                    for ox in 0..2 {
                        let mut s = bt.data()[o];
                        for c in 0..2 {
                            for i in 0..3 {
                                for j in 0..3 {
                                    s += xt.data()[((n * 2 + c) * 5 + oy * 2 + i) * 5 + ox * 2 + j]
                                        * wt.data()[((o * 2 + c) * 3 + i) * 3 + j];
                                }
                            }
                        }
                        let got = yv.data()[((n * 3 + o) * 2 + oy) * 2 + ox];
                        assert!((got - s).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn upsample_of_constant_is_constant() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[1, 1, 3, 3], 2.5));
        let y = g.upsample2x(x).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 6, 6]);
        assert!(g.value(y).data().iter().all(|&v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn frozen_group_receives_no_gradient() {
        let mut g = Graph::<f64>::new();
        g.freeze(ParamGroup::Discriminator);
        let w = Tensor::full(&[1, 2], 1.0);
        let a = g.param((ParamGroup::Encoder, 0), &w);
        let d = g.param((ParamGroup::Discriminator, 0), &w);
        let s = g.add(a, d).unwrap();
        let m = g.mean(s);
        let grads = g.backward(m).unwrap();
        assert!(grads.param((ParamGroup::Encoder, 0)).is_some());
        assert!(grads.param((ParamGroup::Discriminator, 0)).is_none());
        assert_eq!(grads.group_sq_norm(ParamGroup::Discriminator), 0.0);
    }

    #[test]
    fn compactness_rejects_single_sample() {
        let mut g = Graph::<f64>::new();
        let z = g.constant(Tensor::zeros(&[1, 2, 2, 2]));
        assert!(g.compactness(z, CompactnessPooling::PerChannelMean).is_err());
    }
}
