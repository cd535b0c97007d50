//! Trainable layers built on the tape: linear maps, convolutions over
//! `(t, h, w)` volumes, and attention.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use rand::Rng;

use super::array::Tensor;
use super::graph::{Graph, Var, GATHER_ZERO};
use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};

/// Affine map `x·W + b` over rows.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Gaussian weights with std `1/sqrt(in_dim)`, zero bias.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let std = 1.0 / (in_dim as f64).sqrt();
        Self::with_std(store, name, in_dim, out_dim, std, rng)
    }

    pub fn with_std<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::randn(&[in_dim, out_dim], std, rng),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]));
        Self {
            weight,
            bias: Some(bias),
            in_dim,
            out_dim,
        }
    }

    /// All-zero weights and bias.
    pub fn zeros(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), Tensor::zeros(&[in_dim, out_dim]));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]));
        Self {
            weight,
            bias: Some(bias),
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Extents of a `(time, height, width)` volume stored as rows of a
/// `(t·h·w) × channels` matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Volume {
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl Volume {
    pub fn new(t: usize, h: usize, w: usize) -> Self {
        Self { t, h, w }
    }

    /// A 1-D sequence of `len` steps.
    pub fn seq(len: usize) -> Self {
        Self { t: len, h: 1, w: 1 }
    }

    pub fn count(&self) -> usize {
        self.t * self.h * self.w
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvSpec {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvSpec {
    /// Temporal 1-D kernel.
    pub fn temporal(kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            kernel: [kernel, 1, 1],
            stride: [stride, 1, 1],
            pad: [pad, 0, 0],
        }
    }

    /// Per-frame 2-D kernel.
    pub fn spatial(kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            kernel: [1, kernel, kernel],
            stride: [1, stride, stride],
            pad: [0, pad, pad],
        }
    }

    pub fn output(&self, v: Volume) -> Result<Volume> {
        let ext = [v.t, v.h, v.w];
        let mut out = [0usize; 3];
        for a in 0..3 {
            let padded = ext[a] + 2 * self.pad[a];
            if padded < self.kernel[a] || self.stride[a] == 0 {
                return Err(Error::shape(format!(
                    "conv kernel {:?} does not fit volume {v:?}",
                    self.kernel
                )));
            }
            out[a] = (padded - self.kernel[a]) / self.stride[a] + 1;
        }
        Ok(Volume::new(out[0], out[1], out[2]))
    }

    pub fn taps(&self) -> usize {
        self.kernel.iter().product()
    }
}

/// Index map turning a `(t·h·w) × c` volume into its
/// `(out positions) × (taps·c)` patch matrix; padding reads as zero.
pub fn im2col_index(v: Volume, channels: usize, spec: &ConvSpec) -> Result<(Vec<u32>, Volume)> {
    let o = spec.output(v)?;
    let [kt, kh, kw] = spec.kernel;
    let mut idx = Vec::with_capacity(o.count() * spec.taps() * channels);
    for ot in 0..o.t {
        for oh in 0..o.h {
            for ow in 0..o.w {
                for dt in 0..kt {
                    let it = (ot * spec.stride[0] + dt) as isize - spec.pad[0] as isize;
                    for dh in 0..kh {
                        let ih = (oh * spec.stride[1] + dh) as isize - spec.pad[1] as isize;
                        for dw in 0..kw {
                            let iw = (ow * spec.stride[2] + dw) as isize - spec.pad[2] as isize;
                            let inside = it >= 0
                                && ih >= 0
                                && iw >= 0
                                && (it as usize) < v.t
                                && (ih as usize) < v.h
                                && (iw as usize) < v.w;
                            if inside {
                                let base = ((it as usize * v.h + ih as usize) * v.w + iw as usize)
                                    * channels;
                                idx.extend((0..channels).map(|c| (base + c) as u32));
                            } else {
                                idx.extend(std::iter::repeat_n(GATHER_ZERO, channels));
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((idx, o))
}

/// Nearest-neighbour upsampling index by integer factors per axis.
pub fn upsample_index(v: Volume, channels: usize, factor: [usize; 3]) -> (Vec<u32>, Volume) {
    let o = Volume::new(v.t * factor[0], v.h * factor[1], v.w * factor[2]);
    let mut idx = Vec::with_capacity(o.count() * channels);
    for t in 0..o.t {
        for h in 0..o.h {
            for w in 0..o.w {
                let base = ((t / factor[0] * v.h + h / factor[1]) * v.w + w / factor[2]) * channels;
                idx.extend((0..channels).map(|c| (base + c) as u32));
            }
        }
    }
    (idx, o)
}

type IndexCache = RefCell<HashMap<Volume, (Rc<[u32]>, Volume)>>;

/// Convolution over a `(t·h·w) × in_ch` volume via patch gathering and a
/// single matrix product.
#[derive(Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub spec: ConvSpec,
    pub in_ch: usize,
    pub out_ch: usize,
    cache: IndexCache,
}

impl Clone for Conv {
    fn clone(&self) -> Self {
        Self {
            weight: self.weight,
            bias: self.bias,
            spec: self.spec,
            in_ch: self.in_ch,
            out_ch: self.out_ch,
            cache: RefCell::new(HashMap::new()),
        }
    }
}

impl Conv {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        spec: ConvSpec,
        rng: &mut R,
    ) -> Self {
        let fan_in = spec.taps() * in_ch;
        Self::with_std(store, name, in_ch, out_ch, spec, (1.0 / fan_in as f64).sqrt(), rng)
    }

    pub fn with_std<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        spec: ConvSpec,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let fan_in = spec.taps() * in_ch;
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::randn(&[fan_in, out_ch], std, rng),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_ch]));
        Self {
            weight,
            bias,
            spec,
            in_ch,
            out_ch,
            cache: RefCell::new(HashMap::new()),
        }
    }

    pub fn output(&self, v: Volume) -> Result<Volume> {
        self.spec.output(v)
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var, v: Volume) -> Result<(Var, Volume)> {
        let shape = g.shape(x);
        let cols = shape.last().copied().unwrap_or(0);
        let rows: usize = shape[..shape.len() - 1].iter().product();
        if cols != self.in_ch || rows != v.count() {
            return Err(Error::shape(format!(
                "conv expects {} x {}, got {shape:?}",
                v.count(),
                self.in_ch
            )));
        }
        let (idx, o) = {
            let mut cache = self.cache.borrow_mut();
            if let Some(hit) = cache.get(&v) {
                hit.clone()
            } else {
                let (idx, o) = im2col_index(v, self.in_ch, &self.spec)?;
                let entry: (Rc<[u32]>, Volume) = (idx.into(), o);
                cache.insert(v, entry.clone());
                entry
            }
        };
        let patches = g.gather(x, idx, &[o.count(), self.spec.taps() * self.in_ch])?;
        let w = g.param(self.weight);
        let y = g.matmul(patches, w)?;
        let b = g.param(self.bias);
        Ok((g.add_row(y, b)?, o))
    }
}

/// Nearest-neighbour upsampling of a `(t·h·w) × c` volume.
pub fn upsample(g: &mut Graph<'_>, x: Var, v: Volume, factor: [usize; 3]) -> Result<(Var, Volume)> {
    let c = g.shape(x).last().copied().unwrap_or(0);
    let (idx, o) = upsample_index(v, c, factor);
    Ok((g.gather(x, idx.into(), &[o.count(), c])?, o))
}

/// `softmax(q·kᵀ/√D)·v` for one head.
pub fn attention(g: &mut Graph<'_>, q: Var, k: Var, v: Var) -> Result<Var> {
    let d = g.shape(q).last().copied().unwrap_or(0);
    if d == 0 {
        return Err(Error::shape("attention with zero head width"));
    }
    if g.shape(k).last() != Some(&d) || g.shape(v).last() != Some(&d) {
        return Err(Error::shape(format!(
            "attention widths q {:?} k {:?} v {:?}",
            g.shape(q),
            g.shape(k),
            g.shape(v)
        )));
    }
    if g.shape(k)[0] != g.shape(v)[0] {
        return Err(Error::shape("attention keys and values differ in length"));
    }
    let s = g.matmul_nt(q, k)?;
    let s = g.scale(s, 1.0 / (d as f64).sqrt());
    let p = g.softmax(s)?;
    g.matmul(p, v)
}

/// Split columns into `heads` equal groups, attend per head, re-join.
pub fn multi_head_attention(
    g: &mut Graph<'_>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
) -> Result<Var> {
    let d = g.shape(q).last().copied().unwrap_or(0);
    if heads == 0 || d % heads != 0 {
        return Err(Error::shape(format!("{d} columns do not split into {heads} heads")));
    }
    if heads == 1 {
        return attention(g, q, k, v);
    }
    let hd = d / heads;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * hd, (h + 1) * hd)?;
        let kh = g.slice_cols(k, h * hd, (h + 1) * hd)?;
        let vh = g.slice_cols(v, h * hd, (h + 1) * hd)?;
        outs.push(attention(g, qh, kh, vh)?);
    }
    g.concat_cols(&outs)
}

/// Attention on plain tensors (no gradient tracking).
pub fn forward_attention(queries: &Tensor, keys: &Tensor, values: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let q = g.constant(queries.clone());
    let k = g.constant(keys.clone());
    let v = g.constant(values.clone());
    let o = attention(&mut g, q, k, v)?;
    Ok(g.value(o).clone())
}

/// Sinusoidal embedding of a scalar position or time step.
pub fn sinusoidal(position: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = (position * freq).sin();
        out[half + i] = (position * freq).cos();
    }
    out
}

/// `len × dim` sinusoidal position table.
pub fn position_table(len: usize, dim: usize) -> Tensor {
    let mut data = Vec::with_capacity(len * dim);
    for p in 0..len {
        data.extend(sinusoidal(p as f64, dim));
    }
    Tensor::new(&[len, dim], data).expect("table shape")
}
