//! Building blocks shared by both denoisers: diffusion-time embedding,
//! zero-initialized AdaLN modulation heads, and joint attention over
//! several token streams.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::nn::{multi_head_attention, sinusoidal};
use crate::tensor::{Graph, Linear, ParamStore, Tensor, Var};

/// Attention over the concatenation of several streams; each output is the
/// slice belonging to its source stream. Empty streams pass through empty.
pub fn joint_attention(
    g: &mut Graph<'_>,
    streams: &[(Var, Var, Var)],
    heads: usize,
) -> Result<Vec<Var>> {
    let width = stream_width(g, streams)?;
    let live: Vec<&(Var, Var, Var)> = streams.iter().filter(|s| g.shape(s.0)[0] > 0).collect();
    if live.is_empty() {
        return Err(Error::shape("joint attention over empty streams"));
    }
    let q = concat(g, live.iter().map(|s| s.0).collect())?;
    let k = concat(g, live.iter().map(|s| s.1).collect())?;
    let v = concat(g, live.iter().map(|s| s.2).collect())?;
    let out = multi_head_attention(g, q, k, v, heads)?;
    let mut start = 0;
    streams
        .iter()
        .map(|s| {
            let n = g.shape(s.0)[0];
            if n == 0 {
                return Ok(g.constant(Tensor::zeros(&[0, width])));
            }
            let o = g.slice_rows(out, start, start + n)?;
            start += n;
            Ok(o)
        })
        .collect()
}

/// The first stream's output of [`joint_attention`], without computing
/// queries for the others.
pub fn joint_attention_first(
    g: &mut Graph<'_>,
    query: Var,
    keys_values: &[(Var, Var)],
    heads: usize,
) -> Result<Var> {
    let live: Vec<&(Var, Var)> = keys_values.iter().filter(|s| g.shape(s.0)[0] > 0).collect();
    let k = concat(g, live.iter().map(|s| s.0).collect())?;
    let v = concat(g, live.iter().map(|s| s.1).collect())?;
    multi_head_attention(g, query, k, v, heads)
}

/// Plain-tensor [`joint_attention`].
pub fn joint_attention_forward(streams: &[(Tensor, Tensor, Tensor)], heads: usize) -> Result<Vec<Tensor>> {
    let mut g = Graph::new();
    let vars: Vec<(Var, Var, Var)> = streams
        .iter()
        .map(|(q, k, v)| (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone())))
        .collect();
    let out = joint_attention(&mut g, &vars, heads)?;
    Ok(out.into_iter().map(|o| g.value(o).clone()).collect())
}

fn stream_width(g: &Graph<'_>, streams: &[(Var, Var, Var)]) -> Result<usize> {
    let first = streams.first().ok_or_else(|| Error::shape("no attention streams"))?;
    let d = g.shape(first.0)[1];
    for (i, s) in streams.iter().enumerate() {
        let (q, k, v) = (g.shape(s.0), g.shape(s.1), g.shape(s.2));
        if q.len() != 2 || q[1] != d || k[1] != d || v[1] != d {
            return Err(Error::shape(format!(
                "stream {i} widths {q:?}/{k:?}/{v:?} differ from {d}"
            )));
        }
        if q[0] != k[0] || k[0] != v[0] {
            return Err(Error::shape(format!("stream {i} has ragged q/k/v lengths")));
        }
    }
    Ok(d)
}

fn concat(g: &mut Graph<'_>, xs: Vec<Var>) -> Result<Var> {
    match xs.len() {
        0 => Err(Error::shape("nothing to attend to")),
        1 => Ok(xs[0]),
        _ => g.concat_rows(&xs),
    }
}

/// Sinusoidal step embedding followed by a two-layer projection.
#[derive(Clone, Debug)]
pub struct TimeEmbedding {
    pub freq_dim: usize,
    l1: Linear,
    l2: Linear,
}

impl TimeEmbedding {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, freq_dim: usize, dim: usize, rng: &mut R) -> Self {
        Self {
            freq_dim,
            l1: Linear::new(store, &format!("{name}.l1"), freq_dim, dim, rng),
            l2: Linear::new(store, &format!("{name}.l2"), dim, dim, rng),
        }
    }

    /// One row per step in `steps`.
    pub fn forward(&self, g: &mut Graph<'_>, steps: &[f64]) -> Result<Var> {
        let data = steps.iter().flat_map(|&t| sinusoidal(t, self.freq_dim)).collect();
        let x = g.constant(Tensor::new(&[steps.len(), self.freq_dim], data)?);
        let h = self.l1.forward(g, x)?;
        let h = g.silu(h);
        self.l2.forward(g, h)
    }
}

/// Per-sample modulation `(α, β)`, `(σ, ε)`, gates `(γ, ζ)`, each a
/// `rows × D` node. Scales are stored as offsets from one.
#[derive(Clone, Copy, Debug)]
pub struct ModulationParams {
    pub attn_shift: Var,
    pub attn_scale: Var,
    pub attn_gate: Var,
    pub ff_shift: Var,
    pub ff_scale: Var,
    pub ff_gate: Var,
}

/// Zero-initialized head mapping the conditioning vector to six `D`-wide
/// modulation vectors, so a fresh block is the identity.
#[derive(Clone, Debug)]
pub struct Modulation {
    head: Linear,
    dim: usize,
}

impl Modulation {
    pub fn new(store: &mut ParamStore, name: &str, cond_dim: usize, dim: usize) -> Self {
        Self {
            head: Linear::zeros(store, name, cond_dim, 6 * dim),
            dim,
        }
    }

    /// `cond` is `B × C`; each sample's row is repeated `rows_per_sample`
    /// times so the result lines up with a `(B·L) × D` token matrix.
    pub fn forward(&self, g: &mut Graph<'_>, cond: Var, rows_per_sample: usize) -> Result<ModulationParams> {
        let c = g.silu(cond);
        let m = self.head.forward(g, c)?;
        let b = g.shape(m)[0];
        let idx: Vec<usize> = (0..b).flat_map(|i| std::iter::repeat_n(i, rows_per_sample)).collect();
        let m = g.gather_rows(m, &idx)?;
        let d = self.dim;
        let mut part = |i: usize| g.slice_cols(m, i * d, (i + 1) * d);
        Ok(ModulationParams {
            attn_shift: part(0)?,
            attn_scale: part(1)?,
            attn_gate: part(2)?,
            ff_shift: part(3)?,
            ff_scale: part(4)?,
            ff_gate: part(5)?,
        })
    }
}

/// `x·(1 + scale) + shift`.
pub fn modulate(g: &mut Graph<'_>, x: Var, shift: Var, scale: Var) -> Result<Var> {
    let xs = g.mul(x, scale)?;
    let y = g.add(x, xs)?;
    g.add(y, shift)
}

/// Attention and feed-forward projections for one stream in one block.
#[derive(Clone, Debug)]
pub struct StreamLayer {
    pub modulation: Modulation,
    qkv: Linear,
    out: Linear,
    ff1: Linear,
    ff2: Linear,
    dim: usize,
}

impl StreamLayer {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, cond_dim: usize, rng: &mut R) -> Self {
        Self {
            modulation: Modulation::new(store, &format!("{name}.mod"), cond_dim, dim),
            qkv: Linear::new(store, &format!("{name}.qkv"), dim, 3 * dim, rng),
            out: Linear::new(store, &format!("{name}.out"), dim, dim, rng),
            ff1: Linear::new(store, &format!("{name}.ff1"), dim, 4 * dim, rng),
            ff2: Linear::new(store, &format!("{name}.ff2"), 4 * dim, dim, rng),
            dim,
        }
    }

    /// Modulated, normalized input split into `(q, k, v)`.
    pub fn qkv(&self, g: &mut Graph<'_>, x: Var, m: &ModulationParams) -> Result<(Var, Var, Var)> {
        let h = g.layer_norm(x)?;
        let h = modulate(g, h, m.attn_shift, m.attn_scale)?;
        let qkv = self.qkv.forward(g, h)?;
        let d = self.dim;
        Ok((
            g.slice_cols(qkv, 0, d)?,
            g.slice_cols(qkv, d, 2 * d)?,
            g.slice_cols(qkv, 2 * d, 3 * d)?,
        ))
    }

    /// Gated residual updates after attention produced `attn`.
    pub fn finish(&self, g: &mut Graph<'_>, x: Var, attn: Var, m: &ModulationParams) -> Result<Var> {
        let a = self.out.forward(g, attn)?;
        let a = g.mul(a, m.attn_gate)?;
        let x = g.add(x, a)?;
        let h = g.layer_norm(x)?;
        let h = modulate(g, h, m.ff_shift, m.ff_scale)?;
        let h = self.ff1.forward(g, h)?;
        let h = g.gelu(h);
        let h = self.ff2.forward(g, h)?;
        let h = g.mul(h, m.ff_gate)?;
        g.add(x, h)
    }
}

/// Normalized key/value projection for a stream that is attended to but
/// not updated (reference or previous-frame tokens).
#[derive(Clone, Debug)]
pub struct ContextLayer {
    kv: Linear,
    dim: usize,
}

impl ContextLayer {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, rng: &mut R) -> Self {
        Self {
            kv: Linear::new(store, &format!("{name}.kv"), dim, 2 * dim, rng),
            dim,
        }
    }

    pub fn kv(&self, g: &mut Graph<'_>, x: Var) -> Result<(Var, Var)> {
        let h = g.layer_norm(x)?;
        let kv = self.kv.forward(g, h)?;
        Ok((g.slice_cols(kv, 0, self.dim)?, g.slice_cols(kv, self.dim, 2 * self.dim)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::forward_attention;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::randn(&[rows, cols], 1.0, rng)
    }

    /// Scalar-loop joint attention, one head.
    fn oracle(streams: &[(Tensor, Tensor, Tensor)]) -> Vec<Tensor> {
        let keys: Vec<&[f64]> = streams.iter().flat_map(|s| (0..s.1.rows()).map(|r| s.1.row(r))).collect();
        let vals: Vec<&[f64]> = streams.iter().flat_map(|s| (0..s.2.rows()).map(|r| s.2.row(r))).collect();
        streams
            .iter()
            .map(|(q, _, _)| {
                let d = q.cols();
                let mut out = Tensor::zeros(&[q.rows(), d]);
                for i in 0..q.rows() {
                    let s: Vec<f64> = keys
                        .iter()
                        .map(|k| q.row(i).iter().zip(*k).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt())
                        .collect();
                    let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
                    let z: f64 = e.iter().sum();
                    for (w, v) in e.iter().zip(&vals) {
                        for c in 0..d {
                            out.row_mut(i)[c] += w / z * v[c];
                        }
                    }
                }
                out
            })
            .collect()
    }

    #[test]
    fn matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let streams = vec![
            (rand(5, 6, &mut rng), rand(5, 6, &mut rng), rand(5, 6, &mut rng)),
            (rand(3, 6, &mut rng), rand(3, 6, &mut rng), rand(3, 6, &mut rng)),
        ];
        let got = joint_attention_forward(&streams, 1).unwrap();
        for (a, b) in got.iter().zip(oracle(&streams)) {
            assert!(a.zip_map(&b, |x, y| x - y).unwrap().max_abs() < 1e-12);
        }
    }

    #[test]
    fn empty_second_stream_is_self_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (q, k, v) = (rand(7, 8, &mut rng), rand(7, 8, &mut rng), rand(7, 8, &mut rng));
        let empty = Tensor::zeros(&[0, 8]);
        let out = joint_attention_forward(&[(q.clone(), k.clone(), v.clone()), (empty.clone(), empty.clone(), empty)], 1).unwrap();
        let single = forward_attention(&q, &k, &v).unwrap();
        assert!(out[0].zip_map(&single, |a, b| a - b).unwrap().max_abs() < 1e-12);
        assert_eq!(out[1].shape(), &[0, 8]);
    }

    #[test]
    fn identical_streams_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = (rand(4, 8, &mut rng), rand(4, 8, &mut rng), rand(4, 8, &mut rng));
        let out = joint_attention_forward(&[s.clone(), s], 2).unwrap();
        assert_eq!(out[0], out[1]);
    }

    #[test]
    fn first_stream_shortcut_matches() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new();
        let mk = |g: &mut Graph, r: usize, rng: &mut ChaCha8Rng| g.constant(rand(r, 8, rng));
        let a = (mk(&mut g, 4, &mut rng), mk(&mut g, 4, &mut rng), mk(&mut g, 4, &mut rng));
        let b = (mk(&mut g, 6, &mut rng), mk(&mut g, 6, &mut rng), mk(&mut g, 6, &mut rng));
        let full = joint_attention(&mut g, &[a, b], 2).unwrap();
        let first = joint_attention_first(&mut g, a.0, &[(a.1, a.2), (b.1, b.2)], 2).unwrap();
        assert!(g.value(full[0]).zip_map(g.value(first), |x, y| x - y).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn width_mismatch_rejected() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 4]));
        let b = g.constant(Tensor::zeros(&[2, 6]));
        assert!(joint_attention(&mut g, &[(a, a, a), (b, b, b)], 1).is_err());
    }

    #[test]
    fn zero_heads_are_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let layer = StreamLayer::new(&mut store, "l", 8, 8, &mut rng);
        let mut g = Graph::with_params(&store);
        let x = g.constant(rand(5, 8, &mut rng));
        let cond = g.constant(rand(1, 8, &mut rng));
        let m = layer.modulation.forward(&mut g, cond, 5).unwrap();
        for v in [m.attn_shift, m.attn_scale, m.attn_gate, m.ff_shift, m.ff_scale, m.ff_gate] {
            assert_eq!(g.value(v).max_abs(), 0.0);
        }
        let (q, k, v) = layer.qkv(&mut g, x, &m).unwrap();
        let a = joint_attention_first(&mut g, q, &[(k, v)], 2).unwrap();
        let y = layer.finish(&mut g, x, a, &m).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn modulate_identity_at_unit_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::new();
        let x = g.constant(rand(3, 4, &mut rng));
        let z = g.constant(Tensor::zeros(&[3, 4]));
        let y = modulate(&mut g, x, z, z).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }
}
