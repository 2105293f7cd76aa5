//! Layers assembled from graph ops: linear maps, MLPs, attention blocks.

use rand::Rng;

use crate::graph::{Graph, NodeId};
use crate::params::{glorot, normal, ParamId, ParamStore};
use crate::tensor::{Real, Result, Tensor};

/// Additive mask value for disallowed attention pairs.
pub const MASKED: Real = -1e9;

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), glorot(rng, fan_in, fan_out));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]));
        Linear { weight, bias, fan_in, fan_out }
    }

    /// A linear map whose weight and bias start at zero.
    pub fn zeroed(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), Tensor::zeros(&[fan_in, fan_out]));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]));
        Linear { weight, bias, fan_in, fan_out }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.weight, self.bias]
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::filled(&[dim], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let gm = g.param(store, self.gamma);
        let bt = g.param(store, self.beta);
        let axis = g.shape(x).len() - 1;
        g.layer_norm(x, gm, bt, axis, 1e-5)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.gamma, self.beta]
    }
}

/// Stack of linear layers with ReLU between them (and after the last one
/// when `final_relu`).
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub final_relu: bool,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, dims: &[usize], final_relu: bool) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, rng, &format!("{name}.{i}"), w[0], w[1]))
            .collect();
        Mlp { layers, final_relu }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, mut x: NodeId) -> Result<NodeId> {
        let n = self.layers.len();
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(g, store, x)?;
            if i + 1 < n || self.final_relu {
                x = g.relu(x);
            }
        }
        Ok(x)
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(Linear::params).collect()
    }
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, dim: usize, heads: usize) -> Self {
        assert!(heads > 0 && dim % heads == 0, "dim {dim} not divisible by {heads} heads");
        MultiHeadAttention {
            q: Linear::new(store, rng, &format!("{name}.q"), dim, dim),
            k: Linear::new(store, rng, &format!("{name}.k"), dim, dim),
            v: Linear::new(store, rng, &format!("{name}.v"), dim, dim),
            out: Linear::new(store, rng, &format!("{name}.out"), dim, dim),
            heads,
        }
    }

    /// Scaled dot-product attention of `query [Lq, D]` over `key`/`value`
    /// `[Lk, D]`. `mask` is an additive `[Lq, Lk]` constant. When `probs` is
    /// given, the per-head attention matrices are appended to it.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        query: NodeId,
        key: NodeId,
        value: NodeId,
        mask: Option<NodeId>,
        mut probs: Option<&mut Vec<NodeId>>,
    ) -> Result<NodeId> {
        let q = self.q.forward(g, store, query)?;
        let k = self.k.forward(g, store, key)?;
        let v = self.v.forward(g, store, value)?;
        let dim = g.shape(q)[1];
        let dh = dim / self.heads;
        let scale = 1.0 / (dh as Real).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice(q, 1, h * dh, (h + 1) * dh)?,
                    g.slice(k, 1, h * dh, (h + 1) * dh)?,
                    g.slice(v, 1, h * dh, (h + 1) * dh)?,
                )
            };
            let s = g.matmul_nt(qh, kh)?;
            let mut s = g.scale(s, scale);
            if let Some(m) = mask {
                s = g.add(s, m)?;
            }
            let p = g.softmax(s, 1)?;
            if let Some(rec) = probs.as_deref_mut() {
                rec.push(p);
            }
            outs.push(g.matmul(p, vh)?);
        }
        let o = if outs.len() == 1 { outs[0] } else { g.concat(&outs, 1)? };
        self.out.forward(g, store, o)
    }

    pub fn params(&self) -> Vec<ParamId> {
        [&self.q, &self.k, &self.v, &self.out].iter().flat_map(|l| l.params()).collect()
    }
}

/// Position-wise feed-forward block `D -> F -> D` with GELU.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, dim: usize, hidden: usize) -> Self {
        FeedForward {
            up: Linear::new(store, rng, &format!("{name}.up"), dim, hidden),
            down: Linear::new(store, rng, &format!("{name}.down"), hidden, dim),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let h = self.up.forward(g, store, x)?;
        let h = g.gelu(h);
        self.down.forward(g, store, h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.up.params();
        p.extend(self.down.params());
        p
    }
}

/// Inverted dropout as a constant mask. Identity when `p == 0`.
pub fn dropout<R: Rng + ?Sized>(g: &mut Graph, x: NodeId, p: Real, rng: Option<&mut R>) -> Result<NodeId> {
    let Some(rng) = rng else { return Ok(x) };
    if p <= 0.0 {
        return Ok(x);
    }
    let keep = 1.0 - p;
    let mask: Vec<Real> = (0..g.value(x).len())
        .map(|_| if rng.gen::<f64>() < keep as f64 { 1.0 / keep } else { 0.0 })
        .collect();
    let shape = g.shape(x).to_vec();
    let m = g.constant(&shape, mask)?;
    g.mul(x, m)
}

/// Fixed random Fourier features of 3-D positions: `[sin(2πpB), cos(2πpB)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FourierEncoding {
    basis: Vec<[Real; 3]>,
}

impl FourierEncoding {
    /// `dim` must be even; `cycles_per_meter` sets the frequency spread.
    pub fn new(dim: usize, cycles_per_meter: f64, seed: u64) -> Self {
        use rand::SeedableRng;
        assert!(dim % 2 == 0, "fourier dim must be even");
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let b = normal(&mut rng, &[dim / 2, 3], cycles_per_meter);
        let basis = b.data().chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
        FourierEncoding { basis }
    }

    pub fn dim(&self) -> usize {
        self.basis.len() * 2
    }

    pub fn encode(&self, positions: &[[Real; 3]]) -> Vec<Real> {
        let half = self.basis.len();
        let tau = std::f64::consts::TAU as Real;
        let mut out = Vec::with_capacity(positions.len() * half * 2);
        for p in positions {
            let proj: Vec<Real> = self.basis.iter().map(|b| tau * (p[0] * b[0] + p[1] * b[1] + p[2] * b[2])).collect();
            out.extend(proj.iter().map(|x| x.sin()));
            out.extend(proj.iter().map(|x| x.cos()));
        }
        out
    }

    pub fn node(&self, g: &mut Graph, positions: &[[Real; 3]]) -> Result<NodeId> {
        g.constant(&[positions.len(), self.dim()], self.encode(positions))
    }
}

/// Pre-norm transformer encoder layer.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
}

impl EncoderLayer {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, dim: usize, heads: usize, ffn: usize) -> Self {
        EncoderLayer {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            attn: MultiHeadAttention::new(store, rng, &format!("{name}.attn"), dim, heads),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            ffn: FeedForward::new(store, rng, &format!("{name}.ffn"), dim, ffn),
        }
    }

    /// `x + attn(ln(x) + pe)` then `x + ffn(ln(x))`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: NodeId,
        pe: Option<NodeId>,
        mask: Option<NodeId>,
        probs: Option<&mut Vec<NodeId>>,
    ) -> Result<NodeId> {
        let h = self.norm1.forward(g, store, x)?;
        let qk = match pe {
            Some(pe) => g.add(h, pe)?,
            None => h,
        };
        let a = self.attn.forward(g, store, qk, qk, h, mask, probs)?;
        let x = g.add(x, a)?;
        let h = self.norm2.forward(g, store, x)?;
        let f = self.ffn.forward(g, store, h)?;
        g.add(x, f)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.norm1.params();
        p.extend(self.attn.params());
        p.extend(self.norm2.params());
        p.extend(self.ffn.params());
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn attention_rows_are_distributions() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mha = MultiHeadAttention::new(&mut store, &mut rng, "a", 8, 2);
        let mut g = Graph::new();
        let x = g.input(&normal(&mut rng, &[5, 8], 1.0));
        let mut probs = Vec::new();
        let y = mha.forward(&mut g, &store, x, x, x, None, Some(&mut probs)).unwrap();
        assert_eq!(g.shape(y), &[5, 8]);
        assert_eq!(probs.len(), 2);
        for p in probs {
            for row in g.value(p).chunks(5) {
                assert!((row.iter().sum::<Real>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn fourier_dimensions() {
        let f = FourierEncoding::new(8, 0.5, 3);
        let e = f.encode(&[[0.0, 0.0, 0.0]]);
        assert_eq!(e.len(), 8);
        assert_eq!(&e[..4], &[0.0; 4]);
        assert_eq!(&e[4..], &[1.0; 4]);
    }
}
