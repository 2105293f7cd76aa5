//! Global descriptors (NetVLAD, GeM) and per-instance caption prefixes built
//! from an instance query, its nearest context queries and the global vector.

use rand::Rng;

use crate::config::GlobalInputs;
use crate::decoder::DecodedQueries;
use crate::error::{ModelError, ModelResult};
use crate::geometry::{knn, Point3};
use crate::graph::{Graph, NodeId};
use crate::nn::Linear;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

/// Pools a `[N, D]` feature set into one unit-norm `[1, D]` descriptor.
pub trait GlobalAggregator {
    /// Unnormalised-safe descriptor; may be the zero vector.
    fn pool(&self, g: &mut Graph, store: &ParamStore, features: NodeId) -> ModelResult<NodeId>;

    fn params(&self) -> Vec<ParamId>;

    /// `pool`, falling back to the first basis vector when the result is zero.
    fn describe(&self, g: &mut Graph, store: &ParamStore, features: NodeId) -> ModelResult<NodeId> {
        let shape = g.shape(features).to_vec();
        if shape.len() != 2 || shape[0] == 0 {
            return Err(ModelError::Invalid("global aggregation needs at least one feature".into()));
        }
        let v = self.pool(g, store, features)?;
        if g.value(v).iter().all(|x| *x == 0.0) {
            let d = g.value(v).len();
            let mut e0 = vec![0.0; d];
            e0[0] = 1.0;
            return Ok(g.constant(&[1, d], e0)?);
        }
        Ok(v)
    }
}

#[derive(Debug, Clone)]
pub struct NetVlad {
    pub clusters: usize,
    pub dim: usize,
    /// `[C, D]` cluster centers.
    pub centers: ParamId,
    /// Soft-assignment logits `D -> C`.
    pub assign: Linear,
    pub proj: Linear,
}

impl NetVlad {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, dim: usize, clusters: usize) -> Self {
        let centers = store.add(format!("{name}.centers"), crate::params::normal(rng, &[clusters, dim], 0.1));
        let assign = Linear::new(store, rng, &format!("{name}.assign"), dim, clusters);
        let proj = Linear::new(store, rng, &format!("{name}.proj"), clusters * dim, dim);
        NetVlad { clusters, dim, centers, assign, proj }
    }

    /// Sets centers by k-means over `features` (`[n, D]` row-major) and the
    /// assignment layer to `w_k = 2αc_k`, `b_k = −α‖c_k‖²`.
    pub fn init_from_features(&self, store: &mut ParamStore, features: &[Real]) -> ModelResult<()> {
        let centers = kmeans(features, self.dim, self.clusters, 10)?;
        let mut spread = 0.0;
        let mut pairs = 0usize;
        for a in 0..self.clusters {
            for b in a + 1..self.clusters {
                spread += (0..self.dim).map(|j| (centers[a * self.dim + j] - centers[b * self.dim + j]).powi(2)).sum::<Real>();
                pairs += 1;
            }
        }
        let mean_sq = if pairs == 0 { 1.0 } else { (spread / pairs as Real).max(1e-6) };
        let alpha = 10.0 / mean_sq;
        let mut w = vec![0.0; self.dim * self.clusters];
        let mut b = vec![0.0; self.clusters];
        for k in 0..self.clusters {
            let c = &centers[k * self.dim..(k + 1) * self.dim];
            for j in 0..self.dim {
                w[j * self.clusters + k] = 2.0 * alpha * c[j];
            }
            b[k] = -alpha * c.iter().map(|x| x * x).sum::<Real>();
        }
        store.set_data(self.centers, &centers)?;
        store.set_data(self.assign.weight, &w)?;
        store.set_data(self.assign.bias, &b)?;
        Ok(())
    }
}

impl GlobalAggregator for NetVlad {
    fn pool(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> ModelResult<NodeId> {
        let d = g.shape(x)[1];
        if d != self.dim {
            return Err(ModelError::DimensionMismatch { what: "netvlad input", expected: self.dim, found: d });
        }
        let logits = self.assign.forward(g, store, x)?;
        let a = g.softmax(logits, 1)?;
        let at = g.transpose(a)?;
        let ax = g.matmul(at, x)?;
        let mass = g.sum_rows(a);
        let c = g.param(store, self.centers);
        let ac = g.scale_rows(c, mass)?;
        let residual = g.sub(ax, ac)?;
        let intra = g.l2_normalize(residual);
        let flat = g.reshape(intra, &[1, self.clusters * self.dim])?;
        let flat = g.l2_normalize(flat);
        let y = self.proj.forward(g, store, flat)?;
        Ok(g.l2_normalize(y))
    }

    fn params(&self) -> Vec<ParamId> {
        let mut p = vec![self.centers];
        p.extend(self.assign.params());
        p.extend(self.proj.params());
        p
    }
}

/// Generalised mean over `softplus(x)` with a learned exponent.
#[derive(Debug, Clone)]
pub struct Gem {
    /// `[1, 1]` exponent.
    pub p: ParamId,
    pub proj: Linear,
}

impl Gem {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, dim: usize, p: Real) -> Self {
        let p = store.add(format!("{name}.p"), Tensor::new(&[1, 1], vec![p]).expect("scalar shape"));
        Gem { p, proj: Linear::new(store, rng, &format!("{name}.proj"), dim, dim) }
    }

    /// `(mean softplus(x)^p)^(1/p)` per column, before projection.
    pub fn pooled(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> ModelResult<NodeId> {
        let (n, d) = (g.shape(x)[0], g.shape(x)[1]);
        let s = g.softplus(x);
        let ls = g.log(s);
        let col = g.reshape(ls, &[n * d, 1])?;
        let p = g.param(store, self.p);
        let scaled = g.matmul(col, p)?;
        let scaled = g.reshape(scaled, &[n, d])?;
        let pw = g.exp(scaled);
        let m = g.mean_over_set(pw, n)?;
        let lm = g.log(m);
        let lm = g.reshape(lm, &[d, 1])?;
        let one = g.constant(&[1, 1], vec![1.0])?;
        let inv = g.div(one, p)?;
        let r = g.matmul(lm, inv)?;
        let r = g.reshape(r, &[1, d])?;
        Ok(g.exp(r))
    }
}

impl GlobalAggregator for Gem {
    fn pool(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> ModelResult<NodeId> {
        let pooled = self.pooled(g, store, x)?;
        let y = self.proj.forward(g, store, pooled)?;
        Ok(g.l2_normalize(y))
    }

    fn params(&self) -> Vec<ParamId> {
        let mut p = vec![self.p];
        p.extend(self.proj.params());
        p
    }
}

#[derive(Debug, Clone)]
pub enum Aggregator {
    NetVlad(NetVlad),
    Gem(Gem),
}

impl Aggregator {
    pub fn as_dyn(&self) -> &dyn GlobalAggregator {
        match self {
            Aggregator::NetVlad(a) => a,
            Aggregator::Gem(a) => a,
        }
    }
}

/// Deterministic k-means: farthest-point seeding in feature space, then
/// Lloyd iterations. Empty clusters keep their previous center.
pub fn kmeans(data: &[Real], dim: usize, k: usize, iters: usize) -> ModelResult<Vec<Real>> {
    let n = data.len() / dim.max(1);
    if dim == 0 || data.len() % dim != 0 || n < k || k == 0 {
        return Err(ModelError::Invalid(format!("k-means needs at least {k} rows of width {dim}")));
    }
    let row = |i: usize| &data[i * dim..(i + 1) * dim];
    let d2 = |a: &[Real], b: &[Real]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<Real>();
    let mut chosen = vec![0usize];
    let mut best: Vec<Real> = (0..n).map(|i| d2(row(i), row(0))).collect();
    while chosen.len() < k {
        let mut far = 0;
        for i in 1..n {
            if best[i] > best[far] {
                far = i;
            }
        }
        chosen.push(far);
        for i in 0..n {
            best[i] = best[i].min(d2(row(i), row(far)));
        }
    }
    let mut centers: Vec<Real> = chosen.iter().flat_map(|&i| row(i).to_vec()).collect();
    for _ in 0..iters {
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let c = (0..k)
                .min_by(|&a, &b| d2(row(i), &centers[a * dim..(a + 1) * dim]).total_cmp(&d2(row(i), &centers[b * dim..(b + 1) * dim])))
                .unwrap();
            counts[c] += 1;
            sums[c * dim..(c + 1) * dim].iter_mut().zip(row(i)).for_each(|(s, x)| *s += x);
        }
        for c in 0..k {
            if counts[c] > 0 {
                for j in 0..dim {
                    centers[c * dim + j] = sums[c * dim + j] / counts[c] as Real;
                }
            }
        }
    }
    Ok(centers)
}

/// How instance prefixes are assembled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TgiWiring {
    pub k: usize,
    pub global: bool,
    pub global_inputs: GlobalInputs,
}

impl TgiWiring {
    pub fn prefix_len(&self) -> usize {
        1 + self.k + usize::from(self.global)
    }
}

/// Indices of the `k` context queries nearest to each position, nearest first.
pub fn nearest_contexts(instances: &[Point3], contexts: &[Point3], k: usize) -> ModelResult<Vec<Vec<usize>>> {
    if k > contexts.len() {
        return Err(ModelError::Invalid(format!("k = {k} exceeds {} context queries", contexts.len())));
    }
    Ok(knn(instances, contexts, k)?)
}

/// Per selected instance query, the `[K+2, D]` prefix
/// `[V^o_i ; V^c nearest-first ; V^g]` (no global row when disabled).
pub fn aggregate(
    g: &mut Graph,
    store: &ParamStore,
    aggregator: Option<&dyn GlobalAggregator>,
    instances: &DecodedQueries,
    contexts: &DecodedQueries,
    wiring: TgiWiring,
    selected: &[usize],
) -> ModelResult<Vec<NodeId>> {
    if wiring.global && aggregator.is_none() {
        return Err(ModelError::Invalid("global descriptor requested without an aggregator".into()));
    }
    let positions: Vec<Point3> = selected.iter().map(|&i| instances.positions[i]).collect();
    let nn = nearest_contexts(&positions, &contexts.positions, wiring.k)?;
    let shared_global = match (wiring.global, wiring.global_inputs) {
        (true, GlobalInputs::Contexts) => Some(aggregator.unwrap().describe(g, store, contexts.features)?),
        (true, GlobalInputs::All) => {
            let union = g.concat(&[contexts.features, instances.features], 0)?;
            Some(aggregator.unwrap().describe(g, store, union)?)
        }
        _ => None,
    };
    let mut out = Vec::with_capacity(selected.len());
    for (row, &i) in selected.iter().enumerate() {
        let inst = g.gather(instances.features, &[i])?;
        let ctx = g.gather(contexts.features, &nn[row])?;
        let mut parts = vec![inst, ctx];
        if wiring.global {
            let vg = match shared_global {
                Some(v) => v,
                None => {
                    let union = g.concat(&[contexts.features, inst], 0)?;
                    aggregator.unwrap().describe(g, store, union)?
                }
            };
            parts.push(vg);
        }
        out.push(g.concat(&parts, 0)?);
    }
    Ok(out)
}
