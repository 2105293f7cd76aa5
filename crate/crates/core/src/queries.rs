//! Context and instance query generation, the vote field and its loss.

use rand::Rng;

use crate::backbone::SceneTokens;
use crate::error::{ModelError, ModelResult};
use crate::geometry::{ball_query, farthest_point_sample, point_in_box, Box3D, Point3};
use crate::graph::{Graph, NodeId};
use crate::nn::{Linear, Mlp};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueryKind {
    Instance,
    Context,
}

#[derive(Debug, Clone)]
pub struct QuerySet {
    pub kind: QueryKind,
    pub positions: Vec<Point3>,
    /// `[M, D]`.
    pub features: NodeId,
    origin_index: Option<Vec<usize>>,
}

impl QuerySet {
    pub fn context(positions: Vec<Point3>, features: NodeId) -> Self {
        QuerySet { kind: QueryKind::Context, positions, features, origin_index: None }
    }

    pub fn instance(positions: Vec<Point3>, features: NodeId, origin_index: Vec<usize>) -> Self {
        QuerySet { kind: QueryKind::Instance, positions, features, origin_index: Some(origin_index) }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Vote indices the instance queries were sampled from.
    pub fn origin_index(&self) -> Option<&[usize]> {
        self.origin_index.as_deref()
    }
}

/// Shifted token positions and features.
#[derive(Debug, Clone)]
pub struct VoteField {
    pub positions: Vec<Point3>,
    /// `[T, 3]` node of the shifted positions.
    pub position_node: NodeId,
    /// `[T, D]`.
    pub features: NodeId,
}

/// FPS-free set abstraction over given centers: grouped `[rel/r ; feature]`
/// rows through a shared MLP, max-pooled per center.
#[derive(Debug, Clone)]
pub struct SetAbstraction {
    pub mlp: Mlp,
}

impl SetAbstraction {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, dim: usize) -> Self {
        SetAbstraction { mlp: Mlp::new(store, rng, name, &[dim + 3, dim, dim], true) }
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.mlp.params()
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        centers: &[Point3],
        support: &[Point3],
        support_features: NodeId,
        radius: Real,
        nsample: usize,
    ) -> ModelResult<NodeId> {
        let groups = ball_query(centers, support, radius, nsample)?;
        let s = groups.nsample;
        let mut rel = Vec::with_capacity(centers.len() * s * 3);
        for (c, center) in centers.iter().enumerate() {
            for &j in groups.group(c) {
                rel.extend((0..3).map(|k| (support[j][k] - center[k]) / radius));
            }
        }
        let rel = g.constant(&[centers.len() * s, 3], rel)?;
        let feats = g.gather(support_features, &groups.indices)?;
        let x = g.concat(&[rel, feats], 1)?;
        let h = self.mlp.forward(g, store, x)?;
        Ok(g.max_over_set(h, s)?)
    }
}

/// Context queries: FPS seeds on the encoded tokens, pooled by set abstraction.
#[derive(Debug, Clone)]
pub struct ContextQueryGenerator {
    pub sa: SetAbstraction,
    pub count: usize,
    pub radius: Real,
    pub nsample: usize,
}

impl ContextQueryGenerator {
    pub fn params(&self) -> Vec<ParamId> {
        self.sa.params()
    }

    /// `radius_scale` multiplies the configured radius (room-size scaling).
    pub fn generate(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        tokens: &SceneTokens,
        radius_scale: Real,
        fps_seed: usize,
    ) -> ModelResult<QuerySet> {
        let t = tokens.positions.len();
        if self.count > t {
            return Err(ModelError::Invalid(format!("{} context queries exceed {t} tokens", self.count)));
        }
        let idx = farthest_point_sample(&tokens.positions, self.count, fps_seed % t.max(1))?;
        let centers: Vec<Point3> = idx.iter().map(|&i| tokens.positions[i]).collect();
        let features =
            self.sa.forward(g, store, &centers, &tokens.positions, tokens.features, self.radius * radius_scale, self.nsample)?;
        Ok(QuerySet { kind: QueryKind::Context, positions: centers, features, origin_index: None })
    }
}

/// Offset network mapping `f_enc` to `[Δp ; Δf]`, final layer zero-initialised.
#[derive(Debug, Clone)]
pub struct VoteHead {
    pub hidden: Mlp,
    pub out: Linear,
}

impl VoteHead {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, dim: usize) -> Self {
        VoteHead {
            hidden: Mlp::new(store, rng, &format!("{name}.hidden"), &[dim, dim, dim], true),
            out: Linear::zeroed(store, &format!("{name}.out"), dim, 3 + dim),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.hidden.params();
        p.extend(self.out.params());
        p
    }

    pub fn vote(&self, g: &mut Graph, store: &ParamStore, tokens: &SceneTokens) -> ModelResult<VoteField> {
        let t = tokens.positions.len();
        let d = g.shape(tokens.features)[1];
        let h = self.hidden.forward(g, store, tokens.features)?;
        let delta = self.out.forward(g, store, h)?;
        let dp = g.slice(delta, 1, 0, 3)?;
        let df = g.slice(delta, 1, 3, 3 + d)?;
        let base = g.constant(&[t, 3], tokens.positions.iter().flatten().copied().collect())?;
        let position_node = g.add(base, dp)?;
        let features = g.add(tokens.features, df)?;
        let positions = g.value(position_node).chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
        Ok(VoteField { positions, position_node, features })
    }
}

/// Instance queries: FPS on the voted positions, set abstraction over the
/// shifted field.
#[derive(Debug, Clone)]
pub struct InstanceQueryGenerator {
    pub sa: SetAbstraction,
    pub count: usize,
    pub radius: Real,
    pub nsample: usize,
}

impl InstanceQueryGenerator {
    pub fn params(&self) -> Vec<ParamId> {
        self.sa.params()
    }

    pub fn generate(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        votes: &VoteField,
        radius_scale: Real,
        fps_seed: usize,
    ) -> ModelResult<QuerySet> {
        let t = votes.positions.len();
        if self.count > t {
            return Err(ModelError::Invalid(format!("{} instance queries exceed {t} votes", self.count)));
        }
        let idx = farthest_point_sample(&votes.positions, self.count, fps_seed % t.max(1))?;
        let centers: Vec<Point3> = idx.iter().map(|&i| votes.positions[i]).collect();
        let features =
            self.sa.forward(g, store, &centers, &votes.positions, votes.features, self.radius * radius_scale, self.nsample)?;
        Ok(QuerySet { kind: QueryKind::Instance, positions: centers, features, origin_index: Some(idx) })
    }
}

/// `(1/T) Σ_i Σ_j ‖p_vote,i − cnt_j‖₁ · [p_enc,i ∈ box_j]`; zero when no
/// token lies in any box.
pub fn vote_loss(g: &mut Graph, votes: &VoteField, encoded: &[Point3], boxes: &[Box3D]) -> ModelResult<NodeId> {
    let t = encoded.len();
    if votes.positions.len() != t {
        return Err(ModelError::DimensionMismatch { what: "vote field", expected: t, found: votes.positions.len() });
    }
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (i, p) in encoded.iter().enumerate() {
        for b in boxes {
            if point_in_box(p, b) {
                rows.push(i);
                targets.extend_from_slice(&b.center);
            }
        }
    }
    if rows.is_empty() {
        return Ok(g.constant(&[], vec![0.0])?);
    }
    let picked = g.gather(votes.position_node, &rows)?;
    let target = g.constant(&[rows.len(), 3], targets)?;
    let diff = g.sub(picked, target)?;
    let l1 = g.abs(diff);
    let s = g.sum(l1);
    Ok(g.scale(s, 1.0 / t as Real))
}
