//! Scene tokenizer (set abstraction) and masked transformer encoder.

use rand::{Rng, RngCore};

use crate::error::{ModelError, ModelResult};
use crate::geometry::{ball_query, dist2, farthest_point_sample, Point3};
use crate::graph::{Graph, NodeId};
use crate::nn::{dropout, EncoderLayer, FourierEncoding, LayerNorm, Mlp, MASKED};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Real;

/// Encoded scene: token positions and their `[T, D]` feature node.
#[derive(Debug, Clone)]
pub struct SceneTokens {
    pub positions: Vec<Point3>,
    pub features: NodeId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub tokens: usize,
    pub dim: usize,
    pub heads: usize,
    /// Transformer layers; the first one is masked.
    pub layers: usize,
    pub ffn_dim: usize,
    pub dropout: Real,
    /// `None` derives the radius from the room size and token count.
    pub mask_radius: Option<Real>,
    pub tok_radius: Real,
    pub tok_nsample: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> ModelResult<()> {
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(ModelError::Invalid(format!("dim {} not divisible by {} heads", self.dim, self.heads)));
        }
        if self.mask_radius.is_some_and(|r| !(r > 0.0)) {
            return Err(ModelError::Invalid("mask_radius must be positive".into()));
        }
        Ok(())
    }

    pub fn resolved_mask_radius(&self, room_diagonal: Real) -> Real {
        self.mask_radius.unwrap_or(0.8 * room_diagonal / (self.tokens as Real).sqrt())
    }
}

/// Point cloud input: positions with per-point RGB.
#[derive(Debug, Clone, Copy)]
pub struct PointCloud<'a> {
    pub points: &'a [Point3],
    pub colors: &'a [[Real; 3]],
    pub room_diagonal: Real,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub cfg: EncoderConfig,
    pub tokenizer: Mlp,
    pub layers: Vec<EncoderLayer>,
    pub out_norm: LayerNorm,
    pub pe: FourierEncoding,
}

/// Frequency spread of the positional encoding, in cycles per meter.
pub const PE_CYCLES_PER_METER: f64 = 0.15;
const PE_SEED: u64 = 0x5e1a_0001;

impl Backbone {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, cfg: EncoderConfig) -> ModelResult<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let tokenizer = Mlp::new(store, rng, "backbone.tokenizer", &[6, d / 2, d], true);
        let layers = (0..cfg.layers)
            .map(|i| EncoderLayer::new(store, rng, &format!("backbone.layer{i}"), d, cfg.heads, cfg.ffn_dim))
            .collect();
        let out_norm = LayerNorm::new(store, "backbone.out_norm", d);
        let pe = FourierEncoding::new(d, PE_CYCLES_PER_METER, PE_SEED);
        Ok(Backbone { cfg, tokenizer, layers, out_norm, pe })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.tokenizer.params();
        self.layers.iter().for_each(|l| p.extend(l.params()));
        p.extend(self.out_norm.params());
        p
    }

    /// FPS to `T` centers, ball grouping, shared MLP on `[rel/r ; rgb]`, max-pool.
    pub fn tokenize(&self, g: &mut Graph, store: &ParamStore, pc: PointCloud<'_>, fps_seed: usize) -> ModelResult<SceneTokens> {
        let t = self.cfg.tokens;
        if pc.points.len() < t {
            return Err(ModelError::Invalid(format!("{} points cannot yield {t} tokens", pc.points.len())));
        }
        if pc.colors.len() != pc.points.len() {
            return Err(ModelError::DimensionMismatch { what: "point colors", expected: pc.points.len(), found: pc.colors.len() });
        }
        let idx = farthest_point_sample(pc.points, t, fps_seed % pc.points.len())?;
        let centers: Vec<Point3> = idx.iter().map(|&i| pc.points[i]).collect();
        let r = self.cfg.tok_radius;
        let groups = ball_query(&centers, pc.points, r, self.cfg.tok_nsample)?;
        let s = groups.nsample;
        let mut input = Vec::with_capacity(t * s * 6);
        for (c, center) in centers.iter().enumerate() {
            for &j in groups.group(c) {
                let p = pc.points[j];
                input.extend((0..3).map(|k| (p[k] - center[k]) / r));
                input.extend_from_slice(&pc.colors[j]);
            }
        }
        let x = g.constant(&[t * s, 6], input)?;
        let h = self.tokenizer.forward(g, store, x)?;
        let features = g.max_over_set(h, s)?;
        Ok(SceneTokens { positions: centers, features })
    }

    /// Additive mask allowing pairs within `radius` (self always allowed).
    pub fn locality_mask(positions: &[Point3], radius: Real) -> Vec<Real> {
        let n = positions.len();
        let r2 = radius * radius;
        let mut m = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                if i != j && dist2(&positions[i], &positions[j]) > r2 {
                    m[i * n + j] = MASKED;
                }
            }
        }
        m
    }

    /// Runs the encoder stack. Layer 0 is masked to `mask_radius`.
    /// Attention maps are appended to `probs` when given.
    pub fn encode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        tokens: &SceneTokens,
        room_diagonal: Real,
        dropout_rng: Option<&mut dyn RngCore>,
        mut probs: Option<&mut Vec<NodeId>>,
    ) -> ModelResult<SceneTokens> {
        let n = tokens.positions.len();
        let shape = g.shape(tokens.features).to_vec();
        if shape != [n, self.cfg.dim] {
            return Err(ModelError::DimensionMismatch { what: "token features", expected: self.cfg.dim, found: shape[shape.len() - 1] });
        }
        let pe = self.pe.node(g, &tokens.positions)?;
        // absolute position enters the values too, not only attention scores
        let x = dropout(g, tokens.features, self.cfg.dropout, dropout_rng)?;
        let mut x = g.add(x, pe)?;
        let radius = self.cfg.resolved_mask_radius(room_diagonal);
        for (i, layer) in self.layers.iter().enumerate() {
            let mask = if i == 0 { Some(g.constant(&[n, n], Self::locality_mask(&tokens.positions, radius))?) } else { None };
            x = layer.forward(g, store, x, Some(pe), mask, probs.as_deref_mut())?;
        }
        let features = self.out_norm.forward(g, store, x)?;
        Ok(SceneTokens { positions: tokens.positions.clone(), features })
    }

    /// `tokenize` followed by `encode`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        pc: PointCloud<'_>,
        fps_seed: usize,
        dropout_rng: Option<&mut dyn RngCore>,
    ) -> ModelResult<SceneTokens> {
        let tokens = self.tokenize(g, store, pc, fps_seed)?;
        self.encode(g, store, &tokens, pc.room_diagonal, dropout_rng, None)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> EncoderConfig {
        EncoderConfig {
            tokens: 8,
            dim: 16,
            heads: 2,
            layers: 2,
            ffn_dim: 32,
            dropout: 0.0,
            mask_radius: Some(0.5),
            tok_radius: 0.3,
            tok_nsample: 4,
        }
    }

    #[test]
    fn identical_points_give_identical_tokens() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bb = Backbone::new(&mut store, &mut rng, small_cfg()).unwrap();
        let pts = vec![[1.0, 2.0, 0.5]; 20];
        let cols = vec![[0.2, 0.4, 0.6]; 20];
        let pc = PointCloud { points: &pts, colors: &cols, room_diagonal: 5.0 };
        let mut g = Graph::inference();
        let t = bb.tokenize(&mut g, &store, pc, 0).unwrap();
        let v = g.value(t.features);
        for row in v.chunks(16) {
            assert_eq!(row, &v[..16]);
        }
    }

    #[test]
    fn too_few_points() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bb = Backbone::new(&mut store, &mut rng, small_cfg()).unwrap();
        let pts = vec![[0.0; 3]; 4];
        let pc = PointCloud { points: &pts, colors: &pts, room_diagonal: 1.0 };
        assert!(bb.tokenize(&mut Graph::inference(), &store, pc, 0).is_err());
    }

    #[test]
    fn mask_keeps_self() {
        let m = Backbone::locality_mask(&[[0.0; 3], [5.0, 0.0, 0.0]], 1.0);
        assert_eq!(m, vec![0.0, MASKED, MASKED, 0.0]);
    }
}
