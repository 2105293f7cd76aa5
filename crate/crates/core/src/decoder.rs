//! Instance and context transformer decoders.

use rand::Rng;

use crate::backbone::SceneTokens;
use crate::error::{ModelError, ModelResult};
use crate::geometry::Point3;
use crate::graph::{Graph, NodeId};
use crate::nn::{FeedForward, FourierEncoding, LayerNorm, MultiHeadAttention};
use crate::params::{ParamId, ParamStore};
use crate::queries::{QueryKind, QuerySet};

#[derive(Debug, Clone)]
pub struct DecodedQueries {
    pub kind: QueryKind,
    pub positions: Vec<Point3>,
    /// Final `[M, D]` features.
    pub features: NodeId,
    /// Normalised output of every layer (instance kind only).
    pub layers: Vec<NodeId>,
}

#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub norm1: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub norm3: LayerNorm,
    pub ffn: FeedForward,
}

impl DecoderLayer {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, dim: usize, heads: usize, ffn: usize) -> Self {
        DecoderLayer {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            self_attn: MultiHeadAttention::new(store, rng, &format!("{name}.self_attn"), dim, heads),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            cross_attn: MultiHeadAttention::new(store, rng, &format!("{name}.cross_attn"), dim, heads),
            norm3: LayerNorm::new(store, &format!("{name}.norm3"), dim),
            ffn: FeedForward::new(store, rng, &format!("{name}.ffn"), dim, ffn),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.norm1.params();
        p.extend(self.self_attn.params());
        p.extend(self.norm2.params());
        p.extend(self.cross_attn.params());
        p.extend(self.norm3.params());
        p.extend(self.ffn.params());
        p
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: NodeId,
        query_pe: NodeId,
        memory_key: NodeId,
        memory: NodeId,
        mut probs: Option<&mut Vec<NodeId>>,
    ) -> ModelResult<NodeId> {
        let h = self.norm1.forward(g, store, x)?;
        let qk = g.add(h, query_pe)?;
        let a = self.self_attn.forward(g, store, qk, qk, h, None, probs.as_deref_mut())?;
        let x = g.add(x, a)?;
        let h = self.norm2.forward(g, store, x)?;
        let q = g.add(h, query_pe)?;
        let a = self.cross_attn.forward(g, store, q, memory_key, memory, None, probs)?;
        let x = g.add(x, a)?;
        let h = self.norm3.forward(g, store, x)?;
        let f = self.ffn.forward(g, store, h)?;
        Ok(g.add(x, f)?)
    }
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub kind: QueryKind,
    pub dim: usize,
    pub layers: Vec<DecoderLayer>,
    pub out_norm: LayerNorm,
}

impl Decoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        kind: QueryKind,
        dim: usize,
        heads: usize,
        ffn: usize,
        n_layers: usize,
    ) -> Self {
        Decoder {
            kind,
            dim,
            layers: (0..n_layers).map(|i| DecoderLayer::new(store, rng, &format!("{name}.layer{i}"), dim, heads, ffn)).collect(),
            out_norm: LayerNorm::new(store, &format!("{name}.out_norm"), dim),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p: Vec<ParamId> = self.layers.iter().flat_map(DecoderLayer::params).collect();
        p.extend(self.out_norm.params());
        p
    }

    /// Cross-attention maps are appended to `probs` (self-attention first per layer).
    pub fn decode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        queries: &QuerySet,
        tokens: &SceneTokens,
        pe: &FourierEncoding,
        mut probs: Option<&mut Vec<NodeId>>,
    ) -> ModelResult<DecodedQueries> {
        if queries.kind != self.kind {
            return Err(ModelError::Invalid(format!("{:?} decoder given {:?} queries", self.kind, queries.kind)));
        }
        for (what, node) in [("query features", queries.features), ("token features", tokens.features)] {
            let found = g.shape(node)[1];
            if found != self.dim {
                return Err(ModelError::DimensionMismatch { what, expected: self.dim, found });
            }
        }
        let mut layers = Vec::new();
        if self.layers.is_empty() {
            return Ok(DecodedQueries { kind: self.kind, positions: queries.positions.clone(), features: queries.features, layers });
        }
        let query_pe = pe.node(g, &queries.positions)?;
        let token_pe = pe.node(g, &tokens.positions)?;
        let memory_key = g.add(tokens.features, token_pe)?;
        let mut x = queries.features;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, store, x, query_pe, memory_key, tokens.features, probs.as_deref_mut())?;
            let last = i + 1 == self.layers.len();
            if self.kind == QueryKind::Instance || last {
                layers.push(self.out_norm.forward(g, store, x)?);
            }
        }
        let features = *layers.last().unwrap();
        if self.kind == QueryKind::Context {
            layers.clear();
        }
        Ok(DecodedQueries { kind: self.kind, positions: queries.positions.clone(), features, layers })
    }
}
