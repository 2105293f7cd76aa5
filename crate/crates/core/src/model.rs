//! Full network assembly, parameter groups and per-scene forward passes.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Backbone, EncoderConfig, PointCloud, SceneTokens};
use crate::config::{AggregatorKind, TrainConfig};
use crate::decoder::{DecodedQueries, Decoder};
use crate::error::{ModelError, ModelResult};
use crate::evalkit::Proposal;
use crate::geometry::{nms, Box3D};
use crate::graph::{Graph, NodeId};
use crate::heads::{
    caption_greedy, instance_roles, late_aggregate, tgi_roles, CaptionHead, CaptionHeadConfig, DetectionHead, DetectionOutput,
    FinalCaption, HeadScorer, PrefixRole,
};
use crate::params::{ParamId, ParamStore};
use crate::queries::{ContextQueryGenerator, InstanceQueryGenerator, QueryKind, SetAbstraction, VoteField, VoteHead};
use crate::scenegen::{SyntheticScene, CLASSES};
use crate::tensor::Real;
use crate::tgi::{aggregate, Aggregator, Gem, GlobalAggregator, NetVlad, TgiWiring};
use crate::vocab::Vocabulary;

/// Context-path components, absent under instance-only wiring.
#[derive(Debug, Clone)]
pub struct ContextPath {
    pub queries: ContextQueryGenerator,
    pub decoder: Decoder,
    pub aggregator: Option<Aggregator>,
}

#[derive(Debug, Clone)]
pub struct SiaModel {
    pub cfg: TrainConfig,
    pub backbone: Backbone,
    pub vote: VoteHead,
    pub instance_queries: InstanceQueryGenerator,
    pub instance_decoder: Decoder,
    pub detection: DetectionHead,
    pub context: Option<ContextPath>,
    pub caption: CaptionHead,
}

/// Parameter-name prefixes of each module, in reporting order.
pub const MODULES: [&str; 9] = [
    "backbone",
    "vote",
    "instance_query",
    "instance_decoder",
    "detection_head",
    "context_query",
    "context_decoder",
    "aggregator",
    "caption_head",
];

/// Modules trained during pretraining and frozen during SCST.
pub const DETECTOR_MODULES: [&str; 5] = ["backbone", "vote", "instance_query", "instance_decoder", "detection_head"];

/// Everything a scene forward pass produces.
#[derive(Debug, Clone)]
pub struct SceneForward {
    pub tokens: SceneTokens,
    pub votes: VoteField,
    pub instances: DecodedQueries,
    pub detections: DetectionOutput,
    pub contexts: Option<DecodedQueries>,
}

/// Sub-captions and final caption of one proposal.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptionedProposal {
    pub query: usize,
    pub proposal: Proposal,
    pub captions: FinalCaption,
}

impl SiaModel {
    /// Builds the network and its parameters from `cfg`; `seed` drives init.
    pub fn build(cfg: &TrainConfig, vocab_size: usize, seed: u64) -> ModelResult<(SiaModel, ParamStore)> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = cfg.dim;
        let backbone = Backbone::new(
            &mut store,
            &mut rng,
            EncoderConfig {
                tokens: cfg.tokens,
                dim: d,
                heads: cfg.heads,
                layers: cfg.enc_layers,
                ffn_dim: cfg.enc_ffn,
                dropout: cfg.dropout,
                mask_radius: cfg.mask_radius,
                tok_radius: cfg.tok_radius,
                tok_nsample: cfg.tok_nsample,
            },
        )?;
        let vote = VoteHead::new(&mut store, &mut rng, "vote", d);
        let instance_queries = InstanceQueryGenerator {
            sa: SetAbstraction::new(&mut store, &mut rng, "instance_query", d),
            count: cfg.n_instance,
            radius: cfg.inst_radius,
            nsample: cfg.inst_nsample,
        };
        let instance_decoder =
            Decoder::new(&mut store, &mut rng, "instance_decoder", QueryKind::Instance, d, cfg.dec_heads, cfg.dec_ffn, cfg.dec_layers);
        let detection = DetectionHead::new(&mut store, &mut rng, "detection_head", d, CLASSES.len());
        let context = if cfg.has_context_path() {
            let queries = ContextQueryGenerator {
                sa: SetAbstraction::new(&mut store, &mut rng, "context_query", d),
                count: cfg.n_context,
                radius: cfg.ctx_radius,
                nsample: cfg.ctx_nsample,
            };
            let decoder =
                Decoder::new(&mut store, &mut rng, "context_decoder", QueryKind::Context, d, cfg.dec_heads, cfg.dec_ffn, cfg.dec_layers);
            let aggregator = cfg.has_global().then(|| match cfg.aggregator {
                AggregatorKind::NetVlad => Aggregator::NetVlad(NetVlad::new(&mut store, &mut rng, "aggregator", d, cfg.netvlad_clusters)),
                AggregatorKind::Gem => Aggregator::Gem(Gem::new(&mut store, &mut rng, "aggregator", d, cfg.gem_p)),
            });
            Some(ContextPath { queries, decoder, aggregator })
        } else {
            None
        };
        let caption = CaptionHead::new(
            &mut store,
            &mut rng,
            "caption_head",
            CaptionHeadConfig {
                vocab: vocab_size,
                feature_dim: d,
                dim: cfg.cap_dim,
                layers: cfg.cap_layers,
                heads: cfg.cap_heads,
                ffn: cfg.cap_ffn,
                max_len: cfg.max_caption_len,
            },
        )?;
        let model = SiaModel { cfg: cfg.clone(), backbone, vote, instance_queries, instance_decoder, detection, context, caption };
        Ok((model, store))
    }

    pub fn module_params(&self, module: &str) -> Vec<ParamId> {
        match module {
            "backbone" => self.backbone.params(),
            "vote" => self.vote.params(),
            "instance_query" => self.instance_queries.params(),
            "instance_decoder" => self.instance_decoder.params(),
            "detection_head" => self.detection.params(),
            "context_query" => self.context.as_ref().map_or(vec![], |c| c.queries.params()),
            "context_decoder" => self.context.as_ref().map_or(vec![], |c| c.decoder.params()),
            "aggregator" => self.context.as_ref().and_then(|c| c.aggregator.as_ref()).map_or(vec![], |a| a.as_dyn().params()),
            "caption_head" => self.caption.params(),
            _ => vec![],
        }
    }

    /// `(module, parameter count)` for every module.
    pub fn parameter_counts(&self, store: &ParamStore) -> Vec<(&'static str, usize)> {
        MODULES
            .iter()
            .map(|m| (*m, self.module_params(m).iter().map(|id| store.get(*id).numel()).sum()))
            .collect()
    }

    pub fn detector_params(&self) -> Vec<ParamId> {
        DETECTOR_MODULES.iter().flat_map(|m| self.module_params(m)).collect()
    }

    pub fn caption_params(&self) -> Vec<ParamId> {
        MODULES.iter().filter(|m| !DETECTOR_MODULES.contains(m)).flat_map(|m| self.module_params(m)).collect()
    }

    pub fn wiring(&self) -> Option<TgiWiring> {
        self.context.as_ref().map(|c| TgiWiring {
            k: self.cfg.k_context,
            global: c.aggregator.is_some(),
            global_inputs: self.cfg.global_inputs,
        })
    }

    pub fn aggregator(&self) -> Option<&dyn GlobalAggregator> {
        self.context.as_ref().and_then(|c| c.aggregator.as_ref()).map(|a| a.as_dyn())
    }

    /// Multiplier applied to the configured query radii for this room.
    pub fn radius_scale(&self, scene: &SyntheticScene) -> Real {
        scene.room_diagonal() / self.cfg.radius_reference_diagonal
    }

    /// Encoder, votes, instance decoding and detection; context decoding too
    /// when `with_context` and the wiring has a context path.
    pub fn forward_scene(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        scene: &SyntheticScene,
        fps_seed: usize,
        with_context: bool,
        dropout_rng: Option<&mut dyn RngCore>,
    ) -> ModelResult<SceneForward> {
        let pc = PointCloud { points: &scene.points, colors: &scene.colors, room_diagonal: scene.room_diagonal() };
        let tokens = self.backbone.forward(g, store, pc, fps_seed, dropout_rng)?;
        let scale = self.radius_scale(scene);
        let votes = self.vote.vote(g, store, &tokens)?;
        let iq = self.instance_queries.generate(g, store, &votes, scale, fps_seed)?;
        let instances = self.instance_decoder.decode(g, store, &iq, &tokens, &self.backbone.pe, None)?;
        let detections = self.detection.detect(g, store, &instances)?;
        let contexts = match (&self.context, with_context) {
            (Some(c), true) => {
                let cq = c.queries.generate(g, store, &tokens, scale, fps_seed)?;
                Some(c.decoder.decode(g, store, &cq, &tokens, &self.backbone.pe, None)?)
            }
            _ => None,
        };
        Ok(SceneForward { tokens, votes, instances, detections, contexts })
    }

    /// Instance-caption prefix of query `i`.
    pub fn instance_prefix(&self, g: &mut Graph, fwd: &SceneForward, i: usize) -> ModelResult<(NodeId, Vec<PrefixRole>)> {
        Ok((g.gather(fwd.instances.features, &[i])?, instance_roles()))
    }

    /// Contextual prefixes of the selected queries (`None` without a context path).
    pub fn context_prefixes(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        fwd: &SceneForward,
        selected: &[usize],
    ) -> ModelResult<Option<Vec<(NodeId, Vec<PrefixRole>)>>> {
        let (Some(wiring), Some(ctx)) = (self.wiring(), fwd.contexts.as_ref()) else {
            return Ok(None);
        };
        let prefixes = aggregate(g, store, self.aggregator(), &fwd.instances, ctx, wiring, selected)?;
        let roles = tgi_roles(wiring.k, wiring.global);
        Ok(Some(prefixes.into_iter().map(|p| (p, roles.clone())).collect()))
    }

    /// Greedy instance, context and final captions for the given queries.
    pub fn caption_queries(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        vocab: &Vocabulary,
        fwd: &SceneForward,
        queries: &[usize],
    ) -> ModelResult<Vec<FinalCaption>> {
        let ctx = self.context_prefixes(g, store, fwd, queries)?;
        let mut out = Vec::with_capacity(queries.len());
        for (n, &q) in queries.iter().enumerate() {
            let (prefix, roles) = self.instance_prefix(g, fwd, q)?;
            let inst = self.greedy_words(g, store, vocab, prefix, roles)?;
            let context = match &ctx {
                Some(c) => self.greedy_words(g, store, vocab, c[n].0, c[n].1.clone())?,
                None => vec![],
            };
            out.push(late_aggregate(&inst, &context));
        }
        Ok(out)
    }

    fn greedy_words(&self, g: &Graph, store: &ParamStore, vocab: &Vocabulary, prefix: NodeId, roles: Vec<PrefixRole>) -> ModelResult<Vec<String>> {
        let scorer = HeadScorer { head: &self.caption, store, prefix: g.tensor(prefix), roles };
        let ids = caption_greedy(&scorer, self.cfg.max_caption_len)?;
        Ok(vocab.decode_words(&ids))
    }

    /// Confidence-filtered, NMS-suppressed final-layer proposals
    /// `(query, box, confidence, class)` in selection order.
    pub fn proposals(&self, g: &Graph, fwd: &SceneForward) -> Vec<(usize, Box3D, Real, usize)> {
        let last = fwd.detections.last();
        let boxes = last.boxes(g);
        let conf = last.confidences(g);
        let keep: Vec<usize> = (0..boxes.len()).filter(|&i| conf[i].0 >= self.cfg.confidence_floor).collect();
        let cands: Vec<(Box3D, Real)> = keep.iter().map(|&i| (boxes[i], conf[i].0)).collect();
        nms(&cands, self.cfg.nms_iou)
            .into_iter()
            .map(|k| {
                let i = keep[k];
                (i, boxes[i], conf[i].0, conf[i].1)
            })
            .collect()
    }

    /// Full inference on one scene: detection, NMS and late-aggregated captions.
    pub fn predict(&self, store: &ParamStore, vocab: &Vocabulary, scene: &SyntheticScene) -> ModelResult<Vec<CaptionedProposal>> {
        self.predict_with(store, vocab, scene, true)
    }

    /// [`predict`](Self::predict), leaving captions empty when `captions` is false.
    pub fn predict_with(&self, store: &ParamStore, vocab: &Vocabulary, scene: &SyntheticScene, captions: bool) -> ModelResult<Vec<CaptionedProposal>> {
        let mut g = Graph::inference();
        let fwd = self.forward_scene(&mut g, store, scene, 0, captions, None)?;
        let props = self.proposals(&g, &fwd);
        let queries: Vec<usize> = props.iter().map(|p| p.0).collect();
        let captions = if captions {
            self.caption_queries(&mut g, store, vocab, &fwd, &queries)?
        } else {
            vec![late_aggregate(&[], &[]); queries.len()]
        };
        Ok(props
            .into_iter()
            .zip(captions)
            .map(|((query, bbox, confidence, class), captions)| CaptionedProposal {
                query,
                proposal: Proposal { bbox, confidence, class: Some(class), caption: captions.combined.clone() },
                captions,
            })
            .collect())
    }

    /// Decoded instance and context features of a few scenes, row-major `[n, D]`.
    pub fn warmup_features(&self, store: &ParamStore, scenes: &[SyntheticScene]) -> ModelResult<Vec<Real>> {
        let mut out = Vec::new();
        for s in scenes {
            let mut g = Graph::inference();
            let fwd = self.forward_scene(&mut g, store, s, 0, true, None)?;
            out.extend_from_slice(g.value(fwd.instances.features));
            if let Some(c) = &fwd.contexts {
                out.extend_from_slice(g.value(c.features));
            }
        }
        Ok(out)
    }

    /// Re-initialises NetVLAD clusters from decoded features (no-op otherwise).
    pub fn init_aggregator(&self, store: &mut ParamStore, scenes: &[SyntheticScene]) -> ModelResult<()> {
        if let Some(Aggregator::NetVlad(nv)) = self.context.as_ref().and_then(|c| c.aggregator.as_ref()) {
            let feats = self.warmup_features(store, scenes)?;
            nv.init_from_features(store, &feats)?;
        }
        Ok(())
    }
}

/// Picks an FPS seed index from a stream.
pub fn draw_fps_seed<R: Rng + ?Sized>(rng: &mut R, n_points: usize) -> usize {
    rng.gen_range(0..n_points.max(1))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Detector,
    Caption,
}

impl SiaModel {
    /// Group membership of every parameter, indexed by id.
    pub fn groups(&self, store: &ParamStore) -> Vec<ParamGroup> {
        let mut g = vec![ParamGroup::Detector; store.len()];
        for id in self.caption_params() {
            g[id.index()] = ParamGroup::Caption;
        }
        g
    }

    pub fn check_vocab(&self, vocab: &Vocabulary) -> ModelResult<()> {
        if vocab.len() != self.caption.cfg.vocab {
            return Err(ModelError::DimensionMismatch { what: "vocabulary", expected: self.caption.cfg.vocab, found: vocab.len() });
        }
        Ok(())
    }
}
