//! Detection head, prefix-conditioned caption head, decoding and late
//! aggregation of the two sub-captions.

use rand::Rng;

use crate::decoder::DecodedQueries;
use crate::error::{ModelError, ModelResult};
use crate::geometry::{Box3D, Point3};
use crate::graph::{Graph, NodeId};
use crate::nn::{EncoderLayer, LayerNorm, Linear, Mlp, MASKED};
use crate::params::{normal, ParamId, ParamStore};
use crate::queries::QueryKind;
use crate::tensor::{Real, Tensor};
use crate::vocab::{BOS, EOS, PAD, SPECIALS};

/// Raw head outputs for one decoder layer.
#[derive(Debug, Clone, Copy)]
pub struct LayerDetections {
    /// `[M, 3]` box centers (query position plus offset).
    pub centers: NodeId,
    /// `[M, 3]` positive sizes.
    pub sizes: NodeId,
    /// `[M, classes + 1]`, last column is "no object".
    pub logits: NodeId,
}

impl LayerDetections {
    pub fn boxes(&self, g: &Graph) -> Vec<Box3D> {
        let c = g.value(self.centers);
        let s = g.value(self.sizes);
        c.chunks(3)
            .zip(s.chunks(3))
            .map(|(c, s)| Box3D { center: [c[0], c[1], c[2]], size: [s[0], s[1], s[2]] })
            .collect()
    }

    /// Class probabilities per query.
    pub fn probabilities(&self, g: &Graph) -> Vec<Vec<Real>> {
        let shape = g.shape(self.logits);
        let n = shape[1];
        g.value(self.logits)
            .chunks(n)
            .map(|row| {
                let mx = row.iter().copied().fold(Real::NEG_INFINITY, Real::max);
                let e: Vec<Real> = row.iter().map(|x| (x - mx).exp()).collect();
                let z: Real = e.iter().sum();
                e.into_iter().map(|x| x / z).collect()
            })
            .collect()
    }

    /// `(1 − p(no object), most likely object class)` per query.
    pub fn confidences(&self, g: &Graph) -> Vec<(Real, usize)> {
        self.probabilities(g)
            .into_iter()
            .map(|p| {
                let n = p.len() - 1;
                let mut best = 0;
                for c in 1..n {
                    if p[c] > p[best] {
                        best = c;
                    }
                }
                (1.0 - p[n], best)
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct DetectionOutput {
    pub layers: Vec<LayerDetections>,
}

impl DetectionOutput {
    pub fn last(&self) -> &LayerDetections {
        self.layers.last().expect("at least one decoder layer")
    }
}

/// FFNs for center offset, size and class, shared by every decoder layer.
#[derive(Debug, Clone)]
pub struct DetectionHead {
    pub classes: usize,
    pub center: Mlp,
    pub size: Mlp,
    pub class: Mlp,
}

impl DetectionHead {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, dim: usize, classes: usize) -> Self {
        DetectionHead {
            classes,
            center: Mlp::new(store, rng, &format!("{name}.center"), &[dim, dim, 3], false),
            size: Mlp::new(store, rng, &format!("{name}.size"), &[dim, dim, 3], false),
            class: Mlp::new(store, rng, &format!("{name}.class"), &[dim, dim, classes + 1], false),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.center.params();
        p.extend(self.size.params());
        p.extend(self.class.params());
        p
    }

    pub fn detect_features(&self, g: &mut Graph, store: &ParamStore, features: NodeId, positions: &[Point3]) -> ModelResult<LayerDetections> {
        let m = positions.len();
        let offset = self.center.forward(g, store, features)?;
        let base = g.constant(&[m, 3], positions.iter().flatten().copied().collect())?;
        let centers = g.add(base, offset)?;
        let raw = self.size.forward(g, store, features)?;
        let sizes = g.softplus(raw);
        let sizes = g.add_scalar(sizes, 1e-4);
        let logits = self.class.forward(g, store, features)?;
        Ok(LayerDetections { centers, sizes, logits })
    }

    pub fn detect(&self, g: &mut Graph, store: &ParamStore, decoded: &DecodedQueries) -> ModelResult<DetectionOutput> {
        if decoded.kind != QueryKind::Instance {
            return Err(ModelError::Invalid("detection requires instance queries".into()));
        }
        let layers = if decoded.layers.is_empty() { vec![decoded.features] } else { decoded.layers.clone() };
        let layers = layers
            .into_iter()
            .map(|f| self.detect_features(g, store, f, &decoded.positions))
            .collect::<ModelResult<_>>()?;
        Ok(DetectionOutput { layers })
    }
}

/// Role of a prefix row; selects its type embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrefixRole {
    Instance = 0,
    Context = 1,
    Global = 2,
}

/// Roles for an instance-only prefix.
pub fn instance_roles() -> Vec<PrefixRole> {
    vec![PrefixRole::Instance]
}

/// Roles for a `[instance ; k contexts ; global?]` prefix.
pub fn tgi_roles(k: usize, global: bool) -> Vec<PrefixRole> {
    let mut r = vec![PrefixRole::Instance];
    r.extend(std::iter::repeat_n(PrefixRole::Context, k));
    if global {
        r.push(PrefixRole::Global);
    }
    r
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaptionHeadConfig {
    pub vocab: usize,
    pub feature_dim: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
    pub max_len: usize,
}

/// Decoder-only transformer over `[prefix ; BOS ; tokens]`.
#[derive(Debug, Clone)]
pub struct CaptionHead {
    pub cfg: CaptionHeadConfig,
    pub prefix_proj: Linear,
    pub type_emb: ParamId,
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub layers: Vec<EncoderLayer>,
    pub norm: LayerNorm,
    pub lm: Linear,
}

impl CaptionHead {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, cfg: CaptionHeadConfig) -> ModelResult<Self> {
        if cfg.heads == 0 || cfg.dim % cfg.heads != 0 {
            return Err(ModelError::Invalid(format!("caption dim {} not divisible by {} heads", cfg.dim, cfg.heads)));
        }
        let e = cfg.dim;
        Ok(CaptionHead {
            prefix_proj: Linear::new(store, rng, &format!("{name}.prefix_proj"), cfg.feature_dim, e),
            type_emb: store.add(format!("{name}.type_emb"), normal(rng, &[3, e], 0.02)),
            tok_emb: store.add(format!("{name}.tok_emb"), normal(rng, &[cfg.vocab, e], 0.1)),
            pos_emb: store.add(format!("{name}.pos_emb"), normal(rng, &[cfg.max_len + 1, e], 0.02)),
            layers: (0..cfg.layers)
                .map(|i| EncoderLayer::new(store, rng, &format!("{name}.layer{i}"), e, cfg.heads, cfg.ffn))
                .collect(),
            norm: LayerNorm::new(store, &format!("{name}.norm"), e),
            lm: Linear::new(store, rng, &format!("{name}.lm"), e, cfg.vocab),
            cfg,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.prefix_proj.params();
        p.extend([self.type_emb, self.tok_emb, self.pos_emb]);
        self.layers.iter().for_each(|l| p.extend(l.params()));
        p.extend(self.norm.params());
        p.extend(self.lm.params());
        p
    }

    /// Prefix rows see the prefix; text rows see the prefix and earlier text.
    pub fn attention_mask(prefix: usize, text: usize) -> Vec<Real> {
        let n = prefix + text;
        let mut m = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let visible = j < prefix || (i >= prefix && j <= i);
                if !visible {
                    m[i * n + j] = MASKED;
                }
            }
        }
        m
    }

    /// Next-token logits `[L, V]` for text input `tokens` (starting with BOS).
    pub fn logits(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        prefix: NodeId,
        roles: &[PrefixRole],
        tokens: &[usize],
    ) -> ModelResult<NodeId> {
        let pshape = g.shape(prefix).to_vec();
        if pshape.len() != 2 || pshape[1] != self.cfg.feature_dim {
            return Err(ModelError::DimensionMismatch { what: "caption prefix", expected: self.cfg.feature_dim, found: *pshape.last().unwrap_or(&0) });
        }
        let p = pshape[0];
        if p == 0 || roles.len() != p {
            return Err(ModelError::Invalid(format!("prefix of {p} rows with {} roles", roles.len())));
        }
        let l = tokens.len();
        if l == 0 || l > self.cfg.max_len + 1 {
            return Err(ModelError::Invalid(format!("text length {l} outside 1..={}", self.cfg.max_len + 1)));
        }
        if let Some(bad) = tokens.iter().find(|&&t| t >= self.cfg.vocab) {
            return Err(ModelError::Invalid(format!("token id {bad} outside vocabulary of {}", self.cfg.vocab)));
        }
        let proj = self.prefix_proj.forward(g, store, prefix)?;
        let types = g.param(store, self.type_emb);
        let role_ids: Vec<usize> = roles.iter().map(|r| *r as usize).collect();
        let types = g.gather(types, &role_ids)?;
        let pre = g.add(proj, types)?;
        let emb = g.param(store, self.tok_emb);
        let text = g.embedding_lookup(emb, tokens)?;
        let pos = g.param(store, self.pos_emb);
        let pos = g.slice(pos, 0, 0, l)?;
        let text = g.add(text, pos)?;
        let mut x = g.concat(&[pre, text], 0)?;
        let mask = g.constant(&[p + l, p + l], Self::attention_mask(p, l))?;
        for layer in &self.layers {
            x = layer.forward(g, store, x, None, Some(mask), None)?;
        }
        let x = g.slice(x, 0, p, p + l)?;
        let x = self.norm.forward(g, store, x)?;
        Ok(self.lm.forward(g, store, x)?)
    }

    /// `−log P(caption, EOS | prefix)` as a scalar node.
    pub fn nll(&self, g: &mut Graph, store: &ParamStore, prefix: NodeId, roles: &[PrefixRole], caption: &[usize]) -> ModelResult<NodeId> {
        self.sequence_nll(g, store, prefix, roles, caption, true)
    }

    /// Like [`nll`](Self::nll); `with_eos = false` scores a truncated hypothesis.
    pub fn sequence_nll(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        prefix: NodeId,
        roles: &[PrefixRole],
        caption: &[usize],
        with_eos: bool,
    ) -> ModelResult<NodeId> {
        if caption.len() > self.cfg.max_len {
            return Err(ModelError::Invalid(format!("caption of {} tokens exceeds max_len {}", caption.len(), self.cfg.max_len)));
        }
        let mut input = vec![BOS];
        input.extend_from_slice(caption);
        let mut targets = caption.to_vec();
        if with_eos {
            targets.push(EOS);
        } else {
            input.pop();
        }
        if targets.is_empty() {
            return Ok(g.constant(&[], vec![0.0])?);
        }
        let logits = self.logits(g, store, prefix, roles, &input)?;
        let ce = g.cross_entropy_with_logits(logits, &targets)?;
        Ok(g.sum(ce))
    }
}

/// Source of next-token log-probabilities given the text so far.
pub trait StepScorer {
    fn vocab_size(&self) -> usize;
    /// `tokens` starts with BOS.
    fn log_probs(&self, tokens: &[usize]) -> ModelResult<Vec<Real>>;
}

/// Scores steps with a caption head on a fixed prefix.
pub struct HeadScorer<'a> {
    pub head: &'a CaptionHead,
    pub store: &'a ParamStore,
    pub prefix: Tensor,
    pub roles: Vec<PrefixRole>,
}

impl StepScorer for HeadScorer<'_> {
    fn vocab_size(&self) -> usize {
        self.head.cfg.vocab
    }

    fn log_probs(&self, tokens: &[usize]) -> ModelResult<Vec<Real>> {
        let mut g = Graph::inference();
        let prefix = g.input(&self.prefix);
        let logits = self.head.logits(&mut g, self.store, prefix, &self.roles, tokens)?;
        let v = self.head.cfg.vocab;
        let last = &g.value(logits)[(tokens.len() - 1) * v..];
        Ok(log_softmax(last))
    }
}

pub fn log_softmax(row: &[Real]) -> Vec<Real> {
    let mx = row.iter().copied().fold(Real::NEG_INFINITY, Real::max);
    let lz = row.iter().map(|x| (x - mx).exp()).sum::<Real>().ln() + mx;
    row.iter().map(|x| x - lz).collect()
}

fn forbid_specials(lp: &mut [Real]) {
    for id in [PAD, BOS] {
        if let Some(x) = lp.get_mut(id) {
            *x = Real::NEG_INFINITY;
        }
    }
}

/// Argmax decoding until EOS or `max_len` tokens; lower id wins ties.
pub fn caption_greedy(scorer: &dyn StepScorer, max_len: usize) -> ModelResult<Vec<usize>> {
    let mut tokens = vec![BOS];
    while tokens.len() <= max_len {
        let mut lp = scorer.log_probs(&tokens)?;
        forbid_specials(&mut lp);
        let mut best = 0;
        for (i, x) in lp.iter().enumerate() {
            if *x > lp[best] {
                best = i;
            }
        }
        if best == EOS {
            break;
        }
        tokens.push(best);
    }
    tokens.remove(0);
    Ok(tokens)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub log_prob: Real,
    /// False when the hypothesis was cut at `max_len` without EOS.
    pub ended: bool,
}

fn rank(a: &Hypothesis, b: &Hypothesis) -> std::cmp::Ordering {
    b.log_prob.total_cmp(&a.log_prob).then_with(|| a.tokens.cmp(&b.tokens))
}

/// Length-unnormalised beam search. Returns up to `beam_k` completed
/// hypotheses sorted by total log-probability.
pub fn caption_beam(scorer: &dyn StepScorer, beam_k: usize, max_len: usize) -> ModelResult<Vec<Hypothesis>> {
    if beam_k == 0 {
        return Err(ModelError::Invalid("beam_k must be at least 1".into()));
    }
    let mut live = vec![Hypothesis { tokens: vec![], log_prob: 0.0, ended: false }];
    let mut done: Vec<Hypothesis> = Vec::new();
    while !live.is_empty() && done.len() < beam_k {
        let mut cands = Vec::new();
        for h in &live {
            if h.tokens.len() == max_len {
                cands.push(h.clone());
                continue;
            }
            let mut input = vec![BOS];
            input.extend_from_slice(&h.tokens);
            let mut lp = scorer.log_probs(&input)?;
            forbid_specials(&mut lp);
            for (id, x) in lp.iter().enumerate() {
                if x.is_finite() {
                    let mut tokens = h.tokens.clone();
                    let ended = id == EOS;
                    if !ended {
                        tokens.push(id);
                    }
                    cands.push(Hypothesis { tokens, log_prob: h.log_prob + x, ended });
                }
            }
        }
        cands.sort_by(rank);
        cands.truncate(beam_k - done.len());
        live.clear();
        for c in cands {
            if c.ended || c.tokens.len() == max_len {
                done.push(c);
            } else {
                live.push(c);
            }
        }
    }
    done.sort_by(rank);
    Ok(done)
}

/// Instance caption, context caption and their concatenation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FinalCaption {
    pub instance: Vec<String>,
    pub context: Vec<String>,
    pub combined: Vec<String>,
}

pub fn late_aggregate(instance: &[String], context: &[String]) -> FinalCaption {
    let clean = |w: &[String]| -> Vec<String> { w.iter().filter(|t| !SPECIALS.contains(&t.as_str())).cloned().collect() };
    let (instance, context) = (clean(instance), clean(context));
    let combined = instance.iter().chain(&context).cloned().collect();
    FinalCaption { instance, context, combined }
}
