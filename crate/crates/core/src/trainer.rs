//! Staged training loop: detector pretraining, joint MLE and SCST refinement.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::checkpoint::{BestMetric, Checkpoint, CheckpointError, RngState};
use crate::config::{ConfigError, Stage, TrainConfig};
use crate::error::ModelError;
use crate::evalkit::{cider, DocFreq, GtObject, MetricReport, PredictionRecord, Proposal, SceneEval};
use crate::graph::{Gradients, Graph};
use crate::heads::FinalCaption;
use crate::losses::{
    detection_loss, hungarian, matching_cost, mle_loss, scst_loss, total_loss, CaptionTarget, DetectionWeights, GtSet, LossNodes,
    LossReport, ObjectiveWeights,
};
use crate::model::{draw_fps_seed, CaptionedProposal, ParamGroup, SiaModel};
use crate::optim::{clip_grad_norm, cosine_lr, step_store, AdamState, AdamWConfig};
use crate::params::{ParamId, ParamStore};
use crate::queries::vote_loss;
use crate::scenegen::SyntheticScene;
use crate::tensor::Real;
use crate::vocab::{VocabError, Vocabulary};

/// Named RNG streams forked from the run seed.
pub const STREAMS: [&str; 4] = ["data", "fps", "dropout", "captions"];

/// IoU thresholds of the standard report.
pub const EVAL_THRESHOLDS: [Real; 2] = [0.25, 0.5];

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error("stage prerequisite: {0}")]
    Prerequisite(String),
    #[error("training set is empty")]
    EmptyDataset,
    #[error("loss diverged at epoch {epoch} step {step}; last finite step {}", last_finite.map_or("none".to_string(), |s| s.to_string()))]
    Divergence { epoch: usize, step: u64, last_finite: Option<u64> },
    #[error("observer: {0}")]
    Observer(String),
}

/// Receives log lines and end-of-epoch checkpoints.
pub trait TrainObserver {
    fn log(&mut self, _line: &str) {}
    fn epoch_end(&mut self, _ckpt: &Checkpoint, _is_best: bool) -> Result<(), TrainError> {
        Ok(())
    }
}

/// Discards everything.
pub struct NullObserver;

impl TrainObserver for NullObserver {}

/// The forked streams of one run.
#[derive(Debug, Clone)]
pub struct RngStreams {
    streams: Vec<(String, u64, ChaCha8Rng)>,
}

impl RngStreams {
    pub fn new(seed: u64) -> Self {
        let streams = STREAMS
            .iter()
            .enumerate()
            .map(|(i, name)| {
                let mut r = ChaCha8Rng::seed_from_u64(seed);
                r.set_stream(i as u64 + 1);
                (name.to_string(), seed, r)
            })
            .collect();
        RngStreams { streams }
    }

    pub fn restore(states: &[RngState], seed: u64) -> Self {
        let mut out = Self::new(seed);
        for s in states {
            let mut r = ChaCha8Rng::seed_from_u64(s.seed);
            r.set_stream(s.stream);
            r.set_word_pos(s.word_pos);
            match out.streams.iter_mut().find(|(n, _, _)| *n == s.name) {
                Some(slot) => *slot = (s.name.clone(), s.seed, r),
                None => out.streams.push((s.name.clone(), s.seed, r)),
            }
        }
        out
    }

    pub fn states(&self) -> Vec<RngState> {
        self.streams
            .iter()
            .map(|(name, seed, r)| RngState { name: name.clone(), seed: *seed, stream: r.get_stream(), word_pos: r.get_word_pos() })
            .collect()
    }

    pub fn get(&mut self, name: &str) -> &mut ChaCha8Rng {
        &mut self.streams.iter_mut().find(|(n, _, _)| n == name).expect("known stream").2
    }
}

/// Maps `f` over `items` on up to `threads` workers; output keeps input order.
pub fn par_map<T: Sync, U: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> U + Sync) -> Vec<U> {
    let threads = threads.max(1).min(items.len().max(1));
    if threads == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = items.chunks(chunk).map(|c| s.spawn(|| c.iter().map(&f).collect::<Vec<U>>())).collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    })
}

/// Worker count from `SIA_THREADS`, else available parallelism.
pub fn thread_count() -> usize {
    std::env::var("SIA_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Vocabulary over every caption of the training scenes.
pub fn build_vocab(scenes: &[SyntheticScene]) -> Result<Vocabulary, VocabError> {
    let corpus: Vec<Vec<String>> =
        scenes.iter().flat_map(|s| s.instances.iter().flat_map(|i| i.captions.iter().map(|c| c.tokens.clone()))).collect();
    Vocabulary::build(&corpus)
}

/// Rebuilds model, parameters and vocabulary from a checkpoint.
pub fn restore(ckpt: &Checkpoint) -> Result<(SiaModel, ParamStore, Vocabulary), TrainError> {
    let vocab = Vocabulary::from_tokens(ckpt.vocab.clone());
    let (model, mut store) = SiaModel::build(&ckpt.config, vocab.len(), ckpt.config.seed)?;
    ckpt.load_into(&mut store)?;
    Ok((model, store, vocab))
}

/// References a sub-caption is trained and rewarded against.
#[derive(Debug, Clone)]
struct Routed {
    instance: Vec<Vec<String>>,
    context: Vec<Vec<String>>,
}

fn routed_references(model: &SiaModel, inst: &crate::scenegen::GtInstance) -> Routed {
    let attr: Vec<Vec<String>> = inst.captions_of(false).map(|c| c.tokens.clone()).collect();
    let ctx: Vec<Vec<String>> = inst.captions_of(true).map(|c| c.tokens.clone()).collect();
    if model.context.is_some() {
        Routed { instance: attr, context: ctx }
    } else {
        Routed { instance: inst.final_references(), context: vec![] }
    }
}

/// Randomness pre-drawn for one scene so workers stay deterministic.
#[derive(Debug, Clone)]
struct SceneDraw {
    scene: usize,
    fps_seed: usize,
    dropout_seed: u64,
    /// Per gt instance: chosen instance-route and context-route reference.
    choices: Vec<(usize, usize)>,
}

struct StepContext<'a> {
    model: &'a SiaModel,
    store: &'a ParamStore,
    vocab: &'a Vocabulary,
    stage: Stage,
    det_weights: DetectionWeights,
    weights: ObjectiveWeights,
    frozen: Option<Vec<bool>>,
    df: Option<(DocFreq, DocFreq)>,
    scale: Real,
}

fn encode_caption(vocab: &Vocabulary, words: &[String], max_len: usize) -> Vec<usize> {
    let mut ids = vocab.encode(words);
    ids.truncate(max_len);
    ids
}

fn scene_step(ctx: &StepContext<'_>, scene: &SyntheticScene, draw: &SceneDraw) -> Result<(Gradients, LossReport), ModelError> {
    let model = ctx.model;
    let cfg = &model.cfg;
    let mut g = match &ctx.frozen {
        Some(f) => Graph::with_frozen(f.clone()),
        None => Graph::new(),
    };
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(draw.dropout_seed);
    let dropout: Option<&mut dyn rand::RngCore> = if cfg.dropout > 0.0 { Some(&mut dropout_rng) } else { None };
    let with_context = ctx.stage != Stage::Pretrain;
    let fwd = model.forward_scene(&mut g, ctx.store, scene, draw.fps_seed, with_context, dropout)?;
    let boxes: Vec<_> = scene.instances.iter().map(|i| i.bbox).collect();
    let classes: Vec<usize> = scene.instances.iter().map(|i| i.class_label).collect();
    let gt = GtSet { boxes: &boxes, classes: &classes };

    let mut parts = LossNodes::default();
    let pairs = if ctx.stage == Stage::Scst {
        let last = fwd.detections.last();
        hungarian(&matching_cost(&last.boxes(&g), &last.probabilities(&g), gt, &ctx.det_weights))?.pairs
    } else {
        parts.vote = Some(vote_loss(&mut g, &fwd.votes, &fwd.tokens.positions, &boxes)?);
        let mut pairs = vec![];
        for layer in &fwd.detections.layers {
            let (terms, assignment) = detection_loss(&mut g, layer, gt, &ctx.det_weights)?;
            parts.detection.push(terms);
            pairs = assignment.pairs;
        }
        pairs
    };

    if ctx.stage != Stage::Pretrain && !pairs.is_empty() {
        let selected: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let ctx_prefixes = model.context_prefixes(&mut g, ctx.store, &fwd, &selected)?;
        let max_len = cfg.max_caption_len;
        let mut routes = Vec::with_capacity(pairs.len());
        for (n, &(q, j)) in pairs.iter().enumerate() {
            let refs = routed_references(model, &scene.instances[j]);
            let (pi, ri) = model.instance_prefix(&mut g, &fwd, q)?;
            routes.push((pi, ri, refs.instance.clone(), draw.choices[j].0, false));
            if let Some(c) = &ctx_prefixes {
                routes.push((c[n].0, c[n].1.clone(), refs.context, draw.choices[j].1, true));
            }
        }
        routes.retain(|r| !r.2.is_empty());
        if ctx.stage == Stage::Mle {
            let targets: Vec<CaptionTarget> = routes
                .iter()
                .map(|(p, roles, refs, choice, _)| CaptionTarget {
                    prefix: *p,
                    roles: roles.clone(),
                    tokens: encode_caption(ctx.vocab, &refs[choice % refs.len()], max_len),
                })
                .collect();
            parts.caption = Some(mle_loss(&mut g, ctx.store, &model.caption, &targets)?);
        } else {
            let (df_inst, df_ctx) = ctx.df.as_ref().expect("scst doc freq");
            let mut total: Option<crate::graph::NodeId> = None;
            for (p, roles, refs, _, is_context) in &routes {
                let df = if *is_context { df_ctx } else { df_inst };
                let reward = |ids: &[usize]| cider(&ctx.vocab.decode_words(ids), refs, df);
                let (loss, _) = scst_loss(&mut g, ctx.store, &model.caption, *p, roles, &reward, cfg.beam_k, max_len)?;
                total = Some(match total {
                    None => loss,
                    Some(acc) => g.add(acc, loss)?,
                });
            }
            if let Some(t) = total {
                parts.caption = Some(g.scale(t, 1.0 / routes.len() as Real));
            }
        }
    }

    let (loss, report) = total_loss(&mut g, &parts, ctx.stage, &ctx.weights)?;
    let scaled = g.scale(loss, ctx.scale);
    let grads = g.backward(scaled)?;
    Ok((grads, report))
}

/// Learning rate of each group at `step` of `total` (None = not trained).
pub fn stage_lrs(cfg: &TrainConfig, step: usize, total: usize) -> (Option<Real>, Option<Real>) {
    match cfg.stage {
        Stage::Pretrain => (Some(cosine_lr(cfg.lr_init, cfg.lr_floor, step, total)), None),
        Stage::Mle => (Some(cfg.lr_floor), Some(cosine_lr(cfg.caption_lr_init, cfg.caption_lr_floor, step, total))),
        Stage::Scst => (None, Some(cosine_lr(cfg.caption_lr_init, cfg.caption_lr_floor, step, total))),
    }
}

fn log_line(stage: Stage, epoch: usize, step: u64, lrs: (Option<Real>, Option<Real>), r: &LossReport, norm: Real) -> String {
    let mut s = format!("stage={} epoch={} step={}", stage, epoch, step);
    let lr = |v: Option<Real>| v.map_or("off".to_string(), |x| format!("{x:e}"));
    let _ = write!(s, " lr_det={} lr_cap={}", lr(lrs.0), lr(lrs.1));
    if stage != Stage::Scst {
        let _ = write!(s, " vote={}", r.vote);
        for (i, d) in r.detection.iter().enumerate() {
            let _ = write!(s, " det{i}={d} giou{i}={} cls{i}={} ctr{i}={} size{i}={}", r.giou[i], r.class[i], r.center[i], r.size[i]);
        }
    }
    if stage != Stage::Pretrain {
        let _ = write!(s, " cap={}", r.caption);
    }
    let _ = write!(s, " total={} grad_norm={norm}", r.total);
    s
}

fn best_key(stage: Stage) -> &'static str {
    match stage {
        Stage::Pretrain => "mAP25",
        _ => "C25",
    }
}

/// Runs `cfg.stage` until `cfg.epochs` epochs of that stage are complete.
/// A `resume` checkpoint of the same stage continues its epoch counter;
/// one of the preceding stage starts the new stage from its weights.
pub fn run_stage(
    cfg: &TrainConfig,
    train: &[SyntheticScene],
    eval: &[SyntheticScene],
    resume: Option<&Checkpoint>,
    threads: usize,
    observer: &mut dyn TrainObserver,
) -> Result<Checkpoint, TrainError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let resume_stage = resume.map(|c| c.config.stage);
    match (cfg.stage, resume_stage) {
        (Stage::Scst, None) => return Err(TrainError::Prerequisite("scst requires an mle checkpoint".into())),
        (Stage::Scst, Some(Stage::Pretrain)) => {
            return Err(TrainError::Prerequisite("scst requires an mle checkpoint, got a pretrain checkpoint".into()))
        }
        (Stage::Mle, Some(Stage::Scst)) | (Stage::Pretrain, Some(Stage::Mle | Stage::Scst)) => {
            return Err(TrainError::Prerequisite(format!(
                "cannot run {} from a {} checkpoint",
                cfg.stage,
                resume_stage.unwrap()
            )))
        }
        _ => {}
    }
    let continuing = resume_stage == Some(cfg.stage);

    let (model, mut store, vocab) = match resume {
        Some(ck) => {
            cfg.check_compatible(&ck.config)?;
            let vocab = Vocabulary::from_tokens(ck.vocab.clone());
            let (model, mut store) = SiaModel::build(cfg, vocab.len(), cfg.seed)?;
            ck.load_into(&mut store)?;
            (model, store, vocab)
        }
        None => {
            let vocab = build_vocab(train)?;
            let (model, store) = SiaModel::build(cfg, vocab.len(), cfg.seed)?;
            (model, store, vocab)
        }
    };
    let mut rngs = match resume {
        Some(ck) if !ck.rng.is_empty() => RngStreams::restore(&ck.rng, cfg.seed),
        _ => RngStreams::new(cfg.seed),
    };
    let (mut epoch, mut step, mut best, mut adam) = match resume {
        Some(ck) if continuing => (ck.epoch, ck.step, ck.best.clone(), ck.adam.clone().unwrap_or_else(|| AdamState::for_store(&store))),
        _ => (0, 0, None, AdamState::for_store(&store)),
    };
    if cfg.stage == Stage::Mle && !continuing {
        model.init_aggregator(&mut store, &train[..train.len().min(4)])?;
    }

    let groups = model.groups(&store);
    let frozen = (cfg.stage == Stage::Scst).then(|| groups.iter().map(|g| *g == ParamGroup::Detector).collect::<Vec<bool>>());
    let df = (cfg.stage == Stage::Scst).then(|| scst_doc_freq(&model, train));
    let batch = cfg.batch_size;
    let steps_per_epoch = train.len().div_ceil(batch);
    let total_steps = cfg.epochs * steps_per_epoch;
    let adamw = AdamWConfig { weight_decay: cfg.weight_decay, ..AdamWConfig::default() };
    let mut last_finite: Option<u64> = None;

    let snapshot = |store: &ParamStore, epoch: usize, step: u64, best: &Option<BestMetric>, rngs: &RngStreams, adam: &AdamState| Checkpoint {
        config: cfg.clone(),
        vocab: vocab.tokens().to_vec(),
        epoch,
        step,
        best: best.clone(),
        rng: rngs.states(),
        params: Checkpoint::params_from_store(store),
        adam: Some(adam.clone()),
    };

    while epoch < cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(rngs.get("data"));
        for chunk in order.chunks(batch) {
            let draws: Vec<SceneDraw> = chunk
                .iter()
                .map(|&s| {
                    let scene = &train[s];
                    let fps_seed = if cfg.random_fps_seed { draw_fps_seed(rngs.get("fps"), cfg.tokens.min(scene.points.len())) } else { 0 };
                    let dropout_seed = rngs.get("dropout").gen();
                    let caps = rngs.get("captions");
                    let choices = scene.instances.iter().map(|_| (caps.gen_range(0..1 << 16), caps.gen_range(0..1 << 16))).collect();
                    SceneDraw { scene: s, fps_seed, dropout_seed, choices }
                })
                .collect();
            let sctx = StepContext {
                model: &model,
                store: &store,
                vocab: &vocab,
                stage: cfg.stage,
                det_weights: DetectionWeights::default(),
                weights: ObjectiveWeights::default(),
                frozen: frozen.clone(),
                df: df.clone(),
                scale: 1.0 / chunk.len() as Real,
            };
            let results = par_map(&draws, threads, |d| scene_step(&sctx, &train[d.scene], d));
            let mut merged = Gradients::default();
            let mut report = LossReport::default();
            for r in results {
                let (grads, rep) = r?;
                merged.merge(&grads);
                report.add(&rep);
            }
            let report = report.scaled(1.0 / chunk.len() as Real);
            if !report.total.is_finite() {
                return Err(TrainError::Divergence { epoch, step, last_finite });
            }
            let lrs = stage_lrs(cfg, step as usize, total_steps);
            let trainable: Vec<ParamId> = store
                .ids()
                .filter(|id| match groups[id.index()] {
                    ParamGroup::Detector => lrs.0.is_some(),
                    ParamGroup::Caption => lrs.1.is_some(),
                })
                .collect();
            store.zero_grad();
            store.accumulate(&merged).map_err(ModelError::from)?;
            let norm = clip_grad_norm(&mut store, &trainable, cfg.grad_clip);
            if !norm.is_finite() {
                return Err(TrainError::Divergence { epoch, step, last_finite });
            }
            let lr_of = |id: ParamId| match groups[id.index()] {
                ParamGroup::Detector => lrs.0,
                ParamGroup::Caption => lrs.1,
            };
            step_store(&mut store, &mut adam, &adamw, lr_of).map_err(ModelError::from)?;
            store.zero_grad();
            observer.log(&log_line(cfg.stage, epoch + 1, step + 1, lrs, &report, norm));
            last_finite = Some(step);
            step += 1;
        }
        epoch += 1;

        let mut is_best = false;
        if !eval.is_empty() && (epoch % cfg.eval_every.max(1) == 0 || epoch == cfg.epochs) {
            let (report, _) = evaluate(&model, &store, &vocab, eval, &EVAL_THRESHOLDS, threads, cfg.stage != Stage::Pretrain)?;
            let key = best_key(cfg.stage);
            let value = report.get(key).unwrap_or(0.0);
            let mut line = format!("stage={} epoch={epoch} eval=1", cfg.stage);
            for (k, v) in &report.values {
                let _ = write!(line, " {k}={v}");
            }
            observer.log(&line);
            if best.as_ref().map_or(true, |b| value > b.value) {
                best = Some(BestMetric { key: key.to_string(), value, epoch });
                is_best = true;
            }
        }
        let ck = snapshot(&store, epoch, step, &best, &rngs, &adam);
        observer.epoch_end(&ck, is_best)?;
    }
    Ok(snapshot(&store, epoch, step, &best, &rngs, &adam))
}

/// Document frequencies of the instance-route and context-route reference
/// sets over the training corpus (one document per gt instance).
fn scst_doc_freq(model: &SiaModel, train: &[SyntheticScene]) -> (DocFreq, DocFreq) {
    let routed: Vec<Routed> = train.iter().flat_map(|s| s.instances.iter().map(|i| routed_references(model, i))).collect();
    let inst: Vec<Vec<Vec<String>>> = routed.iter().map(|r| r.instance.clone()).collect();
    let ctx: Vec<Vec<Vec<String>>> = routed.iter().map(|r| r.context.clone()).filter(|c| !c.is_empty()).collect();
    (DocFreq::build(&inst), DocFreq::build(&ctx))
}

/// Predictions for each scene; captions are skipped when `captions` is false.
pub fn predict_all(
    model: &SiaModel,
    store: &ParamStore,
    vocab: &Vocabulary,
    scenes: &[SyntheticScene],
    threads: usize,
    captions: bool,
) -> Result<Vec<Vec<CaptionedProposal>>, ModelError> {
    par_map(scenes, threads, |s| model.predict_with(store, vocab, s, captions)).into_iter().collect()
}

/// Scores predictions with the full metric grid; returns the report and
/// the interchange records.
pub fn evaluate(
    model: &SiaModel,
    store: &ParamStore,
    vocab: &Vocabulary,
    scenes: &[SyntheticScene],
    thresholds: &[Real],
    threads: usize,
    captions: bool,
) -> Result<(MetricReport, Vec<PredictionRecord>), ModelError> {
    let preds = predict_all(model, store, vocab, scenes, threads, captions)?;
    let mut evals = Vec::with_capacity(scenes.len());
    let mut records = Vec::new();
    for (scene, p) in scenes.iter().zip(preds) {
        let proposals: Vec<Proposal> = p.into_iter().map(|c| c.proposal).collect();
        records.extend(proposals.iter().map(|pr| PredictionRecord { scene_id: scene.scene_id.clone(), proposal: pr.clone() }));
        evals.push(scene_eval(scene, proposals));
    }
    Ok((MetricReport::compute(&evals, thresholds), records))
}

/// Ground truth of a scene paired with proposals.
pub fn scene_eval(scene: &SyntheticScene, proposals: Vec<Proposal>) -> SceneEval {
    SceneEval {
        scene_id: scene.scene_id.clone(),
        proposals,
        gt: scene
            .instances
            .iter()
            .map(|i| GtObject { bbox: i.bbox, class: i.class_label, references: i.final_references() })
            .collect(),
    }
}

/// Greedy captions of the queries Hungarian-matched to each gt instance, as
/// `(gt index, captions)` in gt order.
pub fn matched_captions(
    model: &SiaModel,
    store: &ParamStore,
    vocab: &Vocabulary,
    scene: &SyntheticScene,
) -> Result<Vec<(usize, FinalCaption)>, ModelError> {
    let mut g = Graph::inference();
    let fwd = model.forward_scene(&mut g, store, scene, 0, true, None)?;
    let boxes: Vec<_> = scene.instances.iter().map(|i| i.bbox).collect();
    let classes: Vec<usize> = scene.instances.iter().map(|i| i.class_label).collect();
    let last = fwd.detections.last();
    let cost = matching_cost(&last.boxes(&g), &last.probabilities(&g), GtSet { boxes: &boxes, classes: &classes }, &DetectionWeights::default());
    let mut pairs = hungarian(&cost)?.pairs;
    pairs.sort_by_key(|p| p.1);
    let queries: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let caps = model.caption_queries(&mut g, store, vocab, &fwd, &queries)?;
    Ok(pairs.iter().map(|p| p.1).zip(caps).collect())
}
