use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use sia_core::checkpoint::Checkpoint;
use sia_core::config::{ConfigError, Stage, TrainConfig};
use sia_core::dataset::{load_dataset, manifest_path, save_dataset, write_atomic};
use sia_core::evalkit::write_predictions;
use sia_core::scenegen::{generate_dataset, SyntheticScene, CLASSES};
use sia_core::trainer::{build_vocab, evaluate, restore, run_stage, thread_count, TrainError, TrainObserver};
use sia_core::Real;

/// Exit-code category of a failure.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Usage = 1,
    Data = 2,
    Runtime = 3,
}

struct Failure {
    kind: Kind,
    err: anyhow::Error,
}

type CmdResult<T = ()> = Result<T, Failure>;

trait Categorize<T> {
    fn or_kind(self, kind: Kind) -> CmdResult<T>;
}

impl<T, E: Into<anyhow::Error>> Categorize<T> for Result<T, E> {
    fn or_kind(self, kind: Kind) -> CmdResult<T> {
        self.map_err(|e| Failure { kind, err: e.into() })
    }
}

fn fail<T>(kind: Kind, msg: impl Into<String>) -> CmdResult<T> {
    Err(Failure { kind, err: anyhow!(msg.into()) })
}

#[derive(Parser)]
#[command(name = "sia", version, about = "Synthetic 3D dense captioning with late aggregation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and its manifest.
    GenData(GenDataArgs),
    /// Detector pretraining (vote and detection losses).
    Pretrain(TrainArgs),
    /// Joint training with the caption MLE loss.
    TrainMle(TrainArgs),
    /// Self-critical caption refinement with the detector frozen.
    TrainScst(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Caption every detected object of one scene.
    Caption(CaptionArgs),
    /// Print config, parameter counts and wiring of a checkpoint.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 240)]
    scenes: usize,
    #[arg(long, default_value_t = 4)]
    objects_min: usize,
    #[arg(long, default_value_t = 10)]
    objects_max: usize,
    #[arg(long, default_value_t = 4096)]
    points: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Flat key=value config applied over the stage's desk defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoints and logs.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    /// The trailing `holdout` scenes.
    Holdout,
    /// Every scene but the holdout.
    Train,
    All,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated IoU thresholds.
    #[arg(long, default_value = "0.25,0.5", value_delimiter = ',')]
    iou: Vec<Real>,
    #[arg(long, value_enum, default_value_t = Split::Holdout)]
    split: Split,
    /// Metric report (key=value lines); predictions go to `<out>.predictions.tsv`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CaptionArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset container holding the scene.
    #[arg(long)]
    scene_file: PathBuf,
    /// Scene position within the file.
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("error: {first}");
            return ExitCode::from(Kind::Usage as u8);
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Pretrain(a) => train(a, Stage::Pretrain),
        Command::TrainMle(a) => train(a, Stage::Mle),
        Command::TrainScst(a) => train(a, Stage::Scst),
        Command::Eval(a) => eval(a),
        Command::Caption(a) => caption(a),
        Command::Inspect(a) => inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let msg = format!("{:#}", f.err).replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::from(f.kind as u8)
        }
    }
}

fn gen_data(a: GenDataArgs) -> CmdResult {
    if a.objects_min < 2 || a.objects_max > CLASSES.len() || a.objects_min > a.objects_max {
        return fail(Kind::Usage, format!("object counts must satisfy 2 <= min <= max <= {}", CLASSES.len()));
    }
    if a.points < 512 {
        return fail(Kind::Usage, "--points must be at least 512");
    }
    if a.scenes == 0 {
        return fail(Kind::Usage, "--scenes must be at least 1");
    }
    let scenes = generate_dataset(a.seed, a.scenes, (a.objects_min, a.objects_max), a.points).or_kind(Kind::Runtime)?;
    save_dataset(&a.out, &scenes).or_kind(Kind::Data)?;
    let instances: usize = scenes.iter().map(|s| s.instances.len()).sum();
    let captions: usize = scenes.iter().map(|s| s.n_captions()).sum();
    let vocab = build_vocab(&scenes).or_kind(Kind::Runtime)?;
    println!("scenes={}", scenes.len());
    println!("instances={instances}");
    println!("captions={captions}");
    println!("vocab_size={}", vocab.len());
    println!("dataset={}", a.out.display());
    println!("manifest={}", manifest_path(&a.out).display());
    Ok(())
}

fn load_data(path: &Path) -> CmdResult<Vec<SyntheticScene>> {
    load_dataset(path).with_context(|| format!("reading dataset {}", path.display())).or_kind(Kind::Data)
}

fn load_checkpoint(path: &Path) -> CmdResult<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("reading checkpoint {}", path.display())).or_kind(Kind::Data)
}

fn split_holdout(scenes: &[SyntheticScene], holdout: usize) -> CmdResult<(&[SyntheticScene], &[SyntheticScene])> {
    if holdout >= scenes.len() {
        return fail(Kind::Data, format!("holdout {holdout} leaves no training scenes out of {}", scenes.len()));
    }
    Ok(scenes.split_at(scenes.len() - holdout))
}

/// Appends step lines to `train.log` and loss curves to `curves.tsv`; writes
/// `last.ckpt` every epoch and `best.ckpt` on improvement.
struct FileObserver {
    log: fs::File,
    curves: fs::File,
    dir: PathBuf,
    error: Option<std::io::Error>,
}

impl FileObserver {
    fn record<T>(&mut self, r: std::io::Result<T>) {
        if let (Err(e), None) = (r, &self.error) {
            self.error = Some(e);
        }
    }
}

const CURVE_KEYS: [&str; 6] = ["epoch", "step", "vote", "cap", "total", "grad_norm"];

impl TrainObserver for FileObserver {
    fn log(&mut self, line: &str) {
        let r = writeln!(self.log, "{line}");
        self.record(r);
        println!("{line}");
        if line.contains(" eval=1") {
            return;
        }
        let kv: Vec<(&str, &str)> = line.split(' ').filter_map(|t| t.split_once('=')).collect();
        let get = |k: &str| kv.iter().find(|(a, _)| *a == k).map_or("nan", |p| p.1);
        let det: Real = kv.iter().filter(|(k, _)| k.starts_with("det")).filter_map(|(_, v)| v.parse::<Real>().ok()).sum();
        let mut row: Vec<String> = CURVE_KEYS.iter().map(|k| get(k).to_string()).collect();
        row.insert(3, det.to_string());
        let r = writeln!(self.curves, "{}", row.join("\t"));
        self.record(r);
    }

    fn epoch_end(&mut self, ckpt: &Checkpoint, is_best: bool) -> Result<(), TrainError> {
        ckpt.save(&self.dir.join("last.ckpt"))?;
        if is_best {
            ckpt.save(&self.dir.join("best.ckpt"))?;
        }
        match self.error.take() {
            Some(e) => Err(TrainError::Observer(e.to_string())),
            None => Ok(()),
        }
    }
}

fn stage_config(a: &TrainArgs, stage: Stage) -> CmdResult<TrainConfig> {
    let mut cfg = TrainConfig::desk(stage);
    if let Some(path) = &a.config {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display())).or_kind(Kind::Usage)?;
        cfg.apply(&text).with_context(|| format!("config {}", path.display())).or_kind(Kind::Usage)?;
        if cfg.stage != stage {
            return fail(Kind::Usage, format!("config sets stage = {} but the command runs {stage}", cfg.stage));
        }
    }
    Ok(cfg)
}

fn train(a: TrainArgs, stage: Stage) -> CmdResult {
    let cfg = stage_config(&a, stage)?;
    if stage == Stage::Scst && a.resume.is_none() {
        return fail(Kind::Usage, "train-scst requires --resume with an mle checkpoint");
    }
    let resume = a.resume.as_deref().map(load_checkpoint).transpose()?;
    if let Some(ck) = &resume {
        cfg.check_compatible(&ck.config).or_kind(Kind::Usage)?;
    }
    let scenes = load_data(&a.data)?;
    let (train_set, eval_set) = split_holdout(&scenes, cfg.holdout)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display())).or_kind(Kind::Data)?;
    write_atomic(&a.out.join("config.txt"), cfg.to_text().as_bytes()).or_kind(Kind::Data)?;
    let open = |name: &str| {
        OpenOptions::new()
            .create(true)
            .append(true)
            .open(a.out.join(name))
            .with_context(|| format!("opening {}", a.out.join(name).display()))
            .or_kind(Kind::Data)
    };
    let curves_path = a.out.join("curves.tsv");
    let fresh_curves = !curves_path.exists();
    let mut obs = FileObserver { log: open("train.log")?, curves: open("curves.tsv")?, dir: a.out.clone(), error: None };
    if fresh_curves {
        let mut header: Vec<&str> = CURVE_KEYS.to_vec();
        header.insert(3, "det");
        writeln!(obs.curves, "{}", header.join("\t")).or_kind(Kind::Data)?;
    }
    let threads = thread_count();
    let ck = run_stage(&cfg, train_set, eval_set, resume.as_ref(), threads, &mut obs).map_err(|e| {
        let kind = match &e {
            TrainError::Prerequisite(_) | TrainError::Config(ConfigError::Conflict { .. }) => Kind::Usage,
            TrainError::Config(_) => Kind::Usage,
            TrainError::EmptyDataset | TrainError::Vocab(_) => Kind::Data,
            _ => Kind::Runtime,
        };
        Failure { kind, err: e.into() }
    })?;
    let final_path = a.out.join("last.ckpt");
    ck.save(&final_path).or_kind(Kind::Data)?;
    println!("checkpoint={}", final_path.display());
    if let Some(b) = &ck.best {
        println!("best_{}={} best_epoch={}", b.key, b.value, b.epoch);
    }
    Ok(())
}

fn eval(a: EvalArgs) -> CmdResult {
    if a.iou.is_empty() || a.iou.iter().any(|k| !(*k > 0.0 && *k <= 1.0)) {
        return fail(Kind::Usage, "--iou thresholds must lie in (0, 1]");
    }
    let ck = load_checkpoint(&a.checkpoint)?;
    let scenes = load_data(&a.data)?;
    let subset: &[SyntheticScene] = match a.split {
        Split::All => &scenes,
        Split::Holdout => split_holdout(&scenes, ck.config.holdout)?.1,
        Split::Train => split_holdout(&scenes, ck.config.holdout)?.0,
    };
    if subset.is_empty() {
        return fail(Kind::Data, "selected split is empty");
    }
    let (model, store, vocab) = restore(&ck).or_kind(Kind::Data)?;
    let (report, records) = evaluate(&model, &store, &vocab, subset, &a.iou, thread_count(), true)
        .context("checkpoint and data are incompatible")
        .or_kind(Kind::Data)?;
    write_atomic(&a.out, report.to_kv().as_bytes()).with_context(|| format!("writing {}", a.out.display())).or_kind(Kind::Data)?;
    let mut pred_path = a.out.as_os_str().to_owned();
    pred_path.push(".predictions.tsv");
    let pred_path = PathBuf::from(pred_path);
    write_atomic(&pred_path, write_predictions(&records).as_bytes()).or_kind(Kind::Data)?;
    print!("{}", report.to_table(&a.iou));
    println!("report={}", a.out.display());
    println!("predictions={}", pred_path.display());
    Ok(())
}

fn caption(a: CaptionArgs) -> CmdResult {
    let ck = load_checkpoint(&a.checkpoint)?;
    let scenes = load_data(&a.scene_file)?;
    let scene = scenes.get(a.index).ok_or_else(|| Failure {
        kind: Kind::Data,
        err: anyhow!("scene index {} out of range ({} scenes)", a.index, scenes.len()),
    })?;
    let (model, store, vocab) = restore(&ck).or_kind(Kind::Data)?;
    let preds = model.predict(&store, &vocab, scene).context("malformed scene").or_kind(Kind::Data)?;
    let mut out = format!("scene={} objects={}\n", scene.scene_id, preds.len());
    for (i, p) in preds.iter().enumerate() {
        let b = &p.proposal.bbox;
        let class = p.proposal.class.and_then(|c| CLASSES.get(c)).copied().unwrap_or("none");
        let _ = writeln!(
            out,
            "object={i} query={} class={class} confidence={:.4} center={:.3},{:.3},{:.3} size={:.3},{:.3},{:.3}",
            p.query, p.proposal.confidence, b.center[0], b.center[1], b.center[2], b.size[0], b.size[1], b.size[2]
        );
        let _ = writeln!(out, "  instance: {}", p.captions.instance.join(" "));
        let _ = writeln!(out, "  context: {}", p.captions.context.join(" "));
        let _ = writeln!(out, "  final: {}", p.captions.combined.join(" "));
    }
    match &a.out {
        Some(path) => write_atomic(path, out.as_bytes()).with_context(|| format!("writing {}", path.display())).or_kind(Kind::Data)?,
        None => print!("{out}"),
    }
    Ok(())
}

fn inspect(a: InspectArgs) -> CmdResult {
    let ck = load_checkpoint(&a.checkpoint)?;
    let (model, store, vocab) = restore(&ck).or_kind(Kind::Data)?;
    println!("# config");
    print!("{}", ck.config.to_text());
    println!("# state");
    println!("epoch = {}", ck.epoch);
    println!("step = {}", ck.step);
    if let Some(b) = &ck.best {
        println!("best = {} {} (epoch {})", b.key, b.value, b.epoch);
    }
    println!("vocab_size = {}", vocab.len());
    println!("# parameters");
    let counts = model.parameter_counts(&store);
    for (m, n) in &counts {
        println!("{m} = {n}");
    }
    println!("total = {}", counts.iter().map(|c| c.1).sum::<usize>());
    println!("# wiring");
    let wiring = if ck.config.instance_only {
        "instance_only"
    } else if ck.config.no_global {
        "no_global"
    } else {
        "full"
    };
    println!("wiring = {wiring}");
    println!("context_path = {}", ck.config.has_context_path());
    println!("global_descriptor = {}", if ck.config.has_global() { ck.config.aggregator.to_string() } else { "none".into() });
    println!("instance_prefix_len = 1");
    if ck.config.has_context_path() {
        println!("context_prefix_len = {}", ck.config.context_prefix_len());
    }
    Ok(())
}
