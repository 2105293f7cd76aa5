//! Acceptance suite. Prints one verdict line per criterion with the pinned
//! tolerance and runtime, and exits nonzero on any unexpected failure.
//!
//! The pipeline criterion trains for about half an hour and only runs when
//! `SIA_ACCEPT_PIPELINE=1`. Under the `f32` feature only the README and
//! determinism criteria run, since the other oracles are pinned at double
//! precision.
//! `SIA_ACCEPT_ONLY=7,9` restricts the run to the listed criteria.

#[path = "support/gradients.rs"]
mod gradients;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sia_core::checkpoint::Checkpoint;
use sia_core::config::{Stage, TrainConfig};
use sia_core::evalkit::{
    assign_and_score, average_precision, bleu4, cider, eval_doc_freq, meteor_lite, rouge_l, CaptionMetric, DocFreq, MetricReport, Proposal,
    SceneEval,
};
use sia_core::geometry::{farthest_point_sample, giou_3d, iou_3d, knn, nms, point_in_box, Box3D, Point3};
use sia_core::heads::{caption_beam, caption_greedy, instance_roles, CaptionHead, CaptionHeadConfig, HeadScorer};
use sia_core::losses::{hungarian, scst_loss};
use sia_core::model::SiaModel;
use sia_core::scenegen::{generate_dataset, SyntheticScene};
use sia_core::tgi::{Gem, GlobalAggregator, NetVlad};
use sia_core::trainer::{evaluate, matched_captions, restore, run_stage, scene_eval, thread_count, NullObserver, TrainObserver, EVAL_THRESHOLDS};
use sia_core::{Graph, ParamStore, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Verdict {
    Pass,
    Fail,
    /// Failed, and documented as unattainable at this scale.
    KnownFail,
    Skip,
}

impl Verdict {
    fn label(self) -> &'static str {
        match self {
            Verdict::Pass => "PASS",
            Verdict::Fail => "FAIL",
            Verdict::KnownFail => "KNOWN-FAIL",
            Verdict::Skip => "SKIP",
        }
    }
}

/// Sub-check results of one criterion.
#[derive(Default)]
struct Checks {
    lines: Vec<(bool, bool, String)>,
    skip: Option<String>,
}

impl Checks {
    fn check(&mut self, ok: bool, what: impl Into<String>) {
        self.lines.push((ok, false, what.into()));
    }

    /// A sub-check whose failure is expected and recorded.
    fn known(&mut self, ok: bool, what: impl Into<String>) {
        self.lines.push((ok, true, what.into()));
    }

    fn verdict(&self) -> Verdict {
        if self.skip.is_some() {
            Verdict::Skip
        } else if self.lines.iter().any(|(ok, known, _)| !ok && !known) {
            Verdict::Fail
        } else if self.lines.iter().any(|(ok, _, _)| !ok) {
            Verdict::KnownFail
        } else {
            Verdict::Pass
        }
    }
}

fn run(n: usize, name: &str, budget: Option<Duration>, f: impl FnOnce(&mut Checks)) -> Verdict {
    let start = Instant::now();
    let mut checks = Checks::default();
    let outcome = catch_unwind(AssertUnwindSafe(|| f(&mut checks)));
    let elapsed = start.elapsed();
    if let Err(e) = outcome {
        let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default();
        checks.check(false, format!("panicked: {msg}"));
    }
    if let (Some(b), None) = (budget, &checks.skip) {
        checks.check(elapsed <= b, format!("runtime {:.1}s within {}s", elapsed.as_secs_f64(), b.as_secs()));
    }
    for (ok, known, what) in &checks.lines {
        let tag = match (ok, known) {
            (true, _) => "ok",
            (false, true) => "known-fail",
            (false, false) => "FAIL",
        };
        println!("    [{tag}] {what}");
    }
    let v = checks.verdict();
    let note = checks.skip.clone().unwrap_or_else(|| {
        let failed = checks.lines.iter().filter(|l| !l.0).count();
        format!("{}/{} checks", checks.lines.len() - failed, checks.lines.len())
    });
    println!("criterion {n} {name}: {} ({note}; {:.1}s)", v.label(), elapsed.as_secs_f64());
    v
}

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

fn close(a: Real, b: Real, tol: Real) -> bool {
    (a - b).abs() <= tol
}

fn desk_scenes(seed: u64, count: usize) -> Vec<SyntheticScene> {
    generate_dataset(seed, count, (4, 10), 4096).expect("scene generation")
}

/// Keeps the value of the last `cap=` field seen in the training log.
#[derive(Default)]
struct CapWatcher {
    last_cap: Option<Real>,
}

impl TrainObserver for CapWatcher {
    fn log(&mut self, line: &str) {
        if let Some(v) = line.split_whitespace().find_map(|f| f.strip_prefix("cap=")) {
            self.last_cap = v.parse().ok();
        }
    }
}

// ---------------------------------------------------------------- 1

fn readme_disclosure(c: &mut Checks) {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../README.md");
    let text = std::fs::read_to_string(path).unwrap_or_default();
    c.check(!text.is_empty(), "README.md present at workspace root");
    for needle in ["73.22", "83.14", "59.48"] {
        c.check(text.contains(needle), format!("README quotes {needle}"));
    }
    let lower = text.to_lowercase();
    c.check(lower.contains("not reproducible"), "README states the numbers are not reproducible");
    c.check(lower.contains("acceptance"), "README maps them to the acceptance suite");
}

// ---------------------------------------------------------------- 2

fn gradient_suite(c: &mut Checks) {
    let ok = catch_unwind(gradients::run_suite).is_ok();
    c.check(ok, "every op and both composite losses within rel. err 1e-4 (central FD, h=1e-6, 50 cases each)");
}

// ---------------------------------------------------------------- 3

fn brute_min_cost(cost: &[Vec<Real>]) -> Real {
    let (n, m) = (cost.len(), cost[0].len());
    // assign each of the smaller side to a distinct member of the larger side
    let (rows, cols, at): (usize, usize, Box<dyn Fn(usize, usize) -> Real>) =
        if n <= m { (n, m, Box::new(|r, c| cost[r][c])) } else { (m, n, Box::new(|r, c| cost[c][r])) };
    fn rec(r: usize, rows: usize, used: &mut Vec<bool>, at: &dyn Fn(usize, usize) -> Real) -> Real {
        if r == rows {
            return 0.0;
        }
        let mut best = Real::INFINITY;
        for c in 0..used.len() {
            if !used[c] {
                used[c] = true;
                best = best.min(at(r, c) + rec(r + 1, rows, used, at));
                used[c] = false;
            }
        }
        best
    }
    rec(0, rows, &mut vec![false; cols], &*at)
}

fn assignment_oracle(c: &mut Checks) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut mismatches = 0;
    let mut invalid = 0;
    let cases = 200;
    for _ in 0..cases {
        let n = rng.gen_range(1..=6);
        let m = rng.gen_range(1..=6);
        let cost: Vec<Vec<Real>> = (0..n).map(|_| (0..m).map(|_| rng.gen_range(0..50) as Real).collect()).collect();
        let a = hungarian(&cost).expect("hungarian");
        let pairs = &a.pairs;
        let distinct_rows = pairs.iter().map(|p| p.0).collect::<std::collections::BTreeSet<_>>().len();
        let distinct_cols = pairs.iter().map(|p| p.1).collect::<std::collections::BTreeSet<_>>().len();
        if pairs.len() != n.min(m) || distinct_rows != pairs.len() || distinct_cols != pairs.len() {
            invalid += 1;
        }
        if a.cost(&cost) != brute_min_cost(&cost) {
            mismatches += 1;
        }
    }
    c.check(invalid == 0, format!("{cases} matchings are full and one-to-one ({invalid} invalid)"));
    c.check(mismatches == 0, format!("total cost equals the exhaustive minimum exactly on {cases} integer matrices, n,m <= 6 ({mismatches} off)"));
}

// ---------------------------------------------------------------- 4

fn bx(center: Point3, size: [Real; 3]) -> Box3D {
    Box3D::new(center, size).unwrap()
}

fn random_box(rng: &mut ChaCha8Rng) -> Box3D {
    let c = [rng.gen_range(0.0..2.0), rng.gen_range(0.0..2.0), rng.gen_range(0.0..1.0)];
    bx(c, [rng.gen_range(0.2..1.5), rng.gen_range(0.2..1.5), rng.gen_range(0.2..1.5)])
}

/// IoU and GIoU from uniform samples over the enclosing hull.
fn monte_carlo(a: &Box3D, b: &Box3D, samples: usize, rng: &mut ChaCha8Rng) -> (Real, Real) {
    let lo: Vec<Real> = (0..3).map(|i| a.min()[i].min(b.min()[i])).collect();
    let hi: Vec<Real> = (0..3).map(|i| a.max()[i].max(b.max()[i])).collect();
    let (mut both, mut either) = (0usize, 0usize);
    for _ in 0..samples {
        let p = [rng.gen_range(lo[0]..hi[0]), rng.gen_range(lo[1]..hi[1]), rng.gen_range(lo[2]..hi[2])];
        let (ia, ib) = (point_in_box(&p, a), point_in_box(&p, b));
        both += usize::from(ia && ib);
        either += usize::from(ia || ib);
    }
    let iou = if either == 0 { 0.0 } else { both as Real / either as Real };
    (iou, iou - (samples - either) as Real / samples as Real)
}

fn brute_fps(points: &[Point3], n: usize, seed: usize) -> Vec<usize> {
    let d = |a: &Point3, b: &Point3| (0..3).map(|i| (a[i] - b[i]).powi(2)).sum::<Real>();
    let mut picked = vec![seed];
    while picked.len() < n {
        let mut best: Option<(Real, usize)> = None;
        for (i, p) in points.iter().enumerate() {
            let m = picked.iter().map(|&s| d(p, &points[s])).fold(Real::INFINITY, Real::min);
            if best.map_or(true, |(bm, _)| m > bm) {
                best = Some((m, i));
            }
        }
        picked.push(best.unwrap().1);
    }
    picked
}

fn brute_knn(q: &Point3, keys: &[Point3], k: usize) -> Vec<usize> {
    let mut all: Vec<(Real, usize)> = keys.iter().enumerate().map(|(i, p)| ((0..3).map(|j| (q[j] - p[j]).powi(2)).sum(), i)).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    all.into_iter().take(k).map(|x| x.1).collect()
}

fn brute_nms(props: &[(Box3D, Real)], thr: Real) -> Vec<usize> {
    let mut alive: Vec<usize> = (0..props.len()).collect();
    let mut kept = Vec::new();
    while !alive.is_empty() {
        // highest score, lowest index among equals
        let top = *alive.iter().max_by(|&&i, &&j| props[i].1.total_cmp(&props[j].1).then(j.cmp(&i))).unwrap();
        kept.push(top);
        alive.retain(|&i| i != top && iou_3d(&props[i].0, &props[top].0) < thr);
    }
    kept
}

fn geometry_oracles(c: &mut Checks) {
    let a = bx([0.0; 3], [2.0; 3]);
    let b = bx([1.0, 0.0, 0.0], [2.0; 3]);
    c.check(iou_3d(&a, &b) == 1.0 / 3.0 && giou_3d(&a, &b) == 1.0 / 3.0, "2-cubes offset by 1: IoU = GIoU = 1/3 exactly");
    let u = bx([0.0; 3], [1.0; 3]);
    let v = bx([2.0, 0.0, 0.0], [1.0; 3]);
    c.check(iou_3d(&u, &v) == 0.0 && giou_3d(&u, &v) == -1.0 / 3.0, "unit cubes 1 apart: IoU 0, GIoU -1/3 exactly");
    let inner = bx([0.0; 3], [1.0; 3]);
    c.check(iou_3d(&inner, &a) == 0.125 && giou_3d(&inner, &a) == 0.125, "unit cube inside 2-cube: IoU = GIoU = 1/8 exactly");
    c.check(iou_3d(&a, &a) == 1.0 && giou_3d(&a, &a) == 1.0, "identical boxes: 1 exactly");

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: Real = 0.0;
    for _ in 0..20 {
        let (p, q) = (random_box(&mut rng), random_box(&mut rng));
        let (iou, giou) = monte_carlo(&p, &q, 1_000_000, &mut rng);
        worst = worst.max((iou - iou_3d(&p, &q)).abs()).max((giou - giou_3d(&p, &q)).abs());
    }
    c.check(worst <= 1e-2, format!("Monte-Carlo IoU/GIoU, 20 pairs x 1e6 samples: worst |diff| {worst:.2e} <= 1e-2"));

    let (mut fps_bad, mut knn_bad, mut nms_bad) = (0, 0, 0);
    for case in 0..100 {
        let n = rng.gen_range(2..=64);
        // a coarse grid forces distance ties
        let grid = case % 2 == 0;
        let points: Vec<Point3> = (0..n)
            .map(|_| {
                if grid {
                    [rng.gen_range(0..4) as Real, rng.gen_range(0..4) as Real, rng.gen_range(0..2) as Real]
                } else {
                    [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]
                }
            })
            .collect();
        let k = rng.gen_range(1..=n);
        let seed = rng.gen_range(0..n);
        if farthest_point_sample(&points, k, seed).unwrap() != brute_fps(&points, k, seed) {
            fps_bad += 1;
        }
        let queries: Vec<Point3> = points.iter().take(8).copied().collect();
        let got = knn(&queries, &points, k).unwrap();
        if queries.iter().zip(&got).any(|(q, g)| *g != brute_knn(q, &points, k)) {
            knn_bad += 1;
        }
        let props: Vec<(Box3D, Real)> = (0..n.min(40))
            .map(|_| (random_box(&mut rng), if grid { rng.gen_range(0..4) as Real / 4.0 } else { rng.gen_range(0.0..1.0) }))
            .collect();
        let thr = [0.1, 0.25, 0.5][case % 3];
        if nms(&props, thr) != brute_nms(&props, thr) {
            nms_bad += 1;
        }
    }
    c.check(fps_bad == 0, format!("FPS equals brute force on 100 clouds of <= 64 points ({fps_bad} off)"));
    c.check(knn_bad == 0, format!("k-NN equals brute force on 100 clouds ({knn_bad} off)"));
    c.check(nms_bad == 0, format!("NMS equals brute force on 100 proposal sets ({nms_bad} off)"));
}

// ---------------------------------------------------------------- 5

fn metric_oracles(c: &mut Checks) {
    const TOL: Real = 1e-6;
    let r = |s: &str| vec![words(s)];
    c.check(close(bleu4(&words("the the the"), &r("the cat")), 0.0, TOL), "BLEU-4 'the the the' vs 'the cat' = 0");
    let v = bleu4(&words("a b c d e"), &r("a b c d f"));
    c.check(close(v, 0.2f64.powf(0.25) as Real, TOL), format!("BLEU-4 one substituted token = (4/5*3/4*2/3*1/2)^(1/4): {v:.8}"));
    c.check(close(bleu4(&words("a b c d"), &r("a b c d")), 1.0, TOL), "BLEU-4 identical = 1");

    let beta2: Real = 1.44;
    let (p, rc): (Real, Real) = (0.75, 1.0);
    let f = (1.0 + beta2) * p * rc / (rc + beta2 * p);
    let v = rouge_l(&words("a b c d"), &r("a c d"));
    c.check(close(v, f, TOL), format!("ROUGE-L 'a b c d' vs 'a c d' = F(3/4, 1) = {f:.6}: {v:.6}"));
    c.check(close(rouge_l(&words("a b"), &r("c d")), 0.0, TOL), "ROUGE-L disjoint = 0");

    for len in [1usize, 3, 6] {
        let s: Vec<String> = (0..len).map(|i| format!("w{i}")).collect();
        let want = 1.0 - 0.5 / (len as Real).powi(3);
        c.check(close(meteor_lite(&s, &[s.clone()]), want, TOL), format!("METEOR identical length {len} = 1 - 0.5/{len}^3"));
    }
    // one stem match: P = R = 1, one chunk over one match
    c.check(close(meteor_lite(&words("chairs"), &r("chair")), 0.5, TOL), "METEOR 'chairs' vs 'chair' matches by stem (0.5)");
    c.check(close(meteor_lite(&words("red"), &r("blue")), 0.0, TOL), "METEOR no overlap = 0");

    let corpus: Vec<Vec<Vec<String>>> =
        ["a red chair in the corner", "a blue table next to the wall", "the green lamp is behind the sofa"].iter().map(|s| r(s)).collect();
    let df = DocFreq::build(&corpus);
    let doubled: Vec<_> = corpus.iter().chain(corpus.iter()).cloned().collect();
    let df2 = DocFreq::build(&doubled);
    let cand = words("a red table in the corner");
    c.check(close(cider(&corpus[0][0], &corpus[0], &df), 10.0, TOL), "CIDEr candidate = sole reference: 10");
    c.check(close(cider(&words("zebra quokka"), &corpus[0], &df), 0.0, TOL), "CIDEr zero overlap: 0");
    c.check(
        close(cider(&cand, &corpus[0], &df), cider(&cand, &corpus[0], &df2), TOL),
        "CIDEr invariant to duplicating every corpus document",
    );

    // spec'd AP hand cases
    c.check(close(average_precision(&[true, false], 1), 1.0, TOL), "AP true positive ranked first = 1");
    c.check(close(average_precision(&[false, true], 1), 0.5, TOL), "AP false positive ranked first = 0.5");

    // identical-caption corpus: each object is captioned with its own reference
    let scenes: Vec<SceneEval> = corpus
        .iter()
        .enumerate()
        .map(|(i, refs)| {
            let b = bx([i as Real * 3.0, 0.0, 0.5], [1.0; 3]);
            SceneEval {
                scene_id: format!("s{i}"),
                proposals: vec![Proposal { bbox: b, confidence: 1.0, class: Some(0), caption: refs[0].clone() }],
                gt: vec![sia_core::evalkit::GtObject { bbox: b, class: 0, references: refs.clone() }],
            }
        })
        .collect();
    let report = MetricReport::compute(&scenes, &[0.5]);
    let mean_meteor: Real =
        corpus.iter().map(|refs| 1.0 - 0.5 / (refs[0].len() as Real).powi(3)).sum::<Real>() / corpus.len() as Real;
    let maxima = [("C50", 10.0 * 10.0), ("B450", 100.0), ("R50", 100.0), ("M50", 100.0 * mean_meteor)];
    for (key, want) in maxima {
        let got = report.get(key).unwrap_or(Real::NAN);
        c.check(close(got, want, TOL * 100.0), format!("identical-caption corpus {key} = closed-form maximum {want:.6}: {got:.6}"));
    }
}

// ---------------------------------------------------------------- 6

fn eq9_protocol(c: &mut Checks) {
    const TOL: Real = 1e-9;
    let scenes = desk_scenes(6, 5);
    let perfect: Vec<SceneEval> = scenes
        .iter()
        .map(|s| {
            let props = s
                .instances
                .iter()
                .enumerate()
                .map(|(i, inst)| {
                    let refs = inst.final_references();
                    Proposal { bbox: inst.bbox, confidence: 1.0, class: Some(inst.class_label), caption: refs[i % refs.len()].clone() }
                })
                .collect();
            scene_eval(s, props)
        })
        .collect();
    let df = eval_doc_freq(&perfect);
    let n: usize = perfect.iter().map(|s| s.gt.len()).sum();
    for m in CaptionMetric::ALL {
        let metric = |cand: &[String], refs: &[Vec<String>]| m.score(cand, refs, &df);
        let per: Vec<Real> = perfect.iter().flat_map(|s| s.gt.iter().zip(&s.proposals).map(|(g, p)| metric(&p.caption, &g.references))).collect();
        let pure = per.iter().sum::<Real>() / n as Real;
        let gated = assign_and_score(&perfect, 0.5, &metric);
        c.check(close(gated, pure, TOL), format!("{}@0.5 with perfect boxes equals the pure corpus metric ({gated:.9})", m.key()));

        // move one object's proposal out of the room so its IoU drops to 0
        let (si, oi) = (2, 1);
        let mut moved = perfect.clone();
        moved[si].proposals[oi].bbox.center[2] += 100.0;
        let flat = perfect[..si].iter().map(|s| s.gt.len()).sum::<usize>() + oi;
        let reduced = assign_and_score(&moved, 0.5, &metric);
        c.check(
            close(pure - reduced, per[flat] / n as Real, TOL),
            format!("{}: gating one of {n} instances lowers the score by its share m_i/N", m.key()),
        );
    }
}

// ---------------------------------------------------------------- 7

fn overfit(c: &mut Checks) {
    let scenes = desk_scenes(7, 4);
    let cfg = TrainConfig { stage: Stage::Mle, epochs: 300, batch_size: 1, random_fps_seed: false, ..TrainConfig::default() };
    let mut watch = CapWatcher::default();
    let ck = run_stage(&cfg, &scenes, &[], None, thread_count(), &mut watch).expect("mle run");
    let cap = watch.last_cap.unwrap_or(Real::NAN);
    c.known(cap < 0.1, format!("final L_cap {cap:.4} < 0.1 (floor near ln2/2 = 0.347 from two sampled contextual references)"));

    let (model, store, vocab) = restore(&ck).expect("restore");
    let evals: Vec<SceneEval> = scenes.iter().map(|s| scene_eval(s, vec![])).collect();
    let df = eval_doc_freq(&evals);
    let (mut agree, mut total) = (0usize, 0usize);
    let (mut gen_c, mut self_c, mut n) = (0.0, 0.0, 0usize);
    for s in &scenes {
        for (gi, caption) in matched_captions(&model, &store, &vocab, s).expect("captions") {
            let refs = s.instances[gi].final_references();
            let hyp = &caption.combined;
            let score = |r: &Vec<String>| hyp.iter().zip(r).filter(|(a, b)| a == b).count();
            let best = refs.iter().max_by_key(|r| (score(r), std::cmp::Reverse(r.len().abs_diff(hyp.len())))).unwrap();
            if score(best) != best.len().max(hyp.len()) {
                println!("    mismatch: {:?} | {:?}", hyp.join(" "), best.join(" "));
            }
            agree += score(best);
            total += best.len().max(hyp.len());
            gen_c += cider(hyp, &refs, &df);
            self_c += cider(best, &refs, &df);
            n += 1;
        }
    }
    let rate = agree as Real / total.max(1) as Real;
    c.check(rate >= 0.95, format!("greedy final captions token-match the closest reference: {:.2}% >= 95% over {n} objects", rate * 100.0));
    let (gen_c, self_c) = (gen_c / n as Real, self_c / n as Real);
    c.check(
        (gen_c - self_c).abs() <= 0.01 * self_c,
        format!("CIDEr of generated {gen_c:.4} within 1% of reference self-CIDEr {self_c:.4}"),
    );
}

// ---------------------------------------------------------------- 8

fn pipeline(c: &mut Checks) {
    if std::env::var("SIA_ACCEPT_PIPELINE").ok().as_deref() != Some("1") {
        c.skip = Some("set SIA_ACCEPT_PIPELINE=1 to run the 200/40 desk schedule (about 25 min on one core)".into());
        return;
    }
    let scenes = desk_scenes(0, 240);
    let (train, held) = scenes.split_at(200);
    let threads = thread_count();
    let pre = TrainConfig::desk(Stage::Pretrain);
    let ck = run_stage(&pre, train, &[], None, threads, &mut NullObserver).expect("pretrain");
    let mle = TrainConfig::desk(Stage::Mle);
    let ck = run_stage(&mle, train, &[], Some(&ck), threads, &mut NullObserver).expect("mle");
    let (model, store, vocab) = restore(&ck).expect("restore");
    let (report, _) = evaluate(&model, &store, &vocab, held, &EVAL_THRESHOLDS, threads, true).expect("evaluate");
    let map = report.get("mAP25").unwrap_or(0.0);
    let cider25 = report.get("C25").unwrap_or(0.0);
    let reference = reference_self_cider(held) * CaptionMetric::Cider.scale();
    c.known(map >= 0.5, format!("held-out mAP@0.25 {map:.4} >= 0.5"));
    c.known(cider25 >= 0.5 * reference, format!("held-out C@0.25 {cider25:.3} >= 0.5 x reference self-CIDEr {reference:.3}"));
}

/// Mean over objects of the mean CIDEr of each reference against its own set.
fn reference_self_cider(scenes: &[SyntheticScene]) -> Real {
    let evals: Vec<SceneEval> = scenes.iter().map(|s| scene_eval(s, vec![])).collect();
    let df = eval_doc_freq(&evals);
    let per: Vec<Real> = evals
        .iter()
        .flat_map(|s| s.gt.iter())
        .map(|g| g.references.iter().map(|r| cider(r, &g.references, &df)).sum::<Real>() / g.references.len() as Real)
        .collect();
    per.iter().sum::<Real>() / per.len().max(1) as Real
}

// ---------------------------------------------------------------- 9

fn wiring_cfg(instance_only: bool, no_global: bool) -> TrainConfig {
    TrainConfig { stage: Stage::Mle, epochs: 1, batch_size: 2, instance_only, no_global, ..TrainConfig::default() }
}

fn numel(model: &SiaModel, store: &ParamStore, modules: &[&str]) -> usize {
    modules.iter().flat_map(|m| model.module_params(m)).map(|id| store.get(id).numel()).sum()
}

fn aggregator_checks(c: &mut Checks, name: &str, agg: &dyn GlobalAggregator, store: &ParamStore, rng: &mut ChaCha8Rng) {
    let (n, d) = (23, 64);
    let x: Vec<Real> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    let xp: Vec<Real> = perm.iter().flat_map(|&i| x[i * d..(i + 1) * d].to_vec()).collect();
    let describe = |data: Vec<Real>| {
        let mut g = Graph::inference();
        let node = g.input(&Tensor::new(&[n, d], data).unwrap());
        let out = agg.describe(&mut g, store, node).unwrap();
        g.value(out).to_vec()
    };
    let (a, b) = (describe(x), describe(xp));
    let diff = a.iter().zip(&b).map(|(p, q)| (p - q).abs()).fold(0.0, Real::max);
    let norm = a.iter().map(|v| v * v).sum::<Real>().sqrt();
    c.check(diff <= 1e-10, format!("{name} permutation invariant (max diff {diff:.1e} <= 1e-10)"));
    c.check(close(norm, 1.0, 1e-10), format!("{name} descriptor has unit norm ({norm:.12})"));
}

fn ablations(c: &mut Checks) {
    let scenes = desk_scenes(9, 2);
    let threads = thread_count();
    let mut built = Vec::new();
    for (label, io, ng) in [("full", false, false), ("no_global", false, true), ("instance_only", true, false)] {
        let cfg = wiring_cfg(io, ng);
        let ck = run_stage(&cfg, &scenes, &[], None, threads, &mut NullObserver);
        c.check(ck.is_ok(), format!("{label} wiring builds and trains one epoch"));
        if let Ok(ck) = ck {
            let (model, store, _) = restore(&ck).expect("restore");
            built.push((model, store));
        }
    }
    if built.len() == 3 {
        let cfg = &built[0].0.cfg;
        let (d, k) = (cfg.dim, cfg.netvlad_clusters);
        let netvlad = k * d + (d * k + k) + (k * d * d + d);
        let delta = built[0].1.numel() - built[1].1.numel();
        c.check(delta == netvlad, format!("full - no_global = NetVLAD size C*D + (D*C + C) + (C*D*D + D) = {netvlad}: {delta}"));
        let context = numel(&built[0].0, &built[0].1, &["context_query", "context_decoder", "aggregator"]);
        let delta = built[0].1.numel() - built[2].1.numel();
        c.check(delta == context, format!("full - instance_only = context queries + context decoder + aggregator = {context}: {delta}"));
    }

    for (k, want) in [(8usize, 10usize), (16, 18), (32, 34)] {
        let cfg = TrainConfig { k_context: k, ..TrainConfig::default() };
        let (model, store) = SiaModel::build(&cfg, 40, 0).unwrap();
        let mut g = Graph::inference();
        let fwd = model.forward_scene(&mut g, &store, &scenes[0], 0, true, None).unwrap();
        let prefixes = model.context_prefixes(&mut g, &store, &fwd, &[0, 1]).unwrap().unwrap();
        let rows: Vec<usize> = prefixes.iter().map(|(p, _)| g.shape(*p)[0]).collect();
        let roles_ok = prefixes.iter().all(|(_, r)| r.len() == want);
        let wired = model.wiring().map(|w| w.prefix_len());
        c.check(
            roles_ok && wired == Some(want) && rows.iter().all(|&r| r == want),
            format!("K = {k}: caption prefix has {want} rows ({rows:?})"),
        );
    }

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut store = ParamStore::new();
    let vlad = NetVlad::new(&mut store, &mut rng, "vlad", 64, 8);
    let gem = Gem::new(&mut store, &mut rng, "gem", 64, 3.0);
    for (name, agg) in [("NetVLAD", &vlad as &dyn GlobalAggregator), ("GeM", &gem as &dyn GlobalAggregator)] {
        aggregator_checks(c, name, agg, &store, &mut rng);
    }
}

// ---------------------------------------------------------------- 10

fn scst_sanity(c: &mut Checks) {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut store = ParamStore::new();
    let cfg = CaptionHeadConfig { vocab: 12, feature_dim: 6, dim: 16, layers: 1, heads: 2, ffn: 24, max_len: 6 };
    let head = CaptionHead::new(&mut store, &mut rng, "cap", cfg).unwrap();
    let prefix = Tensor::new(&[1, 6], (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let roles = instance_roles();

    let mut g = Graph::new();
    let p = g.input(&prefix);
    let (loss, out) = scst_loss(&mut g, &store, &head, p, &roles, &|_| 0.7, 3, 6).unwrap();
    let grads = g.backward(loss).unwrap();
    let nonzero = head.params().iter().filter_map(|id| grads.param(*id)).flatten().filter(|v| **v != 0.0).count();
    c.check(
        out.samples.iter().all(|s| s.advantage == 0.0) && nonzero == 0,
        format!("constant reward: every advantage is 0 and caption-head gradient is exactly zero ({nonzero} nonzero)"),
    );

    // reward only a non-greedy beam hypothesis
    let scorer = HeadScorer { head: &head, store: &store, prefix: prefix.clone(), roles: roles.clone() };
    let greedy = caption_greedy(&scorer, 6).unwrap();
    let beams = caption_beam(&scorer, 3, 6).unwrap();
    let target = beams.iter().find(|h| h.tokens != greedy).cloned();
    c.check(target.is_some(), "beam search offers a non-greedy hypothesis");
    let Some(target) = target else { return };
    let nll_of = |store: &ParamStore| {
        let mut g = Graph::inference();
        let p = g.input(&prefix);
        let l = head.sequence_nll(&mut g, store, p, &roles, &target.tokens, target.ended).unwrap();
        g.value(l)[0]
    };
    let before = nll_of(&store);
    let mut g = Graph::new();
    let p = g.input(&prefix);
    let rigged = target.tokens.clone();
    let (loss, out) = scst_loss(&mut g, &store, &head, p, &roles, &|t| if t == rigged.as_slice() { 1.0 } else { 0.0 }, 3, 6).unwrap();
    let grads = g.backward(loss).unwrap();
    let adv = out.samples.iter().find(|s| s.tokens == target.tokens).map_or(0.0, |s| s.advantage);
    c.check(adv > 0.0, format!("rigged hypothesis has positive advantage ({adv})"));
    for id in head.params() {
        if let Some(gr) = grads.param(id) {
            let gr = gr.to_vec();
            store.get_mut(id).data_mut().iter_mut().zip(gr).for_each(|(w, d)| *w -= 1e-2 * d);
        }
    }
    let after = nll_of(&store);
    c.check(after < before, format!("one SGD step raises its log-probability: nll {before:.6} -> {after:.6}"));

    // detector untouched across a real SCST stage
    let scenes = desk_scenes(10, 2);
    let threads = thread_count();
    let short = |stage| TrainConfig { stage, epochs: 1, batch_size: 2, ..TrainConfig::default() };
    let pre = run_stage(&short(Stage::Pretrain), &scenes, &[], None, threads, &mut NullObserver).expect("pretrain");
    let mle = run_stage(&short(Stage::Mle), &scenes, &[], Some(&pre), threads, &mut NullObserver).expect("mle");
    let scst = run_stage(&short(Stage::Scst), &scenes, &[], Some(&mle), threads, &mut NullObserver).expect("scst");
    let (model, store, _) = restore(&mle).expect("restore");
    let names: Vec<String> = model.detector_params().iter().map(|id| store.name(*id).to_string()).collect();
    let find = |ck: &Checkpoint, n: &str| ck.params.iter().find(|(k, _)| k == n).map(|(_, t)| t.data().to_vec());
    let same = names.iter().all(|n| {
        let (a, b) = (find(&mle, n), find(&scst, n));
        a.is_some() && a.map(|v| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>()) == b.map(|v| v.iter().map(|x| x.to_bits()).collect())
    });
    let caption_moved = model.caption_params().iter().any(|id| find(&mle, store.name(*id)) != find(&scst, store.name(*id)));
    c.check(same, format!("{} detector tensors bit-identical across the SCST stage", names.len()));
    c.check(caption_moved, "caption parameters did change during SCST");
}

// ---------------------------------------------------------------- 11

fn determinism(c: &mut Checks) {
    let scenes = desk_scenes(11, 2);
    let once = || {
        let pre = TrainConfig { stage: Stage::Pretrain, epochs: 2, batch_size: 2, ..TrainConfig::default() };
        let ck = run_stage(&pre, &scenes, &[], None, thread_count(), &mut NullObserver).expect("pretrain");
        let mle = TrainConfig { stage: Stage::Mle, epochs: 1, batch_size: 2, ..TrainConfig::default() };
        run_stage(&mle, &scenes, &[], Some(&ck), thread_count(), &mut NullObserver).expect("mle").to_bytes()
    };
    let (a, b) = (once(), once());
    let bits = std::mem::size_of::<Real>() * 8;
    c.check(a == b, format!("two runs with the same seed and config give bit-identical checkpoints at f{bits} ({} bytes)", a.len()));
}

fn main() {
    let f64_build = std::mem::size_of::<Real>() == 8;
    let only_f64 = |c: &mut Checks| c.skip = Some("oracle tolerances are pinned at f64; run without the f32 feature".into());
    let secs = Duration::from_secs;
    let mut verdicts = Vec::new();
    let only: Option<Vec<usize>> =
        std::env::var("SIA_ACCEPT_ONLY").ok().map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let mut go = |n: usize, name, budget, f: fn(&mut Checks)| {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            return;
        }
        let v = if f64_build || n == 1 || n == 11 { run(n, name, budget, f) } else { run(n, name, None, only_f64) };
        verdicts.push(v);
    };
    go(1, "paper-number disclosure", None, readme_disclosure);
    go(2, "gradient suite", Some(secs(120)), gradient_suite);
    go(3, "assignment oracle", Some(secs(10)), assignment_oracle);
    go(4, "geometry oracles", Some(secs(60)), geometry_oracles);
    go(5, "metric oracles", Some(secs(10)), metric_oracles);
    go(6, "m@k protocol", Some(secs(10)), eq9_protocol);
    go(7, "overfit reproduction", Some(secs(600)), overfit);
    go(8, "pipeline training target", Some(secs(3600)), pipeline);
    go(9, "structural ablations", None, ablations);
    go(10, "SCST sanity", None, scst_sanity);
    go(11, "determinism", None, determinism);
    let failed = verdicts.iter().filter(|v| **v == Verdict::Fail).count();
    let known = verdicts.iter().filter(|v| **v == Verdict::KnownFail).count();
    println!("acceptance: {} criteria, {failed} failed, {known} known failures", verdicts.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
