//! Caption metrics, detection metrics and IoU-gated caption scoring.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;

use rust_stemmers::{Algorithm, Stemmer};
use thiserror::Error;

use crate::geometry::{iou_3d, Box3D};
use crate::tensor::Real;

type Tokens = [String];

fn ngrams(tokens: &Tokens, n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Sentence BLEU-4 without smoothing.
pub fn bleu4(candidate: &Tokens, references: &[Vec<String>]) -> Real {
    if candidate.is_empty() || references.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let cand = ngrams(candidate, n);
        let total: usize = cand.values().sum();
        if total == 0 {
            return 0.0;
        }
        let mut max_ref: HashMap<&[String], usize> = HashMap::new();
        for r in references {
            for (g, c) in ngrams(r, n) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(c);
            }
        }
        let clipped: usize = cand.iter().map(|(g, c)| (*c).min(*max_ref.get(g).unwrap_or(&0))).sum();
        if clipped == 0 {
            return 0.0;
        }
        log_sum += (clipped as Real / total as Real).ln() / 4.0;
    }
    let c = candidate.len();
    let r = references
        .iter()
        .map(Vec::len)
        .min_by_key(|&l| ((l as i64 - c as i64).abs(), l))
        .unwrap();
    let bp = if c > r { 1.0 } else { (1.0 - r as Real / c as Real).exp() };
    bp * log_sum.exp()
}

fn lcs(a: &Tokens, b: &Tokens) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    for x in a {
        let mut cur = vec![0usize; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        prev = cur;
    }
    prev[b.len()]
}

/// ROUGE-L F-measure with β = 1.2, best over references.
pub fn rouge_l(candidate: &Tokens, references: &[Vec<String>]) -> Real {
    const BETA2: Real = 1.2 * 1.2;
    if candidate.is_empty() {
        return 0.0;
    }
    references
        .iter()
        .map(|r| {
            let l = lcs(candidate, r);
            if l == 0 || r.is_empty() {
                return 0.0;
            }
            let p = l as Real / candidate.len() as Real;
            let rc = l as Real / r.len() as Real;
            (1.0 + BETA2) * p * rc / (rc + BETA2 * p)
        })
        .fold(0.0, Real::max)
}

/// Matched reference position per candidate token: exact stage, then stem stage.
fn meteor_alignment(candidate: &Tokens, reference: &Tokens, stemmer: &Stemmer) -> Vec<Option<usize>> {
    let mut align = vec![None; candidate.len()];
    let mut used = vec![false; reference.len()];
    for (i, w) in candidate.iter().enumerate() {
        if let Some(j) = (0..reference.len()).find(|&j| !used[j] && reference[j] == *w) {
            align[i] = Some(j);
            used[j] = true;
        }
    }
    let cstem: Vec<_> = candidate.iter().map(|w| stemmer.stem(w).into_owned()).collect();
    let rstem: Vec<_> = reference.iter().map(|w| stemmer.stem(w).into_owned()).collect();
    for i in 0..candidate.len() {
        if align[i].is_none() {
            if let Some(j) = (0..reference.len()).find(|&j| !used[j] && rstem[j] == cstem[i]) {
                align[i] = Some(j);
                used[j] = true;
            }
        }
    }
    align
}

/// METEOR restricted to exact and stem matching.
pub fn meteor_lite(candidate: &Tokens, references: &[Vec<String>]) -> Real {
    if candidate.is_empty() {
        return 0.0;
    }
    let stemmer = Stemmer::create(Algorithm::English);
    references
        .iter()
        .map(|r| {
            let align = meteor_alignment(candidate, r, &stemmer);
            let matched: Vec<(usize, usize)> = align.iter().enumerate().filter_map(|(i, j)| j.map(|j| (i, j))).collect();
            let m = matched.len();
            if m == 0 {
                return 0.0;
            }
            let mut chunks = 1;
            for w in matched.windows(2) {
                if !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1) {
                    chunks += 1;
                }
            }
            let p = m as Real / candidate.len() as Real;
            let rc = m as Real / r.len() as Real;
            let fmean = 10.0 * p * rc / (rc + 9.0 * p);
            let penalty = 0.5 * (chunks as Real / m as Real).powi(3);
            fmean * (1.0 - penalty)
        })
        .fold(0.0, Real::max)
}

/// Document frequencies of 1..4-grams; each document is one reference set.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DocFreq {
    counts: [HashMap<Vec<String>, usize>; 4],
    documents: usize,
}

impl DocFreq {
    pub fn build(reference_sets: &[Vec<Vec<String>>]) -> Self {
        let mut df = DocFreq::default();
        for refs in reference_sets {
            df.documents += 1;
            for n in 1..=4 {
                let seen: HashSet<&[String]> = refs.iter().flat_map(|r| ngrams(r, n).into_keys()).collect();
                for g in seen {
                    *df.counts[n - 1].entry(g.to_vec()).or_insert(0) += 1;
                }
            }
        }
        df
    }

    pub fn documents(&self) -> usize {
        self.documents
    }

    pub fn df(&self, gram: &Tokens) -> usize {
        let n = gram.len();
        if n == 0 || n > 4 {
            return self.documents;
        }
        self.counts[n - 1].get(gram).copied().unwrap_or(self.documents)
    }

    /// `max(0, ln(N / df))`; unseen n-grams get zero weight.
    pub fn idf(&self, gram: &Tokens) -> Real {
        let df = self.df(gram).max(1);
        ((self.documents.max(1) as Real) / df as Real).ln().max(0.0)
    }
}

fn tfidf(tokens: &Tokens, n: usize, df: &DocFreq) -> BTreeMap<Vec<String>, Real> {
    ngrams(tokens, n).into_iter().map(|(g, c)| (g.to_vec(), c as Real * df.idf(g))).collect()
}

fn cosine(a: &BTreeMap<Vec<String>, Real>, b: &BTreeMap<Vec<String>, Real>) -> Real {
    let na = a.values().map(|x| x * x).sum::<Real>().sqrt();
    let nb = b.values().map(|x| x * x).sum::<Real>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let dot: Real = a.iter().filter_map(|(g, x)| b.get(g).map(|y| x * y)).sum();
    dot / (na * nb)
}

/// `10 · mean_n mean_j cos(g^n(c), g^n(s_j))` with tf-idf n-gram vectors.
pub fn cider(candidate: &Tokens, references: &[Vec<String>], df: &DocFreq) -> Real {
    if references.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for n in 1..=4 {
        let c = tfidf(candidate, n, df);
        let s: Real = references.iter().map(|r| cosine(&c, &tfidf(r, n, df))).sum();
        total += s / references.len() as Real;
    }
    10.0 * total / 4.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CaptionMetric {
    Cider,
    Bleu4,
    Meteor,
    RougeL,
}

impl CaptionMetric {
    pub const ALL: [CaptionMetric; 4] = [CaptionMetric::Cider, CaptionMetric::Bleu4, CaptionMetric::Meteor, CaptionMetric::RougeL];

    pub fn key(self) -> &'static str {
        match self {
            CaptionMetric::Cider => "C",
            CaptionMetric::Bleu4 => "B4",
            CaptionMetric::Meteor => "M",
            CaptionMetric::RougeL => "R",
        }
    }

    /// Reporting multiplier (CIDEr ×10, the others as percentages).
    pub fn scale(self) -> Real {
        match self {
            CaptionMetric::Cider => 10.0,
            _ => 100.0,
        }
    }

    pub fn score(self, candidate: &Tokens, references: &[Vec<String>], df: &DocFreq) -> Real {
        match self {
            CaptionMetric::Cider => cider(candidate, references, df),
            CaptionMetric::Bleu4 => bleu4(candidate, references),
            CaptionMetric::Meteor => meteor_lite(candidate, references),
            CaptionMetric::RougeL => rouge_l(candidate, references),
        }
    }
}

/// One predicted object.
#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub bbox: Box3D,
    pub confidence: Real,
    /// Predicted object class, when known.
    pub class: Option<usize>,
    pub caption: Vec<String>,
}

/// One annotated object with its reference captions.
#[derive(Debug, Clone, PartialEq)]
pub struct GtObject {
    pub bbox: Box3D,
    pub class: usize,
    pub references: Vec<Vec<String>>,
}

/// Proposals and annotations of one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneEval {
    pub scene_id: String,
    pub proposals: Vec<Proposal>,
    pub gt: Vec<GtObject>,
}

/// Max-IoU proposal for each annotated object; ties go to higher confidence,
/// then lower index.
pub fn assign(scene: &SceneEval) -> Vec<Option<(usize, Real)>> {
    scene
        .gt
        .iter()
        .map(|gt| {
            let mut best: Option<(usize, Real)> = None;
            for (i, p) in scene.proposals.iter().enumerate() {
                let iou = iou_3d(&p.bbox, &gt.bbox);
                let better = match best {
                    None => true,
                    Some((b, biou)) => iou > biou || (iou == biou && p.confidence > scene.proposals[b].confidence),
                };
                if better {
                    best = Some((i, iou));
                }
            }
            best
        })
        .collect()
}

/// `(1/N) Σ_i m(ĉ_i, C_i) · [IoU_i ≥ k]` over every annotated object.
pub fn assign_and_score(scenes: &[SceneEval], k: Real, metric: &dyn Fn(&Tokens, &[Vec<String>]) -> Real) -> Real {
    let n: usize = scenes.iter().map(|s| s.gt.len()).sum();
    if n == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for s in scenes {
        for (gt, a) in s.gt.iter().zip(assign(s)) {
            if let Some((i, iou)) = a {
                if iou >= k {
                    total += metric(&s.proposals[i].caption, &gt.references);
                }
            }
        }
    }
    total / n as Real
}

/// Document frequencies over every annotated object's reference set.
pub fn eval_doc_freq(scenes: &[SceneEval]) -> DocFreq {
    let sets: Vec<Vec<Vec<String>>> = scenes.iter().flat_map(|s| s.gt.iter().map(|g| g.references.clone())).collect();
    DocFreq::build(&sets)
}

/// All-point interpolated average precision from ranked hit flags.
pub fn average_precision(hits: &[bool], n_gt: usize) -> Real {
    if n_gt == 0 {
        return 0.0;
    }
    let mut prec = Vec::with_capacity(hits.len());
    let mut rec = Vec::with_capacity(hits.len());
    let mut tp = 0usize;
    for (i, &h) in hits.iter().enumerate() {
        tp += usize::from(h);
        prec.push(tp as Real / (i + 1) as Real);
        rec.push(tp as Real / n_gt as Real);
    }
    for i in (0..prec.len().saturating_sub(1)).rev() {
        prec[i] = prec[i].max(prec[i + 1]);
    }
    let mut ap = 0.0;
    let mut last_r = 0.0;
    for (p, r) in prec.iter().zip(&rec) {
        if *r > last_r {
            ap += (r - last_r) * p;
            last_r = *r;
        }
    }
    ap
}

/// Per-class AP and recall at IoU `k`, averaged over classes present in gt.
/// Proposals without a class are ignored.
pub fn map_ar(scenes: &[SceneEval], k: Real) -> (Real, Real) {
    let mut classes: Vec<usize> = scenes.iter().flat_map(|s| s.gt.iter().map(|g| g.class)).collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.is_empty() {
        return (0.0, 0.0);
    }
    let (mut ap_sum, mut ar_sum) = (0.0, 0.0);
    for &c in &classes {
        let mut ranked: Vec<(Real, usize, usize)> = Vec::new();
        for (si, s) in scenes.iter().enumerate() {
            for (pi, p) in s.proposals.iter().enumerate() {
                if p.class == Some(c) {
                    ranked.push((p.confidence, si, pi));
                }
            }
        }
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let n_gt: usize = scenes.iter().map(|s| s.gt.iter().filter(|g| g.class == c).count()).sum();
        let mut taken: Vec<Vec<bool>> = scenes.iter().map(|s| vec![false; s.gt.len()]).collect();
        let mut hits = Vec::with_capacity(ranked.len());
        for (_, si, pi) in ranked {
            let p = &scenes[si].proposals[pi];
            let mut best: Option<(usize, Real)> = None;
            for (gi, g) in scenes[si].gt.iter().enumerate() {
                if g.class != c || taken[si][gi] {
                    continue;
                }
                let iou = iou_3d(&p.bbox, &g.bbox);
                if iou >= k && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((gi, iou));
                }
            }
            if let Some((gi, _)) = best {
                taken[si][gi] = true;
            }
            hits.push(best.is_some());
        }
        let tp = hits.iter().filter(|h| **h).count();
        ap_sum += average_precision(&hits, n_gt);
        ar_sum += tp as Real / n_gt as Real;
    }
    (ap_sum / classes.len() as Real, ar_sum / classes.len() as Real)
}

/// Threshold suffix used in report keys (`0.25 -> "25"`).
pub fn threshold_key(k: Real) -> String {
    format!("{}", (k * 100.0).round() as i64)
}

/// Caption metrics and detection metrics per IoU threshold.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricReport {
    pub values: BTreeMap<String, Real>,
    pub annotated: usize,
}

impl MetricReport {
    pub fn compute(scenes: &[SceneEval], thresholds: &[Real]) -> Self {
        let df = eval_doc_freq(scenes);
        let mut values = BTreeMap::new();
        for &k in thresholds {
            let key = threshold_key(k);
            for m in CaptionMetric::ALL {
                let v = assign_and_score(scenes, k, &|c, r| m.score(c, r, &df));
                values.insert(format!("{}{key}", m.key()), v * m.scale());
            }
            let (ap, ar) = map_ar(scenes, k);
            values.insert(format!("mAP{key}"), ap);
            values.insert(format!("AR{key}"), ar);
        }
        MetricReport { values, annotated: scenes.iter().map(|s| s.gt.len()).sum() }
    }

    pub fn get(&self, key: &str) -> Option<Real> {
        self.values.get(key).copied()
    }

    /// `key=value` lines in key order.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            let _ = writeln!(out, "{k}={v:.6}");
        }
        out
    }

    /// Aligned table of the caption grid followed by detection scores.
    pub fn to_table(&self, thresholds: &[Real]) -> String {
        let mut out = format!("{:<8}{:>10}{:>10}{:>10}{:>10}{:>10}{:>10}\n", "IoU", "C", "B-4", "M", "R", "mAP", "AR");
        for &k in thresholds {
            let key = threshold_key(k);
            let v = |p: &str| self.get(&format!("{p}{key}")).unwrap_or(0.0);
            let _ = writeln!(
                out,
                "{:<8}{:>10.2}{:>10.2}{:>10.2}{:>10.2}{:>10.4}{:>10.4}",
                k,
                v("C"),
                v("B4"),
                v("M"),
                v("R"),
                v("mAP"),
                v("AR")
            );
        }
        let _ = writeln!(out, "N={}", self.annotated);
        out
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum InterchangeError {
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
}

/// One prediction record of the interchange file.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRecord {
    pub scene_id: String,
    pub proposal: Proposal,
}

/// `scene_id, cx, cy, cz, sx, sy, sz, confidence, caption`, tab-separated.
pub fn write_predictions(records: &[PredictionRecord]) -> String {
    let mut out = String::new();
    for r in records {
        let b = r.proposal.bbox.to_array();
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.scene_id,
            b[0],
            b[1],
            b[2],
            b[3],
            b[4],
            b[5],
            r.proposal.confidence,
            r.proposal.caption.join(" ")
        );
    }
    out
}

pub fn parse_predictions(text: &str) -> Result<Vec<PredictionRecord>, InterchangeError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |reason: String| InterchangeError::Malformed { line: i + 1, reason };
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 9 {
            return Err(bad(format!("expected 9 fields, found {}", f.len())));
        }
        let nums: Vec<Real> = f[1..8]
            .iter()
            .map(|s| s.parse::<Real>().map_err(|_| bad(format!("not a number: {s:?}"))))
            .collect::<Result<_, _>>()?;
        let bbox = Box3D::new([nums[0], nums[1], nums[2]], [nums[3], nums[4], nums[5]]).map_err(|e| bad(e.to_string()))?;
        out.push(PredictionRecord {
            scene_id: f[0].to_string(),
            proposal: Proposal { bbox, confidence: nums[6], class: None, caption: crate::vocab::tokenize(f[8]) },
        });
    }
    Ok(out)
}
