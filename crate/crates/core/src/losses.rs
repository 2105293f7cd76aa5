//! Bipartite matching, detection/vote/caption losses and the total objective.

use crate::config::Stage;
use crate::error::{ModelError, ModelResult};
use crate::geometry::{giou_3d, Box3D};
use crate::graph::{Graph, NodeId};
use crate::heads::{caption_beam, caption_greedy, CaptionHead, HeadScorer, LayerDetections, PrefixRole};
use crate::params::ParamStore;
use crate::tensor::Real;

/// Matched `(proposal, gt)` pairs sorted by proposal index.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Assignment {
    pub pairs: Vec<(usize, usize)>,
}

impl Assignment {
    pub fn gt_of(&self, proposal: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.0 == proposal).map(|p| p.1)
    }

    pub fn cost(&self, cost: &[Vec<Real>]) -> Real {
        self.pairs.iter().map(|&(i, j)| cost[i][j]).sum()
    }
}

/// Minimum-cost assignment of rows to columns (Kuhn–Munkres with
/// potentials on the zero-padded square matrix).
pub fn hungarian(cost: &[Vec<Real>]) -> ModelResult<Assignment> {
    let rows = cost.len();
    let cols = cost.first().map_or(0, Vec::len);
    if cost.iter().any(|r| r.len() != cols) {
        return Err(ModelError::Invalid("ragged cost matrix".into()));
    }
    if cost.iter().flatten().any(|x| !x.is_finite()) {
        return Err(ModelError::Invalid("cost matrix holds a non-finite value".into()));
    }
    if rows == 0 || cols == 0 {
        return Ok(Assignment::default());
    }
    let n = rows.max(cols);
    let at = |i: usize, j: usize| if i < rows && j < cols { cost[i][j] } else { 0.0 };
    // 1-based potentials; p[j] is the row assigned to column j.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![Real::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = Real::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = at(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs: Vec<(usize, usize)> =
        (1..=n).filter(|&j| p[j] >= 1 && p[j] <= rows && j <= cols).map(|j| (p[j] - 1, j - 1)).collect();
    pairs.sort_unstable();
    Ok(Assignment { pairs })
}

/// Weights of the detection terms (GIoU, class, center, size).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionWeights {
    pub giou: Real,
    pub class: Real,
    pub center: Real,
    pub size: Real,
    /// Cross-entropy weight of the "no object" target.
    pub no_object: Real,
}

impl Default for DetectionWeights {
    fn default() -> Self {
        DetectionWeights { giou: 10.0, class: 1.0, center: 5.0, size: 1.0, no_object: 0.2 }
    }
}

/// Weights of the vote, detection and caption terms in the total.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveWeights {
    pub vote: Real,
    pub detection: Real,
    pub caption: Real,
}

impl Default for ObjectiveWeights {
    fn default() -> Self {
        ObjectiveWeights { vote: 10.0, detection: 1.0, caption: 10.0 }
    }
}

/// Unweighted detection terms of one decoder layer.
#[derive(Debug, Clone, Copy)]
pub struct DetectionTerms {
    pub giou: NodeId,
    pub class: NodeId,
    pub center: NodeId,
    pub size: NodeId,
    pub total: NodeId,
}

/// Ground truth boxes with class labels.
#[derive(Debug, Clone, Copy)]
pub struct GtSet<'a> {
    pub boxes: &'a [Box3D],
    pub classes: &'a [usize],
}

/// Matching cost between every proposal and gt object.
pub fn matching_cost(boxes: &[Box3D], probs: &[Vec<Real>], gt: GtSet<'_>, w: &DetectionWeights) -> Vec<Vec<Real>> {
    boxes
        .iter()
        .zip(probs)
        .map(|(b, p)| {
            gt.boxes
                .iter()
                .zip(gt.classes)
                .map(|(t, &c)| {
                    let l1 = |a: [Real; 3], b: [Real; 3]| (0..3).map(|k| (a[k] - b[k]).abs()).sum::<Real>();
                    w.giou * (1.0 - giou_3d(b, t)) + w.class * (1.0 - p[c]) + w.center * l1(b.center, t.center) + w.size * l1(b.size, t.size)
                })
                .collect()
        })
        .collect()
}

fn column_product(g: &mut Graph, x: NodeId) -> ModelResult<NodeId> {
    let a = g.slice(x, 1, 0, 1)?;
    let b = g.slice(x, 1, 1, 2)?;
    let c = g.slice(x, 1, 2, 3)?;
    let ab = g.mul(a, b)?;
    Ok(g.mul(ab, c)?)
}

/// Differentiable GIoU `[m, 1]` of predicted boxes against constant targets.
pub fn giou_node(g: &mut Graph, centers: NodeId, sizes: NodeId, targets: &[Box3D]) -> ModelResult<NodeId> {
    let m = targets.len();
    let flat = |f: fn(&Box3D) -> [Real; 3]| targets.iter().flat_map(f).collect::<Vec<_>>();
    let gmin = g.constant(&[m, 3], flat(|b| b.min()))?;
    let gmax = g.constant(&[m, 3], flat(|b| b.max()))?;
    let gvol = g.constant(&[m, 1], targets.iter().map(Box3D::volume).collect())?;
    let half = g.scale(sizes, 0.5);
    let pmin = g.sub(centers, half)?;
    let pmax = g.add(centers, half)?;
    let imin = g.maximum(pmin, gmin)?;
    let imax = g.minimum(pmax, gmax)?;
    let iext = g.sub(imax, imin)?;
    let iext = g.relu(iext);
    let inter = column_product(g, iext)?;
    let pvol = column_product(g, sizes)?;
    let union = g.add(pvol, gvol)?;
    let union = g.sub(union, inter)?;
    let hmin = g.minimum(pmin, gmin)?;
    let hmax = g.maximum(pmax, gmax)?;
    let hext = g.sub(hmax, hmin)?;
    let hull = column_product(g, hext)?;
    let iou = g.div(inter, union)?;
    let gap = g.sub(hull, union)?;
    let gap = g.div(gap, hull)?;
    Ok(g.sub(iou, gap)?)
}

/// Hungarian-matched detection loss of one layer. Returns the weighted total
/// and its unweighted terms.
pub fn detection_loss(
    g: &mut Graph,
    det: &LayerDetections,
    gt: GtSet<'_>,
    w: &DetectionWeights,
) -> ModelResult<(DetectionTerms, Assignment)> {
    if gt.boxes.len() != gt.classes.len() {
        return Err(ModelError::DimensionMismatch { what: "gt classes", expected: gt.boxes.len(), found: gt.classes.len() });
    }
    let boxes = det.boxes(g);
    let probs = det.probabilities(g);
    let n_cls = g.shape(det.logits)[1];
    if let Some(bad) = gt.classes.iter().find(|&&c| c + 1 >= n_cls) {
        return Err(ModelError::Invalid(format!("gt class {bad} outside {} object classes", n_cls - 1)));
    }
    let assignment = hungarian(&matching_cost(&boxes, &probs, gt, w))?;
    let no_object = n_cls - 1;
    let mut targets = vec![no_object; boxes.len()];
    let mut weights = vec![w.no_object; boxes.len()];
    for &(i, j) in &assignment.pairs {
        targets[i] = gt.classes[j];
        weights[i] = 1.0;
    }
    let ce = g.cross_entropy_with_logits(det.logits, &targets)?;
    let wsum: Real = weights.iter().sum();
    let wn = g.constant(&[weights.len()], weights)?;
    let wce = g.mul(ce, wn)?;
    let wce = g.sum(wce);
    let class = g.scale(wce, 1.0 / wsum);

    let (giou, center, size) = if assignment.pairs.is_empty() {
        let z = g.constant(&[], vec![0.0])?;
        (z, z, z)
    } else {
        let rows: Vec<usize> = assignment.pairs.iter().map(|p| p.0).collect();
        let matched: Vec<Box3D> = assignment.pairs.iter().map(|p| gt.boxes[p.1]).collect();
        let m = rows.len() as Real;
        let pc = g.gather(det.centers, &rows)?;
        let ps = g.gather(det.sizes, &rows)?;
        let gi = giou_node(g, pc, ps, &matched)?;
        let gi = g.mean(gi);
        let gi = g.scale(gi, -1.0);
        let giou = g.add_scalar(gi, 1.0);
        let tc = g.constant(&[rows.len(), 3], matched.iter().flat_map(|b| b.center).collect())?;
        let ts = g.constant(&[rows.len(), 3], matched.iter().flat_map(|b| b.size).collect())?;
        let dc = g.sub(pc, tc)?;
        let dc = g.abs(dc);
        let dc = g.sum(dc);
        let center = g.scale(dc, 1.0 / m);
        let ds = g.sub(ps, ts)?;
        let ds = g.abs(ds);
        let ds = g.sum(ds);
        let size = g.scale(ds, 1.0 / m);
        (giou, center, size)
    };
    let parts = [(giou, w.giou), (class, w.class), (center, w.center), (size, w.size)];
    let mut total = None;
    for (node, weight) in parts {
        let t = g.scale(node, weight);
        total = Some(match total {
            None => t,
            Some(acc) => g.add(acc, t)?,
        });
    }
    let terms = DetectionTerms { giou, class, center, size, total: total.unwrap() };
    Ok((terms, assignment))
}

/// One teacher-forced caption: prefix node, its roles and reference ids.
#[derive(Debug, Clone)]
pub struct CaptionTarget {
    pub prefix: NodeId,
    pub roles: Vec<PrefixRole>,
    pub tokens: Vec<usize>,
}

/// Mean over captions of `−Σ_t log P(c_{t+1} | prefix, c_{≤t})`, EOS included.
pub fn mle_loss(g: &mut Graph, store: &ParamStore, head: &CaptionHead, targets: &[CaptionTarget]) -> ModelResult<NodeId> {
    if targets.is_empty() {
        return Ok(g.constant(&[], vec![0.0])?);
    }
    let mut total: Option<NodeId> = None;
    for t in targets {
        let nll = head.nll(g, store, t.prefix, &t.roles, &t.tokens)?;
        total = Some(match total {
            None => nll,
            Some(acc) => g.add(acc, nll)?,
        });
    }
    Ok(g.scale(total.unwrap(), 1.0 / targets.len() as Real))
}

/// Per-hypothesis bookkeeping of one SCST term.
#[derive(Debug, Clone, PartialEq)]
pub struct ScstSample {
    pub tokens: Vec<usize>,
    pub reward: Real,
    pub advantage: Real,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScstOutcome {
    pub greedy: Vec<usize>,
    pub greedy_reward: Real,
    pub samples: Vec<ScstSample>,
}

/// Self-critical loss `−Σ_i (R(ĉ_i) − R(ĝ)) / |ĉ_i| · log P(ĉ_i)` over
/// `beam_k` beam hypotheses with the greedy decode as baseline. Terms with
/// zero advantage are omitted, so an all-zero batch has exactly zero gradient.
#[allow(clippy::too_many_arguments)]
pub fn scst_loss(
    g: &mut Graph,
    store: &ParamStore,
    head: &CaptionHead,
    prefix: NodeId,
    roles: &[PrefixRole],
    reward: &dyn Fn(&[usize]) -> Real,
    beam_k: usize,
    max_len: usize,
) -> ModelResult<(NodeId, ScstOutcome)> {
    let scorer = HeadScorer { head, store, prefix: g.tensor(prefix), roles: roles.to_vec() };
    let greedy = caption_greedy(&scorer, max_len)?;
    let beams = caption_beam(&scorer, beam_k, max_len)?;
    let greedy_reward = reward(&greedy);
    let mut loss: Option<NodeId> = None;
    let mut samples = Vec::with_capacity(beams.len());
    for h in beams {
        let r = reward(&h.tokens);
        let adv = r - greedy_reward;
        if adv != 0.0 {
            let nll = head.sequence_nll(g, store, prefix, roles, &h.tokens, h.ended)?;
            let term = g.scale(nll, adv / h.tokens.len().max(1) as Real);
            loss = Some(match loss {
                None => term,
                Some(acc) => g.add(acc, term)?,
            });
        }
        samples.push(ScstSample { tokens: h.tokens, reward: r, advantage: adv });
    }
    let loss = match loss {
        Some(l) => l,
        None => g.constant(&[], vec![0.0])?,
    };
    Ok((loss, ScstOutcome { greedy, greedy_reward, samples }))
}

/// Scalar loss values of one step.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossReport {
    pub vote: Real,
    pub giou: Vec<Real>,
    pub class: Vec<Real>,
    pub center: Vec<Real>,
    pub size: Vec<Real>,
    pub detection: Vec<Real>,
    pub caption: Real,
    pub total: Real,
}

impl LossReport {
    /// Total recomputed from the parts for a stage.
    pub fn recompute(&self, stage: Stage, w: &ObjectiveWeights) -> Real {
        let det: Real = self.detection.iter().sum();
        match stage {
            Stage::Pretrain => w.vote * self.vote + w.detection * det,
            Stage::Mle => w.vote * self.vote + w.detection * det + w.caption * self.caption,
            Stage::Scst => w.caption * self.caption,
        }
    }

    /// Element-wise sum of two reports (layer vectors must agree in length).
    pub fn add(&mut self, other: &LossReport) {
        let add_vec = |a: &mut Vec<Real>, b: &[Real]| {
            if a.is_empty() {
                a.resize(b.len(), 0.0);
            }
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        };
        self.vote += other.vote;
        add_vec(&mut self.giou, &other.giou);
        add_vec(&mut self.class, &other.class);
        add_vec(&mut self.center, &other.center);
        add_vec(&mut self.size, &other.size);
        add_vec(&mut self.detection, &other.detection);
        self.caption += other.caption;
        self.total += other.total;
    }

    pub fn scaled(&self, s: Real) -> LossReport {
        let v = |a: &[Real]| a.iter().map(|x| x * s).collect::<Vec<_>>();
        LossReport {
            vote: self.vote * s,
            giou: v(&self.giou),
            class: v(&self.class),
            center: v(&self.center),
            size: v(&self.size),
            detection: v(&self.detection),
            caption: self.caption * s,
            total: self.total * s,
        }
    }
}

/// Graph nodes feeding the total objective.
#[derive(Debug, Clone, Default)]
pub struct LossNodes {
    pub vote: Option<NodeId>,
    pub detection: Vec<DetectionTerms>,
    pub caption: Option<NodeId>,
}

/// `β₁L^o + β₂ΣL_det + β₃L_cap` with stage gating; returns the node and a
/// report of every part.
pub fn total_loss(g: &mut Graph, parts: &LossNodes, stage: Stage, w: &ObjectiveWeights) -> ModelResult<(NodeId, LossReport)> {
    let mut report = LossReport::default();
    let mut terms: Vec<(NodeId, Real)> = Vec::new();
    if stage != Stage::Scst {
        if let Some(v) = parts.vote {
            report.vote = g.scalar(v);
            terms.push((v, w.vote));
        }
        for d in &parts.detection {
            report.giou.push(g.scalar(d.giou));
            report.class.push(g.scalar(d.class));
            report.center.push(g.scalar(d.center));
            report.size.push(g.scalar(d.size));
            report.detection.push(g.scalar(d.total));
            terms.push((d.total, w.detection));
        }
    }
    if stage != Stage::Pretrain {
        if let Some(c) = parts.caption {
            report.caption = g.scalar(c);
            terms.push((c, w.caption));
        }
    }
    let mut total: Option<NodeId> = None;
    for (node, weight) in terms {
        let t = g.scale(node, weight);
        total = Some(match total {
            None => t,
            Some(acc) => g.add(acc, t)?,
        });
    }
    let total = match total {
        Some(t) => t,
        None => g.constant(&[], vec![0.0])?,
    };
    report.total = g.scalar(total);
    Ok((total, report))
}
