//! Non-learned geometric primitives: sampling, grouping, neighbours, boxes.
//!
//! Every selection breaks ties by the lowest index so results are
//! reproducible across runs and platforms.

use thiserror::Error;

use crate::tensor::Real;

pub type Point3 = [Real; 3];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("requested {requested} samples but only {available} points are available")]
    TooManySamples { requested: usize, available: usize },
    #[error("invalid box: size {0:?} must be strictly positive and finite")]
    InvalidBox([Real; 3]),
    #[error("{0}")]
    InvalidArgument(String),
}

/// Axis-aligned box given by center and full extents (meters).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box3D {
    pub center: Point3,
    pub size: [Real; 3],
}

impl Box3D {
    pub fn new(center: Point3, size: [Real; 3]) -> Result<Self, GeometryError> {
        if size.iter().any(|s| !(s.is_finite() && *s > 0.0)) || center.iter().any(|c| !c.is_finite()) {
            return Err(GeometryError::InvalidBox(size));
        }
        Ok(Box3D { center, size })
    }

    pub fn from_min_max(min: Point3, max: Point3) -> Result<Self, GeometryError> {
        let center = [0, 1, 2].map(|i| 0.5 * (min[i] + max[i]));
        let size = [0, 1, 2].map(|i| max[i] - min[i]);
        Box3D::new(center, size)
    }

    pub fn min(&self) -> Point3 {
        [0, 1, 2].map(|i| self.center[i] - 0.5 * self.size[i])
    }

    pub fn max(&self) -> Point3 {
        [0, 1, 2].map(|i| self.center[i] + 0.5 * self.size[i])
    }

    pub fn volume(&self) -> Real {
        self.size.iter().product()
    }

    /// As `[cx, cy, cz, w, d, h]`.
    pub fn to_array(&self) -> [Real; 6] {
        let (c, s) = (self.center, self.size);
        [c[0], c[1], c[2], s[0], s[1], s[2]]
    }
}

/// Positions with optional per-point features (row-major `M × F`).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointSet {
    pub positions: Vec<Point3>,
    pub features: Option<(usize, Vec<Real>)>,
}

impl PointSet {
    pub fn new(positions: Vec<Point3>) -> Result<Self, GeometryError> {
        if positions.iter().flatten().any(|x| !x.is_finite()) {
            return Err(GeometryError::InvalidArgument("non-finite position".into()));
        }
        Ok(PointSet { positions, features: None })
    }

    pub fn with_features(mut self, dim: usize, data: Vec<Real>) -> Result<Self, GeometryError> {
        if data.len() != dim * self.positions.len() {
            return Err(GeometryError::InvalidArgument(format!(
                "feature rows {} do not match {} points",
                data.len() / dim.max(1),
                self.positions.len()
            )));
        }
        self.features = Some((dim, data));
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

#[inline]
pub fn dist2(a: &Point3, b: &Point3) -> Real {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Greedy farthest point sampling starting at `seed_index`.
pub fn farthest_point_sample(points: &[Point3], n: usize, seed_index: usize) -> Result<Vec<usize>, GeometryError> {
    let m = points.len();
    if n > m || n == 0 {
        return Err(GeometryError::TooManySamples { requested: n, available: m });
    }
    if seed_index >= m {
        return Err(GeometryError::InvalidArgument(format!("seed index {seed_index} out of range for {m} points")));
    }
    let mut picked = Vec::with_capacity(n);
    let mut min_d = vec![Real::INFINITY; m];
    let mut cur = seed_index;
    for _ in 0..n {
        picked.push(cur);
        let c = points[cur];
        let mut best = (Real::NEG_INFINITY, 0usize);
        for (i, p) in points.iter().enumerate() {
            let d = dist2(p, &c);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if min_d[i] > best.0 {
                best = (min_d[i], i);
            }
        }
        cur = best.1;
    }
    Ok(picked)
}

/// Result of radius grouping: `nsample` indices per center plus a flag for
/// centers whose ball held no point.
#[derive(Debug, Clone, PartialEq)]
pub struct BallGroups {
    pub nsample: usize,
    pub indices: Vec<usize>,
    pub empty: Vec<bool>,
}

impl BallGroups {
    pub fn group(&self, c: usize) -> &[usize] {
        &self.indices[c * self.nsample..(c + 1) * self.nsample]
    }
}

/// Up to `nsample` nearest points within `radius` of each center, padded by
/// repeating the nearest member. An empty ball falls back to the globally
/// nearest point and raises its `empty` flag.
pub fn ball_query(centers: &[Point3], points: &[Point3], radius: Real, nsample: usize) -> Result<BallGroups, GeometryError> {
    if !(radius > 0.0) || nsample == 0 {
        return Err(GeometryError::InvalidArgument(format!("radius {radius} and nsample {nsample} must be positive")));
    }
    if points.is_empty() {
        return Err(GeometryError::TooManySamples { requested: 1, available: 0 });
    }
    let r2 = radius * radius;
    let mut indices = Vec::with_capacity(centers.len() * nsample);
    let mut empty = Vec::with_capacity(centers.len());
    let mut inside: Vec<(Real, usize)> = Vec::new();
    for c in centers {
        inside.clear();
        let mut nearest = (Real::INFINITY, 0usize);
        for (i, p) in points.iter().enumerate() {
            let d = dist2(c, p);
            if d <= r2 {
                inside.push((d, i));
            }
            if d < nearest.0 {
                nearest = (d, i);
            }
        }
        if inside.is_empty() {
            indices.extend(std::iter::repeat_n(nearest.1, nsample));
            empty.push(true);
            continue;
        }
        let take = nsample.min(inside.len());
        if take < inside.len() {
            inside.select_nth_unstable_by(take - 1, cmp_dist_idx);
            inside.truncate(take);
        }
        inside.sort_unstable_by(cmp_dist_idx);
        indices.extend(inside.iter().map(|x| x.1));
        indices.extend(std::iter::repeat_n(inside[0].1, nsample - take));
        empty.push(false);
    }
    Ok(BallGroups { nsample, indices, empty })
}

fn cmp_dist_idx(a: &(Real, usize), b: &(Real, usize)) -> std::cmp::Ordering {
    a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal).then(a.1.cmp(&b.1))
}

/// Exact k nearest keys per query, ascending distance, lower index on ties.
pub fn knn(queries: &[Point3], keys: &[Point3], k: usize) -> Result<Vec<Vec<usize>>, GeometryError> {
    if k > keys.len() {
        return Err(GeometryError::TooManySamples { requested: k, available: keys.len() });
    }
    let mut buf: Vec<(Real, usize)> = Vec::with_capacity(keys.len());
    Ok(queries
        .iter()
        .map(|q| {
            buf.clear();
            buf.extend(keys.iter().enumerate().map(|(i, p)| (dist2(q, p), i)));
            if k > 0 && k < buf.len() {
                buf.select_nth_unstable_by(k - 1, cmp_dist_idx);
                buf.truncate(k);
            }
            buf.sort_unstable_by(cmp_dist_idx);
            buf.iter().take(k).map(|x| x.1).collect()
        })
        .collect())
}

fn overlap_1d(amin: Real, amax: Real, bmin: Real, bmax: Real) -> Real {
    (amax.min(bmax) - amin.max(bmin)).max(0.0)
}

pub fn intersection_volume(a: &Box3D, b: &Box3D) -> Real {
    let (amin, amax, bmin, bmax) = (a.min(), a.max(), b.min(), b.max());
    (0..3).map(|i| overlap_1d(amin[i], amax[i], bmin[i], bmax[i])).product()
}

/// Volume of the smallest axis-aligned box enclosing both.
pub fn hull_volume(a: &Box3D, b: &Box3D) -> Real {
    let (amin, amax, bmin, bmax) = (a.min(), a.max(), b.min(), b.max());
    (0..3).map(|i| amax[i].max(bmax[i]) - amin[i].min(bmin[i])).product()
}

pub fn iou_3d(a: &Box3D, b: &Box3D) -> Real {
    let inter = intersection_volume(a, b);
    let union = a.volume() + b.volume() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

pub fn giou_3d(a: &Box3D, b: &Box3D) -> Real {
    let inter = intersection_volume(a, b);
    let union = a.volume() + b.volume() - inter;
    let hull = hull_volume(a, b);
    let iou = if union > 0.0 { inter / union } else { 0.0 };
    iou - (hull - union) / hull
}

/// Greedy score-descending suppression; returns kept indices in selection order.
pub fn nms(proposals: &[(Box3D, Real)], iou_threshold: Real) -> Vec<usize> {
    let mut order: Vec<usize> = (0..proposals.len()).collect();
    order.sort_by(|&i, &j| {
        proposals[j]
            .1
            .partial_cmp(&proposals[i].1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(i.cmp(&j))
    });
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.iter().all(|&k| iou_3d(&proposals[k].0, &proposals[i].0) < iou_threshold) {
            kept.push(i);
        }
    }
    kept
}

/// Closed-extent containment test.
pub fn point_in_box(p: &Point3, b: &Box3D) -> bool {
    let (lo, hi) = (b.min(), b.max());
    (0..3).all(|i| p[i] >= lo[i] && p[i] <= hi[i])
}
