//! Procedural rooms with labelled boxes, surface-sampled point clouds and
//! template captions of three kinds: attribute, relation and global position.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::geometry::{Box3D, Point3};
use crate::tensor::Real;

pub const CLASSES: [&str; 12] = [
    "chair",
    "table",
    "bed",
    "sofa",
    "shelf",
    "monitor",
    "door",
    "window",
    "cabinet",
    "lamp",
    "refrigerator",
    "trash_can",
];

pub const COLORS: [&str; 8] = ["red", "green", "blue", "yellow", "white", "black", "brown", "gray"];

const COLOR_RGB: [[f32; 3]; 8] = [
    [0.85, 0.12, 0.10],
    [0.15, 0.70, 0.20],
    [0.12, 0.25, 0.85],
    [0.92, 0.85, 0.15],
    [0.95, 0.95, 0.95],
    [0.05, 0.05, 0.05],
    [0.50, 0.30, 0.12],
    [0.50, 0.50, 0.50],
];

/// Nominal (w, d, h) per class and the height of its base above the floor.
const CLASS_SHAPE: [([f32; 3], f32); 12] = [
    ([0.50, 0.50, 0.90], 0.0),
    ([1.30, 0.80, 0.75], 0.0),
    ([2.00, 1.50, 0.55], 0.0),
    ([1.80, 0.85, 0.80], 0.0),
    ([1.00, 0.35, 1.80], 0.0),
    ([0.60, 0.22, 0.42], 0.70),
    ([0.90, 0.12, 2.00], 0.0),
    ([1.10, 0.12, 1.00], 0.90),
    ([0.60, 0.55, 1.05], 0.0),
    ([0.32, 0.32, 1.50], 0.0),
    ([0.80, 0.72, 1.80], 0.0),
    ([0.32, 0.32, 0.42], 0.0),
];

const FLOOR_RGB: [f32; 3] = [0.72, 0.66, 0.52];
const WALL_RGB: [f32; 3] = [0.82, 0.80, 0.74];
const ROOM_HEIGHT: f32 = 2.6;
const MAX_ATTEMPTS: usize = 1000;
const PLACEMENT_GAP: Real = 0.1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SceneError {
    #[error("n_objects must be in 2..=12, got {0}")]
    ObjectCount(usize),
    #[error("n_points must be at least 512, got {0}")]
    PointCount(usize),
    #[error("could not place object {object} after {MAX_ATTEMPTS} attempts (seed {seed})")]
    Placement { seed: u64, object: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CaptionKind {
    Attribute,
    Relation,
    Global,
}

impl CaptionKind {
    pub fn code(self) -> u8 {
        match self {
            CaptionKind::Attribute => 0,
            CaptionKind::Relation => 1,
            CaptionKind::Global => 2,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(CaptionKind::Attribute),
            1 => Some(CaptionKind::Relation),
            2 => Some(CaptionKind::Global),
            _ => None,
        }
    }

    /// Whether the caption describes surroundings rather than the object itself.
    pub fn is_contextual(self) -> bool {
        !matches!(self, CaptionKind::Attribute)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Caption {
    pub kind: CaptionKind,
    pub tokens: Vec<String>,
}

impl Caption {
    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GtInstance {
    pub instance_id: u32,
    pub class_label: usize,
    pub color_label: usize,
    pub bbox: Box3D,
    pub captions: Vec<Caption>,
}

impl GtInstance {
    pub fn class_name(&self) -> &'static str {
        CLASSES[self.class_label]
    }

    pub fn captions_of(&self, contextual: bool) -> impl Iterator<Item = &Caption> {
        self.captions.iter().filter(move |c| c.kind.is_contextual() == contextual)
    }

    /// Object-centric references: the attribute caption followed by each
    /// contextual caption, matching the layout of a late-aggregated caption.
    pub fn final_references(&self) -> Vec<Vec<String>> {
        let attrs: Vec<&Caption> = self.captions_of(false).collect();
        let ctx: Vec<&Caption> = self.captions_of(true).collect();
        let mut out = Vec::new();
        for a in &attrs {
            for c in &ctx {
                out.push(a.tokens.iter().chain(&c.tokens).cloned().collect());
            }
        }
        if out.is_empty() {
            out = self.captions.iter().map(|c| c.tokens.clone()).collect();
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub scene_id: String,
    /// Room spans `[0, x] × [0, y] × [0, z]`.
    pub room: [Real; 3],
    pub points: Vec<Point3>,
    /// RGB per point in `[0, 1]`.
    pub colors: Vec<[Real; 3]>,
    pub instances: Vec<GtInstance>,
}

impl SyntheticScene {
    pub fn room_diagonal(&self) -> Real {
        self.room.iter().map(|x| x * x).sum::<Real>().sqrt()
    }

    pub fn n_captions(&self) -> usize {
        self.instances.iter().map(|i| i.captions.len()).sum()
    }
}

/// Spatial relation of `a` with respect to `b` on the floor plane.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Relation {
    LeftOf,
    RightOf,
    InFrontOf,
    Behind,
    NextTo,
}

impl Relation {
    pub fn words(self) -> &'static [&'static str] {
        match self {
            Relation::LeftOf => &["left", "of"],
            Relation::RightOf => &["right", "of"],
            Relation::InFrontOf => &["in", "front", "of"],
            Relation::Behind => &["behind"],
            Relation::NextTo => &["next", "to"],
        }
    }
}

/// Left/right when the boxes are separated along x with overlapping y
/// extents; front/behind (−y is front) when separated along y with
/// overlapping x extents; otherwise "next to".
pub fn relation_between(a: &Box3D, b: &Box3D) -> Relation {
    let (amin, amax, bmin, bmax) = (a.min(), a.max(), b.min(), b.max());
    let y_overlap = amin[1] < bmax[1] && bmin[1] < amax[1];
    let x_overlap = amin[0] < bmax[0] && bmin[0] < amax[0];
    if y_overlap && amax[0] < bmin[0] {
        Relation::LeftOf
    } else if y_overlap && amin[0] > bmax[0] {
        Relation::RightOf
    } else if x_overlap && amax[1] < bmin[1] {
        Relation::InFrontOf
    } else if x_overlap && amin[1] > bmax[1] {
        Relation::Behind
    } else {
        Relation::NextTo
    }
}

/// Corner when the center lies within a quarter of the half-extent of two walls.
pub fn is_corner(center: &Point3, room: &[Real; 3]) -> bool {
    (0..2).all(|i| {
        let half = 0.5 * room[i];
        let to_wall = center[i].min(room[i] - center[i]);
        to_wall < 0.25 * half
    })
}

/// Index of the nearest other instance by center distance (lower index on ties).
pub fn nearest_instance(boxes: &[Box3D], i: usize) -> Option<usize> {
    let c = boxes[i].center;
    boxes
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != i)
        .map(|(j, b)| (crate::geometry::dist2(&c, &b.center), j))
        .min_by(|x, y| x.0.partial_cmp(&y.0).unwrap_or(std::cmp::Ordering::Equal).then(x.1.cmp(&y.1)))
        .map(|x| x.1)
}

fn words(ws: &[&str]) -> Vec<String> {
    ws.iter().map(|s| s.to_string()).collect()
}

/// Template captions for instance `i` of a placed layout.
pub fn captions_for(boxes: &[Box3D], classes: &[usize], colors: &[usize], i: usize, room: &[Real; 3]) -> Vec<Caption> {
    let mut out = vec![Caption {
        kind: CaptionKind::Attribute,
        tokens: words(&["this", "is", "a", COLORS[colors[i]], CLASSES[classes[i]], "."]),
    }];
    if let Some(j) = nearest_instance(boxes, i) {
        let rel = relation_between(&boxes[i], &boxes[j]);
        let mut t = words(&["it", "is"]);
        t.extend(words(rel.words()));
        t.extend(words(&["the", CLASSES[classes[j]], "."]));
        out.push(Caption { kind: CaptionKind::Relation, tokens: t });
    }
    let place = if is_corner(&boxes[i].center, room) { "corner" } else { "middle" };
    out.push(Caption {
        kind: CaptionKind::Global,
        tokens: words(&["it", "is", "in", "the", place, "of", "the", "room", "."]),
    });
    out
}

fn r32(x: f64) -> Real {
    x as f32 as Real
}

/// Deterministic scene from `(seed, n_objects, n_points)`.
pub fn generate_scene(seed: u64, n_objects: usize, n_points: usize) -> Result<SyntheticScene, SceneError> {
    if !(2..=CLASSES.len()).contains(&n_objects) {
        return Err(SceneError::ObjectCount(n_objects));
    }
    if n_points < 512 {
        return Err(SceneError::PointCount(n_points));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let room = [r32(rng.gen_range(6.0..8.0)), r32(rng.gen_range(5.0..7.0)), ROOM_HEIGHT as Real];

    // labels and sizes first, then place largest footprints first
    let mut specs: Vec<(usize, usize, [Real; 3], Real)> = (0..n_objects)
        .map(|_| {
            let class = rng.gen_range(0..CLASSES.len());
            let color = rng.gen_range(0..COLORS.len());
            let (nominal, base) = CLASS_SHAPE[class];
            let size = nominal.map(|s| r32(s as f64 * rng.gen_range(0.9..1.1)));
            (class, color, size, base as Real)
        })
        .collect();
    specs.sort_by(|a, b| (b.2[0] * b.2[1]).partial_cmp(&(a.2[0] * a.2[1])).unwrap_or(std::cmp::Ordering::Equal));

    let mut boxes: Vec<Box3D> = Vec::with_capacity(n_objects);
    let mut classes = Vec::with_capacity(n_objects);
    let mut colors = Vec::with_capacity(n_objects);
    for (obj, &(class, color, size, base)) in specs.iter().enumerate() {
        let mut placed = None;
        for _ in 0..MAX_ATTEMPTS {
            let cx = r32(rng.gen_range(size[0] as f64 * 0.5..room[0] as f64 - size[0] as f64 * 0.5));
            let cy = r32(rng.gen_range(size[1] as f64 * 0.5..room[1] as f64 - size[1] as f64 * 0.5));
            let cz = r32(base as f64 + size[2] as f64 * 0.5);
            let cand = Box3D::new([cx, cy, cz], size).expect("positive sizes");
            if boxes.iter().all(|b| footprint_gap(b, &cand) >= PLACEMENT_GAP) {
                placed = Some(cand);
                break;
            }
        }
        let b = placed.ok_or(SceneError::Placement { seed, object: obj })?;
        boxes.push(b);
        classes.push(class);
        colors.push(color);
    }

    let instances: Vec<GtInstance> = (0..n_objects)
        .map(|i| GtInstance {
            instance_id: i as u32,
            class_label: classes[i],
            color_label: colors[i],
            bbox: boxes[i],
            captions: captions_for(&boxes, &classes, &colors, i, &room),
        })
        .collect();

    let (points, point_colors) = sample_points(&mut rng, &room, &boxes, &colors, n_points);
    Ok(SyntheticScene {
        scene_id: format!("scene_{seed:08}"),
        room,
        points,
        colors: point_colors,
        instances,
    })
}

/// Largest axis separation of two footprints (negative when they overlap).
fn footprint_gap(a: &Box3D, b: &Box3D) -> Real {
    let (amin, amax, bmin, bmax) = (a.min(), a.max(), b.min(), b.max());
    let gx = (bmin[0] - amax[0]).max(amin[0] - bmax[0]);
    let gy = (bmin[1] - amax[1]).max(amin[1] - bmax[1]);
    gx.max(gy)
}

struct Face {
    origin: [f64; 3],
    u: [f64; 3],
    v: [f64; 3],
    rgb: [f32; 3],
}

impl Face {
    fn area(&self) -> f64 {
        let n = |a: [f64; 3]| (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
        n(self.u) * n(self.v)
    }
}

fn box_faces(b: &Box3D, rgb: [f32; 3]) -> Vec<Face> {
    let lo = b.min().map(|x| x as f64);
    let s = b.size.map(|x| x as f64);
    let ex = [s[0], 0.0, 0.0];
    let ey = [0.0, s[1], 0.0];
    let ez = [0.0, 0.0, s[2]];
    let add = |a: [f64; 3], b: [f64; 3]| [a[0] + b[0], a[1] + b[1], a[2] + b[2]];
    let mut faces = vec![
        Face { origin: add(lo, ez), u: ex, v: ey, rgb },
        Face { origin: lo, u: ex, v: ez, rgb },
        Face { origin: add(lo, ey), u: ex, v: ez, rgb },
        Face { origin: lo, u: ey, v: ez, rgb },
        Face { origin: add(lo, ex), u: ey, v: ez, rgb },
    ];
    if lo[2] > 0.0 {
        faces.push(Face { origin: lo, u: ex, v: ey, rgb });
    }
    faces
}

fn sample_faces(rng: &mut ChaCha8Rng, faces: &[Face], n: usize, noise: &Normal<f64>, out: &mut (Vec<Point3>, Vec<[Real; 3]>)) {
    let areas: Vec<f64> = faces.iter().map(Face::area).collect();
    let total: f64 = areas.iter().sum();
    for _ in 0..n {
        let mut pick = rng.gen_range(0.0..total);
        let mut f = &faces[faces.len() - 1];
        for (face, a) in faces.iter().zip(&areas) {
            if pick < *a {
                f = face;
                break;
            }
            pick -= a;
        }
        let (s, t): (f64, f64) = (rng.gen(), rng.gen());
        let p = [0, 1, 2].map(|i| r32(f.origin[i] + s * f.u[i] + t * f.v[i]));
        let c = [0, 1, 2].map(|i| r32((f.rgb[i] as f64 + noise.sample(rng)).clamp(0.0, 1.0)));
        out.0.push(p);
        out.1.push(c);
    }
}

fn sample_points(rng: &mut ChaCha8Rng, room: &[Real; 3], boxes: &[Box3D], colors: &[usize], n: usize) -> (Vec<Point3>, Vec<[Real; 3]>) {
    let noise = Normal::new(0.0, 0.03).expect("finite");
    let n_noise = n / 20;
    let n_objects = (n - n_noise) * 60 / 100;
    let n_room = n - n_noise - n_objects;
    let mut out = (Vec::with_capacity(n), Vec::with_capacity(n));

    let object_faces: Vec<Face> = boxes
        .iter()
        .zip(colors)
        .flat_map(|(b, &c)| box_faces(b, COLOR_RGB[c]))
        .collect();
    sample_faces(rng, &object_faces, n_objects, &noise, &mut out);

    let (x, y, z) = (room[0] as f64, room[1] as f64, room[2] as f64);
    let room_faces = vec![
        Face { origin: [0.0; 3], u: [x, 0.0, 0.0], v: [0.0, y, 0.0], rgb: FLOOR_RGB },
        Face { origin: [0.0; 3], u: [x, 0.0, 0.0], v: [0.0, 0.0, z], rgb: WALL_RGB },
        Face { origin: [0.0, y, 0.0], u: [x, 0.0, 0.0], v: [0.0, 0.0, z], rgb: WALL_RGB },
        Face { origin: [0.0; 3], u: [0.0, y, 0.0], v: [0.0, 0.0, z], rgb: WALL_RGB },
        Face { origin: [x, 0.0, 0.0], u: [0.0, y, 0.0], v: [0.0, 0.0, z], rgb: WALL_RGB },
    ];
    sample_faces(rng, &room_faces, n_room, &noise, &mut out);

    for _ in 0..n_noise {
        let p = [r32(rng.gen_range(0.0..x)), r32(rng.gen_range(0.0..y)), r32(rng.gen_range(0.0..z))];
        let c = [r32(rng.gen()), r32(rng.gen()), r32(rng.gen())];
        out.0.push(p);
        out.1.push(c);
    }
    out
}

/// Per-scene seeds for a dataset drawn from one base seed.
pub fn scene_seed(base: u64, index: usize) -> u64 {
    // splitmix64 step keeps neighbouring bases from sharing scenes
    let mut z = base.wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(index as u64 + 1));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generates `count` scenes with object counts drawn in `objects` (inclusive).
pub fn generate_dataset(base_seed: u64, count: usize, objects: (usize, usize), n_points: usize) -> Result<Vec<SyntheticScene>, SceneError> {
    let (lo, hi) = objects;
    if lo < 2 || hi > CLASSES.len() || lo > hi {
        return Err(SceneError::ObjectCount(if lo < 2 || lo > hi { lo } else { hi }));
    }
    (0..count)
        .map(|i| {
            let seed = scene_seed(base_seed, i);
            let n_obj = lo + (seed % (hi - lo + 1) as u64) as usize;
            let mut s = generate_scene(seed, n_obj, n_points)?;
            s.scene_id = format!("scene_{i:04}");
            Ok(s)
        })
        .collect()
}
