//! Browser bindings for a few self-contained operations: scene generation,
//! caption scoring against a scene's references, and 3D box overlap.
//!
//! Each export has a plain Rust twin returning `Result<String, String>` so
//! the logic is testable off the wasm target. Payloads are JSON strings.

use serde::Serialize;
use sia_core::evalkit::{bleu4, cider, meteor_lite, rouge_l, DocFreq};
use sia_core::geometry::{giou_3d, hull_volume, intersection_volume, iou_3d, Box3D};
use sia_core::scenegen::{generate_scene, SyntheticScene, CLASSES, COLORS};
use sia_core::vocab::tokenize;
use wasm_bindgen::prelude::*;

/// Largest point count the page asks for; keeps the JSON payload small.
pub const MAX_POINTS: usize = 16384;

#[derive(Serialize)]
struct ObjectView {
    id: u32,
    class: &'static str,
    color: &'static str,
    center: [f64; 3],
    size: [f64; 3],
    captions: Vec<String>,
    references: Vec<String>,
}

#[derive(Serialize)]
struct SceneView {
    scene_id: String,
    room: [f64; 3],
    /// Flattened xyz.
    points: Vec<f32>,
    /// Flattened rgb in [0, 1].
    colors: Vec<f32>,
    objects: Vec<ObjectView>,
}

#[derive(Serialize)]
struct Scores {
    bleu4: f64,
    rouge_l: f64,
    meteor: f64,
    cider: f64,
    tokens: Vec<String>,
}

#[derive(Serialize)]
struct Overlap {
    iou: f64,
    giou: f64,
    intersection: f64,
    hull: f64,
}

fn build(seed: u32, n_objects: usize, n_points: usize) -> Result<SyntheticScene, String> {
    if !(2..=CLASSES.len()).contains(&n_objects) {
        return Err(format!("object count must be in 2..={}", CLASSES.len()));
    }
    if !(512..=MAX_POINTS).contains(&n_points) {
        return Err(format!("point count must be in 512..={MAX_POINTS}"));
    }
    generate_scene(seed as u64, n_objects, n_points).map_err(|e| e.to_string())
}

fn json<T: Serialize>(v: &T) -> Result<String, String> {
    serde_json::to_string(v).map_err(|e| e.to_string())
}

/// Scene geometry, colors and annotated objects as JSON.
pub fn scene_json(seed: u32, n_objects: usize, n_points: usize) -> Result<String, String> {
    let s = build(seed, n_objects, n_points)?;
    let objects = s
        .instances
        .iter()
        .map(|i| ObjectView {
            id: i.instance_id,
            class: CLASSES[i.class_label],
            color: COLORS[i.color_label],
            center: i.bbox.center.map(|x| x as f64),
            size: i.bbox.size.map(|x| x as f64),
            captions: i.captions.iter().map(|c| c.text()).collect(),
            references: i.final_references().iter().map(|r| r.join(" ")).collect(),
        })
        .collect();
    json(&SceneView {
        scene_id: s.scene_id.clone(),
        room: s.room.map(|x| x as f64),
        points: s.points.iter().flat_map(|p| p.map(|x| x as f32)).collect(),
        colors: s.colors.iter().flat_map(|c| c.map(|x| x as f32)).collect(),
        objects,
    })
}

/// Scores `candidate` against one object's references. CIDEr document
/// frequencies come from every object of the same scene.
pub fn score_json(seed: u32, n_objects: usize, n_points: usize, object: usize, candidate: &str) -> Result<String, String> {
    let s = build(seed, n_objects, n_points)?;
    let sets: Vec<Vec<Vec<String>>> = s.instances.iter().map(|i| i.final_references()).collect();
    let refs = sets.get(object).ok_or_else(|| format!("object {object} out of range for {} objects", sets.len()))?;
    let df = DocFreq::build(&sets);
    let tokens = tokenize(candidate);
    json(&Scores {
        bleu4: bleu4(&tokens, refs) as f64,
        rouge_l: rouge_l(&tokens, refs) as f64,
        meteor: meteor_lite(&tokens, refs) as f64,
        cider: cider(&tokens, refs, &df) as f64,
        tokens,
    })
}

fn parse_box(v: &[f64]) -> Result<Box3D, String> {
    if v.len() != 6 {
        return Err(format!("a box is cx, cy, cz, sx, sy, sz; got {} numbers", v.len()));
    }
    let r = |i: usize| v[i] as sia_core::Real;
    Box3D::new([r(0), r(1), r(2)], [r(3), r(4), r(5)]).map_err(|e| e.to_string())
}

/// IoU, GIoU, intersection and hull volume of two center/size boxes.
pub fn overlap_json(a: &[f64], b: &[f64]) -> Result<String, String> {
    let (a, b) = (parse_box(a)?, parse_box(b)?);
    json(&Overlap {
        iou: iou_3d(&a, &b) as f64,
        giou: giou_3d(&a, &b) as f64,
        intersection: intersection_volume(&a, &b) as f64,
        hull: hull_volume(&a, &b) as f64,
    })
}

fn js(r: Result<String, String>) -> Result<String, JsValue> {
    r.map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn scene(seed: u32, n_objects: usize, n_points: usize) -> Result<String, JsValue> {
    js(scene_json(seed, n_objects, n_points))
}

#[wasm_bindgen]
pub fn score_caption(seed: u32, n_objects: usize, n_points: usize, object: usize, candidate: &str) -> Result<String, JsValue> {
    js(score_json(seed, n_objects, n_points, object, candidate))
}

#[wasm_bindgen]
pub fn box_overlap(a: &[f64], b: &[f64]) -> Result<String, JsValue> {
    js(overlap_json(a, b))
}
