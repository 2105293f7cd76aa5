//! Binary scene container and its text manifest.
//!
//! Layout (little endian): magic `SIA1`, version `u16`, scene count `u32`,
//! then one length-prefixed record per scene. Coordinates and colors are
//! stored as `f32`; generated scenes are already `f32`-representable so the
//! round trip is bit-exact.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::geometry::Box3D;
use crate::scenegen::{Caption, CaptionKind, GtInstance, SyntheticScene, CLASSES, COLORS};
use crate::tensor::Real;

pub const MAGIC: &[u8; 4] = b"SIA1";
pub const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("bad magic at byte 0")]
    BadMagic,
    #[error("unsupported dataset version {found} (expected {expected})")]
    VersionMismatch { found: u16, expected: u16 },
    #[error("malformed dataset at byte {offset}: {reason}")]
    Malformed { offset: usize, reason: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.to_path_buf(), source }
}

/// Writes through a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: Real) {
        self.0.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fn str16(&mut self, s: &str) {
        self.u16(s.len() as u16);
        self.0.extend_from_slice(s.as_bytes());
    }
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub(crate) fn offset(&self) -> usize {
        self.pos
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8], (usize, String)> {
        if self.pos + n > self.buf.len() {
            return Err((self.pos, format!("need {n} bytes, {} remain", self.buf.len() - self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8, (usize, String)> {
        Ok(self.take(1)?[0])
    }
    pub(crate) fn u16(&mut self) -> Result<u16, (usize, String)> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    pub(crate) fn u32(&mut self) -> Result<u32, (usize, String)> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    pub(crate) fn f32(&mut self) -> Result<Real, (usize, String)> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()) as Real)
    }
    pub(crate) fn str16(&mut self) -> Result<String, (usize, String)> {
        let n = self.u16()? as usize;
        let at = self.pos;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| (at, "invalid utf-8".to_string()))
    }
}

pub fn encode_dataset(scenes: &[SyntheticScene]) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u16(VERSION);
    w.u32(scenes.len() as u32);
    for s in scenes {
        let mut r = Writer(Vec::new());
        r.str16(&s.scene_id);
        s.room.iter().for_each(|x| r.f32(*x));
        r.u32(s.points.len() as u32);
        s.points.iter().flatten().for_each(|x| r.f32(*x));
        s.colors.iter().flatten().for_each(|x| r.f32(*x));
        r.u16(s.instances.len() as u16);
        for inst in &s.instances {
            r.u32(inst.instance_id);
            r.u8(inst.class_label as u8);
            r.u8(inst.color_label as u8);
            inst.bbox.to_array().iter().for_each(|x| r.f32(*x));
            r.u8(inst.captions.len() as u8);
            for c in &inst.captions {
                r.u8(c.kind.code());
                r.str16(&c.text());
            }
        }
        w.u32(r.0.len() as u32);
        w.0.extend_from_slice(&r.0);
    }
    w.0
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Vec<SyntheticScene>, DatasetError> {
    let malformed = |(offset, reason): (usize, String)| DatasetError::Malformed { offset, reason };
    let mut rd = Reader::new(bytes);
    let magic = rd.take(4).map_err(malformed)?;
    if magic != MAGIC {
        return Err(DatasetError::BadMagic);
    }
    let version = rd.u16().map_err(malformed)?;
    if version != VERSION {
        return Err(DatasetError::VersionMismatch { found: version, expected: VERSION });
    }
    let count = rd.u32().map_err(malformed)? as usize;
    let mut scenes = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = rd.u32().map_err(malformed)? as usize;
        let start = rd.offset();
        let body = rd.take(len).map_err(malformed)?;
        let scene = decode_scene(body).map_err(|(o, r)| DatasetError::Malformed { offset: start + o, reason: r })?;
        scenes.push(scene);
    }
    if rd.offset() != bytes.len() {
        return Err(DatasetError::Malformed { offset: rd.offset(), reason: "trailing bytes".into() });
    }
    Ok(scenes)
}

fn decode_scene(body: &[u8]) -> Result<SyntheticScene, (usize, String)> {
    let mut r = Reader::new(body);
    let scene_id = r.str16()?;
    let room = [r.f32()?, r.f32()?, r.f32()?];
    let n = r.u32()? as usize;
    if n.saturating_mul(24) > body.len() {
        return Err((r.offset(), format!("point count {n} exceeds record size")));
    }
    let mut points = Vec::with_capacity(n);
    for _ in 0..n {
        points.push([r.f32()?, r.f32()?, r.f32()?]);
    }
    let mut colors = Vec::with_capacity(n);
    for _ in 0..n {
        colors.push([r.f32()?, r.f32()?, r.f32()?]);
    }
    let n_inst = r.u16()? as usize;
    let mut instances = Vec::with_capacity(n_inst);
    for _ in 0..n_inst {
        let instance_id = r.u32()?;
        let at = r.offset();
        let class_label = r.u8()? as usize;
        let color_label = r.u8()? as usize;
        if class_label >= CLASSES.len() || color_label >= COLORS.len() {
            return Err((at, format!("label out of catalog ({class_label}, {color_label})")));
        }
        let at = r.offset();
        let v: Vec<Real> = (0..6).map(|_| r.f32()).collect::<Result<_, _>>()?;
        let bbox = Box3D::new([v[0], v[1], v[2]], [v[3], v[4], v[5]]).map_err(|e| (at, e.to_string()))?;
        let nc = r.u8()? as usize;
        let mut captions = Vec::with_capacity(nc);
        for _ in 0..nc {
            let at = r.offset();
            let kind = CaptionKind::from_code(r.u8()?).ok_or((at, "unknown caption kind".to_string()))?;
            let text = r.str16()?;
            captions.push(Caption { kind, tokens: text.split(' ').map(str::to_string).collect() });
        }
        instances.push(GtInstance { instance_id, class_label, color_label, bbox, captions });
    }
    if r.offset() != body.len() {
        return Err((r.offset(), "record length mismatch".into()));
    }
    Ok(SyntheticScene { scene_id, room, points, colors, instances })
}

/// One `scene_id<TAB>instance_id<TAB>caption` line per caption.
pub fn manifest(scenes: &[SyntheticScene]) -> String {
    let mut out = String::new();
    for s in scenes {
        for inst in &s.instances {
            for c in &inst.captions {
                out.push_str(&format!("{}\t{}\t{}\n", s.scene_id, inst.instance_id, c.text()));
            }
        }
    }
    out
}

/// Parses manifest text into `(scene_id, instance_id, caption tokens)` rows.
pub fn parse_manifest(text: &str) -> Result<Vec<(String, u32, Vec<String>)>, DatasetError> {
    let mut rows = Vec::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let trimmed = line.trim_end_matches(['\n', '\r']);
        if !trimmed.is_empty() {
            let parts: Vec<&str> = trimmed.split('\t').collect();
            let bad = |reason: &str| DatasetError::Malformed { offset, reason: reason.to_string() };
            if parts.len() != 3 {
                return Err(bad("expected 3 tab-separated fields"));
            }
            let id = parts[1].parse::<u32>().map_err(|_| bad("instance id is not an integer"))?;
            rows.push((parts[0].to_string(), id, crate::vocab::tokenize(parts[2])));
        }
        offset += line.len();
    }
    Ok(rows)
}

/// Manifest path that accompanies a dataset path.
pub fn manifest_path(dataset: &Path) -> PathBuf {
    let mut p = dataset.as_os_str().to_owned();
    p.push(".manifest.tsv");
    PathBuf::from(p)
}

pub fn save_dataset(path: &Path, scenes: &[SyntheticScene]) -> Result<(), DatasetError> {
    write_atomic(path, &encode_dataset(scenes)).map_err(io_err(path))?;
    let mp = manifest_path(path);
    write_atomic(&mp, manifest(scenes).as_bytes()).map_err(io_err(&mp))
}

pub fn load_dataset(path: &Path) -> Result<Vec<SyntheticScene>, DatasetError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_dataset(&bytes)
}
