//! Procedural visible/infrared scene pairs and their on-disk format.
//!
//! Visible images carry texture and object detail, infrared images carry
//! little texture but bright elliptical blobs whose bounding boxes are the
//! ground truth. Everything is driven by one SplitMix64 stream per scene.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cfdp::{BBox, BoxSet};
use crate::error::{Error, Result};
use crate::losses::quantize;
use crate::numerics::Tensor;
use crate::rng::{self, Stream};

const PLACEMENT_RETRIES: usize = 200;
/// Largest IoU allowed between two objects of one scene.
const MAX_OVERLAP: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    /// Inclusive object count range.
    pub min_objects: usize,
    pub max_objects: usize,
    /// Object extent range as a fraction of the image side.
    pub min_size: f64,
    pub max_size: f64,
    pub texture_amplitude: f64,
    pub hotspot_contrast: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            width: 64,
            height: 64,
            min_objects: 1,
            max_objects: 3,
            min_size: 0.12,
            max_size: 0.3,
            texture_amplitude: 0.15,
            hotspot_contrast: 0.5,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.width < 32 || self.height < 32 {
            return bad(format!("scene must be at least 32x32, got {}x{}", self.width, self.height));
        }
        if self.min_objects > self.max_objects {
            return bad(format!("object range {}..={} is empty", self.min_objects, self.max_objects));
        }
        let in_unit = |v: f64| v > 0.0 && v < 1.0;
        if !in_unit(self.min_size) || !in_unit(self.max_size) || self.min_size > self.max_size {
            return bad(format!("object sizes must satisfy 0 < {} <= {} < 1", self.min_size, self.max_size));
        }
        if !(self.texture_amplitude >= 0.0 && self.texture_amplitude <= 0.5) {
            return bad(format!("texture amplitude {} outside [0, 0.5]", self.texture_amplitude));
        }
        if !(self.hotspot_contrast > 0.0 && self.hotspot_contrast <= 1.0) {
            return bad(format!("hotspot contrast {} outside (0, 1]", self.hotspot_contrast));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScenePair {
    pub id: String,
    pub visible: Tensor,
    pub infrared: Tensor,
    pub boxes: BoxSet,
    pub spec: SceneSpec,
}

/// Random smooth field: a few low-frequency sinusoids, zero mean, peak
/// amplitude at most `amp`.
fn smooth_field(rng: &mut Stream, h: usize, w: usize, amp: f64, waves: usize, max_freq: f64) -> Vec<f64> {
    let comps: Vec<(f64, f64, f64, f64)> = (0..waves)
        .map(|_| {
            let theta = rng.random_range(0.0..std::f64::consts::TAU);
            let f = rng.random_range(1.0..max_freq);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let a = rng.random_range(0.5..1.0);
            (f * theta.cos(), f * theta.sin(), phase, a)
        })
        .collect();
    let norm: f64 = comps.iter().map(|c| c.3).sum::<f64>().max(1e-12);
    (0..h * w)
        .map(|k| {
            let (y, x) = ((k / w) as f64 / h as f64, (k % w) as f64 / w as f64);
            let s: f64 = comps
                .iter()
                .map(|&(fx, fy, p, a)| a * (std::f64::consts::TAU * (fx * x + fy * y) + p).sin())
                .sum();
            amp * s / norm
        })
        .collect()
}

fn place_objects(spec: &SceneSpec, rng: &mut Stream) -> Result<Vec<BBox>> {
    let n = rng.random_range(spec.min_objects..=spec.max_objects);
    let mut boxes: Vec<BBox> = Vec::with_capacity(n);
    for _ in 0..n {
        let mut placed = false;
        for _ in 0..PLACEMENT_RETRIES {
            let w = rng.random_range(spec.min_size..=spec.max_size);
            let h = rng.random_range(spec.min_size..=spec.max_size);
            let cx = rng.random_range(w / 2.0..=1.0 - w / 2.0);
            let cy = rng.random_range(h / 2.0..=1.0 - h / 2.0);
            let b = BBox::new(cx, cy, w, h);
            if boxes.iter().all(|o| crate::metrics::iou(o, &b) <= MAX_OVERLAP) {
                boxes.push(b);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::domain(
                "generate_scene",
                format!("could not place object {} of {n} after {PLACEMENT_RETRIES} tries", boxes.len() + 1),
            ));
        }
    }
    Ok(boxes)
}

/// Normalised elliptical radius of pixel centre `(i, j)` in box `b`; 1 on the
/// inscribed ellipse.
fn ellipse_radius(b: &BBox, i: usize, j: usize, h: usize, w: usize) -> f64 {
    let px = (j as f64 + 0.5) / w as f64;
    let py = (i as f64 + 0.5) / h as f64;
    let dx = (px - b.cx) / (b.w / 2.0);
    let dy = (py - b.cy) / (b.h / 2.0);
    (dx * dx + dy * dy).sqrt()
}

pub fn generate_scene(spec: &SceneSpec) -> Result<ScenePair> {
    generate_scene_with_id(spec, format!("seed-{}", spec.seed))
}

pub fn generate_scene_with_id(spec: &SceneSpec, id: impl Into<String>) -> Result<ScenePair> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut rng = rng::stream(spec.seed);
    let boxes = place_objects(spec, &mut rng)?;

    // visible: gradient + band-limited texture + textured silhouettes
    let base = rng.random_range(0.35..0.6);
    let slope = rng.random_range(0.05..0.2);
    let dir = rng.random_range(0.0..std::f64::consts::TAU);
    let tex = smooth_field(&mut rng, h, w, spec.texture_amplitude, 8, 10.0);
    let mut vis: Vec<f64> = (0..h * w)
        .map(|k| {
            let (y, x) = ((k / w) as f64 / h as f64 - 0.5, (k % w) as f64 / w as f64 - 0.5);
            base + slope * (x * dir.cos() + y * dir.sin()) + tex[k]
        })
        .collect();
    for b in &boxes {
        let tone = if rng.random_bool(0.5) { rng.random_range(0.05..0.25) } else { rng.random_range(0.7..0.9) };
        let freq = rng.random_range(3.0..6.0);
        let angle = rng.random_range(0.0..std::f64::consts::PI);
        for i in 0..h {
            for j in 0..w {
                let r = ellipse_radius(b, i, j, h, w);
                if r < 1.0 {
                    let u = ((j as f64 + 0.5) / w as f64 - b.cx) / b.w;
                    let v = ((i as f64 + 0.5) / h as f64 - b.cy) / b.h;
                    let stripe = (std::f64::consts::TAU * freq * (u * angle.cos() + v * angle.sin())).sin();
                    vis[i * w + j] = tone + 0.08 * stripe;
                }
            }
        }
    }

    // infrared: dim, nearly flat background + bright blobs filling each box
    let ir_base = rng.random_range(0.1..0.3);
    let ir_tex = smooth_field(&mut rng, h, w, 0.03, 3, 3.0);
    let mut ir: Vec<f64> = (0..h * w).map(|k| ir_base + ir_tex[k]).collect();
    for b in &boxes {
        let heat = spec.hotspot_contrast * rng.random_range(0.8..1.0);
        for i in 0..h {
            for j in 0..w {
                let r = ellipse_radius(b, i, j, h, w);
                if r < 1.0 {
                    ir[i * w + j] += heat * (1.0 - r * r).sqrt();
                }
            }
        }
    }

    let clamp = |v: Vec<f64>| Tensor::new(vec![h, w], v.into_iter().map(|x| x.clamp(0.0, 1.0)).collect());
    Ok(ScenePair {
        id: id.into(),
        visible: clamp(vis)?,
        infrared: clamp(ir)?,
        boxes: BoxSet::new(boxes),
        spec: spec.clone(),
    })
}

// ---- PGM ----

/// Binary 8-bit PGM bytes of an image in `[0, 1]`.
pub fn encode_pgm(img: &Tensor) -> Result<Vec<u8>> {
    let s = img.shape();
    if s.len() != 2 {
        return Err(Error::shape("write_image", format!("expected [H, W], got {s:?}")));
    }
    let mut out = format!("P5\n{} {}\n255\n", s[1], s[0]).into_bytes();
    out.extend(img.data().iter().map(|&v| quantize(v)));
    Ok(out)
}

fn skip_space_and_comments(bytes: &[u8], mut pos: usize) -> usize {
    loop {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
        } else {
            return pos;
        }
    }
}

fn header_int(bytes: &[u8], pos: usize, what: &str) -> std::result::Result<(usize, usize), (usize, String)> {
    let start = skip_space_and_comments(bytes, pos);
    let mut end = start;
    while end < bytes.len() && bytes[end].is_ascii_digit() {
        end += 1;
    }
    if end == start {
        return Err((start, format!("expected {what}")));
    }
    let v = std::str::from_utf8(&bytes[start..end])
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .ok_or((start, format!("{what} out of range")))?;
    Ok((v, end))
}

/// Parse binary PGM bytes. Errors carry the byte offset of the problem.
pub fn decode_pgm(bytes: &[u8]) -> std::result::Result<Tensor, (usize, String)> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err((0, "missing P5 magic number".into()));
    }
    let (w, pos) = header_int(bytes, 2, "width")?;
    let (h, pos) = header_int(bytes, pos, "height")?;
    let (maxval, pos) = header_int(bytes, pos, "maxval")?;
    if w == 0 || h == 0 {
        return Err((pos, format!("zero image dimension {w}x{h}")));
    }
    if maxval == 0 || maxval > 255 {
        return Err((pos, format!("unsupported maxval {maxval}")));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err((pos, "expected a single whitespace byte before pixel data".into()));
    }
    let data = &bytes[pos + 1..];
    let n = w * h;
    if data.len() < n {
        return Err((bytes.len(), format!("pixel data truncated: expected {n} bytes, found {}", data.len())));
    }
    if data.len() > n {
        return Err((pos + 1 + n, format!("{} trailing bytes after pixel data", data.len() - n)));
    }
    let m = maxval as f64;
    Tensor::new(vec![h, w], data.iter().map(|&b| (b as f64 / m).min(1.0)).collect())
        .map_err(|e| (pos, e.to_string()))
}

pub fn write_image(path: &Path, img: &Tensor) -> Result<()> {
    let bytes = encode_pgm(img)?;
    write_bytes(path, &bytes)
}

pub fn read_image(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes).map_err(|(offset, msg)| Error::Parse { path: path.to_path_buf(), offset, msg })
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

// ---- annotations ----

/// Box file contents. `scores` is present only for predictions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub scene: String,
    pub boxes: Vec<BBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<Vec<f64>>,
}

impl Annotation {
    pub fn new(scene: impl Into<String>, boxes: &BoxSet) -> Self {
        Self { scene: scene.into(), boxes: boxes.boxes().to_vec(), scores: None }
    }

    pub fn box_set(&self) -> BoxSet {
        BoxSet::new(self.boxes.clone())
    }
}

/// Byte offset of a 1-based `(line, column)` position in `text`.
fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let line_start: usize = text.split_inclusive('\n').take(line.saturating_sub(1)).map(str::len).sum();
    (line_start + column.saturating_sub(1)).min(text.len())
}

pub fn parse_annotations(text: &str, path: &Path) -> Result<Annotation> {
    serde_json::from_str(text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        offset: byte_offset(text, e.line(), e.column()),
        msg: e.to_string(),
    })
}

pub fn write_annotations(path: &Path, ann: &Annotation) -> Result<()> {
    let mut s = serde_json::to_string_pretty(ann)?;
    s.push('\n');
    write_bytes(path, s.as_bytes())
}

pub fn read_annotations(path: &Path) -> Result<Annotation> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let text = std::str::from_utf8(&bytes).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        offset: e.valid_up_to(),
        msg: "invalid UTF-8".into(),
    })?;
    parse_annotations(text, path)
}

// ---- dataset layout ----

pub const TRAIN_SPLIT: &str = "train";
pub const EVAL_SPLIT: &str = "eval";

/// Scene files under `<root>/<split>/<id>.{vis.pgm,ir.pgm,boxes.json}`.
pub struct ScenePaths {
    pub visible: PathBuf,
    pub infrared: PathBuf,
    pub boxes: PathBuf,
}

pub fn scene_paths(root: &Path, split: &str, id: &str) -> ScenePaths {
    let dir = root.join(split);
    ScenePaths {
        visible: dir.join(format!("{id}.vis.pgm")),
        infrared: dir.join(format!("{id}.ir.pgm")),
        boxes: dir.join(format!("{id}.boxes.json")),
    }
}

/// Scene as read back from disk.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub id: String,
    pub visible: Tensor,
    pub infrared: Tensor,
    pub boxes: BoxSet,
}

impl From<ScenePair> for Scene {
    fn from(p: ScenePair) -> Self {
        Self { id: p.id, visible: p.visible, infrared: p.infrared, boxes: p.boxes }
    }
}

pub fn write_scene(root: &Path, split: &str, scene: &ScenePair) -> Result<()> {
    let p = scene_paths(root, split, &scene.id);
    write_image(&p.visible, &scene.visible)?;
    write_image(&p.infrared, &scene.infrared)?;
    write_annotations(&p.boxes, &Annotation::new(&scene.id, &scene.boxes))
}

pub fn read_scene(root: &Path, split: &str, id: &str) -> Result<Scene> {
    let p = scene_paths(root, split, id);
    let visible = read_image(&p.visible)?;
    let infrared = read_image(&p.infrared)?;
    if visible.shape() != infrared.shape() {
        return Err(Error::shape(
            "read_scene",
            format!("{id}: visible {:?} vs infrared {:?}", visible.shape(), infrared.shape()),
        ));
    }
    let boxes = read_annotations(&p.boxes)?.box_set();
    Ok(Scene { id: id.to_string(), visible, infrared, boxes })
}

/// Scene ids of a split, sorted.
pub fn list_split(root: &Path, split: &str) -> Result<Vec<String>> {
    let dir = root.join(split);
    let mut ids: Vec<String> = fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().to_str().and_then(|n| n.strip_suffix(".boxes.json")).map(String::from))
        .collect();
    ids.sort();
    Ok(ids)
}

pub fn read_split(root: &Path, split: &str) -> Result<Vec<Scene>> {
    list_split(root, split)?.iter().map(|id| read_scene(root, split, id)).collect()
}

/// Seed of scene `index` in `split` under dataset seed `seed`.
pub fn scene_seed(seed: u64, split: &str, index: usize) -> u64 {
    let tag = if split == TRAIN_SPLIT { 1 } else { 2 };
    rng::derive(seed, &[tag, index as u64])
}

pub fn scene_id(index: usize) -> String {
    format!("scene-{index:04}")
}

/// Scenes of one split, generated in memory.
pub fn generate_split(template: &SceneSpec, seed: u64, split: &str, count: usize) -> Result<Vec<ScenePair>> {
    (0..count)
        .map(|i| generate_scene_with_id(&template.with_seed(scene_seed(seed, split, i)), scene_id(i)))
        .collect()
}

/// Generate and write `train` and `eval` splits.
pub fn generate_dataset(root: &Path, template: &SceneSpec, seed: u64, n_train: usize, n_eval: usize) -> Result<()> {
    for (split, n) in [(TRAIN_SPLIT, n_train), (EVAL_SPLIT, n_eval)] {
        let dir = root.join(split);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for scene in generate_split(template, seed, split, n)? {
            write_scene(root, split, &scene)?;
        }
    }
    Ok(())
}
