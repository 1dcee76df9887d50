//! Detection annotation datasets for the source and target domains.
//!
//! Boxes are converted once, at load time, from absolute top-left pixel form
//! `[x, y, w, h]` into normalized center form `(cx, cy, w, h)`. Category ids
//! are remapped to a dense `[0, K)` range so per-class statistics can index
//! plain arrays.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

/// Tolerance for boxes overshooting the image border.
pub const BOUNDS_EPS: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum AnnotationError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed JSON{}: {source}", line_suffix(*.line))]
    Json {
        path: PathBuf,
        line: Option<usize>,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}{}: missing required field `{field}`", line_suffix(*.line))]
    MissingField {
        path: PathBuf,
        line: Option<usize>,
        field: &'static str,
    },
    #[error("{context}: annotation references unknown image `{image_id}`")]
    UnknownImage { context: String, image_id: String },
    #[error("{context}: annotation references unknown category {category_id}")]
    UnknownCategory { context: String, category_id: i64 },
    #[error("{context}: unknown class `{class}`")]
    UnknownClass { context: String, class: String },
    #[error("{context}: non-positive box dimensions ({w} x {h})")]
    NonPositiveBox { context: String, w: f64, h: f64 },
    #[error("{context}: non-positive image dimensions ({width} x {height})")]
    NonPositiveImage { context: String, width: f64, height: f64 },
    #[error("{context}: box exceeds image bounds")]
    OutOfBounds { context: String },
    #[error("{context}: image `{image_id}` declared twice with different sizes")]
    ConflictingImage { context: String, image_id: String },
    #[error("{context}: duplicate class `{class}`")]
    DuplicateClass { context: String, class: String },
    #[error("dataset has no classes")]
    NoClasses,
    #[error("dataset has no images")]
    EmptyDataset,
    #[error("subsample fraction {0} is outside (0, 1]")]
    FractionOutOfRange(f64),
}

fn line_suffix(line: Option<usize>) -> String {
    match line {
        Some(l) => format!(" (line {l})"),
        None => String::new(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Domain::Source => f.write_str("source"),
            Domain::Target => f.write_str("target"),
        }
    }
}

/// One labeled box in normalized center form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxAnnotation {
    pub image_id: String,
    pub class_id: usize,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoxAnnotation {
    pub fn size(&self) -> [f64; 2] {
        [self.w, self.h]
    }

    pub fn location(&self) -> [f64; 2] {
        [self.cx, self.cy]
    }

    /// `(cx, cy, w, h)`, the regression target used by the toy detector.
    pub fn as_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    /// Converts back to an absolute `[x_topleft, y_topleft, w, h]` bbox.
    pub fn denormalize(&self, width: f64, height: f64) -> [f64; 4] {
        let w = self.w * width;
        let h = self.h * height;
        [self.cx * width - w / 2.0, self.cy * height - h / 2.0, w, h]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageInfo {
    pub id: String,
    pub width: f64,
    pub height: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionDataset {
    pub domain: Domain,
    pub classes: Vec<String>,
    /// Original category id of each dense class index, when the input had one.
    pub category_ids: Option<Vec<i64>>,
    pub images: Vec<ImageInfo>,
    pub annotations: Vec<BoxAnnotation>,
}

impl DetectionDataset {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn image(&self, id: &str) -> Option<&ImageInfo> {
        self.images.iter().find(|im| im.id == id)
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == name)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LoadOptions {
    /// Clip boxes that overshoot the image border instead of rejecting them.
    pub clamp: bool,
}

fn normalize_box(
    bbox: [f64; 4],
    width: f64,
    height: f64,
    clamp: bool,
    context: &str,
) -> Result<[f64; 4], AnnotationError> {
    let [mut x0, mut y0, mut bw, mut bh] = bbox;
    if !(bw > 0.0 && bh > 0.0) {
        return Err(AnnotationError::NonPositiveBox {
            context: context.to_string(),
            w: bw,
            h: bh,
        });
    }
    if clamp {
        let x1 = (x0 + bw).min(width);
        let y1 = (y0 + bh).min(height);
        x0 = x0.max(0.0);
        y0 = y0.max(0.0);
        bw = x1 - x0;
        bh = y1 - y0;
        if !(bw > 0.0 && bh > 0.0) {
            return Err(AnnotationError::NonPositiveBox {
                context: context.to_string(),
                w: bw,
                h: bh,
            });
        }
    }
    let w = bw / width;
    let h = bh / height;
    let cx = (x0 + bw / 2.0) / width;
    let cy = (y0 + bh / 2.0) / height;
    let inside = cx - w / 2.0 >= -BOUNDS_EPS
        && cx + w / 2.0 <= 1.0 + BOUNDS_EPS
        && cy - h / 2.0 >= -BOUNDS_EPS
        && cy + h / 2.0 <= 1.0 + BOUNDS_EPS;
    if !inside {
        return Err(AnnotationError::OutOfBounds {
            context: context.to_string(),
        });
    }
    Ok([cx, cy, w, h])
}

fn check_image_dims(width: f64, height: f64, context: &str) -> Result<(), AnnotationError> {
    if width > 0.0 && height > 0.0 && width.is_finite() && height.is_finite() {
        Ok(())
    } else {
        Err(AnnotationError::NonPositiveImage {
            context: context.to_string(),
            width,
            height,
        })
    }
}

/// Accepts either a JSON string or number as an opaque identifier.
fn id_to_string(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

fn read_file(path: &Path) -> Result<String, AnnotationError> {
    fs::read_to_string(path).map_err(|source| AnnotationError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Deserialize)]
struct CocoFile {
    images: Option<Vec<CocoImage>>,
    annotations: Option<Vec<CocoAnnotation>>,
    categories: Option<Vec<CocoCategory>>,
}

#[derive(Deserialize)]
struct CocoImage {
    id: Option<Value>,
    width: Option<f64>,
    height: Option<f64>,
}

#[derive(Deserialize)]
struct CocoAnnotation {
    image_id: Option<Value>,
    category_id: Option<i64>,
    bbox: Option<[f64; 4]>,
}

#[derive(Deserialize)]
struct CocoCategory {
    id: Option<i64>,
    name: Option<String>,
}

/// Loads the subset of a COCO detection file this crate uses.
pub fn load_coco(
    path: impl AsRef<Path>,
    domain: Domain,
    opts: LoadOptions,
) -> Result<DetectionDataset, AnnotationError> {
    let path = path.as_ref();
    let text = read_file(path)?;
    parse_coco(&text, path, domain, opts)
}

pub fn parse_coco(
    text: &str,
    path: &Path,
    domain: Domain,
    opts: LoadOptions,
) -> Result<DetectionDataset, AnnotationError> {
    let missing = |field| AnnotationError::MissingField {
        path: path.to_path_buf(),
        line: None,
        field,
    };
    let file: CocoFile = serde_json::from_str(text).map_err(|source| AnnotationError::Json {
        path: path.to_path_buf(),
        line: None,
        source,
    })?;
    let coco_images = file.images.ok_or_else(|| missing("images"))?;
    let coco_anns = file.annotations.ok_or_else(|| missing("annotations"))?;
    let coco_cats = file.categories.ok_or_else(|| missing("categories"))?;

    let mut cats: Vec<(i64, String)> = Vec::with_capacity(coco_cats.len());
    for c in coco_cats {
        let id = c.id.ok_or_else(|| missing("categories[].id"))?;
        let name = c.name.ok_or_else(|| missing("categories[].name"))?;
        cats.push((id, name));
    }
    cats.sort_by_key(|(id, _)| *id);
    let mut seen = HashSet::new();
    for (_, name) in &cats {
        if !seen.insert(name.as_str()) {
            return Err(AnnotationError::DuplicateClass {
                context: path.display().to_string(),
                class: name.clone(),
            });
        }
    }
    if cats.is_empty() {
        return Err(AnnotationError::NoClasses);
    }
    let dense: HashMap<i64, usize> = cats.iter().enumerate().map(|(i, (id, _))| (*id, i)).collect();

    let mut images = Vec::with_capacity(coco_images.len());
    let mut dims: HashMap<String, (f64, f64)> = HashMap::new();
    for im in coco_images {
        let id = im
            .id
            .as_ref()
            .and_then(id_to_string)
            .ok_or_else(|| missing("images[].id"))?;
        let width = im.width.ok_or_else(|| missing("images[].width"))?;
        let height = im.height.ok_or_else(|| missing("images[].height"))?;
        let context = format!("{}: image {id}", path.display());
        check_image_dims(width, height, &context)?;
        if let Some(&prev) = dims.get(&id) {
            if prev != (width, height) {
                return Err(AnnotationError::ConflictingImage { context, image_id: id });
            }
            continue;
        }
        dims.insert(id.clone(), (width, height));
        images.push(ImageInfo { id, width, height });
    }

    let mut annotations = Vec::with_capacity(coco_anns.len());
    for (idx, ann) in coco_anns.into_iter().enumerate() {
        let context = format!("{}: annotation #{idx}", path.display());
        let image_id = ann
            .image_id
            .as_ref()
            .and_then(id_to_string)
            .ok_or_else(|| missing("annotations[].image_id"))?;
        let category_id = ann.category_id.ok_or_else(|| missing("annotations[].category_id"))?;
        let bbox = ann.bbox.ok_or_else(|| missing("annotations[].bbox"))?;
        let &(width, height) = dims.get(&image_id).ok_or_else(|| AnnotationError::UnknownImage {
            context: context.clone(),
            image_id: image_id.clone(),
        })?;
        let class_id = *dense
            .get(&category_id)
            .ok_or_else(|| AnnotationError::UnknownCategory {
                context: context.clone(),
                category_id,
            })?;
        let [cx, cy, w, h] = normalize_box(bbox, width, height, opts.clamp, &context)?;
        annotations.push(BoxAnnotation {
            image_id,
            class_id,
            cx,
            cy,
            w,
            h,
        });
    }

    Ok(DetectionDataset {
        domain,
        category_ids: Some(cats.iter().map(|(id, _)| *id).collect()),
        classes: cats.into_iter().map(|(_, n)| n).collect(),
        images,
        annotations,
    })
}

/// Header line of the JSONL format.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonlHeader {
    classes: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    category_ids: Option<Vec<i64>>,
}

/// Loads one-record-per-line annotations.
///
/// A line without `class` and `bbox` only registers an image, which lets
/// images with no boxes survive a write/read cycle.
pub fn load_jsonl(
    path: impl AsRef<Path>,
    domain: Domain,
    opts: LoadOptions,
) -> Result<DetectionDataset, AnnotationError> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|source| AnnotationError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut lines = Vec::new();
    for line in BufReader::new(file).lines() {
        lines.push(line.map_err(|source| AnnotationError::Io {
            path: path.to_path_buf(),
            source,
        })?);
    }
    parse_jsonl(lines.iter().map(String::as_str), path, domain, opts)
}

pub fn parse_jsonl<'a>(
    lines: impl IntoIterator<Item = &'a str>,
    path: &Path,
    domain: Domain,
    opts: LoadOptions,
) -> Result<DetectionDataset, AnnotationError> {
    let mut classes: Vec<String> = Vec::new();
    let mut class_lookup: HashMap<String, usize> = HashMap::new();
    let mut fixed_vocab = false;
    let mut category_ids = None;
    let mut images: Vec<ImageInfo> = Vec::new();
    let mut dims: HashMap<String, (f64, f64)> = HashMap::new();
    let mut annotations = Vec::new();
    let mut first_record = true;

    for (lineno, raw) in lines.into_iter().enumerate() {
        let line_no = lineno + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let json_err = |source| AnnotationError::Json {
            path: path.to_path_buf(),
            line: Some(line_no),
            source,
        };
        let value: Value = serde_json::from_str(raw).map_err(json_err)?;
        let obj = value.as_object();
        if first_record && obj.is_some_and(|o| o.contains_key("classes")) {
            first_record = false;
            let header: JsonlHeader = serde_json::from_value(value).map_err(json_err)?;
            for name in header.classes {
                if class_lookup.insert(name.clone(), classes.len()).is_some() {
                    return Err(AnnotationError::DuplicateClass {
                        context: format!("{}: line {line_no}", path.display()),
                        class: name,
                    });
                }
                classes.push(name);
            }
            category_ids = header.category_ids;
            fixed_vocab = true;
            continue;
        }
        first_record = false;
        let missing = |field| AnnotationError::MissingField {
            path: path.to_path_buf(),
            line: Some(line_no),
            field,
        };
        let obj = obj.ok_or_else(|| missing("image_id"))?;
        let image_id = obj
            .get("image_id")
            .and_then(id_to_string)
            .ok_or_else(|| missing("image_id"))?;
        let width = obj
            .get("width")
            .and_then(Value::as_f64)
            .ok_or_else(|| missing("width"))?;
        let height = obj
            .get("height")
            .and_then(Value::as_f64)
            .ok_or_else(|| missing("height"))?;
        let context = format!("{}: line {line_no}", path.display());
        check_image_dims(width, height, &context)?;
        match dims.get(&image_id) {
            Some(&prev) if prev != (width, height) => {
                return Err(AnnotationError::ConflictingImage { context, image_id });
            }
            Some(_) => {}
            None => {
                dims.insert(image_id.clone(), (width, height));
                images.push(ImageInfo {
                    id: image_id.clone(),
                    width,
                    height,
                });
            }
        }

        let class = obj.get("class");
        let bbox = obj.get("bbox");
        if class.is_none() && bbox.is_none() {
            continue;
        }
        let class = class.and_then(Value::as_str).ok_or_else(|| missing("class"))?;
        let bbox: [f64; 4] = bbox
            .cloned()
            .map(serde_json::from_value)
            .transpose()
            .map_err(json_err)?
            .ok_or_else(|| missing("bbox"))?;
        let class_id = match class_lookup.get(class) {
            Some(&c) => c,
            None if fixed_vocab => {
                return Err(AnnotationError::UnknownClass {
                    context,
                    class: class.to_string(),
                })
            }
            None => {
                class_lookup.insert(class.to_string(), classes.len());
                classes.push(class.to_string());
                classes.len() - 1
            }
        };
        let [cx, cy, w, h] = normalize_box(bbox, width, height, opts.clamp, &context)?;
        annotations.push(BoxAnnotation {
            image_id,
            class_id,
            cx,
            cy,
            w,
            h,
        });
    }

    if classes.is_empty() {
        return Err(AnnotationError::NoClasses);
    }
    Ok(DetectionDataset {
        domain,
        classes,
        category_ids,
        images,
        annotations,
    })
}

#[derive(Serialize)]
struct JsonlRecord<'a> {
    image_id: &'a str,
    width: f64,
    height: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    class: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    bbox: Option<[f64; 4]>,
}

/// Closest float to `start` (within 16 ulps) satisfying `ok`, else `start`.
fn nudge(start: f64, ok: impl Fn(f64) -> bool) -> f64 {
    let (mut up, mut down) = (start, start);
    for _ in 0..=16 {
        if ok(up) {
            return up;
        }
        if ok(down) {
            return down;
        }
        up = up.next_up();
        down = down.next_down();
    }
    start
}

/// Pixel bbox that loads back to exactly `ann` when such a value lies within
/// a few ulps of the plain conversion, so write-then-load is lossless.
fn lossless_bbox(ann: &BoxAnnotation, width: f64, height: f64) -> [f64; 4] {
    let [x, y, w, h] = ann.denormalize(width, height);
    let bw = nudge(w, |v| v / width == ann.w);
    let bh = nudge(h, |v| v / height == ann.h);
    let x0 = nudge(x, |v| (v + bw / 2.0) / width == ann.cx);
    let y0 = nudge(y, |v| (v + bh / 2.0) / height == ann.cy);
    [x0, y0, bw, bh]
}

/// Writes the dataset in the JSONL format read by [`load_jsonl`].
///
/// Every image is written first as an image-only line, then one line per box.
pub fn write_jsonl<W: Write>(dataset: &DetectionDataset, mut out: W) -> std::io::Result<()> {
    let header = JsonlHeader {
        classes: dataset.classes.clone(),
        category_ids: dataset.category_ids.clone(),
    };
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    let dims: HashMap<&str, &ImageInfo> = dataset.images.iter().map(|im| (im.id.as_str(), im)).collect();
    // Image-only lines first so image order survives a reload.
    let mut emitted: HashSet<&str> = HashSet::new();
    let write_record = |out: &mut W, rec: &JsonlRecord| -> std::io::Result<()> {
        serde_json::to_writer(&mut *out, rec)?;
        out.write_all(b"\n")
    };
    for im in &dataset.images {
        if emitted.insert(im.id.as_str()) {
            write_record(
                &mut out,
                &JsonlRecord {
                    image_id: &im.id,
                    width: im.width,
                    height: im.height,
                    class: None,
                    bbox: None,
                },
            )?;
        }
    }
    for ann in &dataset.annotations {
        let Some(im) = dims.get(ann.image_id.as_str()) else {
            continue;
        };
        write_record(
            &mut out,
            &JsonlRecord {
                image_id: &ann.image_id,
                width: im.width,
                height: im.height,
                class: dataset.classes.get(ann.class_id).map(String::as_str),
                bbox: Some(lossless_bbox(ann, im.width, im.height)),
            },
        )?;
    }
    Ok(())
}

/// Keeps `ceil(fraction * |images|)` images chosen uniformly without
/// replacement, plus all of their annotations. Image order is preserved.
pub fn subsample(dataset: &DetectionDataset, fraction: f64, seed: u64) -> Result<DetectionDataset, AnnotationError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(AnnotationError::FractionOutOfRange(fraction));
    }
    let n = dataset.images.len();
    if n == 0 {
        return Err(AnnotationError::EmptyDataset);
    }
    // 1e-9 slack so products like 0.1 * 30 = 3.0000000000000004 round to 3.
    let keep = ((fraction * n as f64 - 1e-9).ceil() as usize).clamp(1, n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = rand::seq::index::sample(&mut rng, n, keep).into_vec();
    chosen.sort_unstable();
    let images: Vec<ImageInfo> = chosen.iter().map(|&i| dataset.images[i].clone()).collect();
    let kept: HashSet<&str> = images.iter().map(|im| im.id.as_str()).collect();
    let annotations = dataset
        .annotations
        .iter()
        .filter(|a| kept.contains(a.image_id.as_str()))
        .cloned()
        .collect();
    Ok(DetectionDataset {
        domain: dataset.domain,
        classes: dataset.classes.clone(),
        category_ids: dataset.category_ids.clone(),
        images,
        annotations,
    })
}

/// Lists every violated dataset invariant. Never fails.
pub fn validate(dataset: &DetectionDataset) -> Vec<String> {
    let mut out = Vec::new();
    let k = dataset.classes.len();
    if k == 0 {
        out.push("dataset has no classes".to_string());
    }
    let mut names = HashSet::new();
    for c in &dataset.classes {
        if !names.insert(c.as_str()) {
            out.push(format!("duplicate class `{c}`"));
        }
    }
    let mut ids = HashSet::new();
    for im in &dataset.images {
        if !ids.insert(im.id.as_str()) {
            out.push(format!("duplicate image id `{}`", im.id));
        }
        if !(im.width > 0.0 && im.height > 0.0) {
            out.push(format!("image `{}` has non-positive size", im.id));
        }
    }
    for (i, a) in dataset.annotations.iter().enumerate() {
        let tag = format!("annotation #{i} (image `{}`)", a.image_id);
        if !ids.contains(a.image_id.as_str()) {
            out.push(format!("{tag}: unknown image"));
        }
        if a.class_id >= k {
            out.push(format!("{tag}: class_id {} >= K = {k}", a.class_id));
        }
        let finite = [a.cx, a.cy, a.w, a.h].iter().all(|v| v.is_finite());
        if !finite {
            out.push(format!("{tag}: non-finite coordinates"));
            continue;
        }
        if !(0.0..=1.0).contains(&a.cx) || !(0.0..=1.0).contains(&a.cy) {
            out.push(format!("{tag}: center ({}, {}) outside [0, 1]", a.cx, a.cy));
        }
        if !(a.w > 0.0 && a.w <= 1.0) || !(a.h > 0.0 && a.h <= 1.0) {
            out.push(format!("{tag}: size ({}, {}) outside (0, 1]", a.w, a.h));
        } else if a.cx - a.w / 2.0 < -BOUNDS_EPS
            || a.cx + a.w / 2.0 > 1.0 + BOUNDS_EPS
            || a.cy - a.h / 2.0 < -BOUNDS_EPS
            || a.cy + a.h / 2.0 > 1.0 + BOUNDS_EPS
        {
            out.push(format!("{tag}: box exceeds image bounds"));
        }
    }
    out
}

/// Loads `path` as COCO JSON or JSONL, chosen by `format` or else by
/// extension (`.jsonl` means JSONL).
pub fn load_auto(
    path: impl AsRef<Path>,
    format: Option<AnnotationFormat>,
    domain: Domain,
    opts: LoadOptions,
) -> Result<DetectionDataset, AnnotationError> {
    let path = path.as_ref();
    let format = format.unwrap_or_else(|| AnnotationFormat::from_path(path));
    match format {
        AnnotationFormat::Coco => load_coco(path, domain, opts),
        AnnotationFormat::Jsonl => load_jsonl(path, domain, opts),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnnotationFormat {
    Coco,
    Jsonl,
}

impl AnnotationFormat {
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") => AnnotationFormat::Jsonl,
            _ => AnnotationFormat::Coco,
        }
    }
}
