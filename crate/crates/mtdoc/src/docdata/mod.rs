//! Document data model: canonical layout boxes, coordinate rescaling,
//! patch extraction, and JSONL ingestion.

mod synth;

pub use synth::{generate_synthetic_corpus, DatasetRole, SynthSpec, ALL_ROLES};

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

/// Longer document side after rescaling, in canonical pixel units.
pub const CANVAS: i64 = 512;
/// Side length of the non-overlapping square image patches.
pub const PATCH: usize = 32;

/// Layout box in the 512-normalized coordinate space. Coordinates are either
/// all zero (the reserved null box) or all in [1, 512] with x1≤x2, y1≤y2.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SegmentBox {
    pub x1: i64,
    pub y1: i64,
    pub x2: i64,
    pub y2: i64,
}

impl fmt::Debug for SegmentBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{},{})", self.x1, self.y1, self.x2, self.y2)
    }
}

impl SegmentBox {
    pub const NULL: SegmentBox = SegmentBox {
        x1: 0,
        y1: 0,
        x2: 0,
        y2: 0,
    };

    pub fn new(x1: i64, y1: i64, x2: i64, y2: i64) -> Result<Self> {
        let b = SegmentBox { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    pub fn is_null(&self) -> bool {
        *self == Self::NULL
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_null() {
            return Ok(());
        }
        let coords = [self.x1, self.y1, self.x2, self.y2];
        if coords.iter().any(|&c| !(1..=CANVAS).contains(&c)) {
            return Err(Error::Validation(format!(
                "box {self:?} has coordinates outside [1,{CANVAS}]"
            )));
        }
        if self.x2 < self.x1 || self.y2 < self.y1 {
            return Err(Error::Validation(format!("box {self:?} is inverted")));
        }
        Ok(())
    }
}

/// One OCR text line: text, its box in original pixel space, and the
/// rescaled canonical box.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TextLine {
    pub text: String,
    pub box_orig: [i64; 4],
    pub rect: SegmentBox,
}

/// The five PubLayNet layout categories.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SegmentCategory {
    Text,
    Title,
    List,
    Figure,
    Table,
}

pub const SEGMENT_CATEGORIES: [SegmentCategory; 5] = [
    SegmentCategory::Text,
    SegmentCategory::Title,
    SegmentCategory::List,
    SegmentCategory::Figure,
    SegmentCategory::Table,
];

impl SegmentCategory {
    pub fn index(self) -> usize {
        SEGMENT_CATEGORIES.iter().position(|&c| c == self).unwrap()
    }

    pub fn parse(s: &str) -> Result<Self> {
        SEGMENT_CATEGORIES
            .iter()
            .copied()
            .find(|c| format!("{c:?}").to_lowercase() == s.to_lowercase())
            .ok_or_else(|| Error::Validation(format!("unknown segment category {s:?}")))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayoutSegment {
    pub rect: SegmentBox,
    pub category: SegmentCategory,
    pub reading_rank: usize,
    pub line_indices: Vec<usize>,
}

/// Task tags a record can support.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskTag {
    Mlm,
    Dc,
    Lsc,
    Roils,
    Re,
    Gtsls,
    Vqa,
}

pub const ALL_TASKS: [TaskTag; 7] = [
    TaskTag::Mlm,
    TaskTag::Dc,
    TaskTag::Lsc,
    TaskTag::Roils,
    TaskTag::Re,
    TaskTag::Gtsls,
    TaskTag::Vqa,
];

impl TaskTag {
    pub fn name(self) -> &'static str {
        match self {
            TaskTag::Mlm => "mlm",
            TaskTag::Dc => "dc",
            TaskTag::Lsc => "lsc",
            TaskTag::Roils => "roils",
            TaskTag::Re => "re",
            TaskTag::Gtsls => "gtsls",
            TaskTag::Vqa => "vqa",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        ALL_TASKS
            .iter()
            .copied()
            .find(|t| t.name() == s.to_lowercase())
            .ok_or_else(|| Error::Validation(format!("unknown task tag {s:?}")))
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TaskLabels {
    pub doc_class: Option<usize>,
    pub relations: BTreeMap<String, String>,
    pub qa: Vec<(String, Vec<String>)>,
    pub tasks: BTreeSet<TaskTag>,
}

/// One document: raster, OCR lines with boxes, layout segments, labels.
#[derive(Clone, Debug)]
pub struct DocumentRecord {
    pub id: String,
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    /// Row-major H×W×C values in [0,1].
    pub pixels: Vec<f64>,
    pub lines: Vec<TextLine>,
    pub segments: Vec<LayoutSegment>,
    pub labels: TaskLabels,
}

impl DocumentRecord {
    pub fn validate(&self) -> Result<()> {
        if self.pixels.len() != self.height * self.width * self.channels {
            return Err(Error::Validation(format!(
                "doc {}: pixel count {} != {}x{}x{}",
                self.id, self.pixels.len(), self.height, self.width, self.channels
            )));
        }
        for line in &self.lines {
            if line.text.is_empty() {
                return Err(Error::Validation(format!("doc {}: empty text line", self.id)));
            }
            line.rect.validate()?;
            if line.rect.is_null() {
                return Err(Error::Validation(format!(
                    "doc {}: null box on a real text line",
                    self.id
                )));
            }
        }
        if !self.segments.is_empty() {
            let mut ranks: Vec<usize> =
                self.segments.iter().map(|s| s.reading_rank).collect();
            ranks.sort_unstable();
            if ranks != (0..self.segments.len()).collect::<Vec<_>>() {
                return Err(Error::Validation(format!(
                    "doc {}: reading ranks are not a permutation",
                    self.id
                )));
            }
            for seg in &self.segments {
                seg.rect.validate()?;
                for &li in &seg.line_indices {
                    if li >= self.lines.len() {
                        return Err(Error::Validation(format!(
                            "doc {}: segment line index {li} out of range",
                            self.id
                        )));
                    }
                }
            }
        }
        if self.labels.tasks.is_empty() {
            return Err(Error::Validation(format!("doc {}: no task tags", self.id)));
        }
        Ok(())
    }
}

fn round_half_up(v: f64) -> i64 {
    (v + 0.5).floor() as i64
}

/// Rescales a box from original pixel space so the longer image side maps to
/// 512. Rounds half-up and clamps into [1, 512].
pub fn rescale_box(box_orig: [i64; 4], width: usize, height: usize) -> Result<SegmentBox> {
    let [x1, y1, x2, y2] = box_orig;
    if width == 0 || height == 0 {
        return Err(Error::Validation("empty image".into()));
    }
    if x1 < 0
        || y1 < 0
        || x2 > width as i64
        || y2 > height as i64
        || x2 < x1
        || y2 < y1
    {
        return Err(Error::Validation(format!(
            "box {box_orig:?} outside {width}x{height} image"
        )));
    }
    let scale = CANVAS as f64 / width.max(height) as f64;
    let clamp = |v: f64| round_half_up(v).clamp(1, CANVAS);
    let (mut cx1, mut cy1) = (clamp(x1 as f64 * scale), clamp(y1 as f64 * scale));
    let (cx2, cy2) = (clamp(x2 as f64 * scale), clamp(y2 as f64 * scale));
    // degenerate boxes collapse to a 1-unit extent rather than inverting
    cx1 = cx1.min(cx2);
    cy1 = cy1.min(cy2);
    SegmentBox::new(cx1, cy1, cx2, cy2)
}

/// Resized extents for an image: longer side becomes 512, aspect preserved.
pub fn resized_extents(width: usize, height: usize) -> (usize, usize) {
    let scale = CANVAS as f64 / width.max(height) as f64;
    let w = ((width as f64 * scale).round() as usize).max(1);
    let h = ((height as f64 * scale).round() as usize).max(1);
    (w, h)
}

fn bilinear_resize(
    pixels: &[f64],
    width: usize,
    height: usize,
    channels: usize,
    new_w: usize,
    new_h: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; new_w * new_h * channels];
    let sx = width as f64 / new_w as f64;
    let sy = height as f64 / new_h as f64;
    for y in 0..new_h {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (height - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(height - 1);
        let wy = fy - y0 as f64;
        for x in 0..new_w {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (width - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(width - 1);
            let wx = fx - x0 as f64;
            for c in 0..channels {
                let p = |yy: usize, xx: usize| pixels[(yy * width + xx) * channels + c];
                let top = p(y0, x0) * (1.0 - wx) + p(y0, x1) * wx;
                let bot = p(y1, x0) * (1.0 - wx) + p(y1, x1) * wx;
                out[(y * new_w + x) * channels + c] = top * (1.0 - wy) + bot * wy;
            }
        }
    }
    out
}

/// Resizes so the longer side is 512 (bilinear, aspect preserving), zero-pads
/// right/bottom to multiples of 32, and splits row-major into 32×32 patches.
/// Returns flattened patch vectors (row-major, channel-last) and each patch's
/// rectangle in canonical coordinates.
pub fn resize_and_patchify(
    pixels: &[f64],
    width: usize,
    height: usize,
    channels: usize,
) -> Result<(Vec<Vec<f64>>, Vec<SegmentBox>)> {
    if width == 0 || height == 0 || channels == 0 || pixels.is_empty() {
        return Err(Error::Validation("empty image".into()));
    }
    if pixels.len() != width * height * channels {
        return Err(Error::Validation(format!(
            "pixel count {} != {width}x{height}x{channels}",
            pixels.len()
        )));
    }
    let (new_w, new_h) = resized_extents(width, height);
    let resized = if (new_w, new_h) == (width, height) {
        pixels.to_vec()
    } else {
        bilinear_resize(pixels, width, height, channels, new_w, new_h)
    };
    let grid_w = new_w.div_ceil(PATCH);
    let grid_h = new_h.div_ceil(PATCH);
    let pad_w = grid_w * PATCH;
    let mut padded = vec![0.0; pad_w * grid_h * PATCH * channels];
    for y in 0..new_h {
        let src = &resized[y * new_w * channels..(y + 1) * new_w * channels];
        padded[y * pad_w * channels..y * pad_w * channels + new_w * channels]
            .copy_from_slice(src);
    }
    let mut patches = Vec::with_capacity(grid_w * grid_h);
    let mut boxes = Vec::with_capacity(grid_w * grid_h);
    for gy in 0..grid_h {
        for gx in 0..grid_w {
            let mut v = Vec::with_capacity(PATCH * PATCH * channels);
            for py in 0..PATCH {
                let y = gy * PATCH + py;
                let off = (y * pad_w + gx * PATCH) * channels;
                v.extend_from_slice(&padded[off..off + PATCH * channels]);
            }
            patches.push(v);
            boxes.push(SegmentBox::new(
                (gx * PATCH + 1) as i64,
                (gy * PATCH + 1) as i64,
                ((gx + 1) * PATCH) as i64,
                ((gy + 1) * PATCH) as i64,
            )?);
        }
    }
    Ok((patches, boxes))
}

// ---------------------------------------------------------------------------
// JSONL ingestion
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct JsonLine {
    text: String,
    #[serde(rename = "box")]
    rect: [i64; 4],
}

#[derive(Serialize, Deserialize)]
struct JsonSegment {
    #[serde(rename = "box")]
    rect: [i64; 4],
    category: String,
    reading_rank: usize,
    line_indices: Vec<usize>,
}

#[derive(Serialize, Deserialize, Default)]
struct JsonLabels {
    #[serde(skip_serializing_if = "Option::is_none")]
    doc_class: Option<usize>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    relations: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    qa: Vec<JsonQa>,
    tasks: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct JsonQa {
    q: String,
    a: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct JsonDoc {
    id: String,
    width: usize,
    height: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    channels: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pixels_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pixels_fill: Option<f64>,
    #[serde(default)]
    lines: Vec<JsonLine>,
    #[serde(default)]
    segments: Vec<JsonSegment>,
    labels: JsonLabels,
}

fn read_pixel_sidecar(path: &Path, expected: usize) -> Result<Vec<f64>> {
    let bytes = std::fs::read(path)?;
    if bytes.len() != expected * 8 {
        return Err(Error::Validation(format!(
            "pixel sidecar {}: {} bytes, expected {}",
            path.display(),
            bytes.len(),
            expected * 8
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Loads one DocumentRecord per JSONL line, validating and rescaling every
/// box into canonical coordinates. Errors name the offending line number.
pub fn load_jsonl(path: &Path) -> Result<Vec<DocumentRecord>> {
    let base = path.parent().unwrap_or(Path::new("."));
    let content = std::fs::read_to_string(path)?;
    let mut records = Vec::new();
    for (lineno, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let doc: JsonDoc = serde_json::from_str(line).map_err(|e| {
            Error::Validation(format!("{}:{}: {e}", path.display(), lineno + 1))
        })?;
        let rec = json_to_record(doc, base)
            .map_err(|e| Error::Validation(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        records.push(rec);
    }
    Ok(records)
}

fn json_to_record(doc: JsonDoc, base: &Path) -> Result<DocumentRecord> {
    let channels = doc.channels.unwrap_or(1);
    let n = doc.width * doc.height * channels;
    let pixels = match (&doc.pixels_path, doc.pixels_fill) {
        (Some(p), _) => read_pixel_sidecar(&base.join(p), n)?,
        (None, Some(f)) => vec![f; n],
        (None, None) => vec![0.0; n],
    };
    let lines = doc
        .lines
        .into_iter()
        .map(|l| {
            let rect = rescale_box(l.rect, doc.width, doc.height)
                .map_err(|e| Error::Validation(format!("field lines.box: {e}")))?;
            Ok(TextLine {
                text: l.text,
                box_orig: l.rect,
                rect,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let segments = doc
        .segments
        .into_iter()
        .map(|s| {
            Ok(LayoutSegment {
                rect: rescale_box(s.rect, doc.width, doc.height)
                    .map_err(|e| Error::Validation(format!("field segments.box: {e}")))?,
                category: SegmentCategory::parse(&s.category)?,
                reading_rank: s.reading_rank,
                line_indices: s.line_indices,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let labels = TaskLabels {
        doc_class: doc.labels.doc_class,
        relations: doc.labels.relations,
        qa: doc.labels.qa.into_iter().map(|q| (q.q, q.a)).collect(),
        tasks: doc
            .labels
            .tasks
            .iter()
            .map(|t| TaskTag::parse(t))
            .collect::<Result<_>>()?,
    };
    let rec = DocumentRecord {
        id: doc.id,
        width: doc.width,
        height: doc.height,
        channels,
        pixels,
        lines,
        segments,
        labels,
    };
    rec.validate()?;
    Ok(rec)
}

/// Writes records as JSONL with raw f64 pixel sidecars next to the file.
pub fn write_jsonl(path: &Path, records: &[DocumentRecord]) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new("."));
    std::fs::create_dir_all(base)?;
    let mut out = String::new();
    for rec in records {
        let sidecar = format!("{}.pix", rec.id);
        let bytes: Vec<u8> = rec.pixels.iter().flat_map(|v| v.to_le_bytes()).collect();
        std::fs::write(base.join(&sidecar), bytes)?;
        let doc = JsonDoc {
            id: rec.id.clone(),
            width: rec.width,
            height: rec.height,
            channels: Some(rec.channels),
            pixels_path: Some(sidecar),
            pixels_fill: None,
            lines: rec
                .lines
                .iter()
                .map(|l| JsonLine {
                    text: l.text.clone(),
                    rect: l.box_orig,
                })
                .collect(),
            segments: rec
                .segments
                .iter()
                .map(|s| JsonSegment {
                    rect: [s.rect.x1, s.rect.y1, s.rect.x2, s.rect.y2],
                    category: format!("{:?}", s.category).to_lowercase(),
                    reading_rank: s.reading_rank,
                    line_indices: s.line_indices.clone(),
                })
                .collect(),
            labels: JsonLabels {
                doc_class: rec.labels.doc_class,
                relations: rec.labels.relations.clone(),
                qa: rec
                    .labels
                    .qa
                    .iter()
                    .map(|(q, a)| JsonQa {
                        q: q.clone(),
                        a: a.clone(),
                    })
                    .collect(),
                tasks: rec.labels.tasks.iter().map(|t| t.name().to_string()).collect(),
            },
        };
        out.push_str(&serde_json::to_string(&doc)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rescale_examples() {
        // scale 0.5, round, clamp
        assert_eq!(
            rescale_box([2, 2, 1024, 512], 1024, 512).unwrap(),
            SegmentBox::new(1, 1, 512, 256).unwrap()
        );
        // scale 1 identity
        assert_eq!(
            rescale_box([10, 20, 100, 200], 512, 384).unwrap(),
            SegmentBox::new(10, 20, 100, 200).unwrap()
        );
        // degenerate point stays a valid box
        let b = rescale_box([1, 1, 1, 1], 800, 600).unwrap();
        assert!(b.x1 == b.x2 && b.validate().is_ok());
    }

    #[test]
    fn rescale_rejects_out_of_image() {
        assert!(rescale_box([0, 0, 900, 10], 800, 600).is_err());
        assert!(rescale_box([5, 5, 4, 10], 800, 600).is_err());
    }

    #[test]
    fn rescale_idempotent_on_canonical() {
        let b = rescale_box([10, 20, 100, 200], 512, 384).unwrap();
        let again = rescale_box([b.x1, b.y1, b.x2, b.y2], 512, 384).unwrap();
        assert_eq!(b, again);
    }

    #[test]
    fn patchify_grid_arithmetic() {
        // 512×384, C=1 → 16×12 = 192 patches of 1024 floats
        let pixels = vec![0.5; 512 * 384];
        let (patches, boxes) = resize_and_patchify(&pixels, 512, 384, 1).unwrap();
        assert_eq!(patches.len(), 192);
        assert_eq!(boxes.len(), 192);
        assert!(patches.iter().all(|p| p.len() == 1024));
        // constant image → constant patches
        assert!(patches
            .iter()
            .all(|p| p.iter().all(|&v| (v - 0.5).abs() < 1e-12)));
    }

    #[test]
    fn patchify_after_resize() {
        // 500×500 → resized 512×512 → 256 patches
        let pixels = vec![0.25; 500 * 500];
        let (patches, _) = resize_and_patchify(&pixels, 500, 500, 1).unwrap();
        assert_eq!(patches.len(), 256);
    }

    #[test]
    fn patchify_rejects_empty() {
        assert!(resize_and_patchify(&[], 0, 0, 1).is_err());
    }

    #[test]
    fn patch_boxes_cover_without_overlap() {
        let pixels = vec![0.1; 300 * 200];
        let (_, boxes) = resize_and_patchify(&pixels, 300, 200, 1).unwrap();
        let (w, h) = resized_extents(300, 200);
        let padded_area = (w.div_ceil(PATCH) * PATCH * h.div_ceil(PATCH) * PATCH) as i64;
        let total: i64 = boxes
            .iter()
            .map(|b| (b.x2 - b.x1 + 1) * (b.y2 - b.y1 + 1))
            .sum();
        assert_eq!(total, padded_area);
        for b in &boxes {
            assert!(b.validate().is_ok() && !b.is_null());
        }
    }

    #[test]
    fn jsonl_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("docs.jsonl");

        // empty file → empty sequence
        std::fs::write(&path, "").unwrap();
        assert!(load_jsonl(&path).unwrap().is_empty());

        // one valid record
        let line = r#"{"id":"d0","width":1024,"height":512,"pixels_fill":0.5,"lines":[{"text":"total 12","box":[2,2,1024,512]}],"labels":{"tasks":["mlm"]}}"#;
        std::fs::write(&path, format!("{line}\n")).unwrap();
        let recs = load_jsonl(&path).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].lines[0].rect, SegmentBox::new(1, 1, 512, 256).unwrap());

        // x2 < x1 → validation error naming the line
        let bad = r#"{"id":"d1","width":100,"height":100,"lines":[{"text":"x","box":[50,10,40,20]}],"labels":{"tasks":["mlm"]}}"#;
        std::fs::write(&path, format!("{line}\n{bad}\n")).unwrap();
        let err = load_jsonl(&path).unwrap_err().to_string();
        assert!(err.contains(":2"), "{err}");
    }
}
