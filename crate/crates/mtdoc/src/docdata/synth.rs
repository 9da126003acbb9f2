//! Deterministic synthetic corpus generator. Seven dataset roles stand in
//! for the real pre-training collection: one classification role, four
//! relation-extraction roles, one VQA role, and one layout role.
//!
//! Reading-order ground truth for layout docs follows a column-major
//! convention: the left column is read fully before the right column,
//! top to bottom within a column.
//!
//! Every document carries a pixel fingerprint (three intensity blocks in the
//! top-left encoding a global document counter) so the visual modality
//! always identifies the document. Classification docs additionally get a
//! watermark block whose intensity encodes the class: 0.1 + 0.05·k.

use super::{
    rescale_box, DocumentRecord, LayoutSegment, TaskLabels, TaskTag, TextLine, SEGMENT_CATEGORIES,
};
use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetRole {
    Classification,
    RelationsA,
    RelationsB,
    RelationsC,
    RelationsD,
    Vqa,
    Layout,
}

pub const ALL_ROLES: [DatasetRole; 7] = [
    DatasetRole::Classification,
    DatasetRole::RelationsA,
    DatasetRole::RelationsB,
    DatasetRole::RelationsC,
    DatasetRole::RelationsD,
    DatasetRole::Vqa,
    DatasetRole::Layout,
];

impl DatasetRole {
    pub fn name(self) -> &'static str {
        match self {
            DatasetRole::Classification => "classification",
            DatasetRole::RelationsA => "relations_a",
            DatasetRole::RelationsB => "relations_b",
            DatasetRole::RelationsC => "relations_c",
            DatasetRole::RelationsD => "relations_d",
            DatasetRole::Vqa => "vqa",
            DatasetRole::Layout => "layout",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        ALL_ROLES
            .iter()
            .copied()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown dataset role {s:?}")))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub docs_per_role: usize,
    pub classes: usize,
    pub vocab_words: usize,
    pub image_width: usize,
    pub image_height: usize,
    pub channels: usize,
    pub relations_per_doc: usize,
    pub qa_per_doc: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            docs_per_role: 8,
            classes: 4,
            vocab_words: 24,
            image_width: 512,
            image_height: 64,
            channels: 1,
            relations_per_doc: 2,
            qa_per_doc: 2,
        }
    }
}

/// Watermark region (x0, y0, x1, y1), end-exclusive, in original pixel
/// coordinates of the default 512×64 canvas; scaled proportionally for other
/// sizes. Classification docs fill it with intensity 0.1 + 0.05·class.
pub fn watermark_region(width: usize, height: usize) -> (usize, usize, usize, usize) {
    (width - width / 8, height / 2, width, height)
}

pub fn watermark_intensity(class: usize) -> f64 {
    0.1 + 0.05 * class as f64
}

struct Canvas {
    w: usize,
    h: usize,
    c: usize,
    pixels: Vec<f64>,
}

impl Canvas {
    fn new(w: usize, h: usize, c: usize) -> Self {
        Canvas {
            w,
            h,
            c,
            pixels: vec![0.0; w * h * c],
        }
    }

    fn fill(&mut self, x0: usize, y0: usize, x1: usize, y1: usize, v: f64) {
        for y in y0..y1.min(self.h) {
            for x in x0..x1.min(self.w) {
                for ch in 0..self.c {
                    self.pixels[(y * self.w + x) * self.c + ch] = v;
                }
            }
        }
    }
}

/// Text-line slot grid: three rows × three columns on the canvas.
fn slot_box(spec: &SynthSpec, row: usize, col: usize) -> [i64; 4] {
    let w = spec.image_width as f64;
    let h = spec.image_height as f64;
    let x1 = (w * (0.20 + 0.21 * col as f64)) as i64;
    let x2 = x1 + (w * 0.16) as i64;
    let y1 = (h * (0.06 + 0.31 * row as f64)) as i64;
    let y2 = y1 + (h * 0.22) as i64;
    [x1.max(1), y1.max(1), x2, y2]
}

struct DocBuilder<'s> {
    spec: &'s SynthSpec,
    canvas: Canvas,
    lines: Vec<TextLine>,
    next_slot: usize,
    echoes: Vec<String>,
}

impl<'s> DocBuilder<'s> {
    fn new(spec: &'s SynthSpec, fingerprint: usize) -> Self {
        let mut canvas = Canvas::new(spec.image_width, spec.image_height, spec.channels);
        // three fingerprint blocks: base-8 digits of the doc counter
        let bw = spec.image_width / 16;
        let bh = spec.image_height / 2;
        for (i, shift) in [1usize, 8, 64].iter().enumerate() {
            let digit = (fingerprint / shift) % 8;
            canvas.fill(i * bw, 0, (i + 1) * bw, bh, 0.1 + 0.1 * digit as f64);
        }
        DocBuilder {
            spec,
            canvas,
            lines: Vec::new(),
            next_slot: 0,
            echoes: Vec::new(),
        }
    }

    fn add_line_at(&mut self, text: &str, slot: (usize, usize)) -> Result<usize> {
        let rect_orig = slot_box(self.spec, slot.0, slot.1);
        let rect = rescale_box(rect_orig, self.spec.image_width, self.spec.image_height)?;
        self.lines.push(TextLine {
            text: text.to_string(),
            box_orig: rect_orig,
            rect,
        });
        Ok(self.lines.len() - 1)
    }

    fn add_line(&mut self, text: &str) -> Result<usize> {
        let slot = (self.next_slot / 3, self.next_slot % 3);
        self.next_slot += 1;
        self.add_line_at(text, slot)
    }

    /// Adds a line and queues a second copy for `flush_echoes`. The echo
    /// lands far enough away in token order that one masking span can never
    /// cover both copies, keeping every masked token inferable from context.
    fn add_echoed_line(&mut self, text: &str) -> Result<usize> {
        self.echoes.push(text.to_string());
        self.add_line(text)
    }

    fn flush_echoes(&mut self) -> Result<()> {
        for text in std::mem::take(&mut self.echoes) {
            self.add_line(&text)?;
        }
        Ok(())
    }

    fn finish(self, id: String, labels: TaskLabels, segments: Vec<LayoutSegment>) -> Result<DocumentRecord> {
        let rec = DocumentRecord {
            id,
            width: self.spec.image_width,
            height: self.spec.image_height,
            channels: self.spec.channels,
            pixels: self.canvas.pixels,
            lines: self.lines,
            segments,
            labels,
        };
        rec.validate()?;
        Ok(rec)
    }
}

fn filler(rng: &mut ChaCha8Rng, spec: &SynthSpec) -> String {
    format!("w{:02}", rng.gen_range(0..spec.vocab_words))
}

/// Doc-identity line: the base-8 digits of the fingerprint as words, in the
/// same order as the pixel fingerprint blocks, so the text identity is
/// recoverable from the visual modality through a mapping shared by all docs.
fn fingerprint_text(fingerprint: usize) -> String {
    format!(
        "f{} f{} f{}",
        fingerprint % 8,
        (fingerprint / 8) % 8,
        (fingerprint / 64) % 8
    )
}

fn distinct(rng: &mut ChaCha8Rng, n: usize, bound: usize) -> Vec<usize> {
    let mut picked = Vec::new();
    while picked.len() < n.min(bound) {
        let v = rng.gen_range(0..bound);
        if !picked.contains(&v) {
            picked.push(v);
        }
    }
    picked
}

fn tags(list: &[TaskTag]) -> std::collections::BTreeSet<TaskTag> {
    list.iter().copied().collect()
}

/// Generates the per-role document stores, deterministically in `seed`.
pub fn generate_synthetic_corpus(
    seed: u64,
    spec: &SynthSpec,
) -> Result<BTreeMap<DatasetRole, Vec<DocumentRecord>>> {
    if spec.docs_per_role > 64 {
        return Err(Error::Config(
            "docs_per_role must be <= 64 so document fingerprints stay unique".into(),
        ));
    }
    let mut out = BTreeMap::new();
    for (role_idx, &role) in ALL_ROLES.iter().enumerate() {
        let mut rng =
            ChaCha8Rng::seed_from_u64(seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(role_idx as u64 + 1)));
        let mut docs = Vec::with_capacity(spec.docs_per_role);
        for i in 0..spec.docs_per_role {
            // three base-8 digits: (i % 8, i / 8, role index) — unique per
            // document as long as docs_per_role <= 64
            let fingerprint = role_idx * 64 + i;
            let id = format!("{}_{i:03}", role.name());
            let doc = match role {
                DatasetRole::Classification => gen_classification(spec, &mut rng, fingerprint, id, i),
                DatasetRole::RelationsA
                | DatasetRole::RelationsB
                | DatasetRole::RelationsC
                | DatasetRole::RelationsD => gen_relations(spec, &mut rng, fingerprint, id),
                DatasetRole::Vqa => gen_vqa(spec, &mut rng, fingerprint, id),
                DatasetRole::Layout => gen_layout(spec, &mut rng, fingerprint, id),
            }?;
            docs.push(doc);
        }
        out.insert(role, docs);
    }
    Ok(out)
}

fn gen_classification(
    spec: &SynthSpec,
    rng: &mut ChaCha8Rng,
    fingerprint: usize,
    id: String,
    index: usize,
) -> Result<DocumentRecord> {
    // round-robin over classes so every class appears in small corpora
    let class = index % spec.classes;
    let mut b = DocBuilder::new(spec, fingerprint);
    let (x0, y0, x1, y1) = watermark_region(spec.image_width, spec.image_height);
    b.canvas.fill(x0, y0, x1, y1, watermark_intensity(class));
    b.add_echoed_line(&fingerprint_text(fingerprint))?;
    b.add_echoed_line(&format!("class{class}"))?;
    b.add_echoed_line(&format!("{} {}", filler(rng, spec), filler(rng, spec)))?;
    b.flush_echoes()?;
    b.finish(
        id,
        TaskLabels {
            doc_class: Some(class),
            tasks: tags(&[TaskTag::Mlm, TaskTag::Dc]),
            ..Default::default()
        },
        vec![],
    )
}

fn gen_relations(
    spec: &SynthSpec,
    rng: &mut ChaCha8Rng,
    fingerprint: usize,
    id: String,
) -> Result<DocumentRecord> {
    let mut b = DocBuilder::new(spec, fingerprint);
    b.add_echoed_line(&fingerprint_text(fingerprint))?;
    let mut relations = BTreeMap::new();
    for key_id in distinct(rng, spec.relations_per_doc, 8) {
        let key = format!("key{key_id}");
        let value = format!("val{:02}", rng.gen_range(0..16));
        b.add_echoed_line(&format!("{key} {value}"))?;
        relations.insert(key, value);
    }
    b.flush_echoes()?;
    b.finish(
        id,
        TaskLabels {
            relations,
            tasks: tags(&[TaskTag::Mlm, TaskTag::Re]),
            ..Default::default()
        },
        vec![],
    )
}

fn gen_vqa(
    spec: &SynthSpec,
    rng: &mut ChaCha8Rng,
    fingerprint: usize,
    id: String,
) -> Result<DocumentRecord> {
    let mut b = DocBuilder::new(spec, fingerprint);
    b.add_echoed_line(&fingerprint_text(fingerprint))?;
    let mut qa = Vec::new();
    for field in distinct(rng, spec.qa_per_doc, 8) {
        let answer = format!("ans{:02}", rng.gen_range(0..16));
        b.add_echoed_line(&format!("field{field} {answer}"))?;
        qa.push((format!("what field{field}"), vec![answer]));
    }
    b.flush_echoes()?;
    b.finish(
        id,
        TaskLabels {
            qa,
            tasks: tags(&[TaskTag::Mlm, TaskTag::Vqa]),
            ..Default::default()
        },
        vec![],
    )
}

fn gen_layout(
    spec: &SynthSpec,
    rng: &mut ChaCha8Rng,
    fingerprint: usize,
    id: String,
) -> Result<DocumentRecord> {
    let mut b = DocBuilder::new(spec, fingerprint);
    b.add_line_at(&fingerprint_text(fingerprint), (2, 2))?;
    // 2 columns × 2 rows of segments; reading order is column-major
    let mut segments = Vec::new();
    let mut rank = 0;
    for col in 0..2 {
        for row in 0..2 {
            let text = format!("{} {}", filler(rng, spec), filler(rng, spec));
            let line_idx = b.add_line_at(&text, (row, col))?;
            let rect_orig = slot_box(spec, row, col);
            segments.push(LayoutSegment {
                rect: rescale_box(rect_orig, spec.image_width, spec.image_height)?,
                category: SEGMENT_CATEGORIES[rng.gen_range(0..SEGMENT_CATEGORIES.len())],
                reading_rank: rank,
                line_indices: vec![line_idx],
            });
            rank += 1;
        }
    }
    // echo of the identity line, placed after the segments so one masking
    // span can never cover both copies; segment texts are anchored by the
    // layout tasks themselves
    b.add_line_at(&fingerprint_text(fingerprint), (2, 0))?;
    b.finish(
        id,
        TaskLabels {
            tasks: tags(&[TaskTag::Mlm, TaskTag::Lsc, TaskTag::Roils, TaskTag::Gtsls]),
            ..Default::default()
        },
        segments,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_is_bit_identical() {
        let spec = SynthSpec::default();
        let a = generate_synthetic_corpus(7, &spec).unwrap();
        let b = generate_synthetic_corpus(7, &spec).unwrap();
        for role in ALL_ROLES {
            let (da, db) = (&a[&role], &b[&role]);
            assert_eq!(da.len(), db.len());
            for (x, y) in da.iter().zip(db) {
                assert_eq!(x.id, y.id);
                assert_eq!(x.pixels, y.pixels);
                let tx: Vec<_> = x.lines.iter().map(|l| &l.text).collect();
                let ty: Vec<_> = y.lines.iter().map(|l| &l.text).collect();
                assert_eq!(tx, ty);
            }
        }
    }

    #[test]
    fn watermark_encodes_class() {
        let spec = SynthSpec::default();
        let corpus = generate_synthetic_corpus(3, &spec).unwrap();
        let (x0, y0, x1, y1) = watermark_region(spec.image_width, spec.image_height);
        for doc in &corpus[&DatasetRole::Classification] {
            let k = doc.labels.doc_class.unwrap();
            let mut sum = 0.0;
            let mut n = 0;
            for y in y0..y1 {
                for x in x0..x1 {
                    sum += doc.pixels[y * spec.image_width + x];
                    n += 1;
                }
            }
            assert!((sum / n as f64 - watermark_intensity(k)).abs() < 1e-12);
        }
    }

    #[test]
    fn relation_labels_match_value_lines() {
        let spec = SynthSpec::default();
        let corpus = generate_synthetic_corpus(11, &spec).unwrap();
        for doc in &corpus[&DatasetRole::RelationsA] {
            for (key, value) in &doc.labels.relations {
                let line = format!("{key} {value}");
                // each pair appears twice: the content line and its echo
                let hits = doc.lines.iter().filter(|l| l.text == line).count();
                assert_eq!(hits, 2);
            }
        }
    }

    #[test]
    fn layout_ranks_are_column_major() {
        let spec = SynthSpec::default();
        let corpus = generate_synthetic_corpus(5, &spec).unwrap();
        for doc in &corpus[&DatasetRole::Layout] {
            let mut by_rank: Vec<_> = doc.segments.iter().collect();
            by_rank.sort_by_key(|s| s.reading_rank);
            for pair in by_rank.windows(2) {
                let (a, b) = (pair[0], pair[1]);
                // next segment is either below in the same column or in a new
                // column to the right
                assert!(b.rect.x1 > a.rect.x1 || b.rect.y1 > a.rect.y1);
            }
        }
    }

    #[test]
    fn all_boxes_canonical_no_null() {
        let spec = SynthSpec::default();
        let corpus = generate_synthetic_corpus(1, &spec).unwrap();
        for docs in corpus.values() {
            for doc in docs {
                doc.validate().unwrap();
                for line in &doc.lines {
                    assert!(!line.rect.is_null());
                }
            }
        }
    }
}
