//! Input construction: text latent vectors, visual latent vectors, and the
//! box + token-sequence position encodings added onto both.

use crate::docdata::SegmentBox;
use crate::error::{Error, Result};
use crate::model::ModelState;
use crate::tensor::{Tape, Var};
use crate::tokenizer::{TokenInstance, CLS, PAD, SOS};

/// What occupies one position of an assembled input sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PosKind {
    /// Text token; `source` indexes the document's token list.
    Text { source: usize },
    /// Image patch; `source` indexes the patch list.
    Patch { source: usize },
    Pad,
}

pub struct Assembly {
    /// [n×d] input vectors for the backbone.
    pub x: Var,
    pub kinds: Vec<PosKind>,
    /// 1.0 at real positions, 0.0 at padding.
    pub mask: Vec<f64>,
    pub n_text: usize,
    pub truncated: bool,
}

/// Box position vector: the four coordinate embeddings concatenated. The
/// null box (0,0,0,0) selects the reserved index-0 rows.
pub fn encode_boxes(tape: &Tape, state: &ModelState, boxes: &[SegmentBox]) -> Result<Var> {
    for b in boxes {
        b.validate()
            .map_err(|e| Error::Index(format!("encode_box: {e}")))?;
    }
    let coords: [Vec<usize>; 4] = [
        boxes.iter().map(|b| b.x1 as usize).collect(),
        boxes.iter().map(|b| b.y1 as usize).collect(),
        boxes.iter().map(|b| b.x2 as usize).collect(),
        boxes.iter().map(|b| b.y2 as usize).collect(),
    ];
    let mut parts = Vec::with_capacity(4);
    for (table, idx) in ["x1", "y1", "x2", "y2"].iter().zip(&coords) {
        let t = state.lease(tape, &format!("embed.coord.{table}"))?;
        parts.push(tape.gather_rows(&t, idx)?);
    }
    tape.concat_cols(&parts)
}

pub fn encode_box(tape: &Tape, state: &ModelState, rect: SegmentBox) -> Result<Var> {
    encode_boxes(tape, state, &[rect])
}

/// Text token vectors: word embedding + box position + sequence position.
pub fn embed_tokens(tape: &Tape, state: &ModelState, toks: &[TokenInstance]) -> Result<Var> {
    let word = state.lease(tape, "embed.word")?;
    let seq = state.lease(tape, "embed.seq")?;
    let ids: Vec<usize> = toks.iter().map(|t| t.id).collect();
    let seqids: Vec<usize> = toks.iter().map(|t| t.seqid).collect();
    let boxes: Vec<SegmentBox> = toks.iter().map(|t| t.rect).collect();
    let w = tape.gather_rows(&word, &ids)?;
    let b = encode_boxes(tape, state, &boxes)?;
    let s = tape.gather_rows(&seq, &seqids)?;
    tape.add(&tape.add(&w, &b)?, &s)
}

/// Visual latent vectors: linear patch projection + box position of the
/// patch rectangle + the reserved sequence position 0.
pub fn embed_patches(
    tape: &Tape,
    state: &ModelState,
    patch_vecs: &[Vec<f64>],
    patch_boxes: &[SegmentBox],
) -> Result<Var> {
    let d_in = state.config.patch_input();
    if patch_vecs.len() != patch_boxes.len() {
        return Err(Error::dim(
            "embed_patches",
            format!("{} vectors vs {} boxes", patch_vecs.len(), patch_boxes.len()),
        ));
    }
    for v in patch_vecs {
        if v.len() != d_in {
            return Err(Error::dim(
                "embed_patches",
                format!("patch length {} vs {d_in}", v.len()),
            ));
        }
    }
    let n = patch_vecs.len();
    let flat: Vec<f64> = patch_vecs.iter().flatten().copied().collect();
    let pixels = tape.constant(flat, vec![n, d_in])?;
    let w = state.lease(tape, "embed.patch.weight")?;
    let bias = state.lease(tape, "embed.patch.bias")?;
    let proj = tape.add_row(&tape.matmul(&pixels, &w)?, &bias)?;
    let b = encode_boxes(tape, state, patch_boxes)?;
    let seq = state.lease(tape, "embed.seq")?;
    let s = tape.gather_rows(&seq, &vec![0; n])?;
    tape.add(&tape.add(&proj, &b)?, &s)
}

fn pad_token() -> TokenInstance {
    TokenInstance {
        id: PAD,
        rect: SegmentBox::NULL,
        seqid: 0,
    }
}

/// The CLS query token with a given box and sequence id 0.
pub fn cls_query(rect: SegmentBox) -> TokenInstance {
    TokenInstance {
        id: CLS,
        rect,
        seqid: 0,
    }
}

/// The SOS query token with a given box and sequence id 0.
pub fn sos_query(rect: SegmentBox) -> TokenInstance {
    TokenInstance {
        id: SOS,
        rect,
        seqid: 0,
    }
}

/// Builds the backbone input: all text tokens in document order, then all
/// patches, then optional PAD positions up to `pad_to`. Text overflowing
/// `max_text_len` is truncated and flagged in the bookkeeping.
pub fn assemble_input(
    tape: &Tape,
    state: &ModelState,
    tokens: &[TokenInstance],
    patch_vecs: &[Vec<f64>],
    patch_boxes: &[SegmentBox],
    pad_to: Option<usize>,
) -> Result<Assembly> {
    let max_text = state.config.max_text_len;
    let truncated = tokens.len() > max_text;
    let tokens = &tokens[..tokens.len().min(max_text)];

    let mut parts = Vec::new();
    let mut kinds = Vec::new();
    if !tokens.is_empty() {
        parts.push(embed_tokens(tape, state, tokens)?);
        kinds.extend((0..tokens.len()).map(|i| PosKind::Text { source: i }));
    }
    if !patch_vecs.is_empty() {
        parts.push(embed_patches(tape, state, patch_vecs, patch_boxes)?);
        kinds.extend((0..patch_vecs.len()).map(|i| PosKind::Patch { source: i }));
    }
    let n_real = kinds.len();
    let n_total = pad_to.unwrap_or(n_real).max(n_real);
    if n_total > n_real {
        let pads: Vec<TokenInstance> = (0..n_total - n_real).map(|_| pad_token()).collect();
        parts.push(embed_tokens(tape, state, &pads)?);
        kinds.extend(std::iter::repeat(PosKind::Pad).take(n_total - n_real));
    }
    if parts.is_empty() {
        return Err(Error::Contract("assemble_input: empty sequence".into()));
    }
    let mut x = tape.concat_rows(&parts)?;
    if state.config.global_pos {
        let table = state.lease(tape, "embed.global")?;
        let idx: Vec<usize> = (0..n_total).map(|i| i.min(1023)).collect();
        let g = tape.gather_rows(&table, &idx)?;
        x = tape.add(&x, &g)?;
    }
    let mask: Vec<f64> = kinds
        .iter()
        .map(|k| if matches!(k, PosKind::Pad) { 0.0 } else { 1.0 })
        .collect();
    Ok(Assembly {
        x,
        kinds,
        mask,
        n_text: tokens.len(),
        truncated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, ModelState};

    fn state() -> ModelState {
        ModelState::init(
            ModelConfig {
                dim: 8,
                layers: 1,
                heads: 2,
                ffn: 16,
                vocab_size: 12,
                ..Default::default()
            },
            1,
        )
        .unwrap()
    }

    fn tok(id: usize, rect: SegmentBox, seqid: usize) -> TokenInstance {
        TokenInstance { id, rect, seqid }
    }

    #[test]
    fn null_box_uses_index_zero_rows() {
        let s = state();
        let t = Tape::new();
        let v = encode_box(&t, &s, SegmentBox::NULL).unwrap();
        let mut expect = Vec::new();
        for c in ["x1", "y1", "x2", "y2"] {
            let p = s.params.get(&format!("embed.coord.{c}")).unwrap();
            expect.extend_from_slice(&p.values[0..2]);
        }
        assert_eq!(t.value(&v), expect);
    }

    #[test]
    fn identical_boxes_identical_vectors() {
        let s = state();
        let t = Tape::new();
        let b = SegmentBox::new(3, 4, 5, 6).unwrap();
        let v1 = t.value(&encode_box(&t, &s, b).unwrap());
        let v2 = t.value(&encode_box(&t, &s, b).unwrap());
        assert_eq!(v1, v2);
    }

    #[test]
    fn coordinate_changes_touch_only_their_quarter() {
        let s = state();
        let t = Tape::new();
        let a = SegmentBox::new(3, 4, 5, 6).unwrap();
        let b = SegmentBox::new(9, 4, 9, 6).unwrap(); // x1 and x2 differ
        let va = t.value(&encode_box(&t, &s, a).unwrap());
        let vb = t.value(&encode_box(&t, &s, b).unwrap());
        let q = 2; // d/4
        assert_ne!(&va[0..q], &vb[0..q]); // x1 slice differs
        assert_eq!(&va[q..2 * q], &vb[q..2 * q]); // y1 slice identical
        assert_ne!(&va[2 * q..3 * q], &vb[2 * q..3 * q]); // x2 differs
        assert_eq!(&va[3 * q..], &vb[3 * q..]); // y2 identical
    }

    #[test]
    fn token_embedding_is_additive() {
        let s = state();
        let t = Tape::new();
        let b = SegmentBox::new(1, 1, 2, 2).unwrap();
        let v1 = t.value(&embed_tokens(&t, &s, &[tok(7, b, 1)]).unwrap());
        let v2 = t.value(&embed_tokens(&t, &s, &[tok(7, b, 2)]).unwrap());
        let seq = s.params.get("embed.seq").unwrap();
        let d = 8;
        for c in 0..d {
            let diff = v2[c] - v1[c];
            let expect = seq.values[2 * d + c] - seq.values[d + c];
            assert!((diff - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_patch_reduces_to_positions() {
        let s = state();
        let t = Tape::new();
        let b = SegmentBox::new(1, 1, 32, 32).unwrap();
        let v = embed_patches(&t, &s, &[vec![0.0; 1024]], &[b]).unwrap();
        let pos = encode_box(&t, &s, b).unwrap();
        let seq = s.params.get("embed.seq").unwrap();
        let vv = t.value(&v);
        let pv = t.value(&pos);
        for c in 0..8 {
            // patch bias is zero-initialized
            assert!((vv[c] - (pv[c] + seq.values[c])).abs() < 1e-12);
        }
    }

    #[test]
    fn patch_projection_is_linear() {
        let s = state();
        let t = Tape::new();
        let b = SegmentBox::new(1, 1, 32, 32).unwrap();
        let p: Vec<f64> = (0..1024).map(|i| (i as f64) / 1024.0).collect();
        let p2: Vec<f64> = p.iter().map(|v| v * 2.0).collect();
        let e0 = t.value(&embed_patches(&t, &s, &[vec![0.0; 1024]], &[b]).unwrap());
        let e1 = t.value(&embed_patches(&t, &s, &[p], &[b]).unwrap());
        let e2 = t.value(&embed_patches(&t, &s, &[p2], &[b]).unwrap());
        for c in 0..8 {
            assert!(((e2[c] - e0[c]) - 2.0 * (e1[c] - e0[c])).abs() < 1e-9);
        }
    }

    #[test]
    fn assembly_order_and_mask() {
        let s = state();
        let t = Tape::new();
        let b = SegmentBox::new(1, 1, 16, 16).unwrap();
        let toks = vec![tok(6, b, 1), tok(7, b, 2)];
        let patches = vec![vec![0.5; 1024]; 3];
        let boxes = vec![SegmentBox::new(1, 1, 32, 32).unwrap(); 3];
        let a = assemble_input(&t, &s, &toks, &patches, &boxes, Some(7)).unwrap();
        assert_eq!(a.x.shape, vec![7, 8]);
        assert_eq!(a.n_text, 2);
        assert_eq!(a.mask, vec![1.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0]);
        assert_eq!(a.kinds[0], PosKind::Text { source: 0 });
        assert_eq!(a.kinds[2], PosKind::Patch { source: 0 });
        assert_eq!(a.kinds[6], PosKind::Pad);
        assert!(!a.truncated);

        // determinism
        let t2 = Tape::new();
        let a2 = assemble_input(&t2, &s, &toks, &patches, &boxes, Some(7)).unwrap();
        assert_eq!(t.value(&a.x), t2.value(&a2.x));
    }

    #[test]
    fn assembly_truncates_overflow() {
        let mut s = state();
        s.config.max_text_len = 1;
        let t = Tape::new();
        let b = SegmentBox::new(1, 1, 16, 16).unwrap();
        let toks = vec![tok(6, b, 1), tok(7, b, 2)];
        let a = assemble_input(&t, &s, &toks, &[], &[], None).unwrap();
        assert!(a.truncated);
        assert_eq!(a.n_text, 1);
    }
}
