//! The six task heads on top of the shared backbone.
//!
//! Encoder heads (En1 document classification, En2 segment categorization,
//! En3 reading order) run one extra transformer block over query tokens
//! appended to the backbone output. Generation heads (De1 relation
//! extraction, De2 segment text, De3 VQA) are small decoders with causal
//! self-attention and cross-attention into the backbone output, sharing the
//! word embedding as their output projection.

use crate::backbone::{encoder_block_with_queries, mha};
use crate::docdata::SegmentBox;
use crate::embeddings::{cls_query, embed_tokens, sos_query};
use crate::error::{Error, Result};
use crate::model::ModelState;
use crate::tensor::{Tape, Var};
use crate::tokenizer::{TokenInstance, EOS, MAX_SEQID};

/// Number of layout segment categories scored by En2.
pub const SEGMENT_CLASSES: usize = 5;

/// Runs an encoder head: CLS query tokens (one per box) are prepended to
/// the backbone output, the head's block runs over the joint sequence, and
/// the transformed query rows come back.
fn en_head_hidden(
    tape: &Tape,
    state: &ModelState,
    head: &str,
    memory: &Var,
    memory_mask: Option<&[f64]>,
    query_boxes: &[SegmentBox],
) -> Result<Var> {
    if query_boxes.is_empty() {
        return Err(Error::Contract(format!("{head}: no query boxes")));
    }
    let toks: Vec<TokenInstance> = query_boxes.iter().map(|&b| cls_query(b)).collect();
    let queries = embed_tokens(tape, state, &toks)?;
    encoder_block_with_queries(tape, state, head, &queries, memory, memory_mask)
}

fn en_out(tape: &Tape, state: &ModelState, head: &str, hidden: &Var) -> Result<Var> {
    let w = state.lease(tape, &format!("{head}.out.weight"))?;
    let b = state.lease(tape, &format!("{head}.out.bias"))?;
    tape.add_row(&tape.matmul(hidden, &w)?, &b)
}

/// En1: document class logits `[1×classes]` from a null-box CLS query.
pub fn dc_logits(
    tape: &Tape,
    state: &ModelState,
    memory: &Var,
    memory_mask: Option<&[f64]>,
) -> Result<Var> {
    let h = en_head_hidden(tape, state, "head.en1", memory, memory_mask, &[SegmentBox::NULL])?;
    en_out(tape, state, "head.en1", &h)
}

/// En2: per-segment category logits `[n×5]`; queries carry the segment
/// boxes, which must be real (non-null).
pub fn lsc_logits(
    tape: &Tape,
    state: &ModelState,
    memory: &Var,
    memory_mask: Option<&[f64]>,
    seg_boxes: &[SegmentBox],
) -> Result<Var> {
    if seg_boxes.iter().any(|b| b.is_null()) {
        return Err(Error::Contract(
            "lsc: segment query boxes must be non-null".into(),
        ));
    }
    let h = en_head_hidden(tape, state, "head.en2", memory, memory_mask, seg_boxes)?;
    en_out(tape, state, "head.en2", &h)
}

/// En3: successor score matrix for reading order. With n segments the
/// result is `[(n+1)×(n+1)]`: row 0 is the START query, row i+1 queries
/// segment i's successor; column j scores segment j, column n scores STOP.
/// The learned START vector doubles as the STOP key.
pub fn roils_scores(
    tape: &Tape,
    state: &ModelState,
    memory: &Var,
    memory_mask: Option<&[f64]>,
    seg_boxes: &[SegmentBox],
) -> Result<Var> {
    if seg_boxes.iter().any(|b| b.is_null()) {
        return Err(Error::Contract(
            "roils: segment query boxes must be non-null".into(),
        ));
    }
    let d = state.config.dim;
    let h = en_head_hidden(tape, state, "head.en3", memory, memory_mask, seg_boxes)?;
    let start = tape.reshape(&state.lease(tape, "head.en3.start")?, vec![1, d])?;
    let wq = state.lease(tape, "head.en3.score.wq")?;
    let wk = state.lease(tape, "head.en3.score.wk")?;
    let rows = tape.matmul(&tape.concat_rows(&[start.clone(), h.clone()])?, &wq)?;
    let cols = tape.matmul(&tape.concat_rows(&[h, start])?, &wk)?;
    Ok(tape.scale(&tape.matmul_nt(&rows, &cols)?, 1.0 / (d as f64).sqrt()))
}

/// Mean cross-entropy over the successor rows. `order[r]` is the segment
/// index at reading rank r.
pub fn roils_loss(tape: &Tape, scores: &Var, order: &[usize]) -> Result<Var> {
    let n = order.len();
    if scores.rows() != n + 1 {
        return Err(Error::dim(
            "roils_loss",
            format!("scores rows {} vs {} segments", scores.rows(), n),
        ));
    }
    // Row 0 (START) predicts the first segment; the row of each segment
    // predicts its immediate successor; the last segment predicts STOP.
    let mut targets = vec![0usize; n + 1];
    targets[0] = order[0];
    for r in 0..n {
        targets[order[r] + 1] = if r + 1 < n { order[r + 1] } else { n };
    }
    tape.cross_entropy(scores, &targets)
}

/// Greedy reading-order decode: walk successor argmaxes from START over the
/// not-yet-visited columns (STOP only becomes available once every segment
/// has been visited), lowest index winning ties. Always returns a
/// permutation of 0..n.
pub fn roils_decode(scores: &[f64], n: usize) -> Result<Vec<usize>> {
    if scores.len() != (n + 1) * (n + 1) {
        return Err(Error::dim(
            "roils_decode",
            format!("{} scores for {n} segments", scores.len()),
        ));
    }
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut row = 0usize; // START
    for _ in 0..n {
        let mut best: Option<usize> = None;
        for c in 0..n {
            if visited[c] {
                continue;
            }
            let s = scores[row * (n + 1) + c];
            if best.map_or(true, |b| s > scores[row * (n + 1) + b]) {
                best = Some(c);
            }
        }
        let c = best.expect("unvisited column exists");
        visited[c] = true;
        order.push(c);
        row = c + 1;
    }
    Ok(order)
}

/// Appends target tokens to the init queries for teacher forcing. Generated
/// tokens carry the null box and a 1-based generation-step sequence id.
pub fn decoder_inputs(init: &[TokenInstance], target_ids: &[usize]) -> Vec<TokenInstance> {
    let mut toks = init.to_vec();
    toks.extend(target_ids.iter().enumerate().map(|(i, &id)| TokenInstance {
        id,
        rect: SegmentBox::NULL,
        seqid: (i + 1).min(MAX_SEQID),
    }));
    toks
}

/// Query tokens for De1/De3: the prompt's text tokens with null boxes.
pub fn text_query(ids: &[usize]) -> Vec<TokenInstance> {
    ids.iter()
        .enumerate()
        .map(|(i, &id)| TokenInstance {
            id,
            rect: SegmentBox::NULL,
            seqid: (i + 1).min(MAX_SEQID),
        })
        .collect()
}

/// Query token for De2: SOS carrying the segment's box.
pub fn segment_query(rect: SegmentBox) -> Result<Vec<TokenInstance>> {
    if rect.is_null() {
        return Err(Error::Contract("gtsls: segment box must be non-null".into()));
    }
    Ok(vec![sos_query(rect)])
}

/// Vocabulary logits tied to the word embedding table.
pub fn vocab_logits(tape: &Tape, state: &ModelState, hidden: &Var) -> Result<Var> {
    let word = state.lease(tape, "embed.word")?;
    tape.matmul_nt(hidden, &word)
}

/// Teacher-forced generation loss for one decoder head. Positions from the
/// last init query onward predict the target ids followed by EOS. Returns
/// the summed cross-entropy and the number of predicted tokens.
pub fn teacher_forced_loss(
    tape: &Tape,
    state: &ModelState,
    head: &str,
    memory: &Var,
    memory_mask: Option<&[f64]>,
    init: &[TokenInstance],
    target_ids: &[usize],
) -> Result<(Var, usize)> {
    if init.is_empty() {
        return Err(Error::Contract(format!("{head}: empty query")));
    }
    let inputs = decoder_inputs(init, target_ids);
    let x = embed_tokens(tape, state, &inputs)?;
    let h = crate::backbone::decode(tape, state, head, &x, memory, memory_mask)?;
    let start = init.len() - 1;
    let n_pred = target_ids.len() + 1;
    let idx: Vec<usize> = (start..start + n_pred).collect();
    let rows = tape.gather_rows(&h, &idx)?;
    let logits = vocab_logits(tape, state, &rows)?;
    let mut targets: Vec<usize> = target_ids.to_vec();
    targets.push(EOS);
    Ok((tape.cross_entropy_sum(&logits, &targets)?, n_pred))
}

/// Greedy decoding: extend the query stream one token at a time, taking the
/// argmax over the tied vocabulary logits (lowest id wins ties), until EOS
/// or `max_len` generated tokens. Returns generated ids without EOS.
pub fn generate(
    tape: &Tape,
    state: &ModelState,
    head: &str,
    memory: &Var,
    memory_mask: Option<&[f64]>,
    init: &[TokenInstance],
    max_len: usize,
) -> Result<Vec<usize>> {
    if init.is_empty() {
        return Err(Error::Contract(format!("{head}: empty query")));
    }
    let mut generated: Vec<usize> = Vec::new();
    for _ in 0..max_len {
        let inputs = decoder_inputs(init, &generated);
        let x = embed_tokens(tape, state, &inputs)?;
        let h = crate::backbone::decode(tape, state, head, &x, memory, memory_mask)?;
        let last = tape.gather_rows(&h, &[inputs.len() - 1])?;
        let logits = tape.value(&vocab_logits(tape, state, &last)?);
        let mut best = 0usize;
        for (i, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = i;
            }
        }
        if best == EOS {
            break;
        }
        generated.push(best);
    }
    Ok(generated)
}

/// MLM logits at selected backbone positions, tied to the word table.
pub fn mlm_logits(
    tape: &Tape,
    state: &ModelState,
    hidden: &Var,
    positions: &[usize],
) -> Result<Var> {
    let rows = tape.gather_rows(hidden, positions)?;
    vocab_logits(tape, state, &rows)
}

/// Cross-attention probe used by the relation head discussion in tests:
/// re-runs one decoder cross-attention and returns its row distributions.
pub fn cross_attention_probs(
    tape: &Tape,
    state: &ModelState,
    head: &str,
    x: &Var,
    memory: &Var,
) -> Result<Vec<Var>> {
    let (_, probs) = mha(tape, state, &format!("{head}.layer0.cross"), x, memory, None)?;
    Ok(probs)
}
