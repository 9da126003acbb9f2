//! Post-LN transformer encoder shared by the backbone and the task heads,
//! plus the multi-head attention kernel the decoder layers reuse.

use crate::error::{Error, Result};
use crate::model::ModelState;
use crate::tensor::{Tape, Var};

pub const MASK_BIAS: f64 = -1e9;

/// Additive score bias hiding padded key positions from every query.
pub fn key_padding_bias(n_queries: usize, key_mask: &[f64]) -> Vec<f64> {
    let nk = key_mask.len();
    let mut bias = vec![0.0; n_queries * nk];
    for r in 0..n_queries {
        for (c, &m) in key_mask.iter().enumerate() {
            if m == 0.0 {
                bias[r * nk + c] = MASK_BIAS;
            }
        }
    }
    bias
}

/// Additive score bias for causal self-attention: position r sees keys 0..=r.
pub fn causal_bias(n: usize) -> Vec<f64> {
    let mut bias = vec![0.0; n * n];
    for r in 0..n {
        for c in r + 1..n {
            bias[r * n + c] = MASK_BIAS;
        }
    }
    bias
}

fn merge_bias(a: Option<&[f64]>, b: Option<&[f64]>, len: usize) -> Result<Option<Vec<f64>>> {
    let mut out: Option<Vec<f64>> = None;
    for src in [a, b].into_iter().flatten() {
        if src.len() != len {
            return Err(Error::dim(
                "attention",
                format!("bias length {} vs scores {len}", src.len()),
            ));
        }
        match &mut out {
            None => out = Some(src.to_vec()),
            Some(acc) => acc.iter_mut().zip(src).for_each(|(x, y)| *x += y),
        }
    }
    Ok(out)
}

/// Multi-head attention. `prefix` names the wq/wk/wv/wo weights; `bias` is
/// added to every head's raw scores before softmax. Returns the output and
/// the per-head attention row distributions (for inspection and tests).
pub fn mha(
    tape: &Tape,
    state: &ModelState,
    prefix: &str,
    queries: &Var,
    keys_values: &Var,
    bias: Option<&[f64]>,
) -> Result<(Var, Vec<Var>)> {
    let d = state.config.dim;
    let heads = state.config.heads;
    let dh = d / heads;
    let nq = queries.rows();
    let nk = keys_values.rows();

    let wq = state.lease(tape, &format!("{prefix}.wq"))?;
    let wk = state.lease(tape, &format!("{prefix}.wk"))?;
    let wv = state.lease(tape, &format!("{prefix}.wv"))?;
    let wo = state.lease(tape, &format!("{prefix}.wo"))?;

    let q = tape.matmul(queries, &wq)?;
    let k = tape.matmul(keys_values, &wk)?;
    let v = tape.matmul(keys_values, &wv)?;

    let bias_var = match merge_bias(bias, None, nq * nk)? {
        Some(b) => Some(tape.constant(b, vec![nq, nk])?),
        None => None,
    };

    let mut head_outs = Vec::with_capacity(heads);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(&q, h * dh, dh)?;
        let kh = tape.slice_cols(&k, h * dh, dh)?;
        let vh = tape.slice_cols(&v, h * dh, dh)?;
        let mut scores = tape.scale(&tape.matmul_nt(&qh, &kh)?, 1.0 / (dh as f64).sqrt());
        if let Some(b) = &bias_var {
            scores = tape.add(&scores, b)?;
        }
        let attn = tape.softmax(&scores, 1)?;
        head_outs.push(tape.matmul(&attn, &vh)?);
        probs.push(attn);
    }
    let merged = tape.concat_cols(&head_outs)?;
    Ok((tape.matmul(&merged, &wo)?, probs))
}

/// Position-wise feed-forward: gelu(x·w1 + b1)·w2 + b2.
pub fn ffn(tape: &Tape, state: &ModelState, prefix: &str, x: &Var) -> Result<Var> {
    let w1 = state.lease(tape, &format!("{prefix}.w1"))?;
    let b1 = state.lease(tape, &format!("{prefix}.b1"))?;
    let w2 = state.lease(tape, &format!("{prefix}.w2"))?;
    let b2 = state.lease(tape, &format!("{prefix}.b2"))?;
    let h = tape.gelu(&tape.add_row(&tape.matmul(x, &w1)?, &b1)?);
    tape.add_row(&tape.matmul(&h, &w2)?, &b2)
}

fn layer_norm(tape: &Tape, state: &ModelState, prefix: &str, x: &Var) -> Result<Var> {
    let gain = state.lease(tape, &format!("{prefix}.gain"))?;
    let bias = state.lease(tape, &format!("{prefix}.bias"))?;
    tape.layer_norm(x, &gain, &bias)
}

/// Post-LN encoder block: x ← LN1(x + SelfAttn(x)); x ← LN2(x + FFN(x)).
pub fn encoder_block(
    tape: &Tape,
    state: &ModelState,
    prefix: &str,
    x: &Var,
    key_mask: Option<&[f64]>,
) -> Result<Var> {
    let bias = key_mask.map(|m| key_padding_bias(x.rows(), m));
    let (attn, _) = mha(
        tape,
        state,
        &format!("{prefix}.attn"),
        x,
        x,
        bias.as_deref(),
    )?;
    let h = layer_norm(tape, state, &format!("{prefix}.ln1"), &tape.add(x, &attn)?)?;
    let f = ffn(tape, state, &format!("{prefix}.ffn"), &h)?;
    layer_norm(tape, state, &format!("{prefix}.ln2"), &tape.add(&h, &f)?)
}

/// Runs an encoder block over `[queries; memory]` and returns the
/// transformed query rows. Used by the encoder-style task heads.
pub fn encoder_block_with_queries(
    tape: &Tape,
    state: &ModelState,
    prefix: &str,
    queries: &Var,
    memory: &Var,
    memory_mask: Option<&[f64]>,
) -> Result<Var> {
    let nq = queries.rows();
    let joint = tape.concat_rows(&[queries.clone(), memory.clone()])?;
    let mask: Option<Vec<f64>> = memory_mask.map(|m| {
        let mut full = vec![1.0; nq];
        full.extend_from_slice(m);
        full
    });
    let h = encoder_block(tape, state, prefix, &joint, mask.as_deref())?;
    tape.gather_rows(&h, &(0..nq).collect::<Vec<_>>())
}

/// Runs the full backbone stack over an assembled input.
pub fn encode(tape: &Tape, state: &ModelState, x: &Var, key_mask: Option<&[f64]>) -> Result<Var> {
    let mut h = x.clone();
    for i in 0..state.config.layers {
        h = encoder_block(tape, state, &format!("backbone.layer{i}"), &h, key_mask)?;
    }
    Ok(h)
}

/// Post-LN decoder layer: causal self-attention over the query stream,
/// cross-attention into the encoder memory, then the FFN.
pub fn decoder_layer(
    tape: &Tape,
    state: &ModelState,
    prefix: &str,
    x: &Var,
    memory: &Var,
    memory_mask: Option<&[f64]>,
) -> Result<Var> {
    let n = x.rows();
    let (self_attn, _) = mha(
        tape,
        state,
        &format!("{prefix}.self"),
        x,
        x,
        Some(&causal_bias(n)),
    )?;
    let h = layer_norm(
        tape,
        state,
        &format!("{prefix}.ln1"),
        &tape.add(x, &self_attn)?,
    )?;
    let bias = memory_mask.map(|m| key_padding_bias(n, m));
    let (cross, _) = mha(
        tape,
        state,
        &format!("{prefix}.cross"),
        &h,
        memory,
        bias.as_deref(),
    )?;
    let h = layer_norm(tape, state, &format!("{prefix}.ln2"), &tape.add(&h, &cross)?)?;
    let f = ffn(tape, state, &format!("{prefix}.ffn"), &h)?;
    layer_norm(tape, state, &format!("{prefix}.ln3"), &tape.add(&h, &f)?)
}

/// Runs one generation head's full decoder stack.
pub fn decode(
    tape: &Tape,
    state: &ModelState,
    head: &str,
    x: &Var,
    memory: &Var,
    memory_mask: Option<&[f64]>,
) -> Result<Var> {
    let mut h = x.clone();
    for l in 0..crate::model::decoder_depth(head) {
        h = decoder_layer(
            tape,
            state,
            &format!("{head}.layer{l}"),
            &h,
            memory,
            memory_mask,
        )?;
    }
    Ok(h)
}
