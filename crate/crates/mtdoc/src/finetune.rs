//! Per-task fine-tuning schedules and head evaluation.

use crate::docdata::{DatasetRole, SegmentBox, TaskTag};
use crate::error::{Error, Result};
use crate::heads;
use crate::metrics;
use crate::model::ModelState;
use crate::pretrain::{encode_doc, single_task_loss, step_rng, PreparedDoc};
use crate::tensor::{AdamState, Tape};
use crate::tokenizer::Vocab;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;

/// Generation caps per decoder head.
pub const MAX_LEN_RE: usize = 32;
pub const MAX_LEN_GTSLS: usize = 128;
pub const MAX_LEN_VQA: usize = 32;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub task: TaskTag,
    pub role: DatasetRole,
    /// Exactly one of `steps` / `epochs` must be set.
    pub steps: Option<u64>,
    pub epochs: Option<u64>,
    pub batch_size: usize,
    pub lr: f64,
    /// Fraction of total steps spent in linear warmup; the remainder decays
    /// linearly to zero. Zero means a constant rate.
    pub warmup_ratio: f64,
    pub seed: u64,
}

impl FinetuneConfig {
    /// Reference schedules: classification 50k steps at 2e-5; relation
    /// extraction 100 epochs at 3e-5; VQA 500k steps at 2e-5 with 0.05
    /// warmup. The remaining heads get desk-scale defaults.
    pub fn defaults_for(task: TaskTag) -> Result<Self> {
        let base = FinetuneConfig {
            task,
            role: DatasetRole::Layout,
            steps: Some(1_000),
            epochs: None,
            batch_size: 32,
            lr: 1e-4,
            warmup_ratio: 0.0,
            seed: 0,
        };
        Ok(match task {
            TaskTag::Mlm => {
                return Err(Error::Config("fine-tuning target must be a head task".into()))
            }
            TaskTag::Dc => FinetuneConfig {
                role: DatasetRole::Classification,
                steps: Some(50_000),
                lr: 2e-5,
                ..base
            },
            TaskTag::Re => FinetuneConfig {
                role: DatasetRole::RelationsA,
                steps: None,
                epochs: Some(100),
                lr: 3e-5,
                ..base
            },
            TaskTag::Vqa => FinetuneConfig {
                role: DatasetRole::Vqa,
                steps: Some(500_000),
                lr: 2e-5,
                warmup_ratio: 0.05,
                ..base
            },
            TaskTag::Lsc | TaskTag::Roils | TaskTag::Gtsls => base,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps.is_some() == self.epochs.is_some() {
            return Err(Error::Config(
                "exactly one of steps/epochs must be set".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(Error::Config(format!(
                "warmup_ratio {} outside [0,1)",
                self.warmup_ratio
            )));
        }
        Ok(())
    }

    /// Optimizer steps implied by the config for a store of `docs` documents.
    pub fn total_steps(&self, docs: usize) -> u64 {
        match (self.steps, self.epochs) {
            (Some(s), _) => s,
            (None, Some(e)) => e * (docs as u64).div_ceil(self.batch_size as u64).max(1),
            _ => 0,
        }
    }
}

/// Learning rate at `step` of `total`: linear warmup to `lr`, then linear
/// decay to zero; constant when `warmup_ratio` is zero.
pub fn lr_at(step: u64, total: u64, lr: f64, warmup_ratio: f64) -> f64 {
    if warmup_ratio == 0.0 || total == 0 {
        return lr;
    }
    let warmup = ((total as f64) * warmup_ratio).round().max(1.0) as u64;
    if step < warmup {
        lr * step as f64 / warmup as f64
    } else if step >= total {
        0.0
    } else {
        lr * (total - step) as f64 / (total - warmup).max(1) as f64
    }
}

#[derive(Clone, Debug)]
pub struct FinetuneReport {
    pub steps_run: u64,
    pub last_loss: f64,
}

/// Trains only the target task's loss (MLM off) on one dataset role.
pub fn finetune(
    state: &mut ModelState,
    adam: &mut AdamState,
    store: &[PreparedDoc],
    cfg: &FinetuneConfig,
    trace: &mut dyn Write,
) -> Result<FinetuneReport> {
    cfg.validate()?;
    if store.is_empty() {
        return Err(Error::Config("empty fine-tuning store".into()));
    }
    for prep in store {
        if !prep.tasks.contains(&cfg.task) {
            return Err(Error::Config(format!(
                "document {} in role {} lacks task {}",
                prep.id,
                cfg.role.name(),
                cfg.task.name()
            )));
        }
    }
    let total = cfg.total_steps(store.len());
    writeln!(trace, "step,loss,lr")?;
    let mut last_loss = f64::INFINITY;
    for step in 0..total {
        let mut rng = step_rng(cfg.seed, step);
        let batch: Vec<&PreparedDoc> = (0..cfg.batch_size)
            .map(|_| &store[rng.gen_range(0..store.len())])
            .collect();
        state.params.zero_grad();
        let scale = 1.0 / batch.len() as f64;
        let state_ref: &ModelState = state;
        let results: Vec<Result<(f64, BTreeMap<String, Vec<f64>>)>> = batch
            .par_iter()
            .map(|prep| {
                let tape = Tape::new();
                let loss = single_task_loss(&tape, state_ref, prep, cfg.task)?;
                let scaled = tape.scale(&loss, scale);
                tape.check_finite(&scaled, "finetune loss")?;
                tape.backward(&scaled)?;
                Ok((tape.scalar_value(&scaled), tape.take_param_grads()))
            })
            .collect();
        let mut loss_val = 0.0;
        for res in results {
            let (v, grads) = res?;
            loss_val += v;
            state.params.accumulate(&grads)?;
        }
        state.params.check_grads_finite()?;
        let lr = lr_at(step, total, cfg.lr, cfg.warmup_ratio);
        adam.step(&mut state.params, Some(lr))?;
        writeln!(trace, "{step},{loss_val},{lr}")?;
        last_loss = loss_val;
    }
    Ok(FinetuneReport {
        steps_run: total,
        last_loss,
    })
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Document classification accuracy over a store.
pub fn eval_dc(state: &ModelState, store: &[PreparedDoc]) -> Result<f64> {
    let mut preds = Vec::new();
    let mut golds = Vec::new();
    for prep in store {
        let gold = prep
            .doc_class
            .ok_or_else(|| Error::Validation(format!("{}: no class label", prep.id)))?;
        let tape = Tape::new();
        let memory = encode_doc(&tape, state, prep)?;
        let logits = tape.value(&heads::dc_logits(&tape, state, &memory, None)?);
        preds.push(argmax(&logits));
        golds.push(gold);
    }
    metrics::accuracy(&preds, &golds)
}

/// Segment category accuracy over all segments of a store.
pub fn eval_lsc(state: &ModelState, store: &[PreparedDoc]) -> Result<f64> {
    let mut preds = Vec::new();
    let mut golds = Vec::new();
    for prep in store {
        let boxes: Vec<SegmentBox> = prep.segments.iter().map(|s| s.rect).collect();
        if boxes.is_empty() {
            continue;
        }
        let tape = Tape::new();
        let memory = encode_doc(&tape, state, prep)?;
        let logits = tape.value(&heads::lsc_logits(&tape, state, &memory, None, &boxes)?);
        for (i, seg) in prep.segments.iter().enumerate() {
            let row = &logits[i * heads::SEGMENT_CLASSES..(i + 1) * heads::SEGMENT_CLASSES];
            preds.push(argmax(row));
            golds.push(seg.category);
        }
    }
    metrics::accuracy(&preds, &golds)
}

/// Fraction of documents whose decoded reading order matches exactly.
pub fn eval_roils(state: &ModelState, store: &[PreparedDoc]) -> Result<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for prep in store {
        let boxes: Vec<SegmentBox> = prep.segments.iter().map(|s| s.rect).collect();
        if boxes.is_empty() {
            continue;
        }
        let tape = Tape::new();
        let memory = encode_doc(&tape, state, prep)?;
        let scores = heads::roils_scores(&tape, state, &memory, None, &boxes)?;
        let order = heads::roils_decode(&tape.value(&scores), boxes.len())?;
        total += 1;
        if order == prep.reading_order {
            hits += 1;
        }
    }
    if total == 0 {
        return Err(Error::Contract("eval_roils: no documents with segments".into()));
    }
    Ok(hits as f64 / total as f64)
}

/// Entity F1 of generated relation values against the gold maps.
pub fn eval_re(state: &ModelState, vocab: &Vocab, store: &[PreparedDoc]) -> Result<f64> {
    let mut preds = Vec::new();
    let mut golds = Vec::new();
    for prep in store {
        let tape = Tape::new();
        let memory = encode_doc(&tape, state, prep)?;
        let mut pred_map = BTreeMap::new();
        let mut gold_map = BTreeMap::new();
        for ((query, _), (key, value)) in prep.relations.iter().zip(&prep.relation_strings) {
            let out = heads::generate(&tape, state, "head.de1", &memory, None, query, MAX_LEN_RE)?;
            pred_map.insert(key.clone(), vocab.detokenize(&out)?);
            gold_map.insert(key.clone(), value.clone());
        }
        preds.push(pred_map);
        golds.push(gold_map);
    }
    metrics::entity_f1(&preds, &golds)
}

/// ANLS of generated answers against each question's gold answer set.
pub fn eval_vqa(state: &ModelState, vocab: &Vocab, store: &[PreparedDoc]) -> Result<f64> {
    let mut preds = Vec::new();
    let mut golds = Vec::new();
    for prep in store {
        let tape = Tape::new();
        let memory = encode_doc(&tape, state, prep)?;
        for (query, answers, _) in &prep.qa {
            let out = heads::generate(&tape, state, "head.de3", &memory, None, query, MAX_LEN_VQA)?;
            preds.push(vocab.detokenize(&out)?);
            golds.push(answers.clone());
        }
    }
    metrics::anls(&preds, &golds, metrics::ANLS_TAU)
}

/// Exact-match accuracy of generated segment text.
pub fn eval_gtsls(state: &ModelState, vocab: &Vocab, store: &[PreparedDoc]) -> Result<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for prep in store {
        let tape = Tape::new();
        let memory = encode_doc(&tape, state, prep)?;
        for seg in &prep.segments {
            let query = heads::segment_query(seg.rect)?;
            let out =
                heads::generate(&tape, state, "head.de2", &memory, None, &query, MAX_LEN_GTSLS)?;
            total += 1;
            if vocab.detokenize(&out)? == vocab.detokenize(&seg.target_ids)? {
                hits += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::Contract("eval_gtsls: no segments".into()));
    }
    Ok(hits as f64 / total as f64)
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0usize;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
