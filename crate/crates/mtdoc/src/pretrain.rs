//! Span masking, the mixed-dataset batch composer, the collective loss,
//! and the pre-training loop.

use crate::backbone::encode;
use crate::docdata::{DatasetRole, ALL_ROLES};
use crate::docdata::{DocumentRecord, SegmentBox, TaskTag, ALL_TASKS};
use crate::embeddings::assemble_input;
use crate::error::{Error, Result};
use crate::heads;
use crate::model::ModelState;
use crate::tensor::{AdamState, GradCheckConfig, GradCheckReport, ParamSet, Tape, Var};
use crate::tokenizer::{TokenInstance, Vocab, MASK};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

// ---------------------------------------------------------------------------
// Batch mixture and task toggles
// ---------------------------------------------------------------------------

/// Per-role sample counts of one composed batch.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct MixtureSpec {
    pub counts: BTreeMap<DatasetRole, usize>,
}

impl Default for MixtureSpec {
    fn default() -> Self {
        let counts = [
            (DatasetRole::Classification, 8),
            (DatasetRole::RelationsA, 2),
            (DatasetRole::RelationsB, 2),
            (DatasetRole::RelationsC, 2),
            (DatasetRole::RelationsD, 2),
            (DatasetRole::Vqa, 8),
            (DatasetRole::Layout, 8),
        ]
        .into_iter()
        .collect();
        MixtureSpec { counts }
    }
}

impl MixtureSpec {
    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.total() == 0 {
            return Err(Error::Config("batch mixture is empty".into()));
        }
        Ok(())
    }
}

/// Which task losses join the collective sum. MLM is the base objective and
/// must always be enabled.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TaskToggles {
    pub enabled: BTreeSet<TaskTag>,
}

impl TaskToggles {
    pub fn full() -> Self {
        TaskToggles {
            enabled: ALL_TASKS.into_iter().collect(),
        }
    }

    /// Named ablation sets mirroring the three studied configurations.
    pub fn named(name: &str) -> Result<Self> {
        let tags: &[TaskTag] = match name {
            "ablation1" => &[TaskTag::Mlm, TaskTag::Dc, TaskTag::Lsc],
            "ablation2" => &[
                TaskTag::Mlm,
                TaskTag::Dc,
                TaskTag::Lsc,
                TaskTag::Re,
                TaskTag::Vqa,
            ],
            "full" => return Ok(Self::full()),
            _ => return Err(Error::Config(format!("unknown toggle set {name:?}"))),
        };
        Ok(TaskToggles {
            enabled: tags.iter().copied().collect(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !self.enabled.contains(&TaskTag::Mlm) {
            return Err(Error::Config("MLM must be enabled".into()));
        }
        Ok(())
    }

    pub fn contains(&self, tag: TaskTag) -> bool {
        self.enabled.contains(&tag)
    }

    /// Enabled tags in the fixed CSV column order.
    pub fn columns(&self) -> Vec<TaskTag> {
        ALL_TASKS
            .into_iter()
            .filter(|t| self.enabled.contains(t))
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Span masking
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskingPlan {
    /// Masked text positions, ascending. Always text token indices; patches
    /// and query tokens never enter the plan.
    pub positions: Vec<usize>,
    pub original_ids: Vec<usize>,
    /// The (start, length) draws that produced the plan.
    pub spans: Vec<(usize, usize)>,
}

/// Poisson(3) via Knuth's product method, truncated to [1,5].
fn truncated_poisson3(rng: &mut impl Rng) -> usize {
    let limit = (-3.0f64).exp();
    let mut k = 0usize;
    let mut p = 1.0f64;
    loop {
        k += 1;
        p *= rng.gen::<f64>();
        if p < limit {
            break;
        }
    }
    (k - 1).clamp(1, 5)
}

/// Masks whole spans (uniform start, truncated-Poisson length) until the
/// masked fraction reaches `rate`. Masked ids become MASK; box and seqid
/// survive corruption.
pub fn span_mask(
    tokens: &[TokenInstance],
    rate: f64,
    rng: &mut impl Rng,
) -> Result<(MaskingPlan, Vec<TokenInstance>)> {
    if !(rate > 0.0 && rate < 1.0) {
        return Err(Error::Config(format!("mask rate {rate} outside (0,1)")));
    }
    let n = tokens.len();
    let mut masked = vec![false; n];
    let mut count = 0usize;
    let mut spans = Vec::new();
    while n > 0 && (count as f64) < rate * n as f64 && count < n {
        let start = rng.gen_range(0..n);
        let len = truncated_poisson3(rng);
        spans.push((start, len));
        for i in start..(start + len).min(n) {
            if !masked[i] {
                masked[i] = true;
                count += 1;
            }
        }
    }
    let positions: Vec<usize> = (0..n).filter(|&i| masked[i]).collect();
    let original_ids: Vec<usize> = positions.iter().map(|&i| tokens[i].id).collect();
    let mut corrupted = tokens.to_vec();
    for &i in &positions {
        corrupted[i].id = MASK;
    }
    Ok((
        MaskingPlan {
            positions,
            original_ids,
            spans,
        },
        corrupted,
    ))
}

// ---------------------------------------------------------------------------
// Prepared documents
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct PreparedSegment {
    pub rect: SegmentBox,
    pub category: usize,
    /// Token ids of the segment's text, the De2 generation target.
    pub target_ids: Vec<usize>,
}

/// A document tokenized and patchified once, ready for repeated sampling.
#[derive(Clone, Debug)]
pub struct PreparedDoc {
    pub id: String,
    pub tokens: Vec<TokenInstance>,
    pub patch_vecs: Vec<Vec<f64>>,
    pub patch_boxes: Vec<SegmentBox>,
    pub doc_class: Option<usize>,
    pub segments: Vec<PreparedSegment>,
    /// Segment indices in reading order.
    pub reading_order: Vec<usize>,
    /// (query tokens, target ids) per relation key.
    pub relations: Vec<(Vec<TokenInstance>, Vec<usize>)>,
    /// The raw (key, value) strings backing `relations`, for evaluation.
    pub relation_strings: Vec<(String, String)>,
    /// (query tokens, gold answers, target ids of the first answer) per question.
    pub qa: Vec<(Vec<TokenInstance>, Vec<String>, Vec<usize>)>,
    pub tasks: BTreeSet<TaskTag>,
}

fn ids_of(toks: &[TokenInstance]) -> Vec<usize> {
    toks.iter().map(|t| t.id).collect()
}

pub fn prepare_doc(vocab: &Vocab, doc: &DocumentRecord) -> Result<PreparedDoc> {
    doc.validate()?;
    let mut tokens = Vec::new();
    for line in &doc.lines {
        tokens.extend(vocab.tokenize_line(&line.text, line.rect));
    }
    let (patch_vecs, patch_boxes) =
        crate::docdata::resize_and_patchify(&doc.pixels, doc.width, doc.height, doc.channels)?;

    let mut segments = Vec::new();
    for seg in &doc.segments {
        let mut target_ids = Vec::new();
        for &li in &seg.line_indices {
            let line = doc.lines.get(li).ok_or_else(|| {
                Error::Validation(format!("{}: segment line index {li} out of range", doc.id))
            })?;
            target_ids.extend(ids_of(&vocab.tokenize_line(&line.text, line.rect)));
        }
        segments.push(PreparedSegment {
            rect: seg.rect,
            category: seg.category.index(),
            target_ids,
        });
    }
    let mut by_rank: Vec<(usize, usize)> = doc
        .segments
        .iter()
        .enumerate()
        .map(|(i, s)| (s.reading_rank, i))
        .collect();
    by_rank.sort_unstable();
    let reading_order: Vec<usize> = by_rank.into_iter().map(|(_, i)| i).collect();

    let relation_strings: Vec<(String, String)> = doc
        .labels
        .relations
        .iter()
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    let relations = doc
        .labels
        .relations
        .iter()
        .map(|(k, v)| {
            (
                vocab.tokenize_line(k, SegmentBox::NULL),
                ids_of(&vocab.tokenize_line(v, SegmentBox::NULL)),
            )
        })
        .collect();
    let qa = doc
        .labels
        .qa
        .iter()
        .map(|(q, answers)| {
            let target = answers
                .first()
                .map(|a| ids_of(&vocab.tokenize_line(a, SegmentBox::NULL)))
                .unwrap_or_default();
            (
                vocab.tokenize_line(q, SegmentBox::NULL),
                answers.clone(),
                target,
            )
        })
        .collect();

    Ok(PreparedDoc {
        id: doc.id.clone(),
        tokens,
        patch_vecs,
        patch_boxes,
        doc_class: doc.labels.doc_class,
        segments,
        reading_order,
        relations,
        relation_strings,
        qa,
        tasks: doc.labels.tasks.clone(),
    })
}

pub type PreparedCorpus = BTreeMap<DatasetRole, Vec<PreparedDoc>>;

pub fn prepare_corpus(
    vocab: &Vocab,
    corpus: &BTreeMap<DatasetRole, Vec<DocumentRecord>>,
) -> Result<PreparedCorpus> {
    corpus
        .iter()
        .map(|(role, docs)| {
            let prepped: Result<Vec<_>> = docs.iter().map(|d| prepare_doc(vocab, d)).collect();
            Ok((*role, prepped?))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Batch composition
// ---------------------------------------------------------------------------

/// One batch as (role, index into the role's store) in fixed role order.
pub fn compose_batch(
    corpus: &PreparedCorpus,
    mixture: &MixtureSpec,
    rng: &mut impl Rng,
) -> Result<Vec<(DatasetRole, usize)>> {
    mixture.validate()?;
    let mut batch = Vec::with_capacity(mixture.total());
    for role in ALL_ROLES {
        let count = mixture.counts.get(&role).copied().unwrap_or(0);
        if count == 0 {
            continue;
        }
        let store = corpus
            .get(&role)
            .filter(|docs| !docs.is_empty())
            .ok_or_else(|| Error::Config(format!("no documents for role {}", role.name())))?;
        for _ in 0..count {
            batch.push((role, rng.gen_range(0..store.len())));
        }
    }
    Ok(batch)
}

// ---------------------------------------------------------------------------
// Collective loss
// ---------------------------------------------------------------------------

/// Per-task loss values for one step, keyed by enabled task.
#[derive(Clone, Debug, Default)]
pub struct StepReport {
    pub total: f64,
    pub per_task: BTreeMap<TaskTag, f64>,
}

/// Unnormalized per-sample contributions living on one sample's tape.
struct SampleTerms {
    mlm_sum: Option<Var>,
    task: Vec<(TaskTag, Var)>,
}

fn generation_mean(
    tape: &Tape,
    state: &ModelState,
    head: &str,
    memory: &Var,
    items: &[(&[TokenInstance], &[usize])],
) -> Result<Option<Var>> {
    let mut sum: Option<Var> = None;
    let mut count = 0usize;
    for (init, targets) in items {
        let (loss, n) = heads::teacher_forced_loss(tape, state, head, memory, None, init, targets)?;
        count += n;
        sum = Some(match sum {
            Some(s) => tape.add(&s, &loss)?,
            None => loss,
        });
    }
    Ok(sum.map(|s| tape.scale(&s, 1.0 / count.max(1) as f64)))
}

fn sample_terms(
    tape: &Tape,
    state: &ModelState,
    prep: &PreparedDoc,
    plan: &MaskingPlan,
    corrupted: &[TokenInstance],
    toggles: &TaskToggles,
) -> Result<SampleTerms> {
    let asm = assemble_input(
        tape,
        state,
        corrupted,
        &prep.patch_vecs,
        &prep.patch_boxes,
        None,
    )?;
    let memory = encode(tape, state, &asm.x, None)?;

    let mlm_sum = if plan.positions.is_empty() {
        None
    } else {
        let logits = heads::mlm_logits(tape, state, &memory, &plan.positions)?;
        Some(tape.cross_entropy_sum(&logits, &plan.original_ids)?)
    };

    let mut task = Vec::new();
    let active = |t: TaskTag| toggles.contains(t) && prep.tasks.contains(&t);
    if active(TaskTag::Dc) {
        let class = prep
            .doc_class
            .ok_or_else(|| Error::Validation(format!("{}: dc tag without class", prep.id)))?;
        let logits = heads::dc_logits(tape, state, &memory, None)?;
        task.push((TaskTag::Dc, tape.cross_entropy(&logits, &[class])?));
    }
    if active(TaskTag::Lsc) {
        let boxes: Vec<SegmentBox> = prep.segments.iter().map(|s| s.rect).collect();
        let cats: Vec<usize> = prep.segments.iter().map(|s| s.category).collect();
        let logits = heads::lsc_logits(tape, state, &memory, None, &boxes)?;
        task.push((TaskTag::Lsc, tape.cross_entropy(&logits, &cats)?));
    }
    if active(TaskTag::Roils) {
        let boxes: Vec<SegmentBox> = prep.segments.iter().map(|s| s.rect).collect();
        let scores = heads::roils_scores(tape, state, &memory, None, &boxes)?;
        task.push((
            TaskTag::Roils,
            heads::roils_loss(tape, &scores, &prep.reading_order)?,
        ));
    }
    if active(TaskTag::Re) {
        let items: Vec<(&[TokenInstance], &[usize])> = prep
            .relations
            .iter()
            .map(|(q, t)| (q.as_slice(), t.as_slice()))
            .collect();
        if let Some(v) = generation_mean(tape, state, "head.de1", &memory, &items)? {
            task.push((TaskTag::Re, v));
        }
    }
    if active(TaskTag::Gtsls) {
        let queries: Vec<Vec<TokenInstance>> = prep
            .segments
            .iter()
            .map(|s| heads::segment_query(s.rect))
            .collect::<Result<_>>()?;
        let items: Vec<(&[TokenInstance], &[usize])> = queries
            .iter()
            .zip(&prep.segments)
            .map(|(q, s)| (q.as_slice(), s.target_ids.as_slice()))
            .collect();
        if let Some(v) = generation_mean(tape, state, "head.de2", &memory, &items)? {
            task.push((TaskTag::Gtsls, v));
        }
    }
    if active(TaskTag::Vqa) {
        let items: Vec<(&[TokenInstance], &[usize])> = prep
            .qa
            .iter()
            .map(|(q, _, t)| (q.as_slice(), t.as_slice()))
            .collect();
        if let Some(v) = generation_mean(tape, state, "head.de3", &memory, &items)? {
            task.push((TaskTag::Vqa, v));
        }
    }
    Ok(SampleTerms { mlm_sum, task })
}

/// Encodes an uncorrupted document: assembled input through the backbone.
pub fn encode_doc(tape: &Tape, state: &ModelState, prep: &PreparedDoc) -> Result<Var> {
    let asm = assemble_input(
        tape,
        state,
        &prep.tokens,
        &prep.patch_vecs,
        &prep.patch_boxes,
        None,
    )?;
    encode(tape, state, &asm.x, None)
}

/// Loss of exactly one task on an uncorrupted document (no masking, no
/// MLM term). Fine-tuning trains on this.
pub fn single_task_loss(
    tape: &Tape,
    state: &ModelState,
    prep: &PreparedDoc,
    task: TaskTag,
) -> Result<Var> {
    if task == TaskTag::Mlm {
        return Err(Error::Config("fine-tuning target must be a head task".into()));
    }
    if !prep.tasks.contains(&task) {
        return Err(Error::Config(format!(
            "document {} does not carry labels for task {}",
            prep.id,
            task.name()
        )));
    }
    let toggles = TaskToggles {
        enabled: [task].into_iter().collect(),
    };
    let plan = MaskingPlan {
        positions: vec![],
        original_ids: vec![],
        spans: vec![],
    };
    let terms = sample_terms(tape, state, prep, &plan, &prep.tokens, &toggles)?;
    terms
        .task
        .into_iter()
        .find(|(t, _)| *t == task)
        .map(|(_, v)| v)
        .ok_or_else(|| {
            Error::Config(format!(
                "document {} yielded no {} loss",
                prep.id,
                task.name()
            ))
        })
}

/// Computes the collective loss on a composed batch and (optionally)
/// accumulates gradients into `state.params`. Deterministic in `rng`
/// regardless of worker count: samples run independently and reduce in
/// batch order.
pub fn collective_loss(
    state: &mut ModelState,
    corpus: &PreparedCorpus,
    batch: &[(DatasetRole, usize)],
    toggles: &TaskToggles,
    mask_rate: f64,
    rng: &mut impl Rng,
    with_grads: bool,
) -> Result<StepReport> {
    toggles.validate()?;
    let samples: Vec<&PreparedDoc> = batch.iter().map(|&(role, i)| &corpus[&role][i]).collect();

    // Phase 1: masking plans and batch-level denominators.
    let mut plans = Vec::with_capacity(samples.len());
    for prep in &samples {
        plans.push(span_mask(&prep.tokens, mask_rate, rng)?);
    }
    let total_masked: usize = plans.iter().map(|(p, _)| p.positions.len()).sum();
    let mut support: BTreeMap<TaskTag, usize> = BTreeMap::new();
    for tag in toggles.columns() {
        if tag == TaskTag::Mlm {
            continue;
        }
        let n = samples.iter().filter(|p| p.tasks.contains(&tag)).count();
        if n == 0 {
            return Err(Error::Config(format!(
                "task {} enabled but no batch sample supports it",
                tag.name()
            )));
        }
        support.insert(tag, n);
    }

    // Phase 2: per-sample forward/backward on private tapes.
    let state_ref: &ModelState = state;
    let results: Vec<Result<(BTreeMap<TaskTag, f64>, f64, BTreeMap<String, Vec<f64>>)>> = samples
        .par_iter()
        .zip(plans.par_iter())
        .map(|(prep, (plan, corrupted))| {
            let tape = Tape::new();
            let terms = sample_terms(&tape, state_ref, prep, plan, corrupted, toggles)?;
            let mut loss: Option<Var> = None;
            let add = |tape: &Tape, acc: &mut Option<Var>, v: Var| -> Result<()> {
                *acc = Some(match acc.take() {
                    Some(a) => tape.add(&a, &v)?,
                    None => v,
                });
                Ok(())
            };
            let mut parts: BTreeMap<TaskTag, f64> = BTreeMap::new();
            if let Some(mlm) = &terms.mlm_sum {
                let scaled = tape.scale(mlm, 1.0 / total_masked.max(1) as f64);
                parts.insert(TaskTag::Mlm, tape.scalar_value(&scaled));
                add(&tape, &mut loss, scaled)?;
            }
            for (tag, term) in &terms.task {
                let scaled = tape.scale(term, 1.0 / support[tag] as f64);
                parts.insert(*tag, tape.scalar_value(&scaled));
                add(&tape, &mut loss, scaled)?;
            }
            let grads = match loss {
                Some(loss) if with_grads => {
                    tape.check_finite(&loss, "sample loss")?;
                    tape.backward(&loss)?;
                    tape.take_param_grads()
                }
                Some(loss) => {
                    tape.check_finite(&loss, "sample loss")?;
                    BTreeMap::new()
                }
                None => BTreeMap::new(),
            };
            let sample_total: f64 = parts.values().sum();
            Ok((parts, sample_total, grads))
        })
        .collect();

    let mut report = StepReport::default();
    for tag in toggles.columns() {
        report.per_task.insert(tag, 0.0);
    }
    for res in results {
        let (parts, sample_total, grads) = res?;
        report.total += sample_total;
        for (tag, v) in parts {
            *report.per_task.get_mut(&tag).expect("enabled tag") += v;
        }
        if with_grads {
            state.params.accumulate(&grads)?;
        }
    }
    if !report.total.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite collective loss {}",
            report.total
        )));
    }
    Ok(report)
}

/// Finite-difference check of the full collective loss (all six heads plus
/// MLM) on a one-document-per-role synthetic batch. The loss is a pure
/// deterministic function of the parameters: batch and masking randomness
/// are frozen from `seed`.
pub fn gradcheck_collective(
    model_cfg: &crate::model::ModelConfig,
    seed: u64,
    check: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let spec = crate::docdata::SynthSpec {
        docs_per_role: 1,
        image_width: 512,
        image_height: 32,
        ..Default::default()
    };
    let corpus = crate::docdata::generate_synthetic_corpus(seed, &spec)?;
    let vocab = Vocab::build(
        corpus
            .values()
            .flatten()
            .flat_map(|d| d.lines.iter().map(|l| l.text.clone())),
    );
    let mut cfg = model_cfg.clone();
    cfg.vocab_size = vocab.len();
    let state0 = ModelState::init(cfg.clone(), seed)?;
    let prepared = prepare_corpus(&vocab, &corpus)?;
    let mixture = MixtureSpec {
        counts: ALL_ROLES.into_iter().map(|r| (r, 1)).collect(),
    };
    let batch = compose_batch(&prepared, &mixture, &mut step_rng(seed, 0))?;
    let toggles = TaskToggles::full();

    let eval = |params: &ParamSet, with_grads: bool| -> Result<(f64, BTreeMap<String, Vec<f64>>)> {
        let mut st = ModelState {
            config: cfg.clone(),
            params: params.clone(),
        };
        let mut rng = step_rng(seed, 1);
        let report = collective_loss(
            &mut st, &prepared, &batch, &toggles, 0.3, &mut rng, with_grads,
        )?;
        let grads = st
            .params
            .params
            .iter()
            .map(|(n, p)| (n.clone(), p.grad.clone()))
            .collect();
        Ok((report.total, grads))
    };

    let mut params = state0.params;
    crate::tensor::finite_diff_check(
        &mut params,
        &|p| eval(p, false).map(|x| x.0),
        &|p| eval(p, true).map(|x| x.1),
        check,
    )
}

// ---------------------------------------------------------------------------
// Pre-training loop
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: u64,
    pub lr: f64,
    /// Optional linear decay target: the effective rate moves from `lr` at
    /// step 0 to `lr_final` at `steps - 1`. `None` keeps the rate constant.
    #[serde(default)]
    pub lr_final: Option<f64>,
    pub mask_rate: f64,
    pub mixture: MixtureSpec,
    pub toggles: TaskToggles,
    pub seed: u64,
    /// Save model + optimizer sidecar every N steps (0 = only at the end).
    pub checkpoint_every: u64,
    pub out_dir: Option<std::path::PathBuf>,
    /// Stop once the total loss drops below this value.
    pub early_stop_loss: Option<f64>,
    /// First step index; nonzero when resuming.
    pub start_step: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 2_000,
            lr: 1e-3,
            lr_final: None,
            mask_rate: 0.30,
            mixture: MixtureSpec::default(),
            toggles: TaskToggles::full(),
            seed: 0,
            checkpoint_every: 0,
            out_dir: None,
            early_stop_loss: None,
            start_step: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PretrainReport {
    /// Steps actually executed (start_step..last_step).
    pub last_step: u64,
    pub last_loss: f64,
}

/// Per-step RNG derived from (seed, step): resuming at step k replays the
/// identical randomness without streaming through earlier steps.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (step + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

pub fn trace_header(toggles: &TaskToggles) -> String {
    let mut cols = vec!["step".to_string(), "total".to_string()];
    cols.extend(toggles.columns().iter().map(|t| t.name().to_string()));
    cols.join(",")
}

fn save_checkpoints(dir: &std::path::Path, state: &ModelState, adam: &AdamState) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let config_json = serde_json::to_string(&state.config)?;
    crate::checkpoint::save(&dir.join("model.ckpt"), &state.params, &config_json)?;
    crate::checkpoint::save_optimizer(&dir.join("optimizer.ckpt"), adam)
}

pub fn pretrain(
    state: &mut ModelState,
    adam: &mut AdamState,
    corpus: &PreparedCorpus,
    cfg: &PretrainConfig,
    trace: &mut dyn Write,
) -> Result<PretrainReport> {
    cfg.mixture.validate()?;
    cfg.toggles.validate()?;
    if cfg.start_step == 0 {
        writeln!(trace, "{}", trace_header(&cfg.toggles))?;
    }
    let mut last_loss = f64::INFINITY;
    let mut last_step = cfg.start_step;
    for step in cfg.start_step..cfg.steps {
        let mut rng = step_rng(cfg.seed, step);
        let batch = compose_batch(corpus, &cfg.mixture, &mut rng)?;
        state.params.zero_grad();
        let report = collective_loss(
            state,
            corpus,
            &batch,
            &cfg.toggles,
            cfg.mask_rate,
            &mut rng,
            true,
        )?;
        state.params.check_grads_finite()?;
        let lr = match cfg.lr_final {
            Some(f) if cfg.steps > 1 => {
                let t = step as f64 / (cfg.steps - 1) as f64;
                cfg.lr + (f - cfg.lr) * t
            }
            _ => cfg.lr,
        };
        adam.step(&mut state.params, Some(lr))?;

        let mut line = format!("{},{}", step, report.total);
        for tag in cfg.toggles.columns() {
            line.push_str(&format!(",{}", report.per_task[&tag]));
        }
        writeln!(trace, "{line}")?;

        last_loss = report.total;
        last_step = step + 1;
        if let Some(dir) = &cfg.out_dir {
            if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
                save_checkpoints(dir, state, adam)?;
            }
        }
        if cfg.early_stop_loss.is_some_and(|t| report.total < t) {
            break;
        }
    }
    if let Some(dir) = &cfg.out_dir {
        save_checkpoints(dir, state, adam)?;
    }
    Ok(PretrainReport {
        last_step,
        last_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::docdata::{generate_synthetic_corpus, SynthSpec};
    use crate::model::ModelConfig;

    fn tiny_setup() -> (ModelState, Vocab, PreparedCorpus) {
        let spec = SynthSpec {
            docs_per_role: 2,
            image_width: 256,
            image_height: 32,
            ..Default::default()
        };
        let corpus = generate_synthetic_corpus(7, &spec).unwrap();
        let vocab = Vocab::build(
            corpus
                .values()
                .flatten()
                .flat_map(|d| d.lines.iter().map(|l| l.text.clone())),
        );
        let state = ModelState::init(
            ModelConfig {
                dim: 8,
                layers: 1,
                heads: 2,
                ffn: 16,
                vocab_size: vocab.len(),
                ..Default::default()
            },
            1,
        )
        .unwrap();
        let prepared = prepare_corpus(&vocab, &corpus).unwrap();
        (state, vocab, prepared)
    }

    fn toks(n: usize) -> Vec<TokenInstance> {
        (0..n)
            .map(|i| TokenInstance {
                id: 6 + (i % 3),
                rect: SegmentBox::new(1, 1, 8, 8).unwrap(),
                seqid: i + 1,
            })
            .collect()
    }

    #[test]
    fn default_mixture_is_the_pinned_recipe() {
        let m = MixtureSpec::default();
        assert_eq!(m.total(), 32);
        assert_eq!(m.counts[&DatasetRole::Classification], 8);
        assert_eq!(m.counts[&DatasetRole::RelationsC], 2);
        assert_eq!(m.counts[&DatasetRole::Vqa], 8);
        assert_eq!(m.counts[&DatasetRole::Layout], 8);
    }

    #[test]
    fn toggles_require_mlm() {
        let mut t = TaskToggles::full();
        t.enabled.remove(&TaskTag::Mlm);
        assert!(t.validate().is_err());
        assert!(TaskToggles::named("nope").is_err());
        assert_eq!(TaskToggles::named("ablation1").unwrap().enabled.len(), 3);
        assert_eq!(TaskToggles::named("ablation2").unwrap().enabled.len(), 5);
        assert_eq!(TaskToggles::named("full").unwrap().enabled.len(), 7);
    }

    #[test]
    fn span_mask_is_deterministic_and_marks_spans() {
        let tokens = toks(50);
        let mut r1 = ChaCha8Rng::seed_from_u64(3);
        let mut r2 = ChaCha8Rng::seed_from_u64(3);
        let (p1, c1) = span_mask(&tokens, 0.3, &mut r1).unwrap();
        let (p2, _) = span_mask(&tokens, 0.3, &mut r2).unwrap();
        assert_eq!(p1, p2);
        assert!(!p1.positions.is_empty());
        assert!(p1.positions.len() as f64 >= 0.3 * 50.0);
        for (&pos, &orig) in p1.positions.iter().zip(&p1.original_ids) {
            assert_eq!(c1[pos].id, MASK);
            assert_eq!(tokens[pos].id, orig);
            // corruption keeps geometry
            assert_eq!(c1[pos].rect, tokens[pos].rect);
            assert_eq!(c1[pos].seqid, tokens[pos].seqid);
        }
    }

    #[test]
    fn span_mask_one_token_and_bad_rate() {
        let tokens = toks(1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (plan, _) = span_mask(&tokens, 0.3, &mut rng).unwrap();
        assert!(plan.positions.len() <= 1);
        assert!(span_mask(&tokens, 0.0, &mut rng).is_err());
        assert!(span_mask(&tokens, 1.0, &mut rng).is_err());
        let (empty, corrupted) = span_mask(&[], 0.3, &mut rng).unwrap();
        assert!(empty.positions.is_empty() && corrupted.is_empty());
    }

    #[test]
    fn poisson_lengths_stay_clamped() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..2000 {
            let l = truncated_poisson3(&mut rng);
            assert!((1..=5).contains(&l));
        }
    }

    #[test]
    fn compose_batch_counts_and_determinism() {
        let (_, _, corpus) = tiny_setup();
        let mixture = MixtureSpec::default();
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let b1 = compose_batch(&corpus, &mixture, &mut r1).unwrap();
        assert_eq!(b1.len(), 32);
        let count = |role| b1.iter().filter(|(r, _)| *r == role).count();
        assert_eq!(count(DatasetRole::Classification), 8);
        assert_eq!(count(DatasetRole::RelationsB), 2);
        assert_eq!(count(DatasetRole::Layout), 8);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        assert_eq!(b1, compose_batch(&corpus, &mixture, &mut r2).unwrap());
    }

    #[test]
    fn compose_batch_rejects_empty_role() {
        let (_, _, mut corpus) = tiny_setup();
        corpus.remove(&DatasetRole::Vqa);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(compose_batch(&corpus, &MixtureSpec::default(), &mut rng).is_err());
    }

    #[test]
    fn collective_loss_additivity() {
        let (mut state, _, corpus) = tiny_setup();
        let mut mixture = MixtureSpec::default();
        for c in mixture.counts.values_mut() {
            *c = 1;
        }
        let batch = compose_batch(&corpus, &mixture, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();

        let run = |state: &mut ModelState, toggles: &TaskToggles| {
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            collective_loss(state, &corpus, &batch, toggles, 0.3, &mut rng, false).unwrap()
        };
        let full = run(&mut state, &TaskToggles::full());
        assert!((full.total - full.per_task.values().sum::<f64>()).abs() < 1e-12);
        assert_eq!(full.per_task.len(), 7);

        // dropping one task changes the total by exactly its reported term
        let mut toggles = TaskToggles::full();
        toggles.enabled.remove(&TaskTag::Vqa);
        let partial = run(&mut state, &toggles);
        assert!((full.total - partial.total - full.per_task[&TaskTag::Vqa]).abs() < 1e-9);
    }

    #[test]
    fn collective_loss_rejects_unsupported_task() {
        let (mut state, _, corpus) = tiny_setup();
        let mixture = MixtureSpec {
            counts: [(DatasetRole::Classification, 2)].into_iter().collect(),
        };
        let batch = compose_batch(&corpus, &mixture, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = collective_loss(
            &mut state,
            &corpus,
            &batch,
            &TaskToggles::full(),
            0.3,
            &mut rng,
            false,
        );
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn untrained_mlm_loss_near_ln_vocab() {
        let (mut state, vocab, corpus) = tiny_setup();
        let mixture = MixtureSpec {
            counts: [(DatasetRole::Classification, 4)].into_iter().collect(),
        };
        let batch = compose_batch(&corpus, &mixture, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let toggles = TaskToggles {
            enabled: [TaskTag::Mlm].into_iter().collect(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let report = collective_loss(
            &mut state,
            &corpus,
            &batch,
            &toggles,
            0.3,
            &mut rng,
            false,
        )
        .unwrap();
        let ln_v = (vocab.len() as f64).ln();
        assert!(
            (report.total - ln_v).abs() / ln_v < 0.2,
            "mlm {} vs ln|V| {}",
            report.total,
            ln_v
        );
    }

    #[test]
    fn pretrain_short_run_trace_and_lr_zero() {
        let (mut state, _, corpus) = tiny_setup();
        let mut mixture = MixtureSpec::default();
        for c in mixture.counts.values_mut() {
            *c = 1;
        }
        let cfg = PretrainConfig {
            steps: 3,
            lr: 0.0,
            mixture,
            seed: 5,
            ..Default::default()
        };
        let before = state.params.params["embed.word"].values.clone();
        let mut adam = AdamState::new(crate::tensor::AdamHyper::with_lr(0.0));
        let mut trace = Vec::new();
        let report = pretrain(&mut state, &mut adam, &corpus, &cfg, &mut trace).unwrap();
        assert_eq!(report.last_step, 3);
        assert_eq!(before, state.params.params["embed.word"].values);
        let text = String::from_utf8(trace).unwrap();
        let lines: Vec<&str> = text.trim().lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0], "step,total,mlm,dc,lsc,roils,re,gtsls,vqa");
        // lr 0 → identical loss every step
        let t1: f64 = lines[1].split(',').nth(1).unwrap().parse().unwrap();
        for l in &lines[2..] {
            let t: f64 = l.split(',').nth(1).unwrap().parse().unwrap();
            // different batches, so only require finiteness here
            assert!(t.is_finite());
        }
        assert!(t1.is_finite());
    }
}
