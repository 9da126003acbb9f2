use clap::{Parser, Subcommand};
use mtdoc::checkpoint;
use mtdoc::config::RunConfig;
use mtdoc::docdata::{
    generate_synthetic_corpus, load_jsonl, write_jsonl, DatasetRole, DocumentRecord, SynthSpec,
    TaskTag, ALL_ROLES,
};
use mtdoc::error::{Error, Result};
use mtdoc::finetune::{self, FinetuneConfig};
use mtdoc::model::{ModelConfig, ModelState};
use mtdoc::pretrain::{self, prepare_corpus, PreparedDoc};
use mtdoc::tensor::{AdamHyper, AdamState, GradCheckConfig};
use mtdoc::tokenizer::Vocab;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "mtdoc", about = "Multi-task document transformer at desk scale")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic corpus as per-role JSONL files.
    GenData {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Optional JSON file with synthetic corpus parameters.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Collective pre-training from a run config.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        /// Continue from the checkpoints in the config's out_dir.
        #[arg(long)]
        resume: bool,
    },
    /// Fine-tune one task head from the pre-trained checkpoint.
    Finetune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        task: String,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        epochs: Option<u64>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        role: Option<String>,
    },
    /// Evaluate a checkpoint on a dataset role.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        /// Directory of per-role JSONL files.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        task: String,
        #[arg(long)]
        role: Option<String>,
    },
    /// Finite-difference check of the collective loss gradients.
    Gradcheck {
        #[arg(long, default_value_t = 16)]
        dim: usize,
        #[arg(long, default_value_t = 2)]
        layers: usize,
        #[arg(long, default_value_t = 4)]
        heads: usize,
        #[arg(long, default_value_t = 32)]
        ffn: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print a checkpoint manifest.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn worker_threads() -> usize {
    std::env::var("MTDOC_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

fn load_corpus(cfg: &RunConfig) -> Result<BTreeMap<DatasetRole, Vec<DocumentRecord>>> {
    match &cfg.data_dir {
        Some(dir) => load_corpus_dir(dir),
        None => generate_synthetic_corpus(cfg.seed(), &cfg.synth),
    }
}

fn load_corpus_dir(dir: &Path) -> Result<BTreeMap<DatasetRole, Vec<DocumentRecord>>> {
    let mut corpus = BTreeMap::new();
    for role in ALL_ROLES {
        let path = dir.join(format!("{}.jsonl", role.name()));
        if path.is_file() {
            corpus.insert(role, load_jsonl(&path)?);
        }
    }
    if corpus.is_empty() {
        return Err(Error::Config(format!(
            "no <role>.jsonl files found in {}",
            dir.display()
        )));
    }
    Ok(corpus)
}

fn build_vocab(corpus: &BTreeMap<DatasetRole, Vec<DocumentRecord>>) -> Vocab {
    Vocab::build(
        corpus
            .values()
            .flatten()
            .flat_map(|d| d.lines.iter().map(|l| l.text.clone())),
    )
}

fn load_model(path: &Path) -> Result<ModelState> {
    let (params, config_json) = checkpoint::load(path)?;
    let config: ModelConfig = serde_json::from_str(&config_json)
        .map_err(|e| Error::Validation(format!("{}: bad model config: {e}", path.display())))?;
    Ok(ModelState { config, params })
}

fn default_role_for(task: TaskTag) -> DatasetRole {
    match task {
        TaskTag::Dc => DatasetRole::Classification,
        TaskTag::Re => DatasetRole::RelationsA,
        TaskTag::Vqa => DatasetRole::Vqa,
        _ => DatasetRole::Layout,
    }
}

fn cmd_gen_data(seed: u64, out: &Path, spec: Option<&Path>) -> Result<()> {
    let spec = match spec {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            serde_json::from_str::<SynthSpec>(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => SynthSpec::default(),
    };
    let corpus = generate_synthetic_corpus(seed, &spec)?;
    std::fs::create_dir_all(out)?;
    for (role, docs) in &corpus {
        let path = out.join(format!("{}.jsonl", role.name()));
        write_jsonl(&path, docs)?;
        println!("wrote {} ({} docs)", path.display(), docs.len());
    }
    Ok(())
}

fn cmd_pretrain(config_path: &Path, resume: bool) -> Result<()> {
    let cfg = RunConfig::load(config_path)?;
    let corpus = load_corpus(&cfg)?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    let vocab_path = cfg.out_dir.join("vocab.txt");
    let vocab = if resume && vocab_path.is_file() {
        Vocab::load(&vocab_path)?
    } else {
        let v = build_vocab(&corpus);
        v.save(&vocab_path)?;
        v
    };

    let mut pcfg = cfg.pretrain_config()?;
    let (mut state, mut adam) = if resume {
        let state = load_model(&cfg.out_dir.join("model.ckpt"))?;
        let adam = checkpoint::load_optimizer(&cfg.out_dir.join("optimizer.ckpt"))?;
        pcfg.start_step = adam.step_count;
        (state, adam)
    } else {
        let mut model_cfg = cfg.model.clone();
        model_cfg.vocab_size = vocab.len();
        (
            ModelState::init(model_cfg, cfg.seed())?,
            AdamState::new(AdamHyper::with_lr(cfg.pretrain.lr)),
        )
    };

    let prepared = prepare_corpus(&vocab, &corpus)?;
    let trace_path = cfg.out_dir.join("loss.csv");
    let mut trace: Box<dyn std::io::Write> = if resume {
        Box::new(std::fs::OpenOptions::new().append(true).create(true).open(&trace_path)?)
    } else {
        Box::new(std::fs::File::create(&trace_path)?)
    };
    let report = pretrain::pretrain(&mut state, &mut adam, &prepared, &pcfg, &mut trace)?;
    println!(
        "pre-training done: step {} loss {}",
        report.last_step, report.last_loss
    );
    println!("checkpoint: {}", cfg.out_dir.join("model.ckpt").display());
    Ok(())
}

fn role_store<'a>(
    prepared: &'a BTreeMap<DatasetRole, Vec<PreparedDoc>>,
    role: DatasetRole,
) -> Result<&'a [PreparedDoc]> {
    prepared
        .get(&role)
        .map(|v| v.as_slice())
        .filter(|v| !v.is_empty())
        .ok_or_else(|| Error::Config(format!("no documents for role {}", role.name())))
}

fn cmd_finetune(
    config_path: &Path,
    task: &str,
    steps: Option<u64>,
    epochs: Option<u64>,
    lr: Option<f64>,
    role: Option<&str>,
) -> Result<()> {
    let cfg = RunConfig::load(config_path)?;
    let task = TaskTag::parse(task)?;
    let mut fcfg = FinetuneConfig::defaults_for(task)?;
    fcfg.seed = cfg.seed();
    if let Some(r) = role {
        fcfg.role = DatasetRole::parse(r)?;
    }
    if let Some(s) = steps {
        fcfg.steps = Some(s);
        fcfg.epochs = None;
    }
    if let Some(e) = epochs {
        fcfg.epochs = Some(e);
        fcfg.steps = None;
    }
    if let Some(l) = lr {
        fcfg.lr = l;
    }

    let mut state = load_model(&cfg.out_dir.join("model.ckpt"))?;
    let vocab = Vocab::load(&cfg.out_dir.join("vocab.txt"))?;
    let corpus = load_corpus(&cfg)?;
    let prepared = prepare_corpus(&vocab, &corpus)?;
    let store = role_store(&prepared, fcfg.role)?;

    let out = cfg.out_dir.join(format!("finetune-{}", task.name()));
    std::fs::create_dir_all(&out)?;
    let mut adam = AdamState::new(AdamHyper::with_lr(fcfg.lr));
    let mut trace = std::fs::File::create(out.join("loss.csv"))?;
    let report = finetune::finetune(&mut state, &mut adam, store, &fcfg, &mut trace)?;
    let config_json = serde_json::to_string(&state.config)?;
    checkpoint::save(&out.join("model.ckpt"), &state.params, &config_json)?;
    println!(
        "fine-tuning {} done: {} steps, loss {}",
        task.name(),
        report.steps_run,
        report.last_loss
    );
    Ok(())
}

fn cmd_eval(
    checkpoint_path: &Path,
    vocab_path: &Path,
    data: &Path,
    task: &str,
    role: Option<&str>,
) -> Result<()> {
    let task = TaskTag::parse(task)?;
    if task == TaskTag::Mlm {
        return Err(Error::Config("eval target must be a head task".into()));
    }
    let state = load_model(checkpoint_path)?;
    let vocab = Vocab::load(vocab_path)?;
    let role = match role {
        Some(r) => DatasetRole::parse(r)?,
        None => default_role_for(task),
    };
    let docs = load_jsonl(&data.join(format!("{}.jsonl", role.name())))?;
    let store: Vec<PreparedDoc> = docs
        .iter()
        .map(|d| pretrain::prepare_doc(&vocab, d))
        .collect::<Result<_>>()?;

    let (metric, value) = match task {
        TaskTag::Dc => ("accuracy", finetune::eval_dc(&state, &store)?),
        TaskTag::Lsc => ("accuracy", finetune::eval_lsc(&state, &store)?),
        TaskTag::Roils => ("order_accuracy", finetune::eval_roils(&state, &store)?),
        TaskTag::Re => ("entity_f1", finetune::eval_re(&state, &vocab, &store)?),
        TaskTag::Gtsls => ("exact_match", finetune::eval_gtsls(&state, &vocab, &store)?),
        TaskTag::Vqa => ("anls", finetune::eval_vqa(&state, &vocab, &store)?),
        TaskTag::Mlm => unreachable!(),
    };
    println!(
        "{}",
        serde_json::json!({
            "task": task.name(),
            "role": role.name(),
            "docs": store.len(),
            "metric": metric,
            "value": value,
        })
    );
    Ok(())
}

fn cmd_gradcheck(dim: usize, layers: usize, heads: usize, ffn: usize, seed: u64) -> Result<()> {
    let cfg = ModelConfig {
        dim,
        layers,
        heads,
        ffn,
        ..Default::default()
    };
    let report = pretrain::gradcheck_collective(&cfg, seed, &GradCheckConfig::default())?;
    println!(
        "checked {} coordinates, max rel err {:.3e} (tol {:.1e})",
        report.entries.len(),
        report.max_rel_err,
        report.rel_tol
    );
    if let Some(w) = &report.worst {
        println!(
            "worst: {}[{}] analytic {:.6e} numeric {:.6e}",
            w.param, w.coord, w.analytic, w.numeric
        );
    }
    if !report.passed() {
        return Err(Error::Numeric(format!(
            "gradient check failed: max rel err {:.3e}",
            report.max_rel_err
        )));
    }
    println!("PASS");
    Ok(())
}

fn cmd_inspect(path: &Path) -> Result<()> {
    let (params, config_json) = checkpoint::load(path)?;
    println!("config: {config_json}");
    println!("parameters: {}", params.params.len());
    for (name, p) in &params.params {
        println!("  {name}  {:?}  {}", p.shape, p.values.len());
    }
    println!("total scalars: {}", params.total_len());
    Ok(())
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    rayon::ThreadPoolBuilder::new()
        .num_threads(worker_threads())
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    match cli.cmd {
        Cmd::GenData { seed, out, spec } => cmd_gen_data(seed, &out, spec.as_deref()),
        Cmd::Pretrain { config, resume } => cmd_pretrain(&config, resume),
        Cmd::Finetune {
            config,
            task,
            steps,
            epochs,
            lr,
            role,
        } => cmd_finetune(&config, &task, steps, epochs, lr, role.as_deref()),
        Cmd::Eval {
            checkpoint,
            vocab,
            data,
            task,
            role,
        } => cmd_eval(&checkpoint, &vocab, &data, &task, role.as_deref()),
        Cmd::Gradcheck {
            dim,
            layers,
            heads,
            ffn,
            seed,
        } => cmd_gradcheck(dim, layers, heads, ffn, seed),
        Cmd::Inspect { checkpoint } => cmd_inspect(&checkpoint),
    }
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
