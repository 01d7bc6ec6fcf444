mod run_config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hex::encode as hex;
use plugd::adapt::{
    attach_adapters, infer, train_downstream, AdapterConfig, Plugging, TrainOptions, TuneMode,
};
use plugd::cost::{sweep_csv, validate_against_engine, CostSetting, Lengths};
use plugd::fsutil::write_atomic;
use plugd::kv::KvConfig;
use plugd::model::{load_checkpoint, save_checkpoint, Backbone, ModelConfig, PluginSharing};
use plugd::plugin::encode_document;
use plugd::pretrain::{pretrain, FillerWords, PretrainOptions};
use plugd::store::{PluginStore, StoreError};
use plugd::taskbench::{couple, evaluate, gen_task, tokenize_rows, EvalMode, TaskKind, TaskRow};
use plugd::text::{
    detokenize, ingest_corpus, load_corpus_with_vocab, tokenize, IngestOptions, Vocabulary,
};
use plugd::{Error, Result};
use run_config::RunConfig;

const CHECKPOINT_FILE: &str = "model.ckpt";
const VOCAB_FILE: &str = "vocab.txt";
const STORE_FILE: &str = "plugins.store";

#[derive(Parser)]
#[command(
    name = "plugd",
    version,
    about = "Encode documents once, plug them into task models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat key = value file; flags take precedence over its entries.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Random seed (default 42).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic key-value corpus with QA and verification splits.
    Synth(SynthArgs),
    /// Pretrain a backbone with recurring-span and next-sentence tasks.
    Pretrain(PretrainArgs),
    /// Encode every corpus document into a plugin store.
    Encode(EncodeArgs),
    /// Tune a task model, with or without plugins.
    Finetune(FinetuneArgs),
    /// Score a task model on a split and write metrics JSON.
    Eval(EvalArgs),
    /// Answer one query.
    Infer(InferArgs),
    /// Analytic FLOP comparison of coupled and plugged inference.
    Bench(BenchArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    docs: Option<usize>,
    /// Key-value pairs per document.
    #[arg(long)]
    pairs: Option<usize>,
    /// Unrelated sentences per document.
    #[arg(long)]
    distractors: Option<usize>,
}

#[derive(Args)]
struct PretrainArgs {
    #[command(flatten)]
    common: Common,
    /// JSON-lines corpus of {"id", "text"} records.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Existing vocabulary; built from the corpus when absent.
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Minimum word count when building the vocabulary.
    #[arg(long)]
    min_count: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Args)]
struct EncodeArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Pet,
    Full,
}

#[derive(Clone, Copy, ValueEnum)]
enum PluggingArg {
    During,
    None,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Qa,
    Verify,
}

#[derive(Args)]
struct FinetuneArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// JSON-lines rows of {"query", "doc_id", "answer"}.
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    store: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "pet")]
    mode: ModeArg,
    #[arg(long, value_enum, default_value = "during")]
    plugging: PluggingArg,
    /// Prepend each row's document to its query (needs --corpus).
    #[arg(long)]
    coupled: bool,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Adapter bottleneck width, used when adapters are attached.
    #[arg(long)]
    adapter_rank: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "qa")]
    task: TaskArg,
    #[arg(long)]
    store: Option<PathBuf>,
    /// Insert each row's plugin at inference.
    #[arg(long)]
    plug_at_inference: bool,
    #[arg(long)]
    coupled: bool,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InferArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    query: String,
    #[arg(long)]
    store: Option<PathBuf>,
    /// Document whose plugin is inserted (needs --store).
    #[arg(long)]
    doc_id: Option<String>,
    #[arg(long)]
    max_new: Option<usize>,
    /// Also write answer.json and run.conf here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    common: Common,
    /// Use the bundled T5-large setting (the default without --config).
    #[arg(long, conflicts_with = "config")]
    paper_config: bool,
    #[arg(long)]
    l_q: Option<usize>,
    #[arg(long)]
    l_d: Option<usize>,
    #[arg(long)]
    l_ans: Option<usize>,
    /// Emit CSV over a grid of lengths instead of a single report.
    #[arg(long)]
    sweep: bool,
    /// Also check the closed form against the instrumented toy engine.
    #[arg(long)]
    validate: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn need(path: Option<PathBuf>, flag: &str) -> Result<PathBuf> {
    path.ok_or_else(|| Error::Usage(format!("--{flag} is required")))
}

fn existing(path: &Path) -> Result<&Path> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("{} does not exist", path.display()),
        )))
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Data(e.to_string()))?;
    write_atomic(path, format!("{text}\n").as_bytes())
}

fn write_rows(path: &Path, rows: &[TaskRow]) -> Result<()> {
    let mut s = String::new();
    for r in rows {
        s.push_str(&serde_json::to_string(r).map_err(|e| Error::Data(e.to_string()))?);
        s.push('\n');
    }
    write_atomic(path, s.as_bytes())
}

fn read_rows(path: &Path) -> Result<Vec<TaskRow>> {
    let text = std::fs::read_to_string(existing(path)?)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

fn load_vocab(path: &Path) -> Result<Vocabulary> {
    Ok(Vocabulary::load(existing(path)?)?)
}

fn load_model(path: &Path) -> Result<Backbone> {
    load_checkpoint(existing(path)?)
}

fn open_store(path: &Path, model: &Backbone) -> Result<PluginStore> {
    let store = PluginStore::open(existing(path)?)?;
    let expected = model.lineage_hash();
    if store.model_hash() != expected {
        return Err(StoreError::HashMismatch {
            expected: hex(expected),
            found: hex(store.model_hash()),
        }
        .into());
    }
    Ok(store)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut rc = RunConfig::new("synth", a.common.config.as_deref())?;
    let seed = rc.seed(a.common.seed)?;
    let docs = rc.pick("docs", a.docs, 200)?;
    let pairs = rc.pick("pairs", a.pairs, 3)?;
    let distractors = rc.pick("distractors", a.distractors, 3)?;
    let task = gen_task(docs, pairs, distractors, seed)?;
    create_dir(&a.out)?;
    let mut corpus = String::new();
    for r in &task.documents {
        corpus.push_str(&serde_json::to_string(r).map_err(|e| Error::Data(e.to_string()))?);
        corpus.push('\n');
    }
    write_atomic(&a.out.join("corpus.jsonl"), corpus.as_bytes())?;
    for (name, split) in [("qa", &task.qa), ("verify", &task.verify)] {
        write_rows(&a.out.join(format!("{name}_train.jsonl")), &split.train)?;
        write_rows(&a.out.join(format!("{name}_dev.jsonl")), &split.dev)?;
        write_rows(&a.out.join(format!("{name}_test.jsonl")), &split.test)?;
    }
    rc.write(&a.out)?;
    println!(
        "{} documents, {} keys -> {}",
        task.documents.len(),
        task.n_keys,
        a.out.display()
    );
    Ok(())
}

fn model_config(rc: &mut RunConfig, vocab_size: usize) -> Result<ModelConfig> {
    let mut kv = rc.file().clone();
    kv.set("vocab_size", vocab_size.to_string());
    let cfg = ModelConfig::from_kv(&kv)?;
    rc.record("vocab_size", cfg.vocab_size);
    rc.record("d_model", cfg.d_model);
    rc.record("n_heads", cfg.n_heads);
    rc.record("d_ff", cfg.d_ff);
    rc.record("n_enc_layers", cfg.n_enc_layers);
    rc.record("n_dec_layers", cfg.n_dec_layers);
    rc.record("n_plug", cfg.n_plug);
    rc.record("max_len", cfg.max_len);
    rc.record("init_std", cfg.init_std);
    rc.record(
        "plugin_sharing",
        match cfg.plugin_sharing {
            PluginSharing::Shared => "shared",
            PluginSharing::PerLayer => "per_layer",
        },
    );
    Ok(cfg)
}

fn pretrain_cmd(a: PretrainArgs) -> Result<()> {
    let mut rc = RunConfig::new("pretrain", a.common.config.as_deref())?;
    let seed = rc.seed(a.common.seed)?;
    let corpus_path = need(rc.pick_path("corpus", a.corpus), "corpus")?;
    let (corpus, vocab) = match rc.pick_path("vocab", a.vocab) {
        Some(v) => {
            let vocab = load_vocab(&v)?;
            (
                load_corpus_with_vocab(existing(&corpus_path)?, &vocab)?,
                vocab,
            )
        }
        None => {
            let min_count = rc.pick("min_count", a.min_count, 1)?;
            ingest_corpus(
                existing(&corpus_path)?,
                IngestOptions {
                    min_count,
                    ..Default::default()
                },
            )?
        }
    };
    let opts = PretrainOptions {
        steps: rc.pick("steps", a.steps, 2000)?,
        batch_size: rc.pick("batch_size", a.batch_size, 4)?,
        lr: rc.pick("lr", a.lr, 2e-4)?,
        seed,
    };
    let cfg = model_config(&mut rc, vocab.len())?;
    let mut model = Backbone::new(cfg, seed)?;
    let filler = FillerWords::default().ids(&vocab);
    let log_every = (opts.steps / 20).max(1);
    let report = pretrain(&mut model, &corpus, &filler, &opts, |step, loss| {
        if step % log_every == 0 || step + 1 == opts.steps {
            log::info!("step {step} loss {loss:.4}");
        }
    })?;
    model.round_to_f32();
    create_dir(&a.out)?;
    save_checkpoint(&model, &a.out.join(CHECKPOINT_FILE))?;
    write_atomic(&a.out.join(VOCAB_FILE), vocab.to_file_string().as_bytes())?;
    write_json(&a.out.join("losses.json"), &report)?;
    rc.write(&a.out)?;
    println!("model {}", hex(model.lineage_hash()));
    Ok(())
}

fn encode_cmd(a: EncodeArgs) -> Result<()> {
    let mut rc = RunConfig::new("encode", a.common.config.as_deref())?;
    rc.seed(a.common.seed)?;
    let model = load_model(&need(
        rc.pick_path("checkpoint", a.checkpoint),
        "checkpoint",
    )?)?;
    let vocab = load_vocab(&need(rc.pick_path("vocab", a.vocab), "vocab")?)?;
    let corpus_path = need(rc.pick_path("corpus", a.corpus), "corpus")?;
    let corpus = load_corpus_with_vocab(existing(&corpus_path)?, &vocab)?;
    let mut store = PluginStore::in_memory(model.lineage_hash(), model.config.d_model);
    for doc in &corpus.documents {
        let mut plugin = encode_document(doc, &model)?;
        plugin.created_at = None;
        store.save(&plugin)?;
    }
    create_dir(&a.out)?;
    store.write_to(&a.out.join(STORE_FILE))?;
    rc.write(&a.out)?;
    println!(
        "{} plugins -> {}",
        store.len(),
        a.out.join(STORE_FILE).display()
    );
    Ok(())
}

fn coupled_rows(
    rc: &mut RunConfig,
    corpus: Option<PathBuf>,
    rows: &[plugd::adapt::TaskExample],
    vocab: &Vocabulary,
    model: &Backbone,
) -> Result<Vec<plugd::adapt::TaskExample>> {
    let path = need(rc.pick_path("corpus", corpus), "corpus")?;
    let corpus = load_corpus_with_vocab(existing(&path)?, vocab)?;
    couple(rows, &corpus, model.config.max_len)
}

fn finetune_cmd(a: FinetuneArgs) -> Result<()> {
    let mut rc = RunConfig::new("finetune", a.common.config.as_deref())?;
    let seed = rc.seed(a.common.seed)?;
    let mut model = load_model(&need(
        rc.pick_path("checkpoint", a.checkpoint),
        "checkpoint",
    )?)?;
    let vocab = load_vocab(&need(rc.pick_path("vocab", a.vocab), "vocab")?)?;
    let rows = read_rows(&need(rc.pick_path("train", a.train), "train")?)?;
    let mode = match a.mode {
        ModeArg::Pet => TuneMode::Pet,
        ModeArg::Full => TuneMode::Full,
    };
    let plugging = match a.plugging {
        PluggingArg::During => Plugging::During,
        PluggingArg::None => Plugging::None,
    };
    rc.record("mode", if mode == TuneMode::Pet { "pet" } else { "full" });
    rc.record(
        "plugging",
        if plugging == Plugging::During {
            "during"
        } else {
            "none"
        },
    );
    rc.record("coupled", a.coupled);
    if a.coupled && plugging == Plugging::During {
        return Err(Error::Usage("--coupled needs --plugging none".into()));
    }
    let mut data = tokenize_rows(&rows, &vocab);
    if a.coupled {
        data = coupled_rows(&mut rc, a.corpus, &data, &vocab, &model)?;
    }
    let store = match plugging {
        Plugging::During => Some(open_store(
            &need(rc.pick_path("store", a.store), "store")?,
            &model,
        )?),
        Plugging::None => None,
    };
    if mode == TuneMode::Pet && model.adapter.is_none() {
        let r = rc.pick("adapter_rank", a.adapter_rank, AdapterConfig::default().r)?;
        attach_adapters(
            &mut model,
            AdapterConfig {
                r,
                ..Default::default()
            },
            seed,
        )?;
    }
    let opts = TrainOptions {
        mode,
        plugging,
        lr: rc.pick("lr", a.lr, 1e-3)?,
        steps: rc.pick("steps", a.steps, 1000)?,
        batch_size: rc.pick("batch_size", a.batch_size, 8)?,
        seed,
    };
    let report = train_downstream(&mut model, store.as_ref(), &data, &opts)?;
    if let Some(last) = report.losses.last() {
        log::info!("final loss {last:.4}");
    }
    model.round_to_f32();
    create_dir(&a.out)?;
    save_checkpoint(&model, &a.out.join(CHECKPOINT_FILE))?;
    write_json(&a.out.join("losses.json"), &report)?;
    rc.write(&a.out)?;
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let mut rc = RunConfig::new("eval", a.common.config.as_deref())?;
    rc.seed(a.common.seed)?;
    let model = load_model(&need(
        rc.pick_path("checkpoint", a.checkpoint),
        "checkpoint",
    )?)?;
    let vocab = load_vocab(&need(rc.pick_path("vocab", a.vocab), "vocab")?)?;
    let rows = read_rows(&need(rc.pick_path("data", a.data), "data")?)?;
    let kind = match a.task {
        TaskArg::Qa => TaskKind::Qa,
        TaskArg::Verify => TaskKind::Verify,
    };
    let mode = match (a.plug_at_inference, a.coupled) {
        (true, true) => {
            return Err(Error::Usage(
                "--plug-at-inference and --coupled are exclusive".into(),
            ))
        }
        (true, false) => EvalMode::Plugged,
        (false, true) => EvalMode::Coupled,
        (false, false) => EvalMode::None,
    };
    rc.record("task", if kind == TaskKind::Qa { "qa" } else { "verify" });
    rc.record("plug_at_inference", a.plug_at_inference);
    rc.record("coupled", a.coupled);
    let mut data = tokenize_rows(&rows, &vocab);
    if a.coupled {
        data = coupled_rows(&mut rc, a.corpus, &data, &vocab, &model)?;
    }
    let store = match mode {
        EvalMode::Plugged => Some(open_store(
            &need(rc.pick_path("store", a.store), "store")?,
            &model,
        )?),
        _ => None,
    };
    let m = evaluate(&model, store.as_ref(), &data, kind, mode, &vocab)?;
    let out = serde_json::json!({
        "exact_match": m.exact_match,
        "accuracy": m.accuracy,
        "n": m.n,
        "mode": mode,
        "task": kind,
        "chance": kind.chance(),
    });
    create_dir(&a.out)?;
    write_json(&a.out.join("metrics.json"), &out)?;
    rc.write(&a.out)?;
    println!(
        "{}",
        serde_json::to_string_pretty(&out).map_err(|e| Error::Data(e.to_string()))?
    );
    Ok(())
}

fn infer_cmd(a: InferArgs) -> Result<()> {
    let mut rc = RunConfig::new("infer", a.common.config.as_deref())?;
    rc.seed(a.common.seed)?;
    let model = load_model(&need(
        rc.pick_path("checkpoint", a.checkpoint),
        "checkpoint",
    )?)?;
    let vocab = load_vocab(&need(rc.pick_path("vocab", a.vocab), "vocab")?)?;
    let max_new = rc.pick("max_new", a.max_new, 32)?;
    rc.record("query", &a.query);
    let store = match rc.pick_path("store", a.store) {
        Some(p) => Some(open_store(&p, &model)?),
        None => None,
    };
    if let Some(id) = &a.doc_id {
        rc.record("doc_id", id);
    }
    if a.doc_id.is_some() != store.is_some() {
        return Err(Error::Usage("--store and --doc-id go together".into()));
    }
    let query = tokenize(&a.query, &vocab);
    let out = infer(
        &model,
        store.as_ref(),
        &query,
        a.doc_id.as_deref(),
        store.is_some(),
        max_new,
    )?;
    let answer = detokenize(&out, &vocab);
    println!("{answer}");
    if let Some(dir) = a.out {
        create_dir(&dir)?;
        write_json(
            &dir.join("answer.json"),
            &serde_json::json!({ "query": a.query, "answer": answer }),
        )?;
        rc.write(&dir)?;
    }
    Ok(())
}

fn bench_cmd(a: BenchArgs) -> Result<()> {
    let mut rc = RunConfig::new("bench", a.common.config.as_deref())?;
    let seed = rc.seed(a.common.seed)?;
    let mut kv = match &a.common.config {
        Some(_) => rc.file().clone(),
        None => KvConfig::parse(plugd::cost::T5_LARGE)?,
    };
    for (k, v) in [("l_q", a.l_q), ("l_d", a.l_d), ("l_ans", a.l_ans)] {
        if let Some(v) = v {
            kv.set(k, v.to_string());
        }
    }
    for (k, v) in kv.iter() {
        rc.record(k, v);
    }
    let setting = CostSetting::from_kv(&kv)?;
    let mut text = String::new();
    if a.sweep {
        rc.record("sweep", true);
        text = sweep_csv(
            &setting,
            &[16, 48, 128],
            &[0, 128, 512, 2048, 8192],
            &[8, 32],
        );
        print!("{text}");
    } else {
        let report = setting.report();
        println!("{}", report.to_json());
        print!("{}", report.to_table());
    }
    let mut checks = Vec::new();
    if a.validate {
        let toy = ModelConfig::toy(500);
        for (l_q, l_d, l_ans) in [(8, 32, 4), (8, 0, 4), (16, 64, 8), (4, 128, 2), (32, 16, 6)] {
            let c = validate_against_engine(&toy, Lengths { l_q, l_d, l_ans }, seed)?;
            println!(
                "engine l_q={l_q} l_d={l_d} l_ans={l_ans} deviation {:.6}",
                c.max_rel_deviation
            );
            checks.push(c);
        }
    }
    if let Some(dir) = a.out {
        create_dir(&dir)?;
        if a.sweep {
            write_atomic(&dir.join("sweep.csv"), text.as_bytes())?;
        } else {
            write_atomic(
                &dir.join("cost.json"),
                setting.report().to_json().as_bytes(),
            )?;
        }
        if !checks.is_empty() {
            write_json(&dir.join("engine_check.json"), &checks)?;
        }
        rc.write(&dir)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Pretrain(a) => pretrain_cmd(a),
        Command::Encode(a) => encode_cmd(a),
        Command::Finetune(a) => finetune_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Infer(a) => infer_cmd(a),
        Command::Bench(a) => bench_cmd(a),
    }
}

fn one_line(msg: &str) -> String {
    msg.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            eprintln!(
                "{}",
                one_line(text.lines().next().unwrap_or("invalid arguments"))
            );
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", one_line(&e.to_string()));
            ExitCode::from(if e.is_incompatible() { 2 } else { 1 })
        }
    }
}
