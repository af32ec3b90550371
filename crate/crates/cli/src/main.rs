//! `tapq` command-line driver.
//!
//! Exit codes: 0 on success, 2 on invalid input or configuration, 3 on
//! runtime failure. `TAPQ_SEED` overrides the seed of `gen-corpus` and
//! `pretrain`.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use candle_core::DType;
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use tapq::corpus::{generate_corpus, load_corpus, save_corpus, LayoutSpec};
use tapq::integration::{
    assemble_lengths, compress_multipage, flops_report, flops_table, split_pages, AssemblyMode,
    LmArch, OcrArch, RawOcrOrder,
};
use tapq::trainer::{evaluate, Checkpoint, EvalConfig, TrainConfig, Trainer};
use tapq::{Error, Result};

const SEED_ENV: &str = "TAPQ_SEED";

#[derive(Parser)]
#[command(
    name = "tapq",
    version,
    about = "Layout-aware OCR compression: corpus, pretraining, inference and FLOPs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic key/value form corpus as JSONL
    GenCorpus(GenCorpusArgs),
    /// Pretrain the encoder and OCR-Q with the three objectives
    Pretrain(PretrainArgs),
    /// Evaluate a checkpoint on a held-out corpus
    Eval(EvalArgs),
    /// Compress a document into K query vectors
    Compress(CompressArgs),
    /// Report downstream LM forward FLOPs for an assembled input
    Flops(FlopsArgs),
}

#[derive(Args, serde::Serialize)]
struct GenCorpusArgs {
    /// Number of documents
    #[arg(long)]
    n: usize,
    /// Corpus seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Layout grid as ROWSxCOLS
    #[arg(long, default_value = "4x2")]
    grid: String,
    /// Output JSONL path
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PretrainArgs {
    /// Config file of `key = value` lines
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, as key=value (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Directory for checkpoint, metrics and resolved config
    #[arg(long)]
    out_dir: PathBuf,
    /// Resume from this checkpoint instead of starting fresh
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, serde::Serialize)]
struct EvalArgs {
    /// Checkpoint file
    #[arg(long)]
    checkpoint: PathBuf,
    /// Held-out corpus JSONL
    #[arg(long)]
    corpus: PathBuf,
    /// Write metrics JSON here instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, serde::Serialize)]
struct CompressArgs {
    /// Checkpoint file
    #[arg(long)]
    checkpoint: PathBuf,
    /// Document JSONL; each record is one page
    #[arg(long)]
    doc: PathBuf,
    /// Instruction text fed to OCR-Q
    #[arg(long, default_value = "")]
    instruction: String,
    /// Number of leading records to compress as pages
    #[arg(long, default_value_t = 1)]
    pages: usize,
    /// Write vectors JSON here instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, serde::Serialize)]
struct FlopsArgs {
    /// Assembly mode: baseline, full or light (all three when omitted)
    #[arg(long)]
    mode: Option<String>,
    /// Total raw OCR length over all pages
    #[arg(long)]
    ocr_len: usize,
    /// Query vectors per page
    #[arg(long, default_value_t = 32)]
    k: usize,
    /// Instruction length
    #[arg(long, default_value_t = 32)]
    instr_len: usize,
    /// Number of pages
    #[arg(long, default_value_t = 1)]
    pages: usize,
    /// Downstream LM as d_lm,layers,heads,ff_mult
    #[arg(long, default_value = "2048,24,16,4")]
    lm_arch: String,
    /// Full-mode raw OCR placement: concatenated or interleaved
    #[arg(long, default_value = "concatenated")]
    order: String,
    /// Emit JSON instead of a text table
    #[arg(long)]
    json: bool,
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

fn snapshot_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".config.json");
    out.with_file_name(name)
}

fn write_snapshot(path: &Path, command: &str, args: &impl serde::Serialize) -> Result<()> {
    let value = json!({ "command": command, "args": args });
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(&value)? + "\n")?;
    Ok(())
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => {
            fs::write(p, text)?;
            Ok(())
        }
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn parse_grid(grid: &str) -> Result<(usize, usize)> {
    let bad = || Error::Argument(format!("grid must look like ROWSxCOLS, got {grid:?}"));
    let (r, c) = grid.split_once(['x', 'X']).ok_or_else(bad)?;
    Ok((
        r.trim().parse().map_err(|_| bad())?,
        c.trim().parse().map_err(|_| bad())?,
    ))
}

fn gen_corpus(mut args: GenCorpusArgs) -> Result<()> {
    if let Some(seed) = env_seed()? {
        args.seed = seed;
    }
    let (rows, cols) = parse_grid(&args.grid)?;
    let spec = LayoutSpec {
        rows,
        cols,
        ..LayoutSpec::default()
    };
    spec.validate()?;
    let docs = generate_corpus(args.n, args.seed, &spec)?;
    save_corpus(&docs, &args.out)?;
    write_snapshot(&snapshot_path(&args.out), "gen-corpus", &args)?;
    eprintln!("wrote {} documents to {}", docs.len(), args.out.display());
    Ok(())
}

fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Argument(format!("override {s:?} is not key=value")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

fn pretrain(args: PretrainArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    let overrides = args
        .overrides
        .iter()
        .map(|s| parse_override(s))
        .collect::<Result<Vec<_>>>()?;
    cfg.apply_overrides(&overrides)?;
    if let Some(seed) = env_seed()? {
        cfg.seed = seed;
    }
    fs::create_dir_all(&args.out_dir)?;
    cfg.checkpoint_path = Some(args.out_dir.join("checkpoint.tapq"));
    cfg.metrics_path = Some(args.out_dir.join("metrics.csv"));
    if cfg.dump_dir.is_none() {
        cfg.dump_dir = Some(args.out_dir.clone());
    }
    cfg.validate()?;
    fs::write(args.out_dir.join("config.resolved.txt"), cfg.to_kv_string())?;

    let mut trainer = match &args.resume {
        Some(p) => Trainer::resume(&Checkpoint::load(p)?, cfg)?,
        None => Trainer::new(cfg)?,
    };
    let history = trainer.run()?;
    if let Some(last) = history.last() {
        eprintln!(
            "step {}: total {:.4} l_lm {:.4} l_con {:.4} l_match {:.4}",
            last.step + 1,
            last.total,
            last.l_lm,
            last.l_con,
            last.l_match
        );
    }
    eprintln!(
        "checkpoint written to {}",
        args.out_dir.join("checkpoint.tapq").display()
    );
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let model = ckpt.model(DType::F32)?;
    let docs = load_corpus(&args.corpus)?;
    let metrics = evaluate(
        &model,
        &ckpt.vocab,
        &docs,
        &EvalConfig::from_train(&ckpt.config),
    )?;
    if let Some(out) = &args.out {
        write_snapshot(&snapshot_path(out), "eval", &args)?;
    }
    emit(
        &serde_json::to_string_pretty(&metrics)?,
        args.out.as_deref(),
    )
}

fn compress(args: CompressArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let model = ckpt.model(DType::F32)?;
    let docs = load_corpus(&args.doc)?;
    if args.pages == 0 || docs.len() < args.pages {
        return Err(Error::Argument(format!(
            "asked for {} pages but {} holds {} records",
            args.pages,
            args.doc.display(),
            docs.len()
        )));
    }
    let out = compress_multipage(&model, &ckpt.vocab, &docs[..args.pages], &args.instruction)?;
    if let Some(p) = &args.out {
        write_snapshot(&snapshot_path(p), "compress", &args)?;
    }
    emit(
        &serde_json::to_string(&out.to_json()?)?,
        args.out.as_deref(),
    )
}

fn flops(args: FlopsArgs) -> Result<()> {
    let lm: LmArch = args.lm_arch.parse()?;
    let order = match args.order.as_str() {
        "concatenated" => RawOcrOrder::Concatenated,
        "interleaved" => RawOcrOrder::Interleaved,
        other => {
            return Err(Error::Config(format!(
                "unknown order {other:?}, expected concatenated or interleaved"
            )))
        }
    };
    if args.pages == 0 {
        return Err(Error::Argument("--pages must be at least 1".into()));
    }
    let modes = match &args.mode {
        Some(m) => vec![m.parse::<AssemblyMode>()?],
        None => AssemblyMode::ALL.to_vec(),
    };
    let page_lens = split_pages(args.ocr_len, args.pages);
    let profiles = modes
        .into_iter()
        .map(|m| {
            let assembled = assemble_lengths(m, args.k, &page_lens, args.instr_len, order)?;
            flops_report(&lm, &OcrArch::default(), &assembled)
        })
        .collect::<Result<Vec<_>>>()?;
    if args.json {
        println!(
            "{}",
            serde_json::to_string_pretty(&json!({ "args": args, "profiles": profiles }))?
        );
    } else {
        print!("{}", flops_table(&profiles));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenCorpus(a) => gen_corpus(a),
        Command::Pretrain(a) => pretrain(a),
        Command::Eval(a) => eval(a),
        Command::Compress(a) => compress(a),
        Command::Flops(a) => flops(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 2 } else { 3 })
        }
    }
}
