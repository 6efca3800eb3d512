//! One entry point for pretraining, finetuning, benchmarking, tokenization
//! and efficiency analysis, driven by a strict JSON experiment config.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 divergence or
//! measurement error.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use mosaicbert_core::config::{presets, RunConfig};
use mosaicbert_core::data::{build_toy_vocab, read_documents, wordpiece_tokenize, Vocab};
use mosaicbert_core::error::Error;
use mosaicbert_core::layers::count_params;
use mosaicbert_core::perf::{
    cost_estimate, flops_per_token, measure_throughput, mfu, pareto_emit, MetricsLog,
};
use mosaicbert_core::train::{
    finetune, pretrain, AdamHyper, Checkpoint, FinetuneParams, PretrainParams, TaskExample,
    TaskHead,
};

mod selfcheck;

#[derive(Parser)]
#[command(
    name = "mosaicbert",
    version,
    about = "Desk-scale encoder pretraining and efficiency accounting",
    disable_help_subcommand = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Scale {
    Paper,
    Desk,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum HeadKind {
    Classification,
    Regression,
}

/// Config resolution shared by the run-style subcommands. Precedence:
/// preset < --scale < --config file < --set overrides < --seed.
#[derive(Args)]
struct ConfigArgs {
    /// Architecture + recipe preset.
    #[arg(long, value_parser = presets::NAMES)]
    preset: Option<String>,
    /// Shrink the preset to laptop size (dims and steps; ratios fixed).
    #[arg(long, value_enum)]
    scale: Option<Scale>,
    /// JSON config file (partial documents deep-merge over the preset).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-path overrides, e.g. --set model.hidden=128.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Run seed; falls back to the MOSAIC_SEED environment variable.
    #[arg(long)]
    seed: Option<u64>,
    /// Print the merged config as canonical JSON and exit.
    #[arg(long)]
    dump_config: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Masked-language-model pretraining on a line-per-document corpus.
    Pretrain {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory for checkpoints, metrics CSV and vocab.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Leave wallclock columns empty in emitted CSVs (golden outputs).
        #[arg(long)]
        no_timing: bool,
    },
    /// Finetune a pretraining checkpoint on a labeled task (TSV: `label<TAB>text`).
    Finetune {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Start from a checkpoint already finetuned on another task.
        #[arg(long)]
        chain_from: Option<PathBuf>,
        #[arg(long)]
        task: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long, value_enum, default_value = "classification")]
        head: HeadKind,
        #[arg(long, default_value_t = 2)]
        classes: usize,
        /// Task sequence length (may exceed pretraining length with ALiBi).
        #[arg(long, default_value_t = 64)]
        seq_len: usize,
        #[arg(long, default_value_t = 100)]
        steps: u64,
        #[arg(long, default_value_t = 5e-5)]
        lr: f64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        no_timing: bool,
    },
    /// Measure forward+backward throughput of the configured model.
    Bench {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Emit machine-readable JSON instead of the text table.
        #[arg(long)]
        json: bool,
    },
    /// Combine metrics CSVs into a Pareto-front CSV.
    Pareto {
        /// Metrics CSV files (run id = file stem).
        #[arg(long = "log", required = true)]
        logs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        no_timing: bool,
    },
    /// Model FLOPs Utilization from throughput and hardware peak.
    Mfu {
        #[arg(long)]
        params: f64,
        /// Observed tokens per second.
        #[arg(long)]
        tps: f64,
        #[arg(long, default_value_t = 8)]
        devices: usize,
        /// Peak FLOP/s per device.
        #[arg(long, default_value_t = 312e12)]
        peak: f64,
    },
    /// Training cost: hours x devices x hourly price, to the cent.
    Cost {
        #[arg(long)]
        hours: f64,
        #[arg(long, default_value_t = 8)]
        devices: usize,
        /// Price per device-hour in dollars.
        #[arg(long, default_value_t = 2.50)]
        price: f64,
    },
    /// Tokenize text with a vocab file; prints space-separated ids per line.
    Tokenize {
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        lowercase: bool,
        #[arg(long, conflicts_with = "file")]
        text: Option<String>,
        #[arg(long)]
        file: Option<PathBuf>,
        /// Print wordpiece strings instead of ids.
        #[arg(long)]
        pieces: bool,
    },
    /// Analytic parameter count for a preset or config.
    CountParams {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Run the invariant self-test battery.
    Check {
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help/--version are not usage errors.
            if e.use_stderr() {
                eprint!("{e}");
                std::process::exit(1);
            }
            print!("{e}");
            std::process::exit(0);
        }
    };
    match dispatch(cli) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}

fn dispatch(cli: Cli) -> Result<i32, Error> {
    match cli.command {
        Command::Pretrain {
            cfg,
            out,
            no_timing,
        } => {
            let run = resolve_config(&cfg)?;
            if cfg.dump_config {
                print!("{}", run.to_canonical_json());
                return Ok(0);
            }
            cmd_pretrain(&run, out, no_timing)
        }
        Command::Finetune {
            cfg,
            checkpoint,
            chain_from,
            task,
            vocab,
            head,
            classes,
            seq_len,
            steps,
            lr,
            out,
            no_timing,
        } => {
            let run = resolve_config(&cfg)?;
            if cfg.dump_config {
                print!("{}", run.to_canonical_json());
                return Ok(0);
            }
            cmd_finetune(
                &run,
                &checkpoint,
                chain_from.as_deref(),
                &task,
                &vocab,
                head,
                classes,
                seq_len,
                steps,
                lr,
                out,
                no_timing,
            )
        }
        Command::Bench { cfg, json } => {
            let run = resolve_config(&cfg)?;
            if cfg.dump_config {
                print!("{}", run.to_canonical_json());
                return Ok(0);
            }
            cmd_bench(&run, json)
        }
        Command::Pareto {
            logs,
            out,
            no_timing,
        } => cmd_pareto(&logs, out.as_deref(), no_timing),
        Command::Mfu {
            params,
            tps,
            devices,
            peak,
        } => {
            let frac = mfu(params as u64, tps, devices, peak)?;
            println!("{:.1}%", frac * 100.0);
            Ok(0)
        }
        Command::Cost {
            hours,
            devices,
            price,
        } => {
            println!("{}", cost_estimate(hours, devices, price)?);
            Ok(0)
        }
        Command::Tokenize {
            vocab,
            lowercase,
            text,
            file,
            pieces,
        } => cmd_tokenize(&vocab, lowercase, text, file, pieces),
        Command::CountParams { cfg } => {
            let run = resolve_config(&cfg)?;
            if cfg.dump_config {
                print!("{}", run.to_canonical_json());
                return Ok(0);
            }
            println!("{}", count_params(&run.model));
            Ok(0)
        }
        Command::Check { seed } => selfcheck::run(seed),
    }
}

fn resolve_config(args: &ConfigArgs) -> Result<RunConfig, Error> {
    let mut cfg = match &args.preset {
        Some(name) => presets::by_name(name)?,
        None => RunConfig::default(),
    };
    if args.scale == Some(Scale::Desk) {
        cfg = presets::scale_desk(&cfg);
    }
    let mut value = serde_json::to_value(&cfg).expect("config serializes");
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?;
        let overlay: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("config file {}: {e}", path.display())))?;
        deep_merge(&mut value, overlay);
    }
    for kv in &args.set {
        apply_set(&mut value, kv)?;
    }
    let mut cfg = RunConfig::from_json(&value.to_string())?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    } else if let Ok(env_seed) = std::env::var("MOSAIC_SEED") {
        cfg.seed = env_seed
            .parse()
            .map_err(|_| Error::Config(format!("MOSAIC_SEED {env_seed:?} is not an integer")))?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn deep_merge(base: &mut serde_json::Value, overlay: serde_json::Value) {
    match (base, overlay) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => deep_merge(slot, v),
                    None => {
                        b.insert(k, v); // unknown keys surface in strict parse
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn apply_set(value: &mut serde_json::Value, kv: &str) -> Result<(), Error> {
    let (path, raw) = kv
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
    let parsed: serde_json::Value =
        serde_json::from_str(raw).unwrap_or(serde_json::Value::String(raw.to_string()));
    let mut slot = value;
    for key in path.split('.') {
        slot = slot
            .as_object_mut()
            .and_then(|o| o.get_mut(key))
            .ok_or_else(|| Error::Config(format!("--set: unknown key {path:?}")))?;
    }
    *slot = parsed;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_pretrain(run: &RunConfig, out: Option<PathBuf>, no_timing: bool) -> Result<i32, Error> {
    let corpus_path = run
        .data
        .corpus
        .as_ref()
        .ok_or_else(|| Error::Config("pretrain needs data.corpus".into()))?;
    let corpus = read_documents(Path::new(corpus_path), None)?;
    let config = run.model.clone();
    let vocab = match &run.data.vocab {
        Some(path) => Vocab::load(Path::new(path))?,
        None => build_toy_vocab(&corpus, config.vocab_size.saturating_sub(5))?
            .pad_to(config.vocab_size)?,
    };
    if vocab.effective_size() != config.vocab_size {
        return Err(Error::Config(format!(
            "vocab file has {} entries after rounding but model.vocab_size is {}; set model.vocab_size accordingly",
            vocab.effective_size(),
            config.vocab_size
        )));
    }
    config.validate()?;
    let out_dir = out.or_else(|| run.train.out_dir.as_ref().map(PathBuf::from));
    let params = PretrainParams {
        total_steps: run.schedule.total_steps,
        batch_size: run.train.batch_size,
        microbatch: run.optimizer.microbatch,
        checkpoint_every: run.train.checkpoint_every,
        eval_every: run.train.eval_every,
        lr_peak: run.optimizer.lr_peak,
        warmup_fraction: run.schedule.warmup_fraction,
        final_lr_fraction: run.schedule.final_lr_fraction,
        hyper: AdamHyper {
            beta1: run.optimizer.beta1,
            beta2: run.optimizer.beta2,
            eps: run.optimizer.eps,
            weight_decay: run.optimizer.weight_decay,
        },
        grad_clip: run.optimizer.grad_clip,
        seed: run.seed,
        out_dir: out_dir.clone(),
        run_id: "pretrain".into(),
    };
    let outcome = pretrain(&config, &vocab, &corpus, &params)?;
    let csv = outcome.metrics.to_csv(!no_timing);
    if let Some(dir) = &out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.clone(),
            source: e,
        })?;
        let metrics_path = dir.join("metrics_pretrain.csv");
        fs::write(&metrics_path, &csv).map_err(|e| Error::Io {
            path: metrics_path.clone(),
            source: e,
        })?;
        if run.data.vocab.is_none() {
            vocab.save(&dir.join("vocab.txt"))?;
        }
        println!("wrote {}", metrics_path.display());
        for c in &outcome.checkpoints {
            println!("wrote {}", c.display());
        }
    } else {
        print!("{csv}");
    }
    let first = outcome.loss_trace.first().copied().unwrap_or(f64::NAN);
    let last = outcome.loss_trace.last().copied().unwrap_or(f64::NAN);
    println!(
        "pretrain done: {} steps, {} tokens, loss {first:.4} -> {last:.4}",
        outcome.loss_trace.len(),
        outcome.tokens_seen
    );
    Ok(0)
}

#[allow(clippy::too_many_arguments)]
fn cmd_finetune(
    run: &RunConfig,
    checkpoint: &Path,
    chain_from: Option<&Path>,
    task: &Path,
    vocab_path: &Path,
    head: HeadKind,
    classes: usize,
    seq_len: usize,
    steps: u64,
    lr: f64,
    out: Option<PathBuf>,
    no_timing: bool,
) -> Result<i32, Error> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let chained = chain_from.map(Checkpoint::load).transpose()?;
    let vocab = Vocab::load(vocab_path)?;
    let examples = load_task(task, &vocab, head)?;
    let head = match head {
        HeadKind::Classification => TaskHead::Classification { n_classes: classes },
        HeadKind::Regression => TaskHead::Regression,
    };
    let params = FinetuneParams {
        steps,
        batch_size: run.train.batch_size.min(examples.len().max(1)),
        lr,
        hyper: AdamHyper {
            beta1: run.optimizer.beta1,
            beta2: run.optimizer.beta2,
            eps: run.optimizer.eps,
            weight_decay: run.optimizer.weight_decay,
        },
        max_seq_len: seq_len,
        eval_every: run.train.eval_every.max(1),
        seed: run.seed,
        run_id: "finetune".into(),
    };
    let outcome = finetune(&ckpt, &examples, head, chained.as_ref(), &vocab, &params)?;
    let csv = outcome.metrics.to_csv(!no_timing);
    match out {
        Some(dir) => {
            fs::create_dir_all(&dir).map_err(|e| Error::Io {
                path: dir.clone(),
                source: e,
            })?;
            let path = dir.join("metrics_finetune.csv");
            fs::write(&path, &csv).map_err(|e| Error::Io {
                path: path.clone(),
                source: e,
            })?;
            println!("wrote {}", path.display());
        }
        None => print!("{csv}"),
    }
    println!("finetune done: final metric {:.4}", outcome.final_metric);
    Ok(0)
}

fn load_task(path: &Path, vocab: &Vocab, head: HeadKind) -> Result<Vec<TaskExample>, Error> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (label, body) = line.split_once('\t').ok_or_else(|| Error::Ingestion {
            file: path.to_path_buf(),
            line: i + 1,
            message: "expected LABEL<TAB>TEXT".into(),
        })?;
        let label: f64 = label.trim().parse().map_err(|_| Error::Ingestion {
            file: path.to_path_buf(),
            line: i + 1,
            message: format!("bad label {label:?}"),
        })?;
        if head == HeadKind::Classification && label.fract() != 0.0 {
            return Err(Error::Ingestion {
                file: path.to_path_buf(),
                line: i + 1,
                message: format!("classification label {label} is not an integer"),
            });
        }
        out.push(TaskExample {
            ids: wordpiece_tokenize(body, vocab, true),
            label,
        });
    }
    if out.is_empty() {
        return Err(Error::Data(format!("no examples in {}", path.display())));
    }
    Ok(out)
}

fn cmd_bench(run: &RunConfig, json: bool) -> Result<i32, Error> {
    let model = mosaicbert_core::layers::Model::init(&run.model, run.seed)?;
    let b = run.bench.bench_batch;
    let l = run.bench.bench_seq_len;
    // Half the rows carry 50% padding so both rates are informative.
    let lengths: Vec<usize> = (0..b)
        .map(|i| if i % 2 == 0 { l } else { l.div_ceil(2) })
        .collect();
    let sample = measure_throughput(
        &model,
        b,
        l,
        &lengths,
        run.bench.n_trials,
        run.bench.warmup_trials,
        run.bench.n_devices,
        run.bench.peak_flops_per_device,
        run.seed,
    )?;
    let n_params = count_params(&run.model);
    let flops = flops_per_token(&run.model, false, l);
    let flops_attn = flops_per_token(&run.model, true, l);
    let frac = mfu(
        n_params,
        sample.tokens_per_second,
        1,
        run.bench.peak_flops_per_device,
    )?;
    if json {
        println!(
            "{}",
            serde_json::json!({
                "params": n_params,
                "real_tokens_per_s": sample.tokens_per_second,
                "padded_tokens_per_s": sample.padded_tokens_per_second,
                "median_trial_s": sample.wallclock_s,
                "ff_mults_per_trial": sample.ff_mults_per_trial,
                "flops_per_token": flops,
                "flops_per_token_with_attention": flops_attn,
                "mfu_vs_configured_peak": frac,
            })
        );
    } else {
        println!("parameters             {n_params}");
        println!("real tokens/s          {:.1}", sample.tokens_per_second);
        println!(
            "padded tokens/s        {:.1}",
            sample.padded_tokens_per_second
        );
        println!("median trial           {:.4} s", sample.wallclock_s);
        println!("ff multiplies/trial    {}", sample.ff_mults_per_trial);
        println!("flops/token (6N)       {:.3e}", flops);
        println!("flops/token (+attn)    {:.3e}", flops_attn);
        println!("mfu vs configured peak {:.4}%", frac * 100.0);
    }
    Ok(0)
}

fn cmd_pareto(logs: &[PathBuf], out: Option<&Path>, no_timing: bool) -> Result<i32, Error> {
    let mut parsed = Vec::new();
    for path in logs {
        let text = fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?;
        let run_id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "run".into());
        parsed.push(MetricsLog::from_csv(run_id, &text)?);
    }
    let csv = pareto_emit(&parsed, !no_timing)?;
    match out {
        Some(path) => {
            fs::write(path, &csv).map_err(|e| Error::Io {
                path: path.to_path_buf(),
                source: e,
            })?;
            println!("wrote {}", path.display());
        }
        None => print!("{csv}"),
    }
    Ok(0)
}

fn cmd_tokenize(
    vocab_path: &Path,
    lowercase: bool,
    text: Option<String>,
    file: Option<PathBuf>,
    pieces: bool,
) -> Result<i32, Error> {
    let vocab = Vocab::load(vocab_path)?;
    let lines: Vec<String> = match (text, file) {
        (Some(t), None) => vec![t],
        (None, Some(f)) => {
            let body = fs::read_to_string(&f).map_err(|e| Error::Io {
                path: f.clone(),
                source: e,
            })?;
            body.lines().map(str::to_string).collect()
        }
        _ => {
            return Err(Error::Config(
                "tokenize needs exactly one of --text or --file".into(),
            ))
        }
    };
    for line in lines {
        let ids = wordpiece_tokenize(&line, &vocab, lowercase);
        if pieces {
            let ps: Vec<&str> = ids.iter().filter_map(|&i| vocab.token(i)).collect();
            println!("{}", ps.join(" "));
        } else {
            let ss: Vec<String> = ids.iter().map(|i| i.to_string()).collect();
            println!("{}", ss.join(" "));
        }
    }
    Ok(0)
}
