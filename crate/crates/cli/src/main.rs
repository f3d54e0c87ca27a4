//! Command-line front end: data generation, relation extraction, training,
//! evaluation and plotting.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use b2n3d::checkpoint::Checkpoint;
use b2n3d::config::{Ablation, Config};
use b2n3d::extract::{llm_extract_relations, parse_relations, Grammar, HttpCompletionClient};
use b2n3d::report::plot_reports;
use b2n3d::scene::{read_records, write_records, Record};
use b2n3d::synth::{generate_record_range, DatasetSummary};
use b2n3d::train::{evaluate, train, EvalReport, TrainState};
use b2n3d::{Error, Result};
use clap::{Parser, Subcommand, ValueEnum};

/// Worker-count override for every parallel section.
const WORKERS_ENV: &str = "B2N_NUM_WORKERS";
const TRAIN_FILE: &str = "train.jsonl";
const VAL_FILE: &str = "val.jsonl";

#[derive(Parser)]
#[command(name = "b2n3d", version, about = "Binary-to-n-ary relational grounding on synthetic 3D scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Source {
    Parser,
    Llm,
}

#[derive(Subcommand)]
enum Command {
    /// Writes `train.jsonl` (and `val.jsonl` when `--val-count` > 0) into `--out`.
    GenerateData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        val_count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-derives every record's relation label from its text.
    ExtractRelations {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_enum, default_value = "parser")]
        source: Source,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory with `train.jsonl` and optionally `val.jsonl`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the configured ablation.
        #[arg(long)]
        ablation: Option<Ablation>,
    },
    /// Scores a checkpoint. `--data` is a records file or a directory holding `val.jsonl`.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    Plot {
        #[arg(long, num_args = 1.., required = true)]
        reports: Vec<PathBuf>,
        #[arg(long, default_value = "plots")]
        out: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> Result<Config> {
    match path {
        Some(p) => Config::load(p),
        None => Ok(Config::default()),
    }
}

fn configure_workers() -> Result<()> {
    let Ok(raw) = std::env::var(WORKERS_ENV) else { return Ok(()) };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("{WORKERS_ENV} must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))
}

fn generate_data(config: Option<&Path>, count: usize, val_count: usize, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    std::fs::create_dir_all(out)?;
    let generated = generate_record_range(&cfg.gen, 0..(count + val_count) as u64)?;
    let summary = DatasetSummary::from_records(generated.iter().map(|(r, c)| (r, Some(c))));
    let records: Vec<Record> = generated.into_iter().map(|(r, _)| r).collect();
    let (train_set, val_set) = records.split_at(count);
    write_records(&out.join(TRAIN_FILE), train_set)?;
    if val_count > 0 {
        write_records(&out.join(VAL_FILE), val_set)?;
    }
    std::fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary).map_err(Error::from)?)?;
    println!("wrote {count} train / {val_count} val records to {}", out.display());
    println!("rn histogram: {:?}", summary.rn_histogram);
    Ok(())
}

fn extract_relations(input: &Path, source: Source, config: Option<&Path>, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let vocab = cfg.gen.vocabulary()?;
    let mut records = read_records(input)?;
    let grammar = Grammar::new(vocab.clone());
    let client = match source {
        Source::Llm => Some(HttpCompletionClient::from_env()?),
        Source::Parser => None,
    };
    let (mut agree, mut unresolved) = (0usize, 0usize);
    for r in &mut records {
        let result = match &client {
            Some(c) => llm_extract_relations(&r.utterance.text, c, &vocab)?,
            None => parse_relations(&r.utterance.text, &grammar),
        };
        agree += usize::from(result.pairs == r.utterance.pairs);
        unresolved += result.unresolved.len();
        r.utterance.pairs = result.pairs;
    }
    write_records(out, &records)?;
    println!(
        "{} records, {agree} labels unchanged, {unresolved} unresolved entity names; wrote {}",
        records.len(),
        out.display()
    );
    Ok(())
}

fn run_train(config: Option<&Path>, data: &Path, out: &Path, ablation: Option<Ablation>) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(a) = ablation {
        cfg.train.ablation = a;
    }
    let train_set = read_records(&data.join(TRAIN_FILE))?;
    let val_path = data.join(VAL_FILE);
    let val_set = if val_path.exists() { Some(read_records(&val_path)?) } else { None };
    let mut state = TrainState::new(&cfg)?;
    println!(
        "training {} on {} records ({} parameters)",
        cfg.train.ablation.name(),
        train_set.len(),
        state.params.num_scalars()
    );
    train(&mut state, &train_set, val_set.as_deref(), &cfg, |s| {
        let val = s.val_acc.map_or("-".to_string(), |v| format!("{:.4}", v));
        println!(
            "epoch {:3}  lr {:.3e}  loss {:.4}  train_acc {:.4}  val_acc {val}  ({:.1}s)",
            s.epoch, s.lr, s.loss.total, s.train_acc, s.seconds
        );
    })?;
    Checkpoint::new(cfg, state).save(out)?;
    println!("saved {}", out.display());
    Ok(())
}

fn run_eval(ckpt: &Path, data: &Path, report: &Path) -> Result<()> {
    let ck = Checkpoint::load(ckpt)?;
    let path = if data.is_dir() { data.join(VAL_FILE) } else { data.to_path_buf() };
    let records = read_records(&path)?;
    let cfg = &ck.config.train;
    let mut rep = evaluate(&ck.state.model, &ck.state.params, &records, cfg.ablation, cfg.hard_threshold)?;
    rep.history = ck.state.history.clone();
    rep.save(report)?;
    let fmt = |a: Option<f64>| a.map_or("n/a".to_string(), |v| format!("{:.4}", v));
    println!(
        "{}: overall {:.4}  hard {}  easy {}  rn>=2 {}  rn<=1 {}  ({} scenes)",
        rep.label,
        rep.overall_acc,
        fmt(rep.hard_acc),
        fmt(rep.easy_acc),
        fmt(rep.rn_ge2_acc),
        fmt(rep.rn_le1_acc),
        rep.count
    );
    Ok(())
}

fn run_plot(paths: &[PathBuf], out: &Path) -> Result<()> {
    let reports = paths.iter().map(|p| EvalReport::load(p)).collect::<Result<Vec<_>>>()?;
    let written = plot_reports(&reports, out)?;
    for f in written.files {
        println!("{}", f.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    configure_workers()?;
    match cli.command {
        Command::GenerateData { config, count, val_count, out } => {
            generate_data(config.as_deref(), count, val_count, &out)
        }
        Command::ExtractRelations { input, source, config, out } => {
            extract_relations(&input, source, config.as_deref(), &out)
        }
        Command::Train { config, data, out, ablation } => run_train(config.as_deref(), &data, &out, ablation),
        Command::Eval { ckpt, data, report } => run_eval(&ckpt, &data, &report),
        Command::Plot { reports, out } => run_plot(&reports, &out),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
