//! `metadan`: synthesize pages, train, decode, evaluate and benchmark.

mod config;

use std::fmt;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use metadan_core::metrics::{cer, check_alphabet, evaluate_jobs, wer, Aggregate};
use metadan_core::synthdoc::{make_dataset, Manifest, Split, MANIFEST_FILE};
use metadan_core::train::{transfer_weights, Checkpoint, TrainSample, Trainer, Variant};
use metadan_core::{decode::decode, EvalReport, GrayImage, Model, Vocab};
use serde::Serialize;

use config::{parse_strategy, DecodeSettings, PolicyKind, RunConfig};

/// Error with a chosen process exit code.
#[derive(Debug)]
pub struct Exit {
    code: u8,
    message: String,
}

impl Exit {
    pub fn config(message: String) -> Self {
        Self { code: 2, message }
    }

    pub fn mismatch(message: String) -> Self {
        Self { code: 4, message }
    }
}

impl fmt::Display for Exit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Exit {}

fn exit_code(err: &anyhow::Error) -> u8 {
    use metadan_core::Error as E;
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Exit>() {
            return e.code;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Divergence { .. } => 3,
                E::VocabMismatch(_)
                | E::UnknownChar { .. }
                | E::InvalidToken { .. }
                | E::Checkpoint(_) => 4,
                _ => 2,
            };
        }
    }
    2
}

#[derive(Parser)]
#[command(
    name = "metadan",
    version,
    about = "Page-level text recognition with multi-token and windowed-query decoding"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset (PGM pages plus manifest.json).
    Synth(SynthArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Recognize one page image.
    Decode(DecodeArgs),
    /// Score a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Compare several checkpoints/strategies on one split.
    Bench(BenchArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// JSON run configuration (unknown keys are rejected).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    train: Option<usize>,
    #[arg(long)]
    val: Option<usize>,
    #[arg(long)]
    test: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory; without it pages are only synthesized on the fly.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint directory to write.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    w: Option<usize>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Copy every matching tensor from this checkpoint before training.
    #[arg(long)]
    init_from: Option<PathBuf>,
    /// Continue a checkpoint, keeping its step counter.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// JSON-lines log file (default: stdout).
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args, Clone, Default)]
struct StrategyArgs {
    /// Decoding variant (default: the checkpoint's training variant).
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    w: Option<usize>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long, value_enum)]
    policy: Option<PolicyKind>,
    /// Heads kept by the static policy (default m).
    #[arg(long)]
    k: Option<usize>,
    /// Confidence threshold of the dynamic policy (default 0.9).
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    max_tokens: Option<usize>,
    #[arg(long)]
    max_iterations: Option<usize>,
}

impl StrategyArgs {
    fn apply(&self, s: &mut DecodeSettings) {
        macro_rules! set {
            ($($f:ident),*) => { $( if self.$f.is_some() { s.$f = self.$f; } )* };
        }
        set!(variant, w, m, policy, k, tau);
        if let Some(v) = self.max_tokens {
            s.max_tokens = v;
        }
        if let Some(v) = self.max_iterations {
            s.max_iterations = v;
        }
    }
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Page image (binary PGM).
    #[arg(long)]
    image: PathBuf,
    #[command(flatten)]
    strategy: StrategyArgs,
    /// Write the decode trace as JSON.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Ground truth; prints CER/WER to stderr.
    #[arg(long)]
    text: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: Split,
    #[command(flatten)]
    strategy: StrategyArgs,
    /// Write the JSON report here (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write per-sample rows as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Worker threads; 1 keeps per-sample timings undisturbed.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: Split,
    /// NAME=CHECKPOINT[@STRATEGY], e.g. `meta5=ckpt/meta@meta,w=5,m=5,k=5`; repeatable.
    #[arg(long = "entry", required = true)]
    entries: Vec<String>,
    /// Entry the speedups are measured against (default: `dan` if present, else the first).
    #[arg(long)]
    baseline: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long)]
    max_tokens: Option<usize>,
    #[arg(long)]
    max_iterations: Option<usize>,
}

fn required(
    flag: Option<PathBuf>,
    from_config: Option<PathBuf>,
    name: &str,
) -> Result<PathBuf, Exit> {
    flag.or(from_config)
        .ok_or_else(|| Exit::config(format!("missing --{name}")))
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let json = serde_json::to_string_pretty(value)?;
    fs::write(path, json + "\n").with_context(|| format!("writing {}", path.display()))
}

fn cmd_synth(args: SynthArgs) -> anyhow::Result<()> {
    let mut cfg = RunConfig::load(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.synth.seed = seed;
    }
    let counts = &mut cfg.splits;
    counts.train = args.train.unwrap_or(counts.train);
    counts.val = args.val.unwrap_or(counts.val);
    counts.test = args.test.unwrap_or(counts.test);
    let out = required(args.out, cfg.paths.data, "out")?;
    let manifest = make_dataset(&cfg.synth, cfg.splits, &out)?;
    println!("{}", out.join(MANIFEST_FILE).display());
    eprintln!("{} pages", manifest.samples.len());
    Ok(())
}

fn load_split(
    dir: &Path,
    manifest: &Manifest,
    split: Split,
    vocab: &Vocab,
) -> anyhow::Result<Vec<TrainSample>> {
    manifest
        .split(split)
        .map(|s| {
            let image = s.load_image(dir)?;
            Ok(TrainSample::new(
                vocab,
                image,
                &s.text,
                s.lines.iter().map(|l| l.text.as_str()),
            )?)
        })
        .collect()
}

fn cmd_train(args: TrainArgs) -> anyhow::Result<()> {
    let mut cfg = RunConfig::load(args.config.as_deref())?;
    let resumed = args.resume.as_deref().map(Checkpoint::load).transpose()?;
    if let Some(c) = &resumed {
        cfg.train = c.train.clone();
        if let Some(s) = &c.synth {
            cfg.synth = s.clone();
        }
    }
    let t = &mut cfg.train;
    if let Some(v) = args.variant {
        t.variant = v;
    }
    t.window = args.w.unwrap_or(t.window);
    t.heads = args.m.unwrap_or(t.heads);
    t.steps = args.steps.unwrap_or(t.steps);
    t.batch_size = args.batch.unwrap_or(t.batch_size);
    t.lr = args.lr.unwrap_or(t.lr);
    t.seed = args.seed.unwrap_or(t.seed);
    cfg.train.validate()?;
    let out = required(args.out, cfg.paths.checkpoint.clone(), "out")?;
    let data = args.data.or(cfg.paths.data.clone());
    let init_from = args.init_from.or(cfg.paths.init_from.clone());
    let log_path = args.log.or(cfg.paths.log.clone());

    let manifest = data.as_deref().map(Manifest::load).transpose()?;
    let texts: Vec<&str> = manifest
        .iter()
        .flat_map(|m| m.samples.iter().map(|s| s.text.as_str()))
        .collect();

    let source = init_from.as_deref().map(Checkpoint::load).transpose()?;
    let vocab = match (&resumed, &source) {
        (Some(c), _) | (None, Some(c)) => c.vocab.clone(),
        (None, None) => {
            let mut corpus = vec![cfg.synth.alphabet_text()];
            corpus.extend(texts.iter().map(|s| s.to_string()));
            Vocab::build(&corpus)?
        }
    };
    check_alphabet(&vocab, texts.iter().copied())?;

    let (model, start_step) = match resumed {
        Some(c) => {
            if c.model.num_heads() < cfg.train.heads {
                return Err(Exit::mismatch(format!(
                    "checkpoint has {} heads, training needs {}",
                    c.model.num_heads(),
                    cfg.train.heads
                ))
                .into());
            }
            (c.model, c.step)
        }
        None => {
            let mut mc = cfg.model.clone();
            mc.num_classes = vocab.num_classes();
            mc.heads = cfg.train.heads;
            let mut model = Model::new(mc, cfg.train.seed)?;
            if let Some(src) = &source {
                let copied = transfer_weights(&mut model, src.model.params());
                eprintln!(
                    "initialized {} of {} tensors from {}",
                    copied.len(),
                    model.params().tensors().len(),
                    init_from.as_ref().unwrap().display()
                );
            }
            (model, 0)
        }
    };

    let dataset = match (&manifest, &data) {
        (Some(m), Some(dir)) => load_split(dir, m, Split::Train, &vocab)?,
        _ => Vec::new(),
    };
    let synth =
        (dataset.is_empty() || cfg.train.synthetic_fraction > 0.0).then(|| cfg.synth.clone());
    let mut trainer = Trainer::new(model, vocab, cfg.train.clone(), synth, dataset)?;
    trainer.resume_at(start_step);

    let mut log: Box<dyn Write> = match &log_path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(io::stdout().lock()),
    };
    trainer.run(|entry| {
        let line = serde_json::to_string(entry).expect("log entry serializes");
        writeln!(log, "{line}")
            .map_err(|e| metadan_core::Error::InvalidArgument(format!("writing log: {e}")))
    })?;
    log.flush()?;
    trainer.checkpoint().save(&out)?;
    eprintln!(
        "checkpoint written to {} at step {}",
        out.display(),
        trainer.step()
    );
    Ok(())
}

fn load_checkpoint(flag: Option<PathBuf>, cfg: &RunConfig) -> anyhow::Result<Checkpoint> {
    let path = required(flag, cfg.paths.checkpoint.clone(), "ckpt")?;
    Ok(Checkpoint::load(&path)?)
}

fn cmd_decode(args: DecodeArgs) -> anyhow::Result<()> {
    let cfg = RunConfig::load(args.config.as_deref())?;
    let ckpt = load_checkpoint(args.ckpt, &cfg)?;
    let mut settings = cfg.decode.clone();
    args.strategy.apply(&mut settings);
    let strategy = settings.resolve(&ckpt.train, ckpt.model.num_heads(), &ckpt.vocab)?;
    if let Some(gt) = &args.text {
        check_alphabet(&ckpt.vocab, [gt.as_str()])?;
    }
    let image = GrayImage::load_pgm(&args.image)?;
    let trace = decode(&ckpt.model, &image, &strategy, &settings.caps())?;
    let text = ckpt.vocab.decode(&trace.emitted)?;
    println!("{text}");
    eprintln!(
        "{strategy}: {} iterations, {:.3}s, stopped by {:?}",
        trace.iterations, trace.wall_time, trace.stopped_by
    );
    if let Some(gt) = &args.text {
        eprintln!("cer {:.4} wer {:.4}", cer(gt, &text)?, wer(gt, &text)?);
    }
    if let Some(path) = &args.trace {
        write_json(path, &trace)?;
    }
    Ok(())
}

fn load_dataset(flag: Option<PathBuf>, cfg: &RunConfig) -> anyhow::Result<(PathBuf, Manifest)> {
    let dir = required(flag, cfg.paths.data.clone(), "data")?;
    let manifest = Manifest::load(&dir)?;
    Ok((dir, manifest))
}

fn print_table(rows: &[(String, String, Aggregate)]) {
    println!(
        "{:<16} {:<28} {:>8} {:>8} {:>10} {:>10} {:>7}",
        "name", "strategy", "cer %", "wer %", "time s", "iters", "pages"
    );
    for (name, strategy, a) in rows {
        println!(
            "{:<16} {:<28} {:>8.2} {:>8.2} {:>10.4} {:>10.1} {:>7}",
            name,
            strategy,
            a.cer_percent,
            a.wer_percent,
            a.mean_time_s,
            a.mean_iterations,
            a.total_samples
        );
    }
}

fn cmd_eval(args: EvalArgs) -> anyhow::Result<()> {
    let cfg = RunConfig::load(args.config.as_deref())?;
    let ckpt = load_checkpoint(args.ckpt, &cfg)?;
    let (dir, manifest) = load_dataset(args.data, &cfg)?;
    let mut settings = cfg.decode.clone();
    args.strategy.apply(&mut settings);
    let strategy = settings.resolve(&ckpt.train, ckpt.model.num_heads(), &ckpt.vocab)?;
    let report = evaluate_jobs(
        &ckpt.model,
        &ckpt.vocab,
        &manifest.samples,
        Some(args.split),
        &strategy,
        &settings.caps(),
        &dir,
        args.jobs,
    )?;
    if let Some(path) = &args.csv {
        fs::write(path, report.to_csv()).with_context(|| format!("writing {}", path.display()))?;
    }
    match &args.out {
        Some(path) => {
            write_json(path, &report)?;
            print_table(&[(
                "eval".into(),
                report.strategy.clone(),
                report.aggregate.clone(),
            )]);
        }
        None => println!("{}", serde_json::to_string_pretty(&report)?),
    }
    Ok(())
}

#[derive(Serialize)]
struct BenchRow {
    name: String,
    checkpoint: PathBuf,
    report: EvalReport,
}

#[derive(Serialize)]
struct Speedup {
    name: String,
    /// Baseline mean time over this entry's mean time.
    time: f64,
    /// Baseline mean iterations over this entry's mean iterations.
    iterations: f64,
}

#[derive(Serialize)]
struct BenchReport {
    split: Split,
    baseline: Option<String>,
    rows: Vec<BenchRow>,
    skipped: Vec<String>,
    speedups: Vec<Speedup>,
}

fn cmd_bench(args: BenchArgs) -> anyhow::Result<()> {
    let cfg = RunConfig::load(args.config.as_deref())?;
    let (dir, manifest) = load_dataset(args.data, &cfg)?;
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for entry in &args.entries {
        let (name, rest) = entry.split_once('=').ok_or_else(|| {
            Exit::config(format!("entry {entry:?} is not NAME=CHECKPOINT[@STRATEGY]"))
        })?;
        let (path, desc) = match rest.split_once('@') {
            Some((p, s)) => (PathBuf::from(p), Some(s)),
            None => (PathBuf::from(rest), None),
        };
        if !path.join(metadan_core::train::CHECKPOINT_JSON).exists() {
            eprintln!("skipping {name}: no checkpoint at {}", path.display());
            skipped.push(name.to_string());
            continue;
        }
        let ckpt = Checkpoint::load(&path)?;
        let mut settings = match desc {
            Some(s) => parse_strategy(s).map_err(|e| Exit::config(format!("entry {name}: {e}")))?,
            None => cfg.decode.clone(),
        };
        settings.max_tokens = args.max_tokens.unwrap_or(cfg.decode.max_tokens);
        settings.max_iterations = args.max_iterations.unwrap_or(cfg.decode.max_iterations);
        let strategy = settings.resolve(&ckpt.train, ckpt.model.num_heads(), &ckpt.vocab)?;
        let report = evaluate_jobs(
            &ckpt.model,
            &ckpt.vocab,
            &manifest.samples,
            Some(args.split),
            &strategy,
            &settings.caps(),
            &dir,
            args.jobs,
        )?;
        rows.push(BenchRow {
            name: name.to_string(),
            checkpoint: path,
            report,
        });
    }
    let baseline = args
        .baseline
        .clone()
        .or_else(|| {
            rows.iter()
                .find(|r| r.name == "dan")
                .map(|r| r.name.clone())
        })
        .or_else(|| rows.first().map(|r| r.name.clone()));
    let base = baseline
        .as_ref()
        .and_then(|b| rows.iter().find(|r| &r.name == b));
    if let (Some(b), None) = (&args.baseline, base) {
        return Err(
            Exit::config(format!("baseline {b:?} is not among the evaluated entries")).into(),
        );
    }
    let speedups = match base {
        Some(base) => rows
            .iter()
            .map(|r| Speedup {
                name: r.name.clone(),
                time: base.report.aggregate.mean_time_s / r.report.aggregate.mean_time_s,
                iterations: base.report.aggregate.mean_iterations
                    / r.report.aggregate.mean_iterations,
            })
            .collect(),
        None => Vec::new(),
    };
    let table: Vec<_> = rows
        .iter()
        .map(|r| {
            (
                r.name.clone(),
                r.report.strategy.clone(),
                r.report.aggregate.clone(),
            )
        })
        .collect();
    print_table(&table);
    for s in &speedups {
        println!(
            "speedup {:<16} time {:>6.2}x  iterations {:>6.2}x",
            s.name, s.time, s.iterations
        );
    }
    let report = BenchReport {
        split: args.split,
        baseline,
        rows,
        skipped,
        speedups,
    };
    if let Some(path) = &args.out {
        write_json(path, &report)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Decode(a) => cmd_decode(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Bench(a) => cmd_bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
