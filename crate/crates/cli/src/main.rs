use std::fs::File;
use std::io::{BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use nextact::checkpoint::{load_checkpoint, save_checkpoint, ModelBundle};
use nextact::features::{ContextMask, Sample, SampleCache};
use nextact::harness::{export_timeline, run_ablation, FrequencyBaseline};
use nextact::metrics::EvalReport;
use nextact::nn::{grad_check, random_problem, FocalLossConfig, DEFAULT_EMBED_DIM};
use nextact::service::DecisionService;
use nextact::synth::{generate_dataset, Corpus, ScenarioConfig};
use nextact::training::{self, LabeledSet, TrainConfig};

#[derive(Parser)]
#[command(name = "nextact", version, about = "Next-minute activity prediction for resuscitation logs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus from a scenario.
    Generate(GenerateArgs),
    /// Split a corpus, fit the normalizer and write a sample cache.
    Preprocess(PreprocessArgs),
    /// Train a model on a sample cache.
    Train(TrainArgs),
    /// Move per-label thresholds to their validation F1 optimum.
    Calibrate(ModelCacheArgs),
    /// Score a calibrated model on the test split.
    Evaluate(EvaluateArgs),
    /// Train and evaluate every context combination.
    Ablate(AblateArgs),
    /// Per-minute predicted and true activities for one case.
    Timeline(TimelineArgs),
    /// Serve prediction sessions over HTTP.
    Serve(ServeArgs),
    /// Compare backpropagation against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Scenario file; the shipped default when omitted.
    #[arg(long)]
    scenario: Option<PathBuf>,
    #[arg(long, default_value_t = 201)]
    cases: usize,
    /// Defaults to the scenario's seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PreprocessArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value = "full")]
    mask: ContextMask,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    k: usize,
    /// train:validation:test
    #[arg(long, default_value = "161:20:20", value_parser = parse_ratio)]
    ratio: (u32, u32, u32),
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct Hyper {
    /// Defaults to the cache's mask.
    #[arg(long)]
    mask: Option<ContextMask>,
    #[arg(long, default_value_t = DEFAULT_EMBED_DIM)]
    embed_dim: usize,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    #[arg(long, default_value_t = 0.0001)]
    lr: f64,
    #[arg(long, default_value_t = 2.0)]
    gamma: f64,
    #[arg(long, default_value_t = 10)]
    patience: usize,
    #[arg(long, default_value_t = 200)]
    max_epochs: usize,
    /// Hidden widths, comma separated.
    #[arg(long, default_value = "256,128", value_delimiter = ',')]
    hidden: Vec<usize>,
    /// Defaults to the cache's seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl Hyper {
    fn config(&self, cache: &SampleCache) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch,
            learning_rate: self.lr,
            gamma: self.gamma,
            max_epochs: self.max_epochs,
            patience: self.patience,
            seed: self.seed.unwrap_or(cache.seed),
            mask: self.mask.unwrap_or(cache.mask),
            hidden: self.hidden.clone(),
            embed_dim: self.embed_dim,
            ..TrainConfig::default()
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    cache: PathBuf,
    #[command(flatten)]
    hyper: Hyper,
    /// Checkpoint path; the epoch log goes next to it as `.train.jsonl`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ModelCacheArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    cache: PathBuf,
    /// Output checkpoint; overwrites `--model` when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    cache: PathBuf,
    /// Report path (JSON); a plain table is written alongside as `.txt`.
    #[arg(long)]
    out: PathBuf,
    /// Store per-label test F1 in the checkpoint for timeline filtering.
    #[arg(long)]
    record: bool,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    cache: PathBuf,
    #[command(flatten)]
    hyper: Hyper,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TimelineArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    case: String,
    #[arg(long, default_value_t = 0.5)]
    cutoff: f64,
    /// Evaluation report whose per-label F1 filters activities; the
    /// checkpoint's recorded test F1 otherwise.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    /// Checkpoints to load; ids are the file stems.
    #[arg(long, required = true)]
    model: Vec<PathBuf>,
    /// Corpus directory whose cases can be replayed.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: SocketAddr,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    h: f64,
    #[arg(long, default_value_t = 200)]
    coords: usize,
    #[arg(long, default_value_t = 2.0)]
    gamma: f64,
}

fn parse_ratio(s: &str) -> Result<(u32, u32, u32), String> {
    let parts: Vec<u32> = s
        .split(':')
        .map(|p| p.trim().parse::<u32>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<Result<_, _>>()?;
    match parts[..] {
        [a, b, c] => Ok((a, b, c)),
        _ => Err(format!("expected three parts like 161:20:20, got `{s}`")),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Writes `value` as JSON at `path` and `table` at `path` with a `.txt`
/// extension, and prints the table.
fn write_report(path: &Path, value: &impl Serialize, table: &str) -> Result<()> {
    write_json(path, value)?;
    let txt = path.with_extension("txt");
    std::fs::write(&txt, table).with_context(|| format!("writing {}", txt.display()))?;
    print!("{table}");
    Ok(())
}

fn load_cache(path: &Path) -> Result<SampleCache> {
    SampleCache::load(path).with_context(|| format!("loading cache {}", path.display()))
}

fn labeled(samples: &[&Sample], mask: ContextMask) -> Result<LabeledSet> {
    if samples.is_empty() {
        bail!("split is empty");
    }
    Ok(LabeledSet::from_samples(samples, mask)?)
}

fn generate(args: GenerateArgs) -> Result<()> {
    let scenario = match &args.scenario {
        Some(p) => ScenarioConfig::load(p)?,
        None => ScenarioConfig::default_scenario(),
    };
    let seed = args.seed.unwrap_or(scenario.seed);
    let corpus = generate_dataset(&scenario, args.cases, seed)?;
    corpus.save(&args.out)?;
    let minutes: u32 = corpus.cases.iter().map(|c| c.minutes()).sum();
    println!(
        "{} cases, {} case-minutes, {} activities -> {}",
        corpus.cases.len(),
        minutes,
        corpus.manifest.catalog.len(),
        args.out.display()
    );
    Ok(())
}

fn preprocess(args: PreprocessArgs) -> Result<()> {
    let corpus = Corpus::load(&args.corpus)?;
    let cache = SampleCache::build(&corpus.manifest, &corpus.cases, args.ratio, args.k, args.seed, args.mask)?;
    cache.save(&args.out)?;
    println!(
        "{} samples (train {}, validation {}, test {}), hash {}",
        cache.samples.len(),
        cache.train().len(),
        cache.validation().len(),
        cache.test().len(),
        cache.hash()?
    );
    Ok(())
}

fn train(args: TrainArgs) -> Result<()> {
    let cache = load_cache(&args.cache)?;
    let cfg = args.hyper.config(&cache);
    let train = labeled(&cache.train(), cfg.mask)?;
    let val = labeled(&cache.validation(), cfg.mask)?;
    let layout = cache.pipeline.layout(cfg.mask, cfg.embed_dim);
    let log_path = args.out.with_extension("train.jsonl");
    let mut log = BufWriter::new(File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?);
    let mut log_err = None;
    let trained = training::train(&train, &val, layout, &cfg, |record| {
        log::info!(
            "epoch {} train {:.5} val {:.5} val wF1 {:.3}",
            record.epoch,
            record.train_loss,
            record.val_loss,
            record.val_weighted_f1
        );
        let line = serde_json::to_string(record).expect("record serializes");
        if let Err(e) = writeln!(log, "{line}") {
            log_err.get_or_insert(e);
        }
    })?;
    log.flush()?;
    if let Some(e) = log_err {
        return Err(e).context("writing training log");
    }
    let bundle = ModelBundle {
        model: trained.model,
        pipeline: cache.pipeline.clone(),
        train_config: cfg,
        focal: trained.focal,
        optimizer: trained.optimizer,
        thresholds: None,
        test_label_f1: None,
    };
    save_checkpoint(&bundle, &args.out)?;
    println!(
        "{} epochs, best {:?} -> {}",
        trained.history.len(),
        trained.history.best_epoch,
        args.out.display()
    );
    Ok(())
}

fn calibrate(args: ModelCacheArgs) -> Result<()> {
    let cache = load_cache(&args.cache)?;
    let mut bundle = load_checkpoint(&args.model, Some(&cache.pipeline.manifest.catalog))?;
    let val = labeled(&cache.validation(), bundle.mask())?;
    let thresholds = training::calibrate_thresholds(&bundle.model, &val)?;
    for (label, (tau, f1)) in bundle
        .catalog()
        .labels()
        .iter()
        .zip(thresholds.thresholds.iter().zip(&thresholds.validation_f1))
    {
        log::debug!("{label}: threshold {tau:.4}, validation F1 {f1:.3}");
    }
    bundle.thresholds = Some(thresholds);
    let out = args.out.unwrap_or(args.model);
    save_checkpoint(&bundle, &out)?;
    println!("calibrated {} labels -> {}", bundle.catalog().len(), out.display());
    Ok(())
}

fn evaluate(args: EvaluateArgs) -> Result<()> {
    let cache = load_cache(&args.cache)?;
    let mut bundle = load_checkpoint(&args.model, Some(&cache.pipeline.manifest.catalog))?;
    let Some(thresholds) = &bundle.thresholds else {
        bail!("model is not calibrated; run `nextact calibrate` first");
    };
    let test = labeled(&cache.test(), bundle.mask())?;
    let report = training::evaluate(&bundle.model, thresholds, &test, bundle.catalog())?;
    write_report(&args.out, &report, &report.render_table())?;
    if args.record {
        bundle.test_label_f1 = Some(report.label_f1());
        save_checkpoint(&bundle, &args.model)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct AblationOutput {
    ablation: nextact::harness::AblationReport,
    baseline: EvalReport,
}

fn ablate(args: AblateArgs) -> Result<()> {
    let cache = load_cache(&args.cache)?;
    let base = args.hyper.config(&cache);
    let baseline = FrequencyBaseline::fit(&cache.train())?.evaluate(&cache.test(), &cache.pipeline.manifest.catalog)?;
    let report = run_ablation(&cache, &base, |row, _| {
        log::info!(
            "{}: {:?} {:?} ({:.1}s)",
            row.description,
            row.weighted_f1,
            row.samples_f1,
            row.train_seconds
        );
    })?;
    let table = format!(
        "{}\nfrequency baseline: weighted F1 {:.3}, samples F1 {:.3}\n",
        report.render_table(),
        baseline.weighted_f1,
        baseline.samples_f1
    );
    write_report(
        &args.out.join("ablation.json"),
        &AblationOutput {
            ablation: report,
            baseline,
        },
        &table,
    )
}

fn timeline(args: TimelineArgs) -> Result<()> {
    let corpus = Corpus::load(&args.corpus)?;
    let bundle = load_checkpoint(&args.model, Some(&corpus.manifest.catalog))?;
    let label_f1 = match &args.report {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str::<EvalReport>(&text)?.label_f1()
        }
        None => match &bundle.test_label_f1 {
            Some(f1) => f1.clone(),
            None => bail!("no per-label F1: pass --report or evaluate with --record"),
        },
    };
    let export = export_timeline(&corpus.cases, &args.case, &bundle, &label_f1, args.cutoff)?;
    match &args.out {
        Some(out) => write_report(out, &export, &export.render_table()),
        None => {
            print!("{}", export.render_table());
            Ok(())
        }
    }
}

fn serve(args: ServeArgs) -> Result<()> {
    let service = DecisionService::new();
    for path in &args.model {
        let id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "model".into());
        service.load_model(path, Some(id.clone()))?;
        println!("loaded model `{id}` from {}", path.display());
    }
    if let Some(dir) = &args.corpus {
        let corpus = Corpus::load(dir)?;
        println!("{} cases available for replay", corpus.cases.len());
        service.add_cases(corpus.cases);
    }
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(nextact_server::serve(args.addr, Arc::new(service)))?;
    Ok(())
}

fn gradcheck(args: GradcheckArgs) -> Result<()> {
    let (model, batch, targets) = random_problem(&[8, 4], 4, args.seed);
    let cfg = FocalLossConfig::uniform(5, 0.5, args.gamma);
    let started = std::time::Instant::now();
    let report = grad_check(&model, &batch, &targets, &cfg, args.h, args.coords, args.seed)?;
    println!(
        "{} coordinates, max relative error {:.3e} at {}[{}], {:.2}s",
        report.checked,
        report.max_rel_error,
        report.worst.0,
        report.worst.1,
        started.elapsed().as_secs_f64()
    );
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Generate(a) => generate(a),
        Command::Preprocess(a) => preprocess(a),
        Command::Train(a) => train(a),
        Command::Calibrate(a) => calibrate(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Ablate(a) => ablate(a),
        Command::Timeline(a) => timeline(a),
        Command::Serve(a) => serve(a),
        Command::Gradcheck(a) => gradcheck(a),
    }
}
