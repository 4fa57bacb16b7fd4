//! `asd`: synthetic data, features, training, scoring, evaluation, importance
//! maps and self-checks, each stage reading and writing files.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use log::info;

use asd_core::data::{generate_synthetic, load_manifest, ClassGranularity, Split, SynthConfig};
use asd_core::eval::{evaluate, DEFAULT_P};
use asd_core::explain::{export_map, MapFormat, MaskParams};
use asd_core::losses::LossKind;
use asd_core::net::{load_checkpoint, save_checkpoint};
use asd_core::pipeline::{
    embed_all, explain_clip, extract_to_dir, fit_refs, load_from_dir, scored_entries, score_tests,
    train_model, ModelMeta,
};
use asd_core::score::{read_scores, write_scores, ReferenceModel, DEFAULT_K};
use asd_core::train::TrainConfig;
use asd_core::verify::{decomposition_trials, sphere_identity_max_residual, metric_trials};

const DECOMPOSITION_TOL: f64 = 1e-6;
const IDENTITY_TOL: f64 = 1e-12;
const METRIC_TOL: f64 = 1e-9;

#[derive(Debug, Parser)]
#[command(name = "asd", version, about = "Angular-margin anomalous sound detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a synthetic corpus and its manifest.
    Synth(SynthArgs),
    /// Extract and cache features for every clip in a manifest.
    Features(FeaturesArgs),
    /// Train an embedding network on the training split.
    Train(TrainArgs),
    /// Fit reference embeddings and score the test split.
    Score(ScoreArgs),
    /// Compute AUC and pAUC per section and domain.
    Eval(EvalArgs),
    /// Write importance maps for test clips.
    Explain(ExplainArgs),
    /// Run the gradient, geometry and metric self-checks.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Output directory; receives audio/ and manifest.jsonl.
    #[arg(long)]
    out: PathBuf,
    /// TOML file overriding generator settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct FeaturesArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    features_dir: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    features_dir: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    model: PathBuf,
    /// TOML training configuration; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    loss: Option<LossKind>,
    #[arg(long, default_value = "type-section-attr")]
    classes: ClassGranularity,
    #[arg(long)]
    subclusters: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Per-epoch loss and compactness CSV; defaults to the model path with a
    /// `.trace.csv` suffix.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ScoreArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    features_dir: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Reference model to write.
    #[arg(long)]
    refs: PathBuf,
    /// Score CSV to write.
    #[arg(long)]
    scores: PathBuf,
    /// Source-domain cluster means per section.
    #[arg(long, default_value_t = DEFAULT_K)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    scores: PathBuf,
    /// JSON report to write; a CSV table is written beside it.
    #[arg(long)]
    report: PathBuf,
    /// False-positive range of the partial AUC.
    #[arg(long, default_value_t = DEFAULT_P)]
    p: f64,
}

#[derive(Debug, Args)]
struct ExplainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    refs: PathBuf,
    /// Output directory for `<clip>.csv` and `<clip>.pgm`.
    #[arg(long)]
    out: PathBuf,
    /// Clip ids to explain; defaults to every test clip.
    #[arg(long = "clip")]
    clips: Vec<String>,
    #[arg(long, default_value_t = 10_000)]
    iters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.25)]
    mask_prob: f64,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_P)]
    p: f64,
}

/// Failure before any work started, or during it.
enum Failure {
    Invalid(String),
    Runtime(String),
}

impl From<asd_core::Error> for Failure {
    fn from(e: asd_core::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type CliResult = Result<(), Failure>;

fn invalid<T>(msg: impl Into<String>) -> Result<T, Failure> {
    Err(Failure::Invalid(msg.into()))
}

fn require_file(path: &Path, what: &str) -> CliResult {
    if !path.is_file() {
        return invalid(format!("{what} {} does not exist", path.display()));
    }
    Ok(())
}

fn require_dir(path: &Path, what: &str) -> CliResult {
    if !path.is_dir() {
        return invalid(format!("{what} {} is not a directory", path.display()));
    }
    Ok(())
}

fn require_parent(path: &Path) -> CliResult {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() && !p.is_dir() => {
            invalid(format!("directory {} does not exist", p.display()))
        }
        _ => Ok(()),
    }
}

/// Runtime errors raised while loading inputs that passed the path checks
/// still count as validation failures.
fn validated<T>(r: asd_core::Result<T>) -> Result<T, Failure> {
    r.map_err(|e| Failure::Invalid(e.to_string()))
}

fn synth(a: SynthArgs) -> CliResult {
    let mut cfg = match &a.config {
        Some(p) => {
            require_file(p, "config")?;
            validated(SynthConfig::load(p))?
        }
        None => SynthConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    validated(cfg.validate())?;
    let records = generate_synthetic(&cfg, &a.out)?;
    println!("wrote {} clips to {}", records.len(), a.out.display());
    Ok(())
}

fn features(a: FeaturesArgs) -> CliResult {
    require_file(&a.manifest, "manifest")?;
    let records = validated(load_manifest(&a.manifest))?;
    extract_to_dir(&records, &a.features_dir)?;
    println!("cached features for {} clips in {}", records.len(), a.features_dir.display());
    Ok(())
}

fn train(a: TrainArgs) -> CliResult {
    require_file(&a.manifest, "manifest")?;
    require_dir(&a.features_dir, "features dir")?;
    require_parent(&a.model)?;
    let mut cfg = match &a.config {
        Some(p) => {
            require_file(p, "config")?;
            validated(TrainConfig::load(p))?
        }
        None => TrainConfig::default(),
    };
    if let Some(v) = a.loss {
        cfg.loss = v;
    }
    if let Some(v) = a.subclusters {
        cfg.subclusters = v;
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.batch {
        cfg.batch_size = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    validated(cfg.validate())?;
    let records = validated(load_manifest(&a.manifest))?;
    let feats = load_from_dir(&records, &a.features_dir)?;
    let started = Instant::now();
    let (net, meta) = train_model(&records, &feats, a.classes, &cfg)?;
    info!("trained in {:.1?}", started.elapsed());
    save_checkpoint(&a.model, &net, &meta)?;
    let trace = a.trace.unwrap_or_else(|| a.model.with_extension("trace.csv"));
    meta.trace.save_csv(&trace)?;
    if let Some(last) = meta.trace.records.last() {
        println!(
            "{} classes, final loss {:.5}, intra {:.4}",
            meta.classes.len(),
            last.loss,
            last.intra
        );
    }
    Ok(())
}

fn score(a: ScoreArgs) -> CliResult {
    require_file(&a.manifest, "manifest")?;
    require_dir(&a.features_dir, "features dir")?;
    require_file(&a.model, "model")?;
    require_parent(&a.refs)?;
    require_parent(&a.scores)?;
    if a.k == 0 {
        return invalid("--k must be >= 1");
    }
    let records = validated(load_manifest(&a.manifest))?;
    let (net, _meta): (_, ModelMeta) = validated(load_checkpoint(&a.model))?;
    let feats = load_from_dir(&records, &a.features_dir)?;
    let embs = embed_all(&net, &feats)?;
    let refs = fit_refs(&records, &embs, a.k, a.seed)?;
    refs.save(&a.refs)?;
    let rows = score_tests(&records, &embs, &refs)?;
    write_scores(&a.scores, &rows)?;
    println!("scored {} test clips", rows.len());
    Ok(())
}

fn eval(a: EvalArgs) -> CliResult {
    require_file(&a.manifest, "manifest")?;
    require_file(&a.scores, "scores")?;
    require_parent(&a.report)?;
    if !(a.p > 0.0 && a.p <= 1.0) {
        return invalid(format!("--p must lie in (0, 1], got {}", a.p));
    }
    let records = validated(load_manifest(&a.manifest))?;
    let scores = validated(read_scores(&a.scores))?;
    let report = evaluate(&validated(scored_entries(&records, &scores))?, a.p)?;
    report.save(&a.report, Some(&a.report.with_extension("csv")))?;
    let h = &report.hmean;
    println!(
        "hmean AUC {} pAUC {} over {} sections",
        fmt_opt(h.both_auc),
        fmt_opt(h.both_pauc),
        report.sections.len()
    );
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |x| format!("{x:.4}"))
}

fn explain(a: ExplainArgs) -> CliResult {
    require_file(&a.manifest, "manifest")?;
    require_file(&a.model, "model")?;
    require_file(&a.refs, "refs")?;
    let params = MaskParams {
        mask_prob: a.mask_prob,
        iters: a.iters,
        seed: a.seed,
        ..MaskParams::default()
    };
    validated(params.validate())?;
    let records = validated(load_manifest(&a.manifest))?;
    let chosen: Vec<_> = if a.clips.is_empty() {
        records.iter().filter(|r| r.split == Split::Test).collect()
    } else {
        let mut out = Vec::new();
        for id in &a.clips {
            match records.iter().find(|r| &r.clip_id == id) {
                Some(r) => out.push(r),
                None => return invalid(format!("clip '{id}' is not in the manifest")),
            }
        }
        out
    };
    let (net, _meta): (_, ModelMeta) = validated(load_checkpoint(&a.model))?;
    let refs = validated(ReferenceModel::load(&a.refs))?;
    std::fs::create_dir_all(&a.out)
        .map_err(|e| Failure::Runtime(format!("{}: {e}", a.out.display())))?;
    for r in chosen {
        let map = explain_clip(&net, &refs, r, &params)?;
        for format in [MapFormat::CsvGrid, MapFormat::Pgm] {
            let path = a.out.join(format!("{}.{}", r.clip_id, format.extension()));
            export_map(&map, &path, format)?;
        }
        println!("{}", r.clip_id);
    }
    Ok(())
}

fn verify(a: VerifyArgs) -> CliResult {
    if a.trials == 0 {
        return invalid("--trials must be >= 1");
    }
    if !(a.p > 0.0 && a.p <= 1.0) {
        return invalid(format!("--p must lie in (0, 1], got {}", a.p));
    }
    let d = decomposition_trials(a.trials, a.seed)?;
    let identity = sphere_identity_max_residual(1000, &[2, 64, 256], a.seed);
    let m = metric_trials(a.trials, a.p, a.seed)?;
    let checks = [
        ("decomposition", d.max_decomposition, DECOMPOSITION_TOL),
        ("single-center", d.max_single_center, DECOMPOSITION_TOL),
        ("cosine-distance", identity, IDENTITY_TOL),
        ("auc", m.max_auc_error, METRIC_TOL),
        ("pauc", m.max_pauc_error, METRIC_TOL),
        ("pauc-full-range", m.max_full_range_gap, IDENTITY_TOL),
    ];
    let mut ok = true;
    for (name, value, tol) in checks {
        let pass = value <= tol;
        ok &= pass;
        println!("{name:<16} max {value:.3e} (tol {tol:.0e}) {}", if pass { "ok" } else { "FAILED" });
    }
    if ok {
        Ok(())
    } else {
        Err(Failure::Runtime("self-check exceeded its tolerance".into()))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Features(a) => features(a),
        Command::Train(a) => train(a),
        Command::Score(a) => score(a),
        Command::Eval(a) => eval(a),
        Command::Explain(a) => explain(a),
        Command::Verify(a) => verify(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
