use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use qdtune::calibrate::{self, ThresholdSet};
use qdtune::detector::{
    self, Detection, ModelDetector, ModelKind, ModelSpec, OracleDetector, PatchDetector, TrainedDetector,
};
use qdtune::diagram::{self, extract_patches, DatasetProfile, PatchSample, StabilityDiagram};
use qdtune::exec::{self, Execution};
use qdtune::explorer::{self, ExplorerOptions, TuningOutcome, TuningPriors};
use qdtune::geometry::Point;
use qdtune::harness::{self, ExperimentConfig};
use qdtune::rng::{child_rng, derive};
use qdtune::synthgen;

#[derive(Parser)]
#[command(name = "qdtune", version, about = "Uncertainty-aware single-dot charge autotuning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic stability diagrams.
    Gen(GenArgs),
    /// Train a line detector on every diagram of a directory.
    Train(TrainArgs),
    /// Fit confidence thresholds on validation diagrams.
    Calibrate(CalibrateArgs),
    /// Run one tuning episode and print the outcome as JSON.
    Tune(TuneArgs),
    /// Run an experiment described by a config file.
    Bench(BenchArgs),
    /// Draw a saved tuning outcome over its diagram.
    Render(RenderArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value = "si-sg")]
    profile: String,
    #[arg(long, default_value_t = 1)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// `ff`, `cnn`, `bcnn`, or a path to a JSON model spec.
    #[arg(long)]
    spec: String,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "si-sg")]
    profile: String,
    /// Tenfold fewer updates and batch 128.
    #[arg(long)]
    desk_scale: bool,
    #[arg(long)]
    updates: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    val: PathBuf,
    #[arg(long, default_value_t = calibrate::DEFAULT_TAU)]
    tau: f64,
    /// Where the calibrated checkpoint is written; the input is left untouched.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "si-sg")]
    profile: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TuneArgs {
    #[arg(long)]
    diagram: PathBuf,
    /// Detector checkpoint; omit with `--oracle`.
    #[arg(long, required_unless_present = "oracle", conflicts_with = "oracle")]
    model: Option<PathBuf>,
    /// Use the ground-truth labels as the detector.
    #[arg(long)]
    oracle: bool,
    #[arg(long, default_value = "si-sg")]
    profile: String,
    /// Start voltages `g1,g2`; drawn uniformly from the seed when omitted.
    #[arg(long, value_parser = parse_point)]
    start: Option<Point>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    no_uncertainty: bool,
    #[arg(long)]
    max_steps: Option<usize>,
    /// Also write an SVG of the trace.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Worker threads; defaults to the available parallelism.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    diagram: PathBuf,
    /// Outcome JSON as printed by `tune`.
    #[arg(long)]
    outcome: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn parse_point(s: &str) -> Result<Point, String> {
    let (a, b) = s.split_once(',').ok_or("expected `g1,g2`")?;
    let parse = |t: &str| t.trim().parse::<f64>().map_err(|e| format!("`{t}`: {e}"));
    let (x, y) = (parse(a)?, parse(b)?);
    if !(x.is_finite() && y.is_finite()) {
        return Err("voltages must be finite".into());
    }
    Ok(Point::new(x, y))
}

fn profile(name: &str) -> Result<DatasetProfile> {
    DatasetProfile::named(name)
        .ok_or_else(|| anyhow!("unknown profile `{name}` (expected one of {})", DatasetProfile::NAMES.join(", ")))
}

fn write_out(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    diagram::write_atomic(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn patches_of(diagrams: &[StabilityDiagram], profile: &DatasetProfile) -> Result<Vec<PatchSample>> {
    let mut all = Vec::new();
    for d in diagrams {
        all.extend(extract_patches(d, profile).with_context(|| format!("patches of `{}`", d.id))?);
    }
    Ok(all)
}

fn load_dir(dir: &Path) -> Result<Vec<StabilityDiagram>> {
    let ds = diagram::load_dir(dir).with_context(|| format!("loading diagrams from {}", dir.display()))?;
    if ds.is_empty() {
        bail!("no diagram manifests in {}", dir.display());
    }
    Ok(ds)
}

fn gen(a: GenArgs) -> Result<()> {
    let base = synthgen::make_profile(&a.profile)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    for i in 0..a.count {
        let mut cfg = base.clone();
        cfg.seed = derive(a.seed, &[i as u64]);
        let d = synthgen::generate(&cfg)?;
        let path = a.out.join(format!("{}.json", d.id));
        diagram::save_diagram(&d, &path)?;
        println!("{}", path.display());
    }
    Ok(())
}

fn model_spec(arg: &str) -> Result<ModelSpec> {
    if let Ok(kind) = arg.parse::<ModelKind>() {
        return Ok(ModelSpec::full_scale(kind));
    }
    let text = std::fs::read_to_string(arg).with_context(|| format!("`{arg}` is neither a model kind nor a readable spec file"))?;
    serde_json::from_str(&text).with_context(|| format!("parsing model spec {arg}"))
}

fn train(a: TrainArgs) -> Result<()> {
    let profile = profile(&a.profile)?;
    let mut spec = model_spec(&a.spec)?;
    if a.desk_scale {
        spec = spec.desk_scale();
    }
    if let Some(u) = a.updates {
        spec.train_updates = u;
    }
    spec = spec.with_seed(derive(a.seed, &[1]));
    let patches = patches_of(&load_dir(&a.data)?, &profile)?;
    let (train, val) = harness::split_train_val(patches, derive(a.seed, &[0]))?;
    log::info!("training {:?} on {} patches, validating on {}", spec.kind, train.len(), val.len());
    let model = detector::train(&spec, &train, &val)?;
    if let Some(best) = model.log.iter().map(|e| e.val_accuracy).reduce(f64::max) {
        log::info!("best validation accuracy {best:.4}");
    }
    write_out(&a.out, model.to_json().as_bytes())
}

fn detect_all(model: &TrainedDetector, samples: &[PatchSample], seed: u64) -> Result<Vec<(Detection, diagram::Category)>> {
    let values: Vec<&[f64]> = samples.iter().map(|s| s.values.as_slice()).collect();
    let sampling = (model.spec.kind == ModelKind::Bcnn).then_some(seed);
    let dets = model.infer_batch(&values, sampling)?;
    Ok(dets.into_iter().zip(samples.iter().map(|s| s.category)).collect())
}

fn calibrate_cmd(a: CalibrateArgs) -> Result<()> {
    let profile = profile(&a.profile)?;
    let mut model = TrainedDetector::load(&a.model)?;
    let samples = patches_of(&load_dir(&a.val)?, &profile)?;
    let items = detect_all(&model, &samples, derive(a.seed, &[0]))?;
    let t = calibrate::calibrate(&items, a.tau, calibrate::DEFAULT_GRID_STEP)?;
    model.thresholds = Some(t);
    write_out(&a.out, model.to_json().as_bytes())?;
    println!("{}", serde_json::to_string_pretty(&t)?);
    Ok(())
}

fn tune_cmd(a: TuneArgs) -> Result<()> {
    let profile = profile(&a.profile)?;
    let d = diagram::load_diagram(&a.diagram)?;
    let model = a.model.as_ref().map(TrainedDetector::load).transpose()?;
    let (det, thresholds): (Box<dyn PatchDetector + '_>, ThresholdSet) = match &model {
        Some(m) => {
            let t = m.thresholds.unwrap_or_else(|| {
                log::warn!("checkpoint has no thresholds; using the 0.5 floor");
                ThresholdSet::floor()
            });
            (Box::new(ModelDetector::new(m, profile.patch_size_px)?), t)
        }
        None => (Box::new(OracleDetector::new(&profile)), ThresholdSet::floor()),
    };
    let mut priors = TuningPriors::from_profile(&profile);
    if let Some(m) = a.max_steps {
        priors.max_steps = m;
    }
    let options = ExplorerOptions::from_profile(&profile, !a.no_uncertainty);
    let mut rng = child_rng(a.seed, &[]);
    let start = match a.start {
        Some(p) => {
            if !d.bounds_v().contains(p) {
                bail!("start ({}, {}) lies outside the diagram", p.x, p.y);
            }
            p
        }
        None => harness::random_start(&d, &mut rng),
    };
    let outcome = explorer::tune(&d, det.as_ref(), &thresholds, &priors, &options, start, &mut rng);
    if let Some(path) = &a.trace {
        write_out(path, harness::render_trace(&outcome, &d)?.as_bytes())?;
    }
    println!("{}", serde_json::to_string_pretty(&outcome)?);
    Ok(())
}

fn bench(a: BenchArgs) -> Result<()> {
    if !a.config.is_file() {
        bail!("config not found: {}", a.config.display());
    }
    let text = std::fs::read_to_string(&a.config).with_context(|| format!("reading {}", a.config.display()))?;
    let mut cfg: ExperimentConfig =
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", a.config.display()))?;
    harness::resolve_paths(&mut cfg, a.config.parent().unwrap_or(Path::new(".")));
    let run = || harness::run_experiment(&cfg, Execution::available());
    let report = match a.jobs {
        Some(0) => bail!("--jobs must be at least 1"),
        Some(1) => harness::run_experiment(&cfg, Execution::Sequential),
        Some(n) => exec::with_threads(n, run),
        None => run(),
    }?;
    write_out(&a.out, report.to_json().as_bytes())?;
    if let Some(csv) = &a.csv {
        write_out(csv, report.to_csv().as_bytes())?;
    }
    let agg = &report.aggregate;
    eprintln!(
        "{} episodes: success {:.3} ± {:.3}, steps {:.1} ± {:.1}",
        agg.episodes, agg.success_rate.mean, agg.success_rate.std, agg.mean_steps.mean, agg.mean_steps.std
    );
    Ok(())
}

fn render(a: RenderArgs) -> Result<()> {
    let d = diagram::load_diagram(&a.diagram)?;
    let text = std::fs::read_to_string(&a.outcome).with_context(|| format!("reading {}", a.outcome.display()))?;
    let outcome: TuningOutcome =
        serde_json::from_str(&text).with_context(|| format!("parsing outcome {}", a.outcome.display()))?;
    write_out(&a.out, harness::render_trace(&outcome, &d)?.as_bytes())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("QDTUNE_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => gen(a),
        Command::Train(a) => train(a),
        Command::Calibrate(a) => calibrate_cmd(a),
        Command::Tune(a) => tune_cmd(a),
        Command::Bench(a) => bench(a),
        Command::Render(a) => render(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
