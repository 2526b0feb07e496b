use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde_json::{json, Value};

use vtk_core::anomaly::{label_events, scan_episode, LabelRules, SigmaConfig};
use vtk_core::embed::{train, AlignmentModel, PairedDataset, TrainConfig};
use vtk_core::episode::{load_episode, validate_episode, ValidationConfig as EpisodeChecks, MANIFEST_FILE};
use vtk_core::modality::RetrievalTask;
use vtk_core::report::{render_report, ReportFormat, KIND_RETRIEVAL, KIND_VALIDATION};
use vtk_core::retrieval::{chance_baseline, eval_tasks};
use vtk_core::safety::{pipeline, read_trace, write_commands, SafetyConfig};
use vtk_core::sync::{
    align_episode, jitter_stats, read_aligned, write_aligned, AlignedEpisode, JitterThresholds, ALIGNED_MANIFEST,
};
use vtk_core::validate::{
    validate, ConstantPolicy, Demo, LinearPolicy, NoisyExpert, Policy, ReplayExpert, ValidationConfig,
};

#[derive(Parser)]
#[command(name = "vtk", version, about = "Visuotactile episode alignment, retrieval and policy validation toolkit")]
struct Cli {
    /// Seed for every stochastic step.
    #[arg(long, global = true, env = "VTK_SEED")]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load and validate an episode directory.
    Ingest { dir: PathBuf },
    /// Resample every stream onto one uniform timeline.
    Sync(SyncArgs),
    /// Sliding-window n-sigma anomaly scan.
    Scan(ScanArgs),
    /// Train the tri-modal alignment model.
    TrainAlign(TrainArgs),
    /// Retrieval metrics for a trained model.
    EvalRetrieval(EvalArgs),
    /// Four-layer policy validation.
    ValidatePolicy(ValidateArgs),
    /// Run an action trace through the safety pipeline.
    SafetySim(SafetyArgs),
    /// Render a result document as markdown or CSV.
    Report(ReportArgs),
}

#[derive(Args)]
struct SyncArgs {
    #[arg(long)]
    episode: PathBuf,
    #[arg(long, default_value_t = 30.0)]
    rate: f64,
    /// Output directory; defaults to `<episode>/aligned`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ScanArgs {
    #[arg(long)]
    episode: PathBuf,
    #[arg(long, default_value_t = 100)]
    window: usize,
    #[arg(long, default_value_t = 3.0)]
    sigma: f64,
    /// Also emit weak labels from the episode aligned at 30 Hz.
    #[arg(long)]
    labels: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Paired dataset JSON.
    #[arg(long)]
    data: PathBuf,
    /// TOML or JSON training config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Task such as `V->T` or `VP->T`; repeat or comma-separate. Defaults to all twelve.
    #[arg(long = "task", value_delimiter = ',', value_parser = RetrievalTask::from_str)]
    tasks: Vec<RetrievalTask>,
}

#[derive(Clone, Debug)]
enum PolicySpec {
    Replay,
    Noisy(f64),
    Constant(f64),
    Linear(usize),
    External(PathBuf),
}

impl FromStr for PolicySpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (name, arg) = s.split_once(':').map_or((s, None), |(a, b)| (a, Some(b)));
        let num = |a: Option<&str>, default: f64| -> Result<f64, String> {
            a.map_or(Ok(default), |v| v.parse().map_err(|_| format!("`{v}` is not a number")))
        };
        match name {
            "replay" => Ok(Self::Replay),
            "noisy" => Ok(Self::Noisy(num(arg, 0.05)?)),
            "constant" => Ok(Self::Constant(num(arg, 0.0)?)),
            "linear" => Ok(Self::Linear(num(arg, 1.0)? as usize)),
            "external" => arg
                .map(|p| Self::External(PathBuf::from(p)))
                .ok_or_else(|| "external needs a checkpoint path, e.g. external:policy.json".into()),
            _ => Err(format!("unknown policy `{s}` (replay, noisy:SIGMA, constant:VALUE, linear:N_OBS, external:PATH)")),
        }
    }
}

#[derive(Clone, Debug)]
struct Layers(Vec<u8>);

fn parse_layers(s: &str) -> Result<Layers, String> {
    let mut layers: Vec<u8> = s
        .split(',')
        .map(|t| match t.trim().parse::<u8>() {
            Ok(l @ 1..=4) => Ok(l),
            _ => Err(format!("layer `{t}` must be 1, 2, 3 or 4")),
        })
        .collect::<Result<_, _>>()?;
    layers.sort_unstable();
    layers.dedup();
    Ok(Layers(layers))
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long, value_parser = PolicySpec::from_str)]
    policy: PolicySpec,
    /// Episode directory, aligned directory, or a directory of either.
    #[arg(long, visible_alias = "episode")]
    dataset: PathBuf,
    #[arg(long, value_parser = parse_layers)]
    layers: Option<Layers>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Also write the JSON report here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Alignment rate for raw episodes.
    #[arg(long, default_value_t = 30.0)]
    rate: f64,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    repeats: Option<usize>,
}

#[derive(Args)]
struct SafetyArgs {
    /// CSV with columns t,a0..a13,mode.
    #[arg(long)]
    trace: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Write emitted commands (t,q0..q13) here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, default_value = "markdown", value_parser = ReportFormat::from_str)]
    format: ReportFormat,
}

enum Output {
    Json { doc: Value, summary: String },
    Text(String),
}

fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else { return Ok(T::default()) };
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let is_json = path.extension().is_some_and(|e| e == "json");
    if is_json {
        serde_json::from_str(&text).with_context(|| format!("parsing JSON config {}", path.display()))
    } else {
        toml::from_str(&text).with_context(|| format!("parsing TOML config {}", path.display()))
    }
}

fn ingest(dir: &Path) -> Result<Output> {
    let ep = load_episode(dir)?;
    let issues = validate_episode(&ep, &EpisodeChecks::default());
    let streams: BTreeMap<&str, Value> = ep
        .streams
        .iter()
        .map(|(name, s)| {
            (
                name.as_str(),
                json!({"kind": s.kind, "rate": s.nominal_rate, "samples": s.len(), "dim": s.dim()}),
            )
        })
        .collect();
    let summary = format!("episode {}: {} streams, {:.3} s, {} issues", ep.id, ep.streams.len(), ep.duration(), issues.len());
    Ok(Output::Json {
        doc: json!({
            "kind": "ingest",
            "id": ep.id,
            "duration": ep.duration(),
            "skill_axes": ep.skill_axes,
            "streams": streams,
            "issues": issues,
        }),
        summary,
    })
}

fn sync(a: &SyncArgs) -> Result<Output> {
    let ep = load_episode(&a.episode)?;
    let aligned = align_episode(&ep, a.rate)?;
    let jitter = jitter_stats(&ep, &JitterThresholds::default());
    let out = a.out.clone().unwrap_or_else(|| a.episode.join("aligned"));
    write_aligned(&aligned, &out)?;
    Ok(Output::Json {
        summary: format!("{} frames at {} Hz written to {}", aligned.len(), a.rate, out.display()),
        doc: json!({
            "kind": "sync",
            "id": aligned.id,
            "rate": aligned.rate,
            "frames": aligned.len(),
            "window": aligned.window,
            "columns": aligned.columns.keys().collect::<Vec<_>>(),
            "jitter": jitter,
        }),
    })
}

fn scan(a: &ScanArgs) -> Result<Output> {
    if a.window < 2 || a.sigma.is_nan() || a.sigma <= 0.0 {
        bail!("window must be at least 2 and sigma positive");
    }
    let ep = load_episode(&a.episode)?;
    let cfg = SigmaConfig {
        window: a.window,
        n_sigma: a.sigma,
        ..Default::default()
    };
    let events = scan_episode(&ep, &cfg)?;
    let mut doc = json!({"kind": "scan", "id": ep.id, "window": a.window, "sigma": a.sigma, "events": events});
    let mut summary = format!("{} sigma events", events.len());
    if a.labels {
        let aligned = align_episode(&ep, 30.0)?;
        let labels = label_events(&aligned, &LabelRules::applicable(&aligned))?;
        summary.push_str(&format!(", {} weak labels", labels.len()));
        doc["labels"] = serde_json::to_value(labels)?;
    }
    Ok(Output::Json { doc, summary })
}

fn train_align(a: &TrainArgs, seed: Option<u64>) -> Result<Output> {
    let mut cfg: TrainConfig = load_config(a.config.as_deref())?;
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if a.steps.is_some() {
        cfg.total_steps = a.steps;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = a.dim {
        cfg.dim = v;
    }
    if let Some(v) = a.hidden {
        cfg.hidden = v;
    }
    if let Some(v) = a.dropout {
        cfg.dropout = v;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let data = PairedDataset::load(&a.data)?;
    let outcome = train(&data, &cfg)?;
    fs::write(&a.out, outcome.model.to_checkpoint_json()).with_context(|| format!("writing {}", a.out.display()))?;
    Ok(Output::Json {
        summary: format!(
            "{} steps, loss {:.4} -> {:.4}, tau {:.4}",
            outcome.steps,
            outcome.initial_loss,
            outcome.final_loss,
            outcome.model.tau()
        ),
        doc: json!({
            "kind": "train",
            "pairs": data.len(),
            "steps": outcome.steps,
            "initial_loss": outcome.initial_loss,
            "final_loss": outcome.final_loss,
            "alpha": outcome.model.alpha,
            "tau": outcome.model.tau(),
            "parameters": outcome.model.parameter_count(),
            "config": cfg,
        }),
    })
}

fn eval_retrieval(a: &EvalArgs) -> Result<Output> {
    let text = fs::read_to_string(&a.model).with_context(|| format!("reading {}", a.model.display()))?;
    let model = AlignmentModel::from_checkpoint_json(&text)?;
    let data = PairedDataset::load(&a.data)?;
    let tasks = if a.tasks.is_empty() { RetrievalTask::all() } else { a.tasks.clone() };
    let reports: Vec<_> = eval_tasks(&model, &data.samples, &tasks)?.iter().map(|r| r.rounded()).collect();
    let chance = chance_baseline(data.len()).rounded();
    let summary = reports
        .iter()
        .map(|r| format!("{}: R@1 {:.2} mAP {:.2}", r.task, r.r1, r.map))
        .collect::<Vec<_>>()
        .join("; ");
    Ok(Output::Json {
        doc: json!({"kind": KIND_RETRIEVAL, "N": data.len(), "reports": reports, "chance": chance}),
        summary,
    })
}

fn load_aligned_dir(dir: &Path, rate: f64) -> Result<Option<AlignedEpisode>> {
    if dir.join(ALIGNED_MANIFEST).is_file() {
        return Ok(Some(read_aligned(dir)?));
    }
    if dir.join(MANIFEST_FILE).is_file() {
        return Ok(Some(align_episode(&load_episode(dir)?, rate)?));
    }
    Ok(None)
}

fn load_demos(path: &Path, rate: f64) -> Result<Vec<Demo>> {
    if let Some(ep) = load_aligned_dir(path, rate)? {
        return Ok(vec![Demo::from_aligned(&ep)?]);
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(path)
        .with_context(|| format!("reading dataset {}", path.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    let mut demos = Vec::new();
    for d in dirs {
        if let Some(ep) = load_aligned_dir(&d, rate)? {
            demos.push(Demo::from_aligned(&ep)?);
        }
    }
    if demos.is_empty() {
        bail!("no episodes found under {}", path.display());
    }
    Ok(demos)
}

fn validate_policy(a: &ValidateArgs, seed: Option<u64>) -> Result<Output> {
    let mut cfg: ValidationConfig = load_config(a.config.as_deref())?;
    if let Some(l) = &a.layers {
        cfg.layers = l.0.clone();
    }
    if let Some(v) = a.samples {
        cfg.n_samples = v;
    }
    if let Some(v) = a.horizon {
        cfg.horizon = v;
    }
    if let Some(v) = a.repeats {
        cfg.repeats = v;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let demos = load_demos(&a.dataset, a.rate)?;
    let mut policy: Box<dyn Policy> = match &a.policy {
        PolicySpec::Replay => Box::new(ReplayExpert::new(&demos)),
        PolicySpec::Noisy(sigma) => Box::new(NoisyExpert::new(&demos, *sigma, cfg.seed)?),
        PolicySpec::Constant(v) => Box::new(ConstantPolicy(vec![*v; vtk_core::episode::ACTION_DIM].into())),
        PolicySpec::Linear(n) => Box::new(LinearPolicy::fit(&demos, *n)?),
        PolicySpec::External(p) => Box::new(LinearPolicy::load(p)?),
    };
    let report = validate(policy.as_mut(), &demos, &cfg)?;
    let doc = json!({"kind": KIND_VALIDATION, "report": report});
    if let Some(out) = &a.out {
        fs::write(out, serde_json::to_string_pretty(&doc)?).with_context(|| format!("writing {}", out.display()))?;
    }
    let summary = match &report.score {
        Some(s) => format!("{}: overall {:.4} ({:?})", report.policy, s.overall, s.grade),
        None => format!("{}: layers {:?} evaluated", report.policy, cfg.layers),
    };
    Ok(Output::Json { doc, summary })
}

fn safety_sim(a: &SafetyArgs) -> Result<Output> {
    let cfg: SafetyConfig = load_config(a.config.as_deref())?;
    let file = fs::File::open(&a.trace).with_context(|| format!("opening {}", a.trace.display()))?;
    let trace = read_trace(file)?;
    let cmds = pipeline(&trace, &cfg)?;
    let q0: Vec<f64> = cfg.q0.clone();
    let mut prev = q0;
    let mut max_step: f64 = 0.0;
    for c in &cmds {
        let step = c.q.iter().zip(&prev).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        max_step = max_step.max(step);
        prev = c.q.to_vec();
    }
    let within = cmds
        .iter()
        .all(|c| c.q.iter().enumerate().all(|(j, &q)| q >= cfg.q_min[j] && q <= cfg.q_max[j]));
    if let Some(out) = &a.out {
        write_commands(&cmds, fs::File::create(out).with_context(|| format!("creating {}", out.display()))?)?;
    }
    Ok(Output::Json {
        summary: format!("{} trace steps -> {} commands, max step {:.6}", trace.len(), cmds.len(), max_step),
        doc: json!({
            "kind": "safety",
            "steps": trace.len(),
            "emitted": cmds.len(),
            "max_step_norm": max_step,
            "step_bound": cfg.step_bound(),
            "within_limits": within,
            "final": cmds.last().map(|c| c.q.to_vec()),
        }),
    })
}

fn report(a: &ReportArgs) -> Result<Output> {
    let text = fs::read_to_string(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let doc: Value = serde_json::from_str(&text).context("result document is not valid JSON")?;
    Ok(Output::Text(render_report(&doc, a.format)?))
}

fn run(cli: &Cli) -> Result<Output> {
    match &cli.command {
        Command::Ingest { dir } => ingest(dir),
        Command::Sync(a) => sync(a),
        Command::Scan(a) => scan(a),
        Command::TrainAlign(a) => train_align(a, cli.seed),
        Command::EvalRetrieval(a) => eval_retrieval(a),
        Command::ValidatePolicy(a) => validate_policy(a, cli.seed),
        Command::SafetySim(a) => safety_sim(a),
        Command::Report(a) => report(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(Output::Json { doc, summary }) => {
            println!("{}", serde_json::to_string_pretty(&doc).expect("JSON values serialize"));
            eprintln!("{summary}");
            ExitCode::SUCCESS
        }
        Ok(Output::Text(text)) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let chain: Vec<String> = e.chain().map(|c| c.to_string()).collect();
            println!("{}", json!({"kind": "error", "error": chain.join(": ")}));
            eprintln!("error: {}", chain.join(": "));
            ExitCode::from(1)
        }
    }
}
