mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gpaslab::autodiff::{Float, GateActivation};
use gpaslab::data::Corpus;
use gpaslab::instrument::{compare_runs, layer_importance, Recorder, RunData, CHECKPOINT_FILE, LAYERS_FILE, METRICS_FILE};
use gpaslab::layers::GpasVariant;
use gpaslab::schemes::{Scheme, TransformerModel};
use gpaslab::theory::{regime_compare, rows_to_csv, trajectory_rows, TheoryParams};
use gpaslab::training::{evaluate, read_checkpoint_header, train, CheckpointHeader, Precision, TrainState};

use config::{load_gates, output_root, parse_activation, parse_named, RunConfig, RESOLVED_CONFIG};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl From<gpaslab::Error> for CliError {
    fn from(e: gpaslab::Error) -> Self {
        use gpaslab::Error as E;
        match e {
            E::Config(_) | E::InvalidGate { .. } | E::ScheduleMismatch(_) => CliError::Usage(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

#[derive(Parser)]
#[command(name = "gpaslab", version, about = "Train and analyse small transformer LMs with gated residual scaling")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model with per-layer instrumentation.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the held-out split.
    Eval(LoadArgs),
    /// Loss change when each layer is replaced by the identity.
    Importance(LoadArgs),
    /// Variance recurrence, bounds and gradient upper-estimate product.
    Theory(TheoryArgs),
    /// Per-layer ratios and loss deltas between two instrumented runs.
    Compare(CompareArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// JSON run config; defaults are used for missing keys.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Output root (overrides GPASLAB_OUT and the config).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    run_name: Option<String>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_parser = parse_named::<Scheme>)]
    scheme: Option<Scheme>,
    /// Enable the gate (true/false).
    #[arg(long)]
    gpas: Option<bool>,
    #[arg(long, value_parser = parse_named::<GpasVariant>)]
    variant: Option<GpasVariant>,
    /// SiLU, ReLU, LeakyReLU, Tanh, Identity or ScaledSiLU:<beta>.
    #[arg(long, value_parser = parse_activation)]
    activation: Option<GateActivation>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seq_len: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_named::<Precision>)]
    precision: Option<Precision>,
    #[arg(long)]
    eval_interval: Option<usize>,
    #[arg(long)]
    interval: Option<usize>,
    /// JSON array of per-layer gate values to start from.
    #[arg(long)]
    gates_init: Option<PathBuf>,
    #[arg(long)]
    freeze_gates: bool,
    /// Continue from the run directory's checkpoint if there is one.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct LoadArgs {
    /// Run directory or checkpoint file.
    run: PathBuf,
    /// Corpus to evaluate on (defaults to the run's resolved config).
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct TheoryArgs {
    /// Variance of the first layer's input.
    #[arg(long = "sigma1-sq", default_value_t = 1.0)]
    sigma1_sq: f64,
    /// Gate value used at every layer.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    alpha: f64,
    /// Comma-separated per-layer gate values (overrides --alpha and --layers).
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    alphas: Option<Vec<f64>>,
    #[arg(long = "layers", short = 'L', default_value_t = 12)]
    layers: usize,
    #[arg(long = "a", short = 'A', default_value_t = 1.0)]
    a: f64,
    #[arg(long = "b", short = 'B', default_value_t = 1.0)]
    b: f64,
    /// Depths for an un-gated vs gated comparison, written to regimes.csv.
    #[arg(long, value_delimiter = ',')]
    depths: Option<Vec<usize>>,
    /// Gate value of the gated regime in the depth comparison.
    #[arg(long, default_value_t = 0.5)]
    alpha_gpas: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    run_a: PathBuf,
    run_b: PathBuf,
    /// Defaults to `<run_a>/compare-<name of run_b>`.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.cmd {
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Importance(a) => cmd_importance(a),
        Cmd::Theory(a) => cmd_theory(a),
        Cmd::Compare(a) => cmd_compare(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> Result<(), CliError> {
    let mut s = serde_json::to_string_pretty(v).map_err(|e| CliError::Runtime(e.to_string()))?;
    s.push('\n');
    write_file(path, s)
}

fn resolve_train_config(a: &TrainArgs) -> Result<RunConfig, CliError> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    macro_rules! set {
        ($field:expr, $flag:expr) => {
            if let Some(v) = $flag.clone() {
                $field = v;
            }
        };
    }
    set!(cfg.run_name, a.run_name);
    set!(cfg.data_path, a.data);
    set!(cfg.scheme.scheme, a.scheme);
    set!(cfg.scheme.gpas_enabled, a.gpas);
    set!(cfg.scheme.gpas_variant, a.variant);
    set!(cfg.scheme.gate_activation, a.activation);
    set!(cfg.model.n_layers, a.layers);
    set!(cfg.model.d_model, a.d_model);
    set!(cfg.train.total_steps, a.steps);
    set!(cfg.train.warmup_steps, a.warmup);
    set!(cfg.train.learning_rate, a.lr);
    set!(cfg.train.batch_size, a.batch_size);
    set!(cfg.train.seq_len, a.seq_len);
    set!(cfg.train.seed, a.seed);
    set!(cfg.train.precision, a.precision);
    set!(cfg.train.eval_interval, a.eval_interval);
    set!(cfg.instrument_interval, a.interval);
    if a.gates_init.is_some() {
        cfg.gates_init = a.gates_init.clone();
    }
    if a.freeze_gates {
        cfg.train.freeze_gates = true;
    }
    cfg.output_dir = output_root(a.out.as_deref(), &cfg.output_dir);
    cfg.resolve()?;
    Ok(cfg)
}

fn cmd_train(a: TrainArgs) -> Result<(), CliError> {
    let cfg = resolve_train_config(&a)?;
    let gates = match &cfg.gates_init {
        Some(p) => Some(load_gates(p, cfg.model.n_layers)?),
        None => None,
    };
    let corpus = Corpus::load(&cfg.data_path, cfg.train.split_fraction, cfg.train.seed)?;
    let dir = cfg.run_dir();
    std::fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    write_json(&dir.join(RESOLVED_CONFIG), &cfg)?;
    match cfg.train.precision {
        Precision::F32 => run_train::<f32>(&cfg, &corpus, gates.as_deref(), a.resume, &dir),
        Precision::F64 => run_train::<f64>(&cfg, &corpus, gates.as_deref(), a.resume, &dir),
    }
}

/// Drops rows written after the checkpoint so a resumed run's files match an
/// uninterrupted run.
fn trim_jsonl(path: &Path, keep: impl Fn(&serde_json::Value) -> bool) -> Result<(), CliError> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(()),
        Err(e) => return Err(io_err(path, e)),
    };
    let mut out = String::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let v: serde_json::Value =
            serde_json::from_str(line).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        if keep(&v) {
            out.push_str(line);
            out.push('\n');
        }
    }
    write_file(path, out)
}

fn run_train<T: Float>(
    cfg: &RunConfig,
    corpus: &Corpus,
    gates: Option<&[f64]>,
    resume: bool,
    dir: &Path,
) -> Result<(), CliError> {
    let ckpt = dir.join(CHECKPOINT_FILE);
    let (mut state, append) = if resume && ckpt.exists() {
        let (state, header) = TrainState::<T>::load(&ckpt)?;
        if header.model != cfg.model || header.scheme != cfg.scheme || header.train != cfg.train {
            return Err(CliError::Usage(format!(
                "{} was written with a different configuration",
                ckpt.display()
            )));
        }
        let s = state.step as u64;
        let step = |v: &serde_json::Value| v["step"].as_u64().unwrap_or(u64::MAX);
        trim_jsonl(&dir.join(METRICS_FILE), |v| {
            if v["split"] == "eval" {
                step(v) <= s
            } else {
                step(v) < s
            }
        })?;
        trim_jsonl(&dir.join(LAYERS_FILE), |v| step(v) < s)?;
        eprintln!("resuming {} at step {}", dir.display(), state.step);
        (state, true)
    } else {
        let mut model = TransformerModel::<T>::new(cfg.model.clone(), cfg.scheme.clone(), cfg.train.seed)?;
        if let Some(g) = gates {
            model.set_gate_alphas(g)?;
        }
        (TrainState::new(model, corpus.seed()), false)
    };
    let mut rec = Recorder::to_dir(cfg.instrument_interval, dir, append)?;
    let summary = train(&mut state, corpus, &cfg.train, &mut rec);
    rec.flush()?;
    let summary = summary?;
    state.save(&dir.join(CHECKPOINT_FILE), &cfg.train)?;
    if cfg.scheme.gpas_enabled {
        write_json(&dir.join("gates.json"), &summary.gate_alphas)?;
    }
    write_json(&dir.join("summary.json"), &summary)?;
    println!(
        "{}: {} steps, eval loss {:.4} (ppl {:.3})",
        dir.display(),
        summary.steps,
        summary.final_eval.loss,
        summary.final_eval.perplexity
    );
    Ok(())
}

struct LoadedRun {
    dir: PathBuf,
    checkpoint: PathBuf,
    header: CheckpointHeader,
    data: PathBuf,
}

fn open_run(a: &LoadArgs) -> Result<LoadedRun, CliError> {
    let (dir, checkpoint) = if a.run.is_dir() {
        (a.run.clone(), a.run.join(CHECKPOINT_FILE))
    } else {
        let dir = a.run.parent().map(Path::to_path_buf).unwrap_or_default();
        (dir, a.run.clone())
    };
    if !checkpoint.exists() {
        return Err(CliError::Usage(format!("checkpoint not found: {}", checkpoint.display())));
    }
    let header = read_checkpoint_header(&checkpoint)?;
    let data = match &a.data {
        Some(p) => p.clone(),
        None => {
            let p = dir.join(RESOLVED_CONFIG);
            if !p.exists() {
                return Err(CliError::Usage(format!("no {RESOLVED_CONFIG} next to the checkpoint; pass --data")));
            }
            RunConfig::load(&p)?.data_path
        }
    };
    Ok(LoadedRun {
        dir,
        checkpoint,
        header,
        data,
    })
}

fn cmd_eval(a: LoadArgs) -> Result<(), CliError> {
    let run = open_run(&a)?;
    match run.header.precision {
        Precision::F32 => eval_run::<f32>(&run),
        Precision::F64 => eval_run::<f64>(&run),
    }
}

fn eval_run<T: Float>(run: &LoadedRun) -> Result<(), CliError> {
    let (state, header) = TrainState::<T>::load(&run.checkpoint)?;
    let corpus = Corpus::load(&run.data, header.train.split_fraction, header.train.seed)?;
    let r = evaluate(&state.model, &corpus, &header.train)?;
    let out = serde_json::json!({
        "step": state.step,
        "loss": r.loss,
        "perplexity": r.perplexity,
        "tokens": r.tokens,
    });
    write_json(&run.dir.join("eval.json"), &out)?;
    println!("step {}: eval loss {:.4} (ppl {:.3})", state.step, r.loss, r.perplexity);
    Ok(())
}

fn cmd_importance(a: LoadArgs) -> Result<(), CliError> {
    let run = open_run(&a)?;
    match run.header.precision {
        Precision::F32 => importance_run::<f32>(&run),
        Precision::F64 => importance_run::<f64>(&run),
    }
}

fn importance_run<T: Float>(run: &LoadedRun) -> Result<(), CliError> {
    let (state, header) = TrainState::<T>::load(&run.checkpoint)?;
    let t = &header.train;
    let corpus = Corpus::load(&run.data, t.split_fraction, t.seed)?;
    let batches = corpus.eval_batches(t.eval_tokens, t.batch_size, t.seq_len)?;
    let report = layer_importance(&state.model, &batches)?;
    let path = run.dir.join("importance.csv");
    write_file(&path, report.to_csv())?;
    println!("base loss {:.4}; wrote {}", report.base_loss, path.display());
    Ok(())
}

fn cmd_theory(a: TheoryArgs) -> Result<(), CliError> {
    let alphas = a.alphas.clone().unwrap_or_else(|| vec![a.alpha; a.layers]);
    if alphas.is_empty() {
        return Err(CliError::Usage("need at least one layer".into()));
    }
    let regime = if alphas.iter().all(|&x| x == 0.0) { "preln" } else { "gpas" };
    let p = TheoryParams {
        sigma1_sq: a.sigma1_sq,
        alphas,
        a: a.a,
        b: a.b,
    };
    let rows = trajectory_rows(&p, regime)?;
    let dir = match &a.out {
        Some(d) => d.clone(),
        None => output_root(None, Path::new("runs")).join("theory"),
    };
    std::fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    let path = dir.join("theory.csv");
    write_file(&path, rows_to_csv(&rows))?;
    println!("wrote {} ({} layers)", path.display(), rows.len());

    if let Some(depths) = &a.depths {
        let r = regime_compare(depths, a.alpha_gpas, a.sigma1_sq, a.a, a.b)?;
        let mut s = String::from("depth,sigma_sq_preln,sigma_sq_gpas,log_up_preln,log_up_gpas\n");
        for p in &r.points {
            s += &format!(
                "{},{},{},{},{}\n",
                p.depth, p.sigma_sq_preln, p.sigma_sq_gpas, p.log_up_preln, p.log_up_gpas
            );
        }
        let path = dir.join("regimes.csv");
        write_file(&path, s)?;
        if r.preln_loglog_slope.is_finite() {
            println!(
                "log UP slope vs depth (log-log): un-gated {:.3}, gated {:.3}",
                r.preln_loglog_slope, r.gpas_loglog_slope
            );
        }
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_compare(a: CompareArgs) -> Result<(), CliError> {
    for d in [&a.run_a, &a.run_b] {
        if !d.join(METRICS_FILE).exists() || !d.join(LAYERS_FILE).exists() {
            return Err(CliError::Usage(format!("{} is not an instrumented run directory", d.display())));
        }
    }
    let ra = RunData::load(&a.run_a)?;
    let rb = RunData::load(&a.run_b)?;
    let cmp = compare_runs(&ra, &rb)?;
    let out = a.out.clone().unwrap_or_else(|| {
        let name = a
            .run_b
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "b".into());
        a.run_a.join(format!("compare-{name}"))
    });
    std::fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
    write_file(&out.join("ratios.csv"), cmp.ratios_csv())?;
    write_file(&out.join("loss.csv"), cmp.loss_csv())?;
    if let Some(m) = cmp.ratios.iter().find(|r| r.layer == "max") {
        println!("step {}: max activation variance ratio (b/a) {:.4}", cmp.step, m.ratio);
    }
    println!("wrote {}", out.display());
    Ok(())
}
