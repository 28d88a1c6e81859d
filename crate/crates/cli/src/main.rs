use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use deeplde::network::Mlp;
use deeplde::oracle::{solve_dataset, verify_prop2, OracleLabels};
use deeplde::problems::{generate_dataset, generate_instance, Dataset, ObjectiveKind, SplitKind};
use deeplde::reporting::{evaluate, evaluate_predictions, learning_curve_tsv, Evaluation};
use deeplde::training::{Method, TrainConfig, Trainer};
use serde::Serialize;

const EXIT_USAGE: u8 = 2;
const EXIT_DIVERGED: u8 = 3;
const EXIT_ORACLE: u8 = 4;

#[derive(Parser)]
#[command(name = "deeplde", version = env!("DEEPLDE_VERSION"), about = "Train and evaluate equality-embedded optimization proxies")]
struct Cli {
    /// Worker threads for per-sample work (0 = rayon default).
    #[arg(long, global = true, env = "DEEPLDE_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a problem instance and a dataset of right-hand sides.
    Generate(GenerateArgs),
    /// Train a model and write its checkpoint and run log.
    Train(TrainArgs),
    /// Evaluate a checkpoint (or replayed oracle labels) on the test split.
    Eval(EvalArgs),
    /// Solve every sample with the reference solver.
    Oracle(OracleArgs),
    /// Monte-Carlo check of the expected equality violation of noisy optima.
    Verify(VerifyArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Qp,
    Sinqp,
    Nonlineq,
}

impl From<Kind> for ObjectiveKind {
    fn from(k: Kind) -> Self {
        match k {
            Kind::Qp => ObjectiveKind::Quadratic,
            Kind::Sinqp => ObjectiveKind::SinNonconvex,
            Kind::Nonlineq => ObjectiveKind::NonlinearEq,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Deeplde,
    Ldf,
    Sl,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Deeplde => Method::DeepLde,
            MethodArg::Ldf => Method::Ldf,
            MethodArg::Sl => Method::Supervised,
        }
    }
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    n: usize,
    #[arg(long)]
    n_eq: usize,
    #[arg(long)]
    n_ineq: usize,
    #[arg(long, value_enum, default_value = "qp")]
    kind: Kind,
    #[arg(long)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_enum)]
    method: MethodArg,
    #[arg(long)]
    data: PathBuf,
    /// Flat `key = value` file with training-config field names.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Any config key, e.g. `--set hidden_width=64`. Applied after --config.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Oracle labels; required for `--method sl`.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    /// Model checkpoint, or an oracle labels file to replay.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    method_tag: String,
    /// Oracle labels for the optimality gap.
    #[arg(long)]
    oracle: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Report file; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-sample CSV for offline recomputation of the report.
    #[arg(long)]
    dump_samples: Option<PathBuf>,
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    sigma: f64,
    #[arg(long, default_value_t = 100_000)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Bad flag combinations found after parsing.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

#[derive(Serialize)]
struct RunManifest {
    command: Vec<String>,
    config: BTreeMap<String, String>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    version: String,
    started_unix: f64,
    finished_unix: f64,
}

impl RunManifest {
    fn start() -> Self {
        Self {
            command: std::env::args().collect(),
            config: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            version: env!("DEEPLDE_VERSION").to_string(),
            started_unix: unix_now(),
            finished_unix: 0.0,
        }
    }

    fn finish(mut self, path: &Path) -> anyhow::Result<()> {
        self.finished_unix = unix_now();
        write_atomic(path, &serde_json::to_string_pretty(&self)?)
    }
}

fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

/// Manifest path for a single-file output: `foo.json` gets `foo.json.manifest.json`.
fn manifest_for(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    out.with_file_name(name)
}

fn write_atomic(path: &Path, contents: &str) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut tmp = path.as_os_str().to_os_string();
    tmp.push(".tmp");
    fs::write(&tmp, contents).with_context(|| format!("writing {}", path.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

fn load_dataset(path: &Path) -> anyhow::Result<Dataset> {
    Dataset::load(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn load_labels(path: &Path, data: &Dataset) -> anyhow::Result<OracleLabels> {
    let labels = OracleLabels::load(path).with_context(|| format!("loading labels {}", path.display()))?;
    labels.validate(data)?;
    Ok(labels)
}

fn cmd_generate(a: GenerateArgs) -> anyhow::Result<()> {
    if a.n_eq == 0 || a.n_eq >= a.n {
        return Err(usage(format!("--n-eq must be in 1..{} (got {})", a.n, a.n_eq)));
    }
    let mut manifest = RunManifest::start();
    let instance = generate_instance(a.n, a.n_eq, a.n_ineq, a.kind.into(), a.seed)?;
    // Samples use a stream independent of the instance draw.
    let data = generate_dataset(instance, a.count, a.seed.wrapping_add(1))?;
    write_atomic(&a.out, &data.to_json()?)?;
    log::info!("wrote {} samples to {}", a.count, a.out.display());
    manifest.outputs.push(a.out.clone());
    manifest.finish(&manifest_for(&a.out))
}

fn cmd_train(a: TrainArgs) -> anyhow::Result<()> {
    let mut manifest = RunManifest::start();
    let data = load_dataset(&a.data)?;
    manifest.inputs.push(a.data.clone());

    let mut cfg = match &a.config {
        Some(p) => {
            manifest.inputs.push(p.clone());
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            TrainConfig::from_key_values(&text).map_err(|e| usage(e.to_string()))?
        }
        None => TrainConfig::default(),
    };
    for kv in &a.overrides {
        let (k, v) = kv.split_once('=').ok_or_else(|| usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v.trim()).map_err(|e| usage(e.to_string()))?;
    }
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;

    let method: Method = a.method.into();
    let labels = match (&a.labels, method) {
        (Some(p), _) => {
            manifest.inputs.push(p.clone());
            Some(load_labels(p, &data)?)
        }
        (None, Method::Supervised) => return Err(usage("--method sl requires --labels (see `deeplde oracle`)")),
        (None, _) => None,
    };

    let mut trainer = Trainer::new(&data, method, cfg.clone())?;
    if method == Method::Supervised {
        trainer = trainer.with_labels(&labels.as_ref().expect("checked above").y_star)?;
    }
    let (model, log) = trainer.run()?;
    if log.newton_failures > 0 {
        log::warn!("{} completion solves failed and were skipped", log.newton_failures);
    }

    let files = [
        ("model.json", model.to_json()?),
        ("runlog.csv", log.to_csv()),
        ("learning_curve.tsv", learning_curve_tsv(&log)),
        ("config.txt", cfg.to_key_values()),
    ];
    for (name, contents) in files {
        let path = a.out.join(name);
        write_atomic(&path, &contents)?;
        manifest.outputs.push(path);
    }
    for line in cfg.to_key_values().lines() {
        if let Some((k, v)) = line.split_once(" = ") {
            manifest.config.insert(k.to_string(), v.to_string());
        }
    }
    manifest.config.insert("method".into(), method.tag().into());
    manifest.finish(&a.out.join("manifest.json"))
}

fn cmd_eval(a: EvalArgs) -> anyhow::Result<()> {
    let mut manifest = RunManifest::start();
    let data = load_dataset(&a.data)?;
    manifest.inputs.extend([a.data.clone(), a.checkpoint.clone()]);
    let oracle_mean = match &a.oracle {
        Some(p) => {
            manifest.inputs.push(p.clone());
            Some(load_labels(p, &data)?.objective_mean(data.indices(SplitKind::Test)))
        }
        None => None,
    };

    let text = fs::read_to_string(&a.checkpoint).with_context(|| format!("reading {}", a.checkpoint.display()))?;
    let test = data.part(SplitKind::Test);
    let ev: Evaluation = if let Ok(model) = Mlp::from_json(&text) {
        evaluate(&data.instance, test, &model, &a.method_tag, oracle_mean, a.seed)?
    } else {
        let labels = OracleLabels::from_json(&text)
            .map_err(|_| usage(format!("{} is neither a model checkpoint nor a labels file", a.checkpoint.display())))?;
        labels.validate(&data)?;
        let ys = &labels.y_star[data.indices(SplitKind::Test)];
        evaluate_predictions(&data.instance, test, ys, &a.method_tag, oracle_mean, a.seed)?
    };

    let json = serde_json::to_string_pretty(&vec![&ev.report])?;
    if let Some(p) = &a.dump_samples {
        write_atomic(p, &ev.samples_csv())?;
        manifest.outputs.push(p.clone());
    }
    match &a.out {
        Some(p) => {
            write_atomic(p, &json)?;
            manifest.outputs.push(p.clone());
            manifest.finish(&manifest_for(p))
        }
        None => {
            println!("{json}");
            Ok(())
        }
    }
}

fn cmd_oracle(a: OracleArgs) -> anyhow::Result<()> {
    let mut manifest = RunManifest::start();
    let data = load_dataset(&a.data)?;
    manifest.inputs.push(a.data.clone());
    let labels = solve_dataset(&data)?;
    let worst = labels.kkt_residual.iter().copied().fold(0.0, f64::max);
    log::info!("solved {} samples, worst KKT residual {worst:.2e}", labels.len());
    write_atomic(&a.out, &labels.to_json()?)?;
    manifest.outputs.push(a.out.clone());
    manifest.finish(&manifest_for(&a.out))
}

fn cmd_verify(a: VerifyArgs) -> anyhow::Result<()> {
    if a.sigma.is_nan() || a.sigma <= 0.0 || a.samples == 0 {
        bail!(usage("--sigma must be positive and --samples nonzero"));
    }
    let mut manifest = RunManifest::start();
    let data = load_dataset(&a.data)?;
    manifest.inputs.push(a.data.clone());
    let d = data
        .part(SplitKind::Test)
        .first()
        .ok_or_else(|| usage("dataset has an empty test split"))?;
    let report = verify_prop2(&data.instance, d, a.sigma, a.samples, a.seed)?;
    let json = serde_json::to_string_pretty(&report)?;
    match &a.out {
        Some(p) => {
            write_atomic(p, &json)?;
            manifest.outputs.push(p.clone());
            manifest.finish(&manifest_for(p))
        }
        None => {
            println!("{json}");
            Ok(())
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Usage>().is_some() {
        return EXIT_USAGE;
    }
    match err.downcast_ref::<deeplde::Error>() {
        Some(deeplde::Error::Diverged { .. }) => EXIT_DIVERGED,
        Some(deeplde::Error::OracleFailed(_)) => EXIT_ORACLE,
        Some(deeplde::Error::InvalidConfig(_)) => EXIT_USAGE,
        _ => 1,
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let threads = cli.threads.unwrap_or(0);
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build()?;
    pool.install(|| match cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Oracle(a) => cmd_oracle(a),
        Command::Verify(a) => cmd_verify(a),
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
