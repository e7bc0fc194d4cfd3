use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use contactsdf::experiments::{run_trials, sdf_grid, step_compare, write_grid_csv, BenchSummary};
use contactsdf::geometry::{build_from_off, SupportPlaneSet};
use contactsdf::learning::{on_mpc_training, LearnConfig};
use contactsdf::mpc::{receding_horizon_rollout, write_rollout_csv, ControllerKind, MpcConfig};
use contactsdf::scenes::{sample_target, scene_by_name, Env, SceneSpec};
use contactsdf::stepper::ModelParams;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Runtime(#[from] contactsdf::Error),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(contactsdf::Error::UnknownScene(_)) => 1,
            _ => 2,
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

#[derive(Parser, Debug)]
#[command(
    name = "contactsdf",
    version,
    about = "Smooth-contact modelling, control and learning experiments"
)]
struct Cli {
    /// Output directory.
    #[arg(long, global = true, env = "CONTACTSDF_OUT", default_value = "out")]
    out: PathBuf,
    /// JSON config file; command-line flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Exact, max and smoothed distances on a regular grid.
    SdfGrid(GridArgs),
    /// Smoothed step against the QP oracle over random contact configurations.
    StepCompare(CompareArgs),
    /// One receding-horizon rollout with per-step logs.
    Mpc(MpcArgs),
    /// Parameter learning from controller rollouts.
    Learn(LearnArgs),
    /// Repeated rollouts towards sampled targets with summary statistics.
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
struct GridArgs {
    /// Plane set as JSON or an OFF mesh.
    #[arg(long)]
    planes: Option<PathBuf>,
    /// Use the object of a built-in scene.
    #[arg(long)]
    scene: Option<String>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    lower: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    upper: Option<Vec<f64>>,
    #[arg(long)]
    resolution: Option<usize>,
    #[arg(long)]
    sigma: Option<f64>,
    /// Height of a 2D slice.
    #[arg(long, allow_hyphen_values = true)]
    z: Option<f64>,
}

#[derive(Args, Debug)]
struct CompareArgs {
    #[arg(long)]
    scene: Option<String>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    sigmas: Option<Vec<f64>>,
    #[arg(long)]
    eps: Option<f64>,
}

#[derive(Args, Debug)]
struct RolloutArgs {
    #[arg(long)]
    scene: Option<String>,
    /// Receding-horizon length.
    #[arg(long)]
    steps: Option<usize>,
    /// Planning model: contact-sdf or relaxed-qp.
    #[arg(long)]
    controller: Option<String>,
    /// Relaxation for the relaxed-qp controller.
    #[arg(long)]
    eps: Option<f64>,
    /// Override the planning σ.
    #[arg(long)]
    sigma: Option<f64>,
    /// Planning parameters as JSON (plain or a learning checkpoint).
    #[arg(long)]
    params: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct MpcArgs {
    #[command(flatten)]
    rollout: RolloutArgs,
    /// Index into the scene's enumerated targets; sampled from the seed otherwise.
    #[arg(long)]
    target: Option<usize>,
}

#[derive(Args, Debug)]
struct LearnArgs {
    #[arg(long)]
    scene: Option<String>,
    #[arg(long)]
    rollouts: Option<usize>,
    #[arg(long)]
    rollout_steps: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[command(flatten)]
    rollout: RolloutArgs,
    #[arg(long)]
    trials: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GridConfig {
    #[serde(default)]
    planes: Option<PathBuf>,
    #[serde(default = "default_scene")]
    scene: String,
    #[serde(default = "default_lower")]
    lower: Vec<f64>,
    #[serde(default = "default_upper")]
    upper: Vec<f64>,
    #[serde(default = "default_resolution")]
    resolution: usize,
    #[serde(default = "default_sigma")]
    sigma: f64,
    #[serde(default)]
    z: f64,
    #[serde(default)]
    seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CompareConfig {
    #[serde(default = "default_scene")]
    scene: String,
    #[serde(default = "default_samples")]
    samples: usize,
    #[serde(default = "default_sigmas")]
    sigmas: Vec<f64>,
    #[serde(default = "default_eps")]
    eps: f64,
    #[serde(default)]
    seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RolloutConfig {
    #[serde(default = "default_scene")]
    scene: String,
    #[serde(default)]
    steps: Option<usize>,
    #[serde(default = "default_controller")]
    controller: ControllerKind,
    #[serde(default)]
    sigma: Option<f64>,
    #[serde(default)]
    params: Option<PathBuf>,
    /// Replaces the scene's controller settings; the target is still set per run.
    #[serde(default)]
    mpc: Option<MpcConfig>,
    #[serde(default)]
    target: Option<usize>,
    #[serde(default = "default_trials")]
    trials: usize,
    #[serde(default)]
    seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LearnRunConfig {
    #[serde(default = "default_scene")]
    scene: String,
    #[serde(default = "default_learn")]
    learn: LearnConfig,
}

fn default_scene() -> String {
    "three-ball-cube".into()
}
fn default_lower() -> Vec<f64> {
    vec![-0.1, -0.1]
}
fn default_upper() -> Vec<f64> {
    vec![0.1, 0.1]
}
fn default_resolution() -> usize {
    41
}
fn default_sigma() -> f64 {
    1000.0
}
fn default_samples() -> usize {
    100
}
fn default_sigmas() -> Vec<f64> {
    vec![10.0, 50.0, 100.0, 500.0, 1000.0]
}
fn default_eps() -> f64 {
    1e-4
}
fn default_controller() -> ControllerKind {
    ControllerKind::ContactSdf
}
fn default_trials() -> usize {
    7
}
fn default_learn() -> LearnConfig {
    LearnConfig {
        rollouts: 48,
        rollout_steps: 100,
        update_every: 4,
        epochs: 50,
        learning_rate: 0.05,
        momentum: 0.9,
        buffer_capacity: 400,
        normalize_loss: true,
        seed: 0,
    }
}

/// Config file contents, or the all-defaults document.
fn load_config<T: DeserializeOwned>(path: Option<&Path>) -> CliResult<T> {
    let text = match path {
        Some(p) => fs::read_to_string(p).map_err(|e| io_err(p, e))?,
        None => "{}".into(),
    };
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("config: {e}")))
}

#[derive(Debug, Serialize)]
struct Metadata {
    command: &'static str,
    config_hash: String,
    seed: u64,
    version: &'static str,
}

fn metadata<T: Serialize>(command: &'static str, config: &T, seed: u64) -> Metadata {
    let canonical = serde_json::to_vec(config).expect("configs serialize");
    let hash = Sha256::digest(&canonical);
    Metadata {
        command,
        config_hash: hash.iter().map(|b| format!("{b:02x}")).collect(),
        seed,
        version: env!("CARGO_PKG_VERSION"),
    }
}

fn csv_preamble(meta: &Metadata) -> String {
    format!(
        "# command={} config_hash={} seed={} version={}\n",
        meta.command, meta.config_hash, meta.seed, meta.version
    )
}

fn create_out(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Io(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| io_err(path, e))?;
    println!("{}", path.display());
    Ok(())
}

fn scene(name: &str) -> CliResult<SceneSpec> {
    Ok(scene_by_name(name)?)
}

fn parse_controller(name: &str, eps: Option<f64>) -> CliResult<ControllerKind> {
    match name {
        "contact-sdf" => Ok(ControllerKind::ContactSdf),
        "relaxed-qp" => Ok(ControllerKind::RelaxedQp {
            eps: eps.unwrap_or(1e-4),
        }),
        other => Err(CliError::Usage(format!(
            "unknown controller '{other}' (expected contact-sdf or relaxed-qp)"
        ))),
    }
}

/// Plain parameters, or the `params` entry of a learning checkpoint.
fn load_params(path: &Path) -> CliResult<ModelParams> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| io_err(path, e))?;
    let doc = value.get("params").cloned().unwrap_or(value);
    serde_json::from_value(doc).map_err(|e| io_err(path, e))
}

fn cmd_sdf_grid(cli: &Cli, a: &GridArgs) -> CliResult<()> {
    let mut c: GridConfig = load_config(cli.config.as_deref())?;
    if let Some(p) = &a.planes {
        c.planes = Some(p.clone());
    }
    if let Some(s) = &a.scene {
        c.scene = s.clone();
        c.planes = None;
    }
    c.lower = a.lower.clone().unwrap_or(c.lower);
    c.upper = a.upper.clone().unwrap_or(c.upper);
    c.resolution = a.resolution.unwrap_or(c.resolution);
    c.sigma = a.sigma.unwrap_or(c.sigma);
    c.z = a.z.unwrap_or(c.z);
    c.seed = cli.seed.unwrap_or(c.seed);
    if c.resolution == 0 {
        return Err(CliError::Usage("resolution must be positive".into()));
    }
    if c.lower.len() != c.upper.len() || !(2..=3).contains(&c.lower.len()) {
        return Err(CliError::Usage(
            "lower and upper need 2 or 3 matching coordinates".into(),
        ));
    }
    if !(c.sigma > 0.0) {
        return Err(CliError::Usage("sigma must be positive".into()));
    }
    let planes = match &c.planes {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| io_err(p, e))?;
            if p.extension().is_some_and(|e| e.eq_ignore_ascii_case("off")) {
                build_from_off(&text)?
            } else {
                serde_json::from_str::<SupportPlaneSet>(&text).map_err(|e| io_err(p, e))?
            }
        }
        None => scene(&c.scene)?.object,
    };
    let rows = sdf_grid(&planes, &c.lower, &c.upper, c.resolution, c.sigma, c.z)?;
    let meta = metadata("sdf-grid", &c, c.seed);
    create_out(&cli.out)?;
    let path = cli.out.join("sdf_grid.csv");
    let mut buf = csv_preamble(&meta).into_bytes();
    write_grid_csv(&mut buf, &rows, c.lower.len() == 3, c.sigma)?;
    fs::write(&path, buf).map_err(|e| io_err(&path, e))?;
    println!("{}", path.display());
    Ok(())
}

fn cmd_step_compare(cli: &Cli, a: &CompareArgs) -> CliResult<()> {
    let mut c: CompareConfig = load_config(cli.config.as_deref())?;
    c.scene = a.scene.clone().unwrap_or(c.scene);
    c.samples = a.samples.unwrap_or(c.samples);
    c.sigmas = a.sigmas.clone().unwrap_or(c.sigmas);
    c.eps = a.eps.unwrap_or(c.eps);
    c.seed = cli.seed.unwrap_or(c.seed);
    if c.sigmas.is_empty() || c.sigmas.iter().any(|s| !(*s > 0.0)) || !(c.eps > 0.0) {
        return Err(CliError::Usage(
            "sigmas must be a non-empty positive list and eps positive".into(),
        ));
    }
    let s = scene(&c.scene)?;
    let report = step_compare(&s, &s.true_params, c.samples, &c.sigmas, c.eps, c.seed)?;
    create_out(&cli.out)?;
    #[derive(Serialize)]
    struct Out<'a> {
        metadata: Metadata,
        config: &'a CompareConfig,
        report: contactsdf::experiments::StepCompareReport,
    }
    write_json(
        &cli.out.join("step_compare.json"),
        &Out {
            metadata: metadata("step-compare", &c, c.seed),
            config: &c,
            report,
        },
    )
}

fn rollout_config(cli: &Cli, a: &RolloutArgs) -> CliResult<RolloutConfig> {
    let mut c: RolloutConfig = load_config(cli.config.as_deref())?;
    c.scene = a.scene.clone().unwrap_or(c.scene);
    if a.steps.is_some() {
        c.steps = a.steps;
    }
    if let Some(name) = &a.controller {
        c.controller = parse_controller(name, a.eps)?;
    } else if let (Some(eps), ControllerKind::RelaxedQp { .. }) = (a.eps, c.controller) {
        c.controller = ControllerKind::RelaxedQp { eps };
    }
    if a.sigma.is_some() {
        c.sigma = a.sigma;
    }
    if a.params.is_some() {
        c.params = a.params.clone();
    }
    c.seed = cli.seed.unwrap_or(c.seed);
    if let ControllerKind::RelaxedQp { eps } = c.controller {
        if !(eps > 0.0) {
            return Err(CliError::Usage("eps must be positive".into()));
        }
    }
    Ok(c)
}

/// Scene with overrides applied, and the planning parameters.
fn resolve(c: &RolloutConfig) -> CliResult<(SceneSpec, ModelParams)> {
    let mut s = scene(&c.scene)?;
    if let Some(m) = &c.mpc {
        m.validate(s.n_robot())?;
        s.mpc = m.clone();
    }
    let mut params = match &c.params {
        Some(p) => load_params(p)?,
        None => s.model_params.clone(),
    };
    if let Some(sigma) = c.sigma {
        if !(sigma > 0.0) {
            return Err(CliError::Usage("sigma must be positive".into()));
        }
        params.sigma = sigma;
    }
    params.validate()?;
    if params.n_robot() != s.n_robot() {
        return Err(CliError::Usage(format!(
            "parameters are for {} robot coordinates, scene has {}",
            params.n_robot(),
            s.n_robot()
        )));
    }
    Ok((s, params))
}

fn cmd_mpc(cli: &Cli, a: &MpcArgs) -> CliResult<()> {
    let mut c = rollout_config(cli, &a.rollout)?;
    if a.target.is_some() {
        c.target = a.target;
    }
    let (s, params) = resolve(&c)?;
    let targets = s.enumerate_targets();
    let target = match c.target {
        Some(i) => *targets.get(i).ok_or_else(|| {
            CliError::Usage(format!(
                "target {i} out of range (scene has {})",
                targets.len()
            ))
        })?,
        None => sample_target(&s, &mut ChaCha8Rng::seed_from_u64(c.seed)),
    };
    let steps = c.steps.unwrap_or(s.rollout_steps);
    let cfg = s.config_for(&target);
    let mut env = Env::new(s, c.seed)?;
    let rollout = receding_horizon_rollout(&mut env, &params, &cfg, steps, c.controller)?;
    let meta = metadata("mpc", &c, c.seed);
    create_out(&cli.out)?;
    let path = cli.out.join("rollout.csv");
    let mut buf = csv_preamble(&meta).into_bytes();
    write_rollout_csv(&mut buf, &rollout.records)?;
    fs::write(&path, buf).map_err(|e| io_err(&path, e))?;
    println!("{}", path.display());
    #[derive(Serialize)]
    struct Out<'a> {
        metadata: Metadata,
        config: &'a RolloutConfig,
        target_position: [f64; 3],
        target_quaternion: [f64; 4],
        metrics: contactsdf::mpc::RolloutMetrics,
    }
    let q = target.1;
    write_json(
        &cli.out.join("mpc_summary.json"),
        &Out {
            metadata: meta,
            config: &c,
            target_position: target.0.into(),
            target_quaternion: [q.w, q.i, q.j, q.k],
            metrics: rollout.metrics,
        },
    )
}

fn cmd_learn(cli: &Cli, a: &LearnArgs) -> CliResult<()> {
    let mut c: LearnRunConfig = load_config(cli.config.as_deref())?;
    c.scene = a.scene.clone().unwrap_or(c.scene);
    let l = &mut c.learn;
    l.rollouts = a.rollouts.unwrap_or(l.rollouts);
    l.rollout_steps = a.rollout_steps.unwrap_or(l.rollout_steps);
    l.epochs = a.epochs.unwrap_or(l.epochs);
    l.learning_rate = a.learning_rate.unwrap_or(l.learning_rate);
    l.seed = cli.seed.unwrap_or(l.seed);
    l.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let s = scene(&c.scene)?;
    let initial = s.learning_init.clone();
    let mut env = Env::new(s, c.learn.seed)?;
    let result = on_mpc_training(&mut env, &initial, &c.learn)?;
    let meta = metadata("learn", &c, c.learn.seed);
    create_out(&cli.out)?;
    for (name, loss) in [("loss_curve.csv", true), ("cost_curve.csv", false)] {
        let path = cli.out.join(name);
        let mut buf = csv_preamble(&meta).into_bytes();
        if loss {
            result.curves.write_loss_csv(&mut buf)?;
        } else {
            result.curves.write_cost_csv(&mut buf)?;
        }
        fs::write(&path, buf).map_err(|e| io_err(&path, e))?;
        println!("{}", path.display());
    }
    #[derive(Serialize)]
    struct Checkpoint<'a> {
        metadata: Metadata,
        config: &'a LearnRunConfig,
        env_steps: usize,
        theta: &'a contactsdf::learning::ParamVector,
        params: &'a ModelParams,
    }
    write_json(
        &cli.out.join("theta.json"),
        &Checkpoint {
            metadata: meta,
            config: &c,
            env_steps: result.curves.env_steps,
            theta: &result.theta,
            params: &result.params,
        },
    )
}

fn cmd_bench(cli: &Cli, a: &BenchArgs) -> CliResult<()> {
    let mut c = rollout_config(cli, &a.rollout)?;
    c.trials = a.trials.unwrap_or(c.trials);
    if c.trials == 0 {
        return Err(CliError::Usage("trials must be positive".into()));
    }
    let (s, params) = resolve(&c)?;
    let steps = c.steps.unwrap_or(s.rollout_steps);
    let results = run_trials(&s, &params, c.trials, steps, c.controller, c.seed)?;
    let summary = BenchSummary::from_results(results);
    create_out(&cli.out)?;
    #[derive(Serialize)]
    struct Out<'a> {
        metadata: Metadata,
        config: &'a RolloutConfig,
        summary: BenchSummary,
    }
    write_json(
        &cli.out.join("bench.json"),
        &Out {
            metadata: metadata("bench", &c, c.seed),
            config: &c,
            summary,
        },
    )
}

fn run(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::SdfGrid(a) => cmd_sdf_grid(cli, a),
        Command::StepCompare(a) => cmd_step_compare(cli, a),
        Command::Mpc(a) => cmd_mpc(cli, a),
        Command::Learn(a) => cmd_learn(cli, a),
        Command::Bench(a) => cmd_bench(cli, a),
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
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
