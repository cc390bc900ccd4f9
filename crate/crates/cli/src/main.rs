//! `monocone`: command-line shell around the estimation library.
//!
//! Every subcommand reads one TOML config, derives all randomness from
//! its global seed (overridable with --seed) and writes deterministic
//! artifacts into --out: CSV tables, a `skipped.csv` companion, binary
//! datasets and model files. Exit codes: 0 success, 1 usage, 2 config
//! error, 3 runtime failure.

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use monocone_core::config::{ConfigError, RunConfig};
use monocone_core::experiments::{
    exp_bbox_perturbation, exp_depth_accuracy, exp_kp_variance, observations_csv, stereo_eval,
    CsvReport,
};
use monocone_core::pipeline::{estimate_frame, Predictor};
use monocone_core::regressor::{load_model, save_model, EvalMetrics, RegressorNet};
use monocone_core::synth::{generate_dataset, generate_scene, read_dataset, write_dataset};

/// Salt for the held-out set so train/test never share sample streams.
const TEST_SEED_SALT: u64 = 0x7e57_5e7_5a17;

#[derive(Parser)]
#[command(
    name = "monocone",
    version,
    about = "Monocular 3D cone position estimation from regressed keypoints"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render the synthetic train and test datasets.
    Synth(Common),
    /// Train the keypoint regressor on the rendered train set.
    Train(Common),
    /// Report a trained model's metrics on the rendered datasets.
    Eval(Common),
    /// Estimate cone positions for one synthetic scene.
    Estimate(Common),
    /// Depth sweep: estimation error as a function of distance.
    ExpDepth(Common),
    /// Depth variance under detector bounding-box noise (needs --model).
    ExpBbox(Common),
    /// Depth variance under axis-separated keypoint noise.
    ExpKpvar(Common),
    /// Mono versus stereo depth on identical noisy frames.
    StereoEval(Common),
}

impl Cmd {
    fn common(&self) -> &Common {
        match self {
            Cmd::Synth(c)
            | Cmd::Train(c)
            | Cmd::Eval(c)
            | Cmd::Estimate(c)
            | Cmd::ExpDepth(c)
            | Cmd::ExpBbox(c)
            | Cmd::ExpKpvar(c)
            | Cmd::StereoEval(c) => c,
        }
    }
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML, all keys required).
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Overrides the config's global seed.
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
    /// Output directory; created if missing.
    #[arg(long, value_name = "DIR", default_value = "out")]
    out: PathBuf,
    /// Trained model file. Written by `train` (default <out>/model.kprn);
    /// read by `eval` and `exp-bbox`, and switches `estimate` and
    /// `exp-depth` from annotated keypoints to the net.
    #[arg(long, value_name = "PATH")]
    model: Option<PathBuf>,
}

impl Common {
    fn model_path(&self) -> PathBuf {
        self.model.clone().unwrap_or_else(|| self.out.join("model.kprn"))
    }
}

enum CliError {
    Usage(String),
    Config(ConfigError),
    Runtime(anyhow::Error),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Config(e) => write!(f, "{e}"),
            CliError::Runtime(e) => write!(f, "{e:#}"),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e)
    }
}

/// Anything that fails after the config parsed is a runtime failure.
fn runtime<E: Into<anyhow::Error>>(e: E) -> CliError {
    CliError::Runtime(e.into())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests print to stdout and succeed;
            // everything else is a usage error.
            let code = u8::from(e.use_stderr());
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let common = cli.cmd.common();
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    match &cli.cmd {
        Cmd::Synth(c) => cmd_synth(c, &cfg),
        Cmd::Train(c) => cmd_train(c, &cfg),
        Cmd::Eval(c) => cmd_eval(c, &cfg),
        Cmd::Estimate(c) => cmd_estimate(c, &cfg),
        Cmd::ExpDepth(c) => cmd_exp_depth(c, &cfg),
        Cmd::ExpBbox(c) => cmd_exp_bbox(c, &cfg),
        Cmd::ExpKpvar(c) => write_report(c, "kpvar.csv", &exp_kp_variance(&cfg).map_err(runtime)?),
        Cmd::StereoEval(c) => write_report(c, "stereo.csv", &stereo_eval(&cfg).map_err(runtime)?),
    }
}

fn out_file(c: &Common, name: &str, contents: &str) -> Result<PathBuf, CliError> {
    std::fs::create_dir_all(&c.out).map_err(runtime)?;
    let path = c.out.join(name);
    std::fs::write(&path, contents).map_err(runtime)?;
    Ok(path)
}

fn write_report(c: &Common, name: &str, rep: &CsvReport) -> Result<(), CliError> {
    let table = out_file(c, name, &rep.table)?;
    out_file(c, "skipped.csv", &rep.skipped)?;
    let rows = rep.table.lines().skip(1).filter(|l| !l.starts_with('#')).count();
    let skips = rep.skipped.lines().count() - 1;
    println!("wrote {} ({rows} rows, {skips} skipped)", table.display());
    Ok(())
}

fn load_net(path: &Path) -> Result<RegressorNet, CliError> {
    load_model::<f32, _>(path)
        .map_err(|e| runtime(anyhow::anyhow!("loading model {}: {e}", path.display())))
}

/// Annotated keypoints by default; the trained net when --model is given.
fn predictor(c: &Common) -> Result<Predictor, CliError> {
    Ok(match &c.model {
        Some(path) => Predictor::Net(load_net(path)?),
        None => Predictor::Oracle,
    })
}

fn cmd_synth(c: &Common, cfg: &RunConfig) -> Result<(), CliError> {
    let cam = cfg.camera_model()?;
    let g = cfg.cone_geometry()?;
    let noise = cfg.noise_params();
    let e = &cfg.experiment;
    std::fs::create_dir_all(&c.out).map_err(runtime)?;
    for (name, n, seed) in [
        ("train.cpds", e.train_samples, cfg.seed),
        ("test.cpds", e.test_samples, cfg.seed ^ TEST_SEED_SALT),
    ] {
        let samples = generate_dataset(
            &cam,
            &g,
            n,
            e.range_min,
            e.range_max,
            e.ground_y,
            &noise,
            e.margin_frac,
            seed,
        )
        .map_err(runtime)?;
        let path = c.out.join(name);
        write_dataset(&path, &samples).map_err(runtime)?;
        println!("wrote {} ({n} samples)", path.display());
    }
    Ok(())
}

fn cmd_train(c: &Common, cfg: &RunConfig) -> Result<(), CliError> {
    let train_path = c.out.join("train.cpds");
    let samples = read_dataset(&train_path).map_err(|e| {
        runtime(anyhow::anyhow!("reading {} (run `synth` first): {e}", train_path.display()))
    })?;
    let mut net = RegressorNet::new(&cfg.net_config(), cfg.seed).map_err(runtime)?;
    let started = std::time::Instant::now();
    let history = net.train(&samples, &cfg.train_config()).map_err(runtime)?;

    let mut csv = String::from("epoch,mean_loss\n");
    for (i, loss) in history.iter().enumerate() {
        csv.push_str(&format!("{},{}\n", i + 1, loss));
    }
    out_file(c, "history.csv", &csv)?;
    let model_path = c.model_path();
    save_model(&model_path, &net).map_err(runtime)?;
    println!(
        "trained {} epochs in {:.1}s, final mean_loss={}",
        history.len(),
        started.elapsed().as_secs_f64(),
        history.last().copied().unwrap_or(f64::NAN),
    );
    println!("wrote {}", model_path.display());
    Ok(())
}

fn metrics_line(split: &str, n: usize, m: &EvalMetrics) -> String {
    let mean_rms = m.per_keypoint_rms.iter().sum::<f64>() / 7.0;
    let worst = m.per_keypoint_rms.iter().cloned().fold(0.0, f64::max);
    format!(
        "{split} n={n} mean_loss={} mean_rms_px={} worst_kp_rms_px={} cr_err_l={} cr_err_r={}",
        m.mean_loss, mean_rms, worst, m.mean_cr_err[0], m.mean_cr_err[1]
    )
}

fn cmd_eval(c: &Common, cfg: &RunConfig) -> Result<(), CliError> {
    let net = load_net(&c.model_path())?;
    let mut evaluated = 0;
    for (split, name) in [("train", "train.cpds"), ("test", "test.cpds")] {
        let path = c.out.join(name);
        if !path.exists() {
            continue;
        }
        let samples = read_dataset(&path).map_err(runtime)?;
        let m = net.evaluate(&samples, cfg.train.gamma).map_err(runtime)?;
        println!("{}", metrics_line(split, samples.len(), &m));
        evaluated += 1;
    }
    if evaluated == 0 {
        return Err(runtime(anyhow::anyhow!(
            "no datasets in {} (run `synth` first)",
            c.out.display()
        )));
    }
    Ok(())
}

fn cmd_estimate(c: &Common, cfg: &RunConfig) -> Result<(), CliError> {
    let cam = cfg.camera_model()?;
    let g = cfg.cone_geometry()?;
    let e = &cfg.experiment;
    let scene = generate_scene(e.range_min, e.range_max, e.scene_cones, &cam, &g, e.ground_y, cfg.seed)
        .map_err(runtime)?;
    let frame = estimate_frame(&scene, &predictor(c)?, cfg).map_err(runtime)?;
    write_report(c, "observations.csv", &observations_csv(&frame))
}

fn cmd_exp_depth(c: &Common, cfg: &RunConfig) -> Result<(), CliError> {
    let rep = exp_depth_accuracy(cfg, &predictor(c)?).map_err(runtime)?;
    write_report(c, "depth.csv", &rep)?;
    if let Some(fit) = rep.table.lines().last().filter(|l| l.starts_with('#')) {
        println!("{fit}");
    }
    Ok(())
}

fn cmd_exp_bbox(c: &Common, cfg: &RunConfig) -> Result<(), CliError> {
    let Some(model) = &c.model else {
        return Err(CliError::Usage(
            "exp-bbox needs --model <PATH>: the study perturbs the box the net sees".into(),
        ));
    };
    let net = load_net(model)?;
    write_report(c, "bbox.csv", &exp_bbox_perturbation(cfg, &net).map_err(runtime)?)
}
