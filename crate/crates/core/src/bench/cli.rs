//! Command-line front end. `run` maps argv to an exit code: 0 on success,
//! 1 for usage errors, 2 when the run itself fails.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::attack::{AttackConfig, AttackLoss};
use crate::error::{Error, Result};

use super::analysis::{BoundMethod, LossSpec, LAMBDA_GRID};
use super::config::{preset, resolve_data_dir, RunConfig};
use super::jobs::*;
use super::manifest::{replay, RunManifest};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_FAILURE: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "sabr", version, about = "Certified training with small adversarial bounding regions")]
pub struct Cli {
    /// Only log warnings and errors.
    #[arg(long, short, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a network (IBP when lambda = 1).
    Train(TrainArgs),
    /// Evaluate adversarial accuracy under PGD.
    Attack(AttackArgs),
    /// Certify ℓ∞ robustness of test samples.
    Certify(CertifyArgs),
    /// Ablation analyses of a trained network.
    #[command(subcommand)]
    Analyze(AnalyzeCommand),
    /// Expected ReLU output radius for a centre distribution.
    GrowthSim(GrowthArgs),
    /// Re-run a recorded run and compare its outputs.
    Replay(ReplayArgs),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Named configuration, e.g. mnist-sabr-0.1.
    #[arg(long, conflicts_with = "config")]
    pub preset: Option<String>,
    /// TOML configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory with the MNIST IDX files.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value = "runs/train")]
    pub out: PathBuf,
    #[arg(long)]
    pub arch: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub l1: Option<f64>,
    #[arg(long)]
    pub shrink: Option<f64>,
    #[arg(long)]
    pub train_samples: Option<usize>,
    #[arg(long)]
    pub monitor_samples: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long, default_value_t = 1000)]
    pub samples: usize,
    #[arg(long)]
    pub eps: f64,
}

#[derive(Args, Debug)]
pub struct PgdArgs {
    #[arg(long, default_value_t = 50)]
    pub steps: usize,
    #[arg(long, default_value_t = 5)]
    pub restarts: usize,
    #[arg(long, default_value_t = 0.5)]
    pub alpha: f64,
    #[arg(long, value_enum, default_value = "margin")]
    pub loss: AttackLoss,
    #[arg(long = "attack-seed", default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct AttackArgs {
    #[command(flatten)]
    pub eval: EvalArgs,
    #[command(flatten)]
    pub pgd: PgdArgs,
    #[arg(long, default_value = "attack.csv")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct CertifyArgs {
    #[command(flatten)]
    pub eval: EvalArgs,
    #[arg(long, value_enum, default_value = "box")]
    pub method: BoundMethod,
    #[arg(long, default_value = "certs.csv")]
    pub out: PathBuf,
}

#[derive(Subcommand, Debug)]
pub enum AnalyzeCommand {
    /// Active / inactive / unstable ReLU fractions on points and ε-balls.
    ReluStates {
        #[command(flatten)]
        eval: EvalArgs,
        #[arg(long, default_value = "relu_states.csv")]
        out: PathBuf,
    },
    /// Mean cosine between parameter gradients of two losses
    /// (ce | adv | ibp | robust:<lambda> | neg:<loss>).
    GradCosine {
        #[command(flatten)]
        eval: EvalArgs,
        #[arg(long)]
        a: String,
        #[arg(long)]
        b: String,
        #[arg(long, default_value = "grad_cosine.csv")]
        out: PathBuf,
    },
    /// Robust loss over propagation-region sizes.
    LossCurve {
        #[command(flatten)]
        eval: EvalArgs,
        #[arg(long, value_enum, default_value = "box")]
        method: BoundMethod,
        #[arg(long, value_delimiter = ',')]
        lambdas: Option<Vec<f64>>,
        #[arg(long, default_value = "loss_curve.csv")]
        out: PathBuf,
    },
    /// Mean accuracy and robustness terms of the robust loss.
    LossDecomp {
        #[command(flatten)]
        eval: EvalArgs,
        #[arg(long, value_delimiter = ',')]
        lambdas: Option<Vec<f64>>,
        #[arg(long, default_value = "loss_decomp.csv")]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
pub struct GrowthArgs {
    /// gaussian:<mean>,<std> | piecewise:<a>,<b> | empirical:<file>
    #[arg(long)]
    pub dist: String,
    /// start:stop:step
    #[arg(long)]
    pub grid: String,
    #[arg(long, default_value = "growth.csv")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ReplayArgs {
    /// A run manifest written by an earlier invocation.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Directory for the regenerated outputs.
    #[arg(long)]
    pub out_dir: PathBuf,
}

fn source(e: &EvalArgs) -> Result<EvalSource> {
    if !(e.eps >= 0.0) {
        return Err(Error::invalid("--eps must be non-negative"));
    }
    if e.split != "train" && e.split != "test" {
        return Err(Error::invalid("--split must be train or test"));
    }
    Ok(EvalSource {
        checkpoint: e.checkpoint.clone(),
        data_dir: resolve_data_dir(e.data.as_deref(), None),
        split: e.split.clone(),
        samples: e.samples,
        eps: e.eps,
    })
}

/// Attack used for regions and adversarial losses in analyses.
fn analysis_attack() -> AttackConfig {
    AttackConfig::training()
}

fn lambdas(given: &Option<Vec<f64>>) -> Result<Vec<f64>> {
    let l = given.clone().unwrap_or_else(|| LAMBDA_GRID.to_vec());
    if l.iter().any(|&x| !(x > 0.0 && x <= 1.0)) {
        return Err(Error::invalid("lambdas must lie in (0, 1]"));
    }
    Ok(l)
}

fn train_job(a: &TrainArgs) -> Result<Job> {
    let mut cfg = match (&a.preset, &a.config) {
        (Some(p), None) => preset(p)?,
        (None, Some(path)) => RunConfig::load(path)?,
        (None, None) => RunConfig::default(),
        (Some(_), Some(_)) => return Err(Error::invalid("--preset and --config are exclusive")),
    };
    let t = &mut cfg.train;
    macro_rules! set {
        ($($src:ident => $dst:expr),*) => {$(if let Some(v) = a.$src.clone() { $dst = v; })*};
    }
    set!(epochs => t.epochs, eps => t.eps, lambda => t.lambda, seed => t.seed, lr => t.lr,
         batch_size => t.batch_size, l1 => t.l1, shrink => t.shrink, monitor_samples => t.monitor_samples,
         arch => cfg.arch);
    if a.max_steps.is_some() {
        cfg.train.max_steps = a.max_steps;
    }
    if a.train_samples.is_some() {
        cfg.train_samples = a.train_samples;
    }
    cfg.train.validate()?;
    crate::network::arch::by_name::<f32>(&cfg.arch, [1, 28, 28], 10)?;
    let data_dir = resolve_data_dir(a.data.as_deref(), Some(&cfg));
    Ok(Job::Train(TrainJob { config: cfg, data_dir, out_dir: a.out.clone() }))
}

/// Turns parsed arguments into a job; errors here are usage errors.
pub fn resolve(cmd: &Command) -> Result<Job> {
    Ok(match cmd {
        Command::Train(a) => train_job(a)?,
        Command::Attack(a) => {
            let attack = AttackConfig {
                steps: a.pgd.steps,
                alpha: a.pgd.alpha,
                restarts: a.pgd.restarts,
                loss: a.pgd.loss,
                seed: a.pgd.seed,
                ..AttackConfig::evaluation()
            };
            attack.validate()?;
            Job::Attack(AttackJob { source: source(&a.eval)?, attack, out: a.out.clone() })
        }
        Command::Certify(a) => Job::Certify(CertifyJob { source: source(&a.eval)?, method: a.method, out: a.out.clone() }),
        Command::Analyze(AnalyzeCommand::ReluStates { eval, out }) => {
            Job::ReluStates(ReluStatesJob { source: source(eval)?, out: out.clone() })
        }
        Command::Analyze(AnalyzeCommand::GradCosine { eval, a, b, out }) => Job::GradCosine(GradCosineJob {
            source: source(eval)?,
            a: a.parse::<LossSpec>()?,
            b: b.parse::<LossSpec>()?,
            attack: analysis_attack(),
            out: out.clone(),
        }),
        Command::Analyze(AnalyzeCommand::LossCurve { eval, method, lambdas: l, out }) => Job::LossCurve(LossCurveJob {
            source: source(eval)?,
            lambdas: lambdas(l)?,
            method: *method,
            attack: analysis_attack(),
            out: out.clone(),
        }),
        Command::Analyze(AnalyzeCommand::LossDecomp { eval, lambdas: l, out }) => Job::LossDecomp(LossDecompJob {
            source: source(eval)?,
            lambdas: lambdas(l)?,
            attack: analysis_attack(),
            out: out.clone(),
        }),
        Command::GrowthSim(a) => {
            parse_distribution(&a.dist)?;
            Job::GrowthSim(GrowthJob { dist: a.dist.clone(), grid: parse_grid(&a.grid)?, out: a.out.clone() })
        }
        Command::Replay(_) => return Err(Error::invalid("replay is not a recordable job")),
    })
}

/// Runs a job and records its manifest beside the outputs.
pub fn execute(job: &Job, argv: &[String]) -> Result<String> {
    let summary = job.run()?;
    let manifest = RunManifest::record(job, argv)?;
    manifest.save(&job.manifest_path())?;
    Ok(summary)
}

fn do_replay(a: &ReplayArgs) -> std::result::Result<String, (i32, Error)> {
    let m = RunManifest::load(&a.manifest).map_err(|e| (EXIT_USAGE, e))?;
    let report = replay(&m, &a.out_dir).map_err(|e| (EXIT_FAILURE, e))?;
    for p in &report.changed_inputs {
        tracing::warn!("input {p} changed since the recorded run");
    }
    let lines: Vec<String> = report
        .files
        .iter()
        .map(|(f, ok)| format!("{f}: {}", if *ok { "identical" } else { "DIFFERS" }))
        .collect();
    if report.identical() {
        Ok(lines.join("\n"))
    } else {
        Err((EXIT_FAILURE, Error::Manifest(format!("replay differs from the record:\n{}", lines.join("\n")))))
    }
}

fn init_logging(quiet: bool) {
    let level = if quiet { "warn" } else { "info" };
    let filter = tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(level));
    let _ = tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).try_init();
}

/// Entry point shared by the binary and tests.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let argv: Vec<String> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    init_logging(cli.quiet);
    if let Command::Replay(a) = &cli.command {
        return match do_replay(a) {
            Ok(s) => {
                println!("{s}");
                EXIT_OK
            }
            Err((code, e)) => {
                eprintln!("error: {e}");
                code
            }
        };
    }
    let job = match resolve(&cli.command) {
        Ok(j) => j,
        Err(e) => {
            eprintln!("error: {e}\n\nFor more information, try '--help'.");
            return EXIT_USAGE;
        }
    };
    match execute(&job, &argv) {
        Ok(summary) => {
            println!("{summary}");
            println!("manifest: {}", job.manifest_path().display());
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_FAILURE
        }
    }
}
