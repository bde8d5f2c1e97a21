//! `platevi`: train plate-amortized variational families on model files and
//! run the bundled experiments.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};

use platevi::experiments::{
    run_experiment, ExperimentName, ExperimentSpec, RunStatus, SCHEMA_VERSION,
};
use platevi::family::{FamilyConfig, Scheme, VariationalFamily};
use platevi::flows::{checkpoint, FlowConfig, Scaling};
use platevi::model::{parse_card_flag, parse_model_file, GroundModel};
use platevi::oracle;
use platevi::trainer::{rng_stream, train, Clock, RunSummary, Stream, TrainConfig};
use platevi::Error;

#[derive(Parser, Debug)]
#[command(
    name = "platevi",
    version,
    about = "Plate-amortized variational inference"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one variational family on data drawn from the model.
    Train(TrainArgs),
    /// Run a bundled experiment grid.
    Experiment(ExperimentArgs),
    /// Parse a model file and print its normalized form.
    Check {
        #[arg(long)]
        model: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FlowArg {
    Affine,
    Maf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ScalingArg {
    Diagonal,
    Triangular,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SchemeArg {
    PaviF,
    PaviE,
    SviBaseline,
}

impl From<SchemeArg> for Scheme {
    fn from(s: SchemeArg) -> Self {
        match s {
            SchemeArg::PaviF => Scheme::PaviF,
            SchemeArg::PaviE => Scheme::PaviE,
            SchemeArg::SviBaseline => Scheme::SviBaseline,
        }
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_enum, default_value = "pavi-f")]
    scheme: SchemeArg,
    /// Override a plate's cardinality, `NAME=N`; repeatable.
    #[arg(long = "card", value_parser = card_flag)]
    cards: Vec<(String, usize)>,
    /// Override a plate's reduced cardinality, `NAME=N`; repeatable.
    #[arg(long = "card-reduced", value_parser = card_flag)]
    reduced: Vec<(String, usize)>,
    #[arg(long, default_value_t = 8)]
    encoding_size: usize,
    #[arg(long, value_enum, default_value = "maf")]
    flow: FlowArg,
    /// Scale matrix of the affine block.
    #[arg(long, value_enum, default_value = "triangular")]
    scaling: ScalingArg,
    /// Hidden widths of the flow conditioners.
    #[arg(long, value_delimiter = ',', default_value = "32,32")]
    hidden: Vec<usize>,
    /// Hidden widths of the set encoder (pavi-e).
    #[arg(long, value_delimiter = ',', default_value = "32,32")]
    encoder_hidden: Vec<usize>,
    #[arg(long, default_value_t = 1000)]
    steps: usize,
    #[arg(long, default_value_t = 1e-2)]
    lr: f64,
    /// Multiplicative learning-rate decay per step.
    #[arg(long, default_value_t = 1.0)]
    lr_decay: f64,
    #[arg(long, default_value_t = 8)]
    mc_samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Draw a fresh dataset at every step (pavi-e only).
    #[arg(long)]
    sample_amortized: bool,
    #[arg(long, default_value_t = 500)]
    plateau_window: usize,
    #[arg(long, default_value_t = 1e-3)]
    plateau_tol: f64,
    #[arg(long)]
    stop_on_plateau: bool,
    /// Full-ELBO evaluation period; 0 evaluates only at the end.
    #[arg(long, default_value_t = 0)]
    eval_every: usize,
    #[arg(long, default_value_t = 64)]
    eval_samples: usize,
    #[arg(long, default_value_t = 256)]
    final_eval_samples: usize,
    /// Start from the weights in a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Record wall-clock time in the trace (otherwise zero, for reproducible
    /// files).
    #[arg(long)]
    timing: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ExperimentArgs {
    #[arg(value_parser = experiment_name)]
    name: ExperimentName,
    #[arg(long, default_value_t = 20)]
    data_samples: usize,
    #[arg(long, default_value_t = 5)]
    repetitions: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Override every grid point's step count.
    #[arg(long)]
    steps: Option<usize>,
    /// Override every grid point's flow kind.
    #[arg(long, value_enum)]
    flow: Option<FlowArg>,
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    #[arg(long)]
    timing: bool,
    /// Concurrent runs.
    #[arg(long, env = "PLATEVI_THREADS", default_value_t = 1)]
    threads: usize,
    #[arg(long)]
    out: PathBuf,
}

fn card_flag(s: &str) -> Result<(String, usize), String> {
    parse_card_flag(s).map_err(|e| e.to_string())
}

fn experiment_name(s: &str) -> Result<ExperimentName, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn flow_config(kind: FlowArg, hidden: Vec<usize>) -> FlowConfig {
    match kind {
        FlowArg::Affine => FlowConfig::affine(hidden),
        FlowArg::Maf => FlowConfig {
            hidden,
            ..FlowConfig::default()
        },
    }
}

enum Failure {
    Invalid(String),
    Run(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Parse { .. } | Error::Validation(_) | Error::Config(_) => {
                Failure::Invalid(e.to_string())
            }
            other => Failure::Run(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Run(e.to_string())
    }
}

#[derive(serde::Serialize)]
struct TrainSummary<'a> {
    schema_version: u32,
    #[serde(flatten)]
    summary: &'a RunSummary,
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::Run(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn run_train(a: TrainArgs) -> Result<(), Failure> {
    let graph = parse_model_file(&a.model).map_err(|e| match e {
        Error::Parse {
            line,
            column,
            message,
        } => Failure::Invalid(format!("{}:{line}:{column}: {message}", a.model.display())),
        other => other.into(),
    })?;
    let graph = Arc::new(graph.with_cards(&a.cards, &a.reduced)?);
    let scheme: Scheme = a.scheme.into();
    let family_cfg = FamilyConfig {
        scheme,
        flow: FlowConfig {
            scaling: match a.scaling {
                ScalingArg::Diagonal => Scaling::Diagonal,
                ScalingArg::Triangular => Scaling::Triangular,
            },
            ..flow_config(a.flow, a.hidden)
        },
        encoding_dim: a.encoding_size,
        encoder_hidden: a.encoder_hidden,
        ..FamilyConfig::default()
    };
    let cfg = TrainConfig {
        steps: a.steps,
        lr: a.lr,
        lr_decay: a.lr_decay,
        mc_samples: a.mc_samples,
        seed: a.seed,
        plateau_window: a.plateau_window,
        plateau_tol: a.plateau_tol,
        stop_on_plateau: a.stop_on_plateau,
        eval_every: a.eval_every,
        eval_samples: a.eval_samples,
        final_eval_samples: a.final_eval_samples,
        sample_amortized: a.sample_amortized,
        clock: if a.timing { Clock::Wall } else { Clock::Zero },
        ..TrainConfig::default()
    };
    cfg.validate(scheme)?;

    let full = GroundModel::full(graph.clone());
    let data = full
        .sample_prior(&mut rng_stream(a.seed, Stream::Data))?
        .observed_only(&graph);
    let mut family = VariationalFamily::build(
        graph.clone(),
        &family_cfg,
        &mut rng_stream(a.seed, Stream::Init),
    )?;
    if let Some(path) = &a.resume {
        checkpoint::restore(family.store_mut(), &fs::read(path)?)?;
    }
    let run = train(&mut family, &full, Some(&data), &cfg)?;

    fs::create_dir_all(&a.out)?;
    run.trace
        .write_csv(fs::File::create(a.out.join("trace.csv"))?)?;
    fs::write(
        a.out.join("weights.ckpt"),
        checkpoint::encode(family.store()),
    )?;
    let mut summary = run.summary(scheme, a.seed);
    if let Some(gre) = oracle::gre_structure(&graph) {
        let x = oracle::observations(&graph, &data)?;
        summary.oracle_log_evidence = Some(oracle::gre_posterior(&gre, x)?.log_evidence);
    }
    write_json(
        &a.out.join("summary.json"),
        &TrainSummary {
            schema_version: SCHEMA_VERSION,
            summary: &summary,
        },
    )?;
    println!(
        "{} steps, final ELBO {:.6} ± {:.6}, {} weights",
        run.steps, run.final_elbo.mean, run.final_elbo.se, run.parameter_count
    );
    if let Some(e) = summary.oracle_log_evidence {
        println!("log evidence {e:.6}");
    }
    match run.halted {
        Some(why) => Err(Failure::Run(format!("training halted: {why}"))),
        None => Ok(()),
    }
}

fn run_experiment_cmd(a: ExperimentArgs) -> Result<(), Failure> {
    let mut spec = ExperimentSpec::new(a.name, &a.out)?;
    spec.data_samples = a.data_samples;
    spec.repetitions = a.repetitions;
    spec.seed = a.seed;
    spec.threads = a.threads;
    if let Some(steps) = a.steps {
        spec = spec.with_steps(steps);
    }
    if a.flow.is_some() || a.hidden.is_some() {
        let hidden = a.hidden.unwrap_or_else(|| vec![32]);
        spec = spec.with_flow(flow_config(a.flow.unwrap_or(FlowArg::Affine), hidden));
    }
    if a.timing {
        spec = spec.with_clock(Clock::Wall);
    }
    let summary = run_experiment(&spec)?;
    for p in &summary.points {
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
        println!(
            "{:<22} ok {:>3}  failed {:>3}  elbo {} ± {}  evidence {}  weights {}",
            p.label,
            p.runs_ok,
            p.runs_failed,
            fmt(p.final_elbo_mean),
            fmt(p.final_elbo_std),
            fmt(p.oracle_log_evidence_mean),
            p.parameter_count
        );
    }
    if let Some(u) = &summary.unbiasedness {
        println!(
            "enumeration over {} batches: log q diff {:.3e}, grad diff {:.3e}, {}",
            u.batches,
            u.logq_max_abs_diff,
            u.grad_max_abs_diff,
            if u.pass { "equal" } else { "NOT equal" }
        );
    }
    for r in summary.runs.iter().filter(|r| r.status != RunStatus::Ok) {
        eprintln!(
            "run {} data {} rep {}: {:?} {}",
            r.label,
            r.data_index,
            r.repetition,
            r.status,
            r.error.as_deref().unwrap_or("")
        );
    }
    match summary.failures() {
        0 => Ok(()),
        n => Err(Failure::Run(format!("{n} run(s) failed"))),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => run_train(a),
        Command::Experiment(a) => run_experiment_cmd(a),
        Command::Check { model } => parse_model_file(&model)
            .map(|g| print!("{g}"))
            .map_err(|e| match e {
                Error::Parse {
                    line,
                    column,
                    message,
                } => Failure::Invalid(format!("{}:{line}:{column}: {message}", model.display())),
                other => other.into(),
            }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Run(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}
