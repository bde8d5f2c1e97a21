//! Experiment orchestration: grids of training runs over repeated datasets,
//! with one trace CSV per run and one JSON summary per experiment.

pub mod protocols;
mod unbiased;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

pub use unbiased::{unbiasedness_report, UnbiasednessReport, UNBIASEDNESS_TOLERANCE};

use crate::error::{Error, Result};
use crate::family::{FamilyConfig, Scheme, VariationalFamily};
use crate::flows::FlowConfig;
use crate::model::{Assignment, GroundModel, TemplateGraph};
use crate::oracle;
use crate::trainer::{full_elbo, rng_stream, train, Clock, RunSummary, Stream, Trace, TrainConfig};

/// Version of the CSV and JSON layouts written here.
pub const SCHEMA_VERSION: u32 = 1;

/// Fraction of the initial-to-oracle gap a run must close to be counted as
/// converged.
pub const CLOSURE_FRACTION: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentName {
    Convergence,
    EncodingSweep,
    ScalingLite,
    CardReduSweep,
    HvBias,
    UnbiasednessCheck,
}

impl ExperimentName {
    pub const ALL: [ExperimentName; 6] = [
        ExperimentName::Convergence,
        ExperimentName::EncodingSweep,
        ExperimentName::ScalingLite,
        ExperimentName::CardReduSweep,
        ExperimentName::HvBias,
        ExperimentName::UnbiasednessCheck,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentName::Convergence => "convergence",
            ExperimentName::EncodingSweep => "encoding-sweep",
            ExperimentName::ScalingLite => "scaling-lite",
            ExperimentName::CardReduSweep => "card-redu-sweep",
            ExperimentName::HvBias => "hv-bias",
            ExperimentName::UnbiasednessCheck => "unbiasedness-check",
        }
    }
}

impl fmt::Display for ExperimentName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExperimentName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ExperimentName::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| Error::config(format!("unknown experiment `{s}`")))
    }
}

/// One configuration in an experiment grid.
#[derive(Clone, Debug)]
pub struct GridPoint {
    pub label: String,
    pub graph: Arc<TemplateGraph>,
    pub family: FamilyConfig,
    pub train: TrainConfig,
    /// Learning rate at the last step as a fraction of the initial one; the
    /// per-step decay is derived from it and the step count.
    pub lr_floor: f64,
}

impl GridPoint {
    /// The training config actually used, with `lr_decay` filled in.
    pub fn train_config(&self) -> TrainConfig {
        let mut t = self.train.clone();
        t.lr_decay = if self.lr_floor >= 1.0 || t.steps == 0 {
            1.0
        } else {
            self.lr_floor.powf(1.0 / t.steps as f64)
        };
        t
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_floor > 0.0 && self.lr_floor <= 1.0) {
            return Err(Error::config(format!(
                "{}: lr_floor must be in (0, 1]",
                self.label
            )));
        }
        self.train_config().validate(self.family.scheme)
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentSpec {
    pub name: ExperimentName,
    /// Defaults to the bundled protocol for `name`.
    pub grid: Vec<GridPoint>,
    pub data_samples: usize,
    pub repetitions: usize,
    pub seed: u64,
    pub out: PathBuf,
    /// Upper bound on concurrently executing runs.
    pub threads: usize,
}

impl ExperimentSpec {
    pub fn new(name: ExperimentName, out: impl Into<PathBuf>) -> Result<Self> {
        Ok(ExperimentSpec {
            name,
            grid: protocols::grid(name)?,
            data_samples: 20,
            repetitions: 5,
            seed: 0,
            out: out.into(),
            threads: 1,
        })
    }

    /// Overrides every grid point's step count, keeping the learning-rate
    /// schedule's end point; evaluation periods are rescaled to match.
    pub fn with_steps(mut self, steps: usize) -> Self {
        for p in &mut self.grid {
            if p.train.eval_every > 0 && p.train.steps > 0 {
                let evals = (p.train.steps / p.train.eval_every).max(1);
                p.train.eval_every = (steps / evals).max(1);
            }
            p.train.steps = steps;
        }
        self
    }

    pub fn with_clock(mut self, clock: Clock) -> Self {
        for p in &mut self.grid {
            p.train.clock = clock;
        }
        self
    }

    pub fn with_flow(mut self, flow: FlowConfig) -> Self {
        for p in &mut self.grid {
            p.family.flow = flow.clone();
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.name != ExperimentName::UnbiasednessCheck
            && (self.data_samples == 0 || self.repetitions == 0)
        {
            return Err(Error::config("data_samples and repetitions must be >= 1"));
        }
        if self.threads == 0 {
            return Err(Error::config("threads must be >= 1"));
        }
        let mut seen = std::collections::HashSet::new();
        for p in &self.grid {
            if !seen.insert(p.label.as_str()) {
                return Err(Error::config(format!("duplicate grid label `{}`", p.label)));
            }
            if p.label.is_empty() || p.label.contains(['/', '\\']) || p.label.starts_with('.') {
                return Err(Error::config(format!(
                    "grid label `{}` is not a valid directory name",
                    p.label
                )));
            }
            p.validate()?;
        }
        Ok(())
    }

    /// Seed of the `data_index`-th dataset; shared by every grid point.
    pub fn data_seed(&self, data_index: usize) -> u64 {
        self.seed.wrapping_add(data_index as u64)
    }

    /// Seed of one run; distinct for every (dataset, repetition) pair.
    pub fn run_seed(&self, data_index: usize, repetition: usize) -> u64 {
        self.seed
            .wrapping_mul(1_000_003)
            .wrapping_add((data_index * self.repetitions + repetition) as u64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Ok,
    Halted,
    Failed,
}

/// One row of `runs` in the experiment summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub label: String,
    pub data_index: usize,
    pub repetition: usize,
    pub seed: u64,
    pub status: RunStatus,
    /// Trace path relative to the experiment directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csv: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Full ELBO of the family before the first step.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_elbo: Option<f64>,
    /// First evaluation step closing [`CLOSURE_FRACTION`] of the gap from
    /// `initial_elbo` to the oracle log evidence.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub closure_step: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub empirical_baseline: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary: Option<RunSummary>,
}

/// Aggregates over the runs of one grid point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointSummary {
    pub label: String,
    pub scheme: Scheme,
    pub encoding_dim: usize,
    pub cards: BTreeMap<String, usize>,
    pub reduced_cards: BTreeMap<String, usize>,
    pub parameter_count: usize,
    pub flow: FlowConfig,
    pub train: TrainConfig,
    pub runs_ok: usize,
    pub runs_failed: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_elbo_mean: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_elbo_std: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle_log_evidence_mean: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub median_closure_step: Option<usize>,
    pub mean_wall_seconds: f64,
}

/// The `summary.json` written per experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub schema_version: u32,
    pub experiment: ExperimentName,
    pub seed: u64,
    pub data_samples: usize,
    pub repetitions: usize,
    pub points: Vec<PointSummary>,
    pub runs: Vec<RunRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unbiasedness: Option<UnbiasednessReport>,
}

impl ExperimentSummary {
    pub fn failures(&self) -> usize {
        self.runs
            .iter()
            .filter(|r| r.status != RunStatus::Ok)
            .count()
            + usize::from(self.unbiasedness.as_ref().is_some_and(|u| !u.pass))
    }
}

/// Directory receiving the artifacts of `spec`.
pub fn experiment_dir(spec: &ExperimentSpec) -> PathBuf {
    spec.out.join(spec.name.name())
}

/// The `data_index`-th observed dataset for `graph`.
pub fn dataset(graph: &Arc<TemplateGraph>, seed: u64) -> Result<Assignment> {
    let full = GroundModel::full(graph.clone());
    Ok(full
        .sample_prior(&mut rng_stream(seed, Stream::Data))?
        .observed_only(graph))
}

/// Runs every (grid point, dataset, repetition) triple of `spec`, writing
/// `<out>/<experiment>/<label>/dataNN_repR.csv` per run and
/// `<out>/<experiment>/summary.json`. A failing run is recorded and does not
/// stop the others.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentSummary> {
    spec.validate()?;
    let dir = experiment_dir(spec);
    fs::create_dir_all(&dir)?;
    let unbiasedness = match spec.name {
        ExperimentName::UnbiasednessCheck => Some(unbiasedness_report(spec.seed)?),
        _ => None,
    };

    let jobs: Vec<(usize, usize, usize)> = (0..spec.grid.len())
        .flat_map(|p| {
            (0..spec.data_samples).flat_map(move |d| (0..spec.repetitions).map(move |r| (p, d, r)))
        })
        .collect();
    let records: Mutex<Vec<Option<RunRecord>>> = Mutex::new(vec![None; jobs.len()]);
    let next = AtomicUsize::new(0);
    let workers = spec.threads.min(jobs.len()).max(1);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(p, d, r)) = jobs.get(k) else { break };
                let rec = run_one(spec, &dir, &spec.grid[p], d, r);
                records
                    .lock()
                    .expect("no worker panics while holding the lock")[k] = Some(rec);
            });
        }
    });
    let runs: Vec<RunRecord> = records
        .into_inner()
        .expect("workers joined")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect();

    let points = spec
        .grid
        .iter()
        .map(|p| point_summary(p, &runs))
        .collect::<Result<Vec<_>>>()?;
    let summary = ExperimentSummary {
        schema_version: SCHEMA_VERSION,
        experiment: spec.name,
        seed: spec.seed,
        data_samples: spec.data_samples,
        repetitions: spec.repetitions,
        points,
        runs,
        unbiasedness,
    };
    let json = serde_json::to_string_pretty(&summary).map_err(|e| Error::Io(e.to_string()))?;
    fs::write(dir.join("summary.json"), json + "\n")?;
    Ok(summary)
}

/// Everything one training run produces, before it is written out.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub trace: Trace,
    pub summary: RunSummary,
    pub initial_elbo: f64,
    pub empirical_baseline: Option<f64>,
    pub closure_step: Option<usize>,
    pub family: VariationalFamily,
}

/// Trains one grid point on one dataset; no files are touched.
pub fn execute(point: &GridPoint, data: &Assignment, seed: u64) -> Result<RunOutput> {
    let cfg = TrainConfig {
        seed,
        ..point.train_config()
    };
    let full = GroundModel::full(point.graph.clone());
    let mut family = VariationalFamily::build(
        point.graph.clone(),
        &point.family,
        &mut rng_stream(seed, Stream::Init),
    )?;
    let initial = full_elbo(
        &family,
        &full,
        data,
        cfg.eval_samples,
        &mut rng_stream(seed, Stream::Probe),
    )?
    .mean;
    let run = train(&mut family, &full, Some(data), &cfg)?;
    let mut summary = run.summary(point.family.scheme, seed);
    let mut baseline = None;
    if let Some(gre) = oracle::gre_structure(&point.graph) {
        let x = oracle::observations(&point.graph, data)?;
        summary.oracle_log_evidence = Some(oracle::gre_posterior(&gre, x)?.log_evidence);
        baseline = Some(oracle::empirical_mean_elbo(&gre, x)?);
    }
    let closure_step = summary
        .oracle_log_evidence
        .and_then(|target| closure_step(&run.trace, initial, target, CLOSURE_FRACTION));
    Ok(RunOutput {
        trace: run.trace,
        summary,
        initial_elbo: initial,
        empirical_baseline: baseline,
        closure_step,
        family,
    })
}

/// First evaluated step whose full ELBO reaches
/// `initial + fraction (target - initial)`.
pub fn closure_step(trace: &Trace, initial: f64, target: f64, fraction: f64) -> Option<usize> {
    let goal = initial + fraction * (target - initial);
    trace
        .evaluations()
        .into_iter()
        .find(|&(_, e)| e >= goal)
        .map(|(s, _)| s)
}

fn run_one(spec: &ExperimentSpec, dir: &Path, point: &GridPoint, d: usize, r: usize) -> RunRecord {
    let seed = spec.run_seed(d, r);
    let mut rec = RunRecord {
        label: point.label.clone(),
        data_index: d,
        repetition: r,
        seed,
        status: RunStatus::Failed,
        csv: None,
        error: None,
        initial_elbo: None,
        closure_step: None,
        empirical_baseline: None,
        summary: None,
    };
    let result = (|| -> Result<RunOutput> {
        let data = dataset(&point.graph, spec.data_seed(d))?;
        let out = execute(point, &data, seed)?;
        let rel = format!("{}/data{d:02}_rep{r}.csv", point.label);
        let path = dir.join(&rel);
        fs::create_dir_all(path.parent().expect("label directory"))?;
        let file = fs::File::create(&path)?;
        out.trace.write_csv(std::io::BufWriter::new(file))?;
        rec.csv = Some(rel);
        Ok(out)
    })();
    match result {
        Ok(out) => {
            rec.status = if out.summary.halted.is_some() {
                RunStatus::Halted
            } else {
                RunStatus::Ok
            };
            rec.initial_elbo = Some(out.initial_elbo);
            rec.closure_step = out.closure_step;
            rec.empirical_baseline = out.empirical_baseline;
            rec.summary = Some(out.summary);
        }
        Err(e) => rec.error = Some(e.to_string()),
    }
    rec
}

fn point_summary(point: &GridPoint, runs: &[RunRecord]) -> Result<PointSummary> {
    let mine: Vec<&RunRecord> = runs.iter().filter(|r| r.label == point.label).collect();
    let ok: Vec<&RunSummary> = mine
        .iter()
        .filter(|r| r.status == RunStatus::Ok)
        .filter_map(|r| r.summary.as_ref())
        .collect();
    let parameter_count = match ok.first() {
        Some(s) => s.parameter_count,
        None => VariationalFamily::build(
            point.graph.clone(),
            &point.family,
            &mut rng_stream(0, Stream::Init),
        )?
        .parameter_count(),
    };
    let finals: Vec<f64> = ok.iter().map(|s| s.final_elbo).collect();
    let oracles: Vec<f64> = ok.iter().filter_map(|s| s.oracle_log_evidence).collect();
    let mut closures: Vec<usize> = mine.iter().filter_map(|r| r.closure_step).collect();
    closures.sort_unstable();
    let plates = point.graph.plates();
    Ok(PointSummary {
        label: point.label.clone(),
        scheme: point.family.scheme,
        encoding_dim: point.family.encoding_dim,
        cards: plates.iter().map(|p| (p.name.clone(), p.card)).collect(),
        reduced_cards: plates
            .iter()
            .map(|p| (p.name.clone(), p.reduced_card))
            .collect(),
        parameter_count,
        flow: point.family.flow.clone(),
        train: point.train_config(),
        runs_ok: ok.len(),
        runs_failed: mine.len() - ok.len(),
        final_elbo_mean: mean(&finals),
        final_elbo_std: std_dev(&finals),
        oracle_log_evidence_mean: mean(&oracles),
        median_closure_step: closures
            .get(closures.len() / 2)
            .copied()
            .filter(|_| !closures.is_empty()),
        mean_wall_seconds: mean(&ok.iter().map(|s| s.wall_seconds).collect::<Vec<_>>())
            .unwrap_or(0.0),
    })
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn std_dev(v: &[f64]) -> Option<f64> {
    let m = mean(v)?;
    Some((v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt())
}
