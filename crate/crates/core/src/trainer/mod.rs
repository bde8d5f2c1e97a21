//! Stochastic optimization of the reduced ELBO.

mod batch;
mod elbo;
mod optim;
mod plateau;
pub mod svi;
mod trace;

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use batch::{enumerate_batches, sample_batch};
pub use elbo::{
    full_elbo, full_elbo_samples, posterior_moments, reduced_elbo, reduced_elbo_grad, ElboEstimate,
    StepEstimate,
};
pub use optim::Adam;
pub use plateau::{plateau_step, plateaued};
pub use trace::{RunSummary, Trace, TraceRow, TRACE_HEADER};

use crate::error::{Error, Result};
use crate::family::{Noise, Scheme, VariationalFamily};
use crate::model::{Assignment, BatchLayout, GroundModel};

/// Independent random streams derived from one run seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Plate = 0,
    Noise = 1,
    Data = 2,
    Init = 3,
    Eval = 4,
    /// Evaluations made outside the training loop.
    Probe = 5,
}

pub fn rng_stream(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Clock {
    /// `wall_seconds` is written as zero so traces are reproducible byte for
    /// byte.
    #[default]
    Zero,
    Wall,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub mc_samples: usize,
    pub seed: u64,
    pub plateau_window: usize,
    pub plateau_tol: f64,
    pub stop_on_plateau: bool,
    /// Full-ELBO evaluation period in steps; 0 evaluates only at the end.
    pub eval_every: usize,
    pub eval_samples: usize,
    pub final_eval_samples: usize,
    /// Draw a fresh dataset from the generative model at every step.
    pub sample_amortized: bool,
    pub max_rejections: usize,
    pub clock: Clock,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1000,
            lr: 1e-2,
            lr_decay: 1.0,
            mc_samples: 8,
            seed: 0,
            plateau_window: 500,
            plateau_tol: 1e-3,
            stop_on_plateau: false,
            eval_every: 0,
            eval_samples: 64,
            final_eval_samples: 256,
            sample_amortized: false,
            max_rejections: 10,
            clock: Clock::Zero,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, scheme: Scheme) -> Result<()> {
        if self.sample_amortized && scheme != Scheme::PaviE {
            return Err(Error::config(format!(
                "sample-amortized training needs an encoder; scheme {} has none",
                scheme.name()
            )));
        }
        if self.mc_samples == 0 {
            return Err(Error::config("mc_samples must be >= 1"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!(
                "learning rate must be finite and >= 0, got {}",
                self.lr
            )));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::config("lr_decay must be in (0, 1]"));
        }
        if !(self.plateau_tol >= 0.0) {
            return Err(Error::config("plateau tolerance must be >= 0"));
        }
        if self.final_eval_samples == 0 {
            return Err(Error::config("final_eval_samples must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub trace: Trace,
    pub final_elbo: ElboEstimate,
    pub steps: usize,
    pub wall_seconds: f64,
    pub parameter_count: usize,
    pub plateau_step: Option<usize>,
    /// Why training stopped early after repeated non-finite steps.
    pub halted: Option<String>,
}

impl RunResult {
    pub fn summary(&self, scheme: Scheme, seed: u64) -> RunSummary {
        RunSummary {
            final_elbo: self.final_elbo.mean,
            final_elbo_se: self.final_elbo.se,
            steps: self.steps,
            wall_seconds: self.wall_seconds,
            parameter_count: self.parameter_count,
            scheme: scheme.name().to_string(),
            seed,
            plateau_step: self.plateau_step,
            halted: self.halted.clone(),
            oracle_log_evidence: None,
        }
    }
}

/// Trains `family` on `data` (the observed templates of the full model).
/// In sample-amortized mode `data` is only used for evaluation and may be
/// omitted, in which case one dataset is drawn from the data stream.
pub fn train(
    family: &mut VariationalFamily,
    full: &GroundModel,
    data: Option<&Assignment>,
    cfg: &TrainConfig,
) -> Result<RunResult> {
    cfg.validate(family.scheme())?;
    let graph = family.graph().clone();
    let mut plate_rng = rng_stream(cfg.seed, Stream::Plate);
    let mut noise_rng = rng_stream(cfg.seed, Stream::Noise);
    let mut data_rng = rng_stream(cfg.seed, Stream::Data);
    let mut eval_rng = rng_stream(cfg.seed, Stream::Eval);

    let generated;
    let eval_data = match data {
        Some(d) => d,
        None if cfg.sample_amortized => {
            generated = full.sample_prior(&mut data_rng)?.observed_only(&graph);
            &generated
        }
        None => return Err(Error::config("training needs observed data")),
    };

    let start = Instant::now();
    let elapsed = |clock: Clock| match clock {
        Clock::Zero => 0.0,
        Clock::Wall => start.elapsed().as_secs_f64(),
    };
    let mut adam = Adam::new(cfg.lr).with_decay(cfg.lr_decay);
    let mut trace = Trace::default();
    let mut elbos = Vec::with_capacity(cfg.steps);
    let mut rejected = 0;
    let mut halted = None;
    let mut plateau_at = None;

    for step in 1..=cfg.steps {
        let batch = sample_batch(&graph, &mut plate_rng)?;
        let layout = BatchLayout::new(&graph, full.cards(), &batch)?;
        let noise = Noise::draw(&graph, &layout, cfg.mc_samples, &mut noise_rng);
        let fresh;
        let step_data = if cfg.sample_amortized {
            fresh = full.sample_prior(&mut data_rng)?.observed_only(&graph);
            &fresh
        } else {
            eval_data
        };
        let est = match reduced_elbo_grad(family, full, step_data, &batch, &noise) {
            Ok(e) => e,
            Err(Error::Domain { .. }) => StepEstimate {
                elbo: f64::NAN,
                grad_norm: f64::NAN,
            },
            Err(e) => return Err(e),
        };
        let finite = est.elbo.is_finite() && est.grad_norm.is_finite();
        if finite {
            adam.step(family.store_mut());
            rejected = 0;
            elbos.push(est.elbo);
        } else {
            rejected += 1;
        }
        let eval = cfg.eval_every > 0 && step % cfg.eval_every == 0;
        let elbo_full = if eval {
            Some(full_elbo(family, full, eval_data, cfg.eval_samples, &mut eval_rng)?.mean)
        } else {
            None
        };
        trace.rows.push(TraceRow {
            step,
            wall_seconds: elapsed(cfg.clock),
            elbo_mc: est.elbo,
            elbo_full,
            grad_norm: est.grad_norm,
        });
        if rejected >= cfg.max_rejections {
            halted = Some(format!(
                "{rejected} consecutive non-finite steps ending at step {step}"
            ));
            break;
        }
        if plateau_at.is_none() && finite && plateaued(&elbos, cfg.plateau_window, cfg.plateau_tol)
        {
            plateau_at = Some(step);
            if cfg.stop_on_plateau {
                break;
            }
        }
    }

    let final_elbo = full_elbo(
        family,
        full,
        eval_data,
        cfg.final_eval_samples,
        &mut eval_rng,
    )?;
    Ok(RunResult {
        steps: trace.rows.len(),
        trace,
        final_elbo,
        wall_seconds: start.elapsed().as_secs_f64(),
        parameter_count: family.parameter_count(),
        plateau_step: plateau_at,
        halted,
    })
}
