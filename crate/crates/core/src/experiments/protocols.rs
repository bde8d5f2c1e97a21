//! Grid definitions for the bundled experiments.

use std::sync::Arc;

use super::{ExperimentName, GridPoint};
use crate::error::Result;
use crate::family::{FamilyConfig, Scheme};
use crate::flows::FlowConfig;
use crate::model::zoo::{self, GreSpec};
use crate::trainer::TrainConfig;

const SCHEMES: [Scheme; 3] = [Scheme::PaviF, Scheme::PaviE, Scheme::SviBaseline];

fn family(scheme: Scheme, encoding_dim: usize) -> FamilyConfig {
    FamilyConfig {
        scheme,
        flow: FlowConfig::affine(vec![32]),
        encoding_dim,
        ..FamilyConfig::default()
    }
}

fn train(steps: usize, lr: f64) -> TrainConfig {
    TrainConfig {
        steps,
        lr,
        final_eval_samples: 1000,
        ..TrainConfig::default()
    }
}

pub fn grid(name: ExperimentName) -> Result<Vec<GridPoint>> {
    match name {
        ExperimentName::Convergence => convergence(),
        ExperimentName::EncodingSweep => encoding_sweep(),
        ExperimentName::ScalingLite => scaling_lite(),
        ExperimentName::CardReduSweep => card_redu_sweep(),
        ExperimentName::HvBias => hv_bias(),
        ExperimentName::UnbiasednessCheck => Ok(Vec::new()),
    }
}

/// GRE, D=8, 100 groups seen two at a time; one curve per scheme.
pub fn convergence() -> Result<Vec<GridPoint>> {
    let graph = Arc::new(GreSpec::new(8, 100, 10).reduced(2, 10).graph()?);
    Ok(SCHEMES
        .iter()
        .map(|&s| GridPoint {
            label: s.name().to_string(),
            graph: graph.clone(),
            family: family(s, 8),
            train: TrainConfig {
                eval_every: 25,
                eval_samples: 32,
                final_eval_samples: 256,
                ..train(3000, 1e-2)
            },
            lr_floor: 1.0,
        })
        .collect())
}

/// PAVI-F at growing encoding sizes, GRE D=8 with 20 groups.
pub fn encoding_sweep() -> Result<Vec<GridPoint>> {
    let graph = Arc::new(GreSpec::new(8, 20, 10).reduced(2, 10).graph()?);
    Ok([2, 4, 8, 16]
        .into_iter()
        .map(|k| GridPoint {
            label: format!("enc-{k}"),
            graph: graph.clone(),
            family: family(Scheme::PaviF, k),
            train: TrainConfig {
                eval_every: 500,
                ..train(10_000, 1e-2)
            },
            lr_floor: 0.05,
        })
        .collect())
}

/// GRE D=2 at cardinalities (2, 1), (20, 5) and (200, 20).
pub fn scaling_lite() -> Result<Vec<GridPoint>> {
    let mut out = Vec::new();
    for (card, reduced) in [(2, 1), (20, 5), (200, 20)] {
        let graph = Arc::new(GreSpec::new(2, card, 10).reduced(reduced, 10).graph()?);
        for s in SCHEMES {
            out.push(GridPoint {
                label: format!("{}-card-{card}", s.name()),
                graph: graph.clone(),
                family: family(s, 8),
                train: TrainConfig {
                    eval_every: 500,
                    ..train(10_000, 5e-3)
                },
                lr_floor: 0.1,
            });
        }
    }
    Ok(out)
}

/// PAVI-F on GRE D=8 with 20 groups at reduced cardinalities 1, 4, 8 and
/// 20. Every run sees the same number of group visits, and the learning rate
/// anneals by four decades over the run.
pub fn card_redu_sweep() -> Result<Vec<GridPoint>> {
    [1, 4, 8, 20]
        .into_iter()
        .map(|r| {
            Ok(GridPoint {
                label: format!("reduced-{r}"),
                graph: Arc::new(GreSpec::new(8, 20, 10).reduced(r, 10).graph()?),
                family: family(Scheme::PaviF, 8),
                train: TrainConfig {
                    eval_every: 40_000 / r,
                    ..train(800_000 / r, 5e-3)
                },
                lr_floor: 1e-4,
            })
        })
        .collect()
}

/// PAVI-F against PAVI-E on the hierarchical variance model.
pub fn hv_bias() -> Result<Vec<GridPoint>> {
    let graph = Arc::new(zoo::hv_default()?);
    Ok([Scheme::PaviF, Scheme::PaviE]
        .into_iter()
        .map(|s| GridPoint {
            label: s.name().to_string(),
            graph: graph.clone(),
            family: family(s, 8),
            train: TrainConfig {
                eval_every: 1000,
                ..train(30_000, 1e-3)
            },
            lr_floor: 0.09,
        })
        .collect())
}
