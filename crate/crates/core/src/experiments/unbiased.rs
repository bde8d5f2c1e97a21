use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diff::Tape;
use crate::error::Result;
use crate::family::{FamilyConfig, Noise, Scheme, VariationalFamily};
use crate::flows::FlowConfig;
use crate::model::{zoo, Assignment, BatchLayout, GroundModel, PlateBatch};
use crate::trainer::{enumerate_batches, reduced_elbo_grad, rng_stream, Stream};

/// Exhaustive-enumeration check on the toy graph: averaging over every
/// plate batch, with the noise held fixed, must reproduce the full-graph
/// log q, ELBO and gradient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnbiasednessReport {
    pub batches: usize,
    pub mc_samples: usize,
    pub parameters: usize,
    pub full_logq: Vec<f64>,
    pub mean_batch_logq: Vec<f64>,
    pub logq_max_abs_diff: f64,
    pub elbo_abs_diff: f64,
    pub grad_max_abs_diff: f64,
    pub tolerance: f64,
    pub pass: bool,
}

pub const UNBIASEDNESS_TOLERANCE: f64 = 1e-10;

pub fn unbiasedness_report(seed: u64) -> Result<UnbiasednessReport> {
    let graph = Arc::new(zoo::toy()?);
    let full = GroundModel::full(graph.clone());
    let data = full
        .sample_prior(&mut rng_stream(seed, Stream::Data))?
        .observed_only(&graph);
    let cfg = FamilyConfig {
        scheme: Scheme::PaviF,
        flow: FlowConfig::default(),
        encoding_dim: 4,
        ..FamilyConfig::default()
    };
    let mut init = rng_stream(seed, Stream::Init);
    let mut family = VariationalFamily::build(graph.clone(), &cfg, &mut init)?;
    // move away from the identity initialization so every weight matters
    let store = family.store_mut();
    for id in store.ids().collect::<Vec<_>>() {
        let mut v = store.value(id).clone();
        v.data_mut()
            .iter_mut()
            .for_each(|x| *x += init.random_range(-0.3..0.3));
        store.set_value(id, v);
    }
    let mc_samples = 3;
    let noise = Noise::draw_full(&full, mc_samples, &mut rng_stream(seed, Stream::Noise))?;

    let full_batch = full.full_batch();
    let full_logq = scaled_logq(&family, &full, &full_batch, &noise, &data)?;
    let (full_elbo, full_grad) = elbo_and_grad(&mut family, &full, &full_batch, &noise, &data)?;

    let batches = enumerate_batches(&graph)?;
    let k = batches.len() as f64;
    let mut mean_logq = vec![0.0; mc_samples];
    let mut mean_elbo = 0.0;
    let mut mean_grad = vec![0.0; full_grad.len()];
    for b in &batches {
        for (m, v) in mean_logq
            .iter_mut()
            .zip(scaled_logq(&family, &full, b, &noise, &data)?)
        {
            *m += v / k;
        }
        let (e, g) = elbo_and_grad(&mut family, &full, b, &noise, &data)?;
        mean_elbo += e / k;
        for (m, v) in mean_grad.iter_mut().zip(g) {
            *m += v / k;
        }
    }
    let max_diff = |a: &[f64], b: &[f64]| {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    };
    let logq_max_abs_diff = max_diff(&full_logq, &mean_logq);
    let grad_max_abs_diff = max_diff(&full_grad, &mean_grad);
    let elbo_abs_diff = (full_elbo - mean_elbo).abs();
    let tolerance = UNBIASEDNESS_TOLERANCE;
    Ok(UnbiasednessReport {
        batches: batches.len(),
        mc_samples,
        parameters: full_grad.len(),
        pass: logq_max_abs_diff < tolerance
            && grad_max_abs_diff < tolerance
            && elbo_abs_diff < tolerance,
        full_logq,
        mean_batch_logq: mean_logq,
        logq_max_abs_diff,
        elbo_abs_diff,
        grad_max_abs_diff,
        tolerance,
    })
}

fn scaled_logq(
    family: &VariationalFamily,
    full: &GroundModel,
    batch: &PlateBatch,
    noise: &Noise,
    data: &Assignment,
) -> Result<Vec<f64>> {
    let layout = BatchLayout::new(family.graph(), full.cards(), batch)?;
    let noise = noise.slice(&layout)?;
    let slice = data.slice(&layout)?;
    let tape = Tape::untracked();
    let bound = family.store().bind(&tape);
    let enc = family.encodings(&tape, &bound, &layout, Some(&slice))?;
    let post = family.sample_and_logq(&tape, &bound, &layout, &enc, &noise)?;
    let v = post.scaled_logq(&tape, full, &layout)?;
    Ok(tape.value(v).into_data())
}

fn elbo_and_grad(
    family: &mut VariationalFamily,
    full: &GroundModel,
    batch: &PlateBatch,
    noise: &Noise,
    data: &Assignment,
) -> Result<(f64, Vec<f64>)> {
    let layout = BatchLayout::new(family.graph(), full.cards(), batch)?;
    let est = reduced_elbo_grad(family, full, data, batch, &noise.slice(&layout)?)?;
    let grads = family
        .store()
        .iter()
        .flat_map(|(_, p)| p.grad.data().to_vec())
        .collect();
    Ok((est.elbo, grads))
}
