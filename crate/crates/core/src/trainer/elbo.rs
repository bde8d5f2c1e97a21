use crate::diff::{Bound, Tape, Var};
use crate::error::{Error, Result};
use crate::family::{Noise, VariationalFamily};
use crate::model::{
    log_prob_terms, Assignment, BatchLayout, GroundModel, PlateBatch, TemplateValue,
};

/// Per-sample reduced ELBO `[S]` on `layout`:
/// `Σ_i (N_i / N̆_i) (log p_i - log q_i)` with `data` the observed slice.
pub fn reduced_elbo(
    tape: &Tape,
    bound: &Bound,
    family: &VariationalFamily,
    full: &GroundModel,
    layout: &BatchLayout,
    data: &Assignment,
    noise: &Noise,
) -> Result<Var> {
    let graph = family.graph();
    let enc = family.encodings(tape, bound, layout, Some(data))?;
    let post = family.sample_and_logq(tape, bound, layout, &enc, noise)?;
    let mut values = post.values.clone();
    for t in graph.observed_ids() {
        let tmpl = graph.template(t);
        let x = data
            .get(t)
            .ok_or_else(|| Error::contract(format!("no data for observed `{}`", tmpl.name)))?;
        values[t.0] = Some(TemplateValue::constant(tape, tmpl.kind, x)?);
    }
    let lp = log_prob_terms(tape, graph, layout, &values, noise.samples())?;
    let mut acc = tape.neg(post.scaled_logq(tape, full, layout)?);
    for t in graph.ids() {
        let term = lp[t.0].ok_or_else(|| Error::contract("unbound template in the log-joint"))?;
        let f = full.count(t) as f64 / layout.rows(t) as f64;
        acc = tape.add(acc, tape.scale(term, f))?;
    }
    Ok(acc)
}

/// One Monte Carlo estimate of the reduced ELBO and its gradient.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepEstimate {
    pub elbo: f64,
    pub grad_norm: f64,
}

/// Evaluates the reduced ELBO on `batch` with the given noise (already laid
/// out for the batch) and writes the gradient of `-ELBO` into the family's
/// parameter store.
pub fn reduced_elbo_grad(
    family: &mut VariationalFamily,
    full: &GroundModel,
    data: &Assignment,
    batch: &PlateBatch,
    noise: &Noise,
) -> Result<StepEstimate> {
    let layout = BatchLayout::new(family.graph(), full.cards(), batch)?;
    let slice = data.slice(&layout)?;
    let tape = Tape::new();
    let bound = family.store().bind(&tape);
    let per = reduced_elbo(&tape, &bound, family, full, &layout, &slice, noise)?;
    let elbo = tape.mean(per);
    let loss = tape.neg(elbo);
    let grads = tape.backward(loss)?;
    let value = tape.item(elbo);
    family.store_mut().store_grads(&grads, &bound);
    Ok(StepEstimate {
        elbo: value,
        grad_norm: family.store().grad_norm(),
    })
}

/// Monte Carlo estimate of the full ELBO with its standard error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ElboEstimate {
    pub mean: f64,
    pub se: f64,
    pub samples: usize,
}

impl ElboEstimate {
    pub fn from_samples(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = if values.len() > 1 {
            values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        ElboEstimate {
            mean,
            se: (var / n).sqrt(),
            samples: values.len(),
        }
    }

    /// `3 sqrt(se_a² + se_b²)`: the threshold used to call two estimates
    /// different.
    pub fn three_se(&self, other: &ElboEstimate) -> f64 {
        3.0 * (self.se * self.se + other.se * other.se).sqrt()
    }
}

/// Per-sample full ELBO values, drawn in chunks that keep each tape below
/// `chunk_values` latent scalars.
pub fn full_elbo_samples<R: rand::Rng + ?Sized>(
    family: &VariationalFamily,
    full: &GroundModel,
    data: &Assignment,
    samples: usize,
    chunk_values: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let layout = BatchLayout::new(family.graph(), full.cards(), &full.full_batch())?;
    let per_sample = full.latent_size().max(1);
    let chunk = (chunk_values / per_sample).clamp(1, samples.max(1));
    let mut out = Vec::with_capacity(samples);
    while out.len() < samples {
        let s = chunk.min(samples - out.len());
        let noise = Noise::draw(family.graph(), &layout, s, rng);
        let tape = Tape::untracked();
        let bound = family.store().bind(&tape);
        let per = reduced_elbo(&tape, &bound, family, full, &layout, data, &noise)?;
        out.extend(tape.value(per).into_data());
    }
    Ok(out)
}

pub fn full_elbo<R: rand::Rng + ?Sized>(
    family: &VariationalFamily,
    full: &GroundModel,
    data: &Assignment,
    samples: usize,
    rng: &mut R,
) -> Result<ElboEstimate> {
    let values = full_elbo_samples(family, full, data, samples, 2_000_000, rng)?;
    Ok(ElboEstimate::from_samples(&values))
}

/// Per-template posterior mean and variance over all ground RVs, `[N_i, D_i]`
/// each, from `samples` draws of the variational family.
pub fn posterior_moments<R: rand::Rng + ?Sized>(
    family: &VariationalFamily,
    full: &GroundModel,
    data: &Assignment,
    samples: usize,
    rng: &mut R,
) -> Result<Vec<Option<(crate::diff::Array, crate::diff::Array)>>> {
    let graph = family.graph();
    let layout = BatchLayout::new(graph, full.cards(), &full.full_batch())?;
    let mut sum: Vec<Option<Vec<f64>>> = vec![None; graph.templates().len()];
    let mut sq = sum.clone();
    let per_sample = full.latent_size().max(1);
    let chunk = (2_000_000 / per_sample).clamp(1, samples.max(1));
    let mut done = 0;
    while done < samples {
        let s = chunk.min(samples - done);
        let noise = Noise::draw(graph, &layout, s, rng);
        let tape = Tape::untracked();
        let bound = family.store().bind(&tape);
        let enc = family.encodings(&tape, &bound, &layout, Some(data))?;
        let post = family.sample_and_logq(&tape, &bound, &layout, &enc, &noise)?;
        for t in graph.latent_ids() {
            let v = post.value(&tape, t).expect("latent sampled");
            let block = v.len() / s;
            let acc = sum[t.0].get_or_insert_with(|| vec![0.0; block]);
            let acc2 = sq[t.0].get_or_insert_with(|| vec![0.0; block]);
            for chunk in v.data().chunks(block) {
                for i in 0..block {
                    acc[i] += chunk[i];
                    acc2[i] += chunk[i] * chunk[i];
                }
            }
        }
        done += s;
    }
    let n = samples as f64;
    Ok(graph
        .ids()
        .map(|t| {
            let (s1, s2) = (sum[t.0].as_ref()?, sq[t.0].as_ref()?);
            let shape = [layout.rows(t), graph.template(t).dim];
            let mean: Vec<f64> = s1.iter().map(|v| v / n).collect();
            let var: Vec<f64> = s2.iter().zip(&mean).map(|(v, m)| v / n - m * m).collect();
            Some((
                crate::diff::Array::new(shape.to_vec(), mean).ok()?,
                crate::diff::Array::new(shape.to_vec(), var).ok()?,
            ))
        })
        .collect())
}
