//! The cascading variational family: one shared conditional flow per latent
//! template, conditioned on an encoding and on already-sampled parents, and
//! pushed forward from the template's prior conditional.

mod store;

use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use store::{EncodingArray, EncodingLayout, EncodingStore};

use crate::diff::{Array, Bound, ParamStore, Tape, Var};
use crate::encoder::{EncoderConfig, EncoderStack};
use crate::error::{Error, Result};
use crate::flows::{Flow, FlowConfig};
use crate::model::{
    expand_rows, gather_parent, prior_conditional, Assignment, BatchLayout, GroundModel,
    TemplateGraph, TemplateId, TemplateValue,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    /// Free encodings optimized alongside the shared flows.
    PaviF,
    /// Encodings computed by a set encoder from the observed data.
    PaviE,
    /// No sharing: every ground RV owns a full set of flow weights.
    SviBaseline,
}

impl Scheme {
    pub fn name(self) -> &'static str {
        match self {
            Scheme::PaviF => "pavi-f",
            Scheme::PaviE => "pavi-e",
            Scheme::SviBaseline => "svi-baseline",
        }
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pavi-f" => Ok(Scheme::PaviF),
            "pavi-e" => Ok(Scheme::PaviE),
            "svi-baseline" => Ok(Scheme::SviBaseline),
            other => Err(Error::config(format!(
                "unknown scheme `{other}` (expected pavi-f, pavi-e or svi-baseline)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FamilyConfig {
    pub scheme: Scheme,
    pub flow: FlowConfig,
    pub encoding_dim: usize,
    pub encoding_layout: EncodingLayout,
    pub encoder_hidden: Vec<usize>,
    /// Test-harness encoder with identity `ρ` and `g`.
    pub encoder_identity: bool,
    /// Refuse to sample more than this many latent scalars at once.
    pub max_sample_values: usize,
}

impl Default for FamilyConfig {
    fn default() -> Self {
        FamilyConfig {
            scheme: Scheme::PaviF,
            flow: FlowConfig::default(),
            encoding_dim: 8,
            encoding_layout: EncodingLayout::Shared,
            encoder_hidden: vec![32, 32],
            encoder_identity: false,
            max_sample_values: 50_000_000,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TemplateFlow {
    pub template: TemplateId,
    pub flow: Flow,
    pub enc_dim: usize,
    per_rv: bool,
}

#[derive(Clone, Debug)]
pub enum EncodingSource {
    Free(EncodingStore),
    Encoder(EncoderStack),
    None,
}

#[derive(Clone, Debug)]
pub struct VariationalFamily {
    graph: Arc<TemplateGraph>,
    cfg: FamilyConfig,
    store: ParamStore,
    flows: Vec<Option<TemplateFlow>>,
    source: EncodingSource,
}

fn parent_width(graph: &TemplateGraph, t: TemplateId) -> usize {
    graph
        .template(t)
        .parents
        .iter()
        .map(|p| graph.template(*p).dim)
        .sum()
}

impl VariationalFamily {
    pub fn build<R: Rng + ?Sized>(
        graph: Arc<TemplateGraph>,
        cfg: &FamilyConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if cfg.encoding_dim == 0 && cfg.scheme != Scheme::SviBaseline {
            return Err(Error::config("encoding size must be >= 1"));
        }
        let mut store = ParamStore::new();
        let source = match cfg.scheme {
            Scheme::PaviF => EncodingSource::Free(EncodingStore::new(
                &mut store,
                &graph,
                cfg.encoding_dim,
                cfg.encoding_layout,
            )),
            Scheme::PaviE => EncodingSource::Encoder(EncoderStack::new(
                &mut store,
                &graph,
                &EncoderConfig {
                    encoding_dim: cfg.encoding_dim,
                    hidden: cfg.encoder_hidden.clone(),
                    identity: cfg.encoder_identity,
                },
                rng,
            )?),
            Scheme::SviBaseline => EncodingSource::None,
        };
        let full = GroundModel::full(graph.clone());
        let mut flows = vec![None; graph.templates().len()];
        for t in graph.latent_ids() {
            let tmpl = graph.template(t);
            let enc_dim = match &source {
                EncodingSource::Free(s) => s.dim(),
                EncodingSource::Encoder(e) => e
                    .stages()
                    .iter()
                    .find(|s| s.to_plates() == tmpl.plates.as_slice())
                    .map(|s| s.out_dim())
                    .ok_or_else(|| {
                        Error::config(format!("no encoder stage for `{}`", tmpl.name))
                    })?,
                EncodingSource::None => 0,
            };
            let per_rv = cfg.scheme == Scheme::SviBaseline;
            let flow = Flow::new(
                &mut store,
                &format!("flow.{}", tmpl.name),
                tmpl.dim,
                enc_dim + parent_width(&graph, t),
                &cfg.flow,
                per_rv.then(|| full.count(t)),
                rng,
            );
            flows[t.0] = Some(TemplateFlow {
                template: t,
                flow,
                enc_dim,
                per_rv,
            });
        }
        Ok(VariationalFamily {
            graph,
            cfg: cfg.clone(),
            store,
            flows,
            source,
        })
    }

    pub fn graph(&self) -> &Arc<TemplateGraph> {
        &self.graph
    }

    pub fn config(&self) -> &FamilyConfig {
        &self.cfg
    }

    pub fn scheme(&self) -> Scheme {
        self.cfg.scheme
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn source(&self) -> &EncodingSource {
        &self.source
    }

    pub fn template_flow(&self, t: TemplateId) -> Option<&TemplateFlow> {
        self.flows[t.0].as_ref()
    }

    /// Total number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        self.store.weight_count()
    }

    /// Per-template encodings for the rows of `layout`. `data` must hold the
    /// observed slice for the same layout when the scheme uses an encoder.
    pub fn encodings(
        &self,
        tape: &Tape,
        bound: &Bound,
        layout: &BatchLayout,
        data: Option<&Assignment>,
    ) -> Result<Vec<Option<Var>>> {
        match &self.source {
            EncodingSource::Free(s) => s.slice(tape, bound, &self.graph, layout),
            EncodingSource::None => Ok(vec![None; self.graph.templates().len()]),
            EncodingSource::Encoder(enc) => {
                let obs = enc.observed();
                let tmpl = self.graph.template(obs);
                let x = data.and_then(|d| d.get(obs)).ok_or_else(|| {
                    Error::contract(format!("encoder needs data for `{}`", tmpl.name))
                })?;
                let v = TemplateValue::constant(tape, tmpl.kind, x)?;
                let rows = tape.shape(v.unconstrained)[1];
                let input = tape.reshape(v.unconstrained, &[rows, tmpl.dim])?;
                let levels = enc.encode(tape, bound, layout, input)?;
                let mut out = vec![None; self.graph.templates().len()];
                for t in self.graph.latent_ids() {
                    let plates = &self.graph.template(t).plates;
                    out[t.0] = levels.iter().find(|(p, _)| p == plates).map(|(_, v)| *v);
                }
                Ok(out)
            }
        }
    }

    /// Samples every latent template in topological order from its flow and
    /// returns the per-template `log q` sums (unscaled, `[S]`).
    pub fn sample_and_logq(
        &self,
        tape: &Tape,
        bound: &Bound,
        layout: &BatchLayout,
        encodings: &[Option<Var>],
        noise: &Noise,
    ) -> Result<PosteriorSample> {
        let s = noise.samples;
        let total: usize = self
            .graph
            .latent_ids()
            .iter()
            .map(|&t| s * layout.rows(t) * self.graph.template(t).dim)
            .sum();
        if total > self.cfg.max_sample_values {
            return Err(Error::config(format!(
                "sampling {total} latent values exceeds the cap of {}",
                self.cfg.max_sample_values
            )));
        }
        let mut values: Vec<Option<TemplateValue>> = vec![None; self.graph.templates().len()];
        let mut logq = vec![None; self.graph.templates().len()];
        for t in self.graph.latent_ids() {
            let tmpl = self.graph.template(t);
            let tf = self.flows[t.0]
                .as_ref()
                .expect("latent templates have flows");
            let n = layout.rows(t);
            let d = tmpl.dim;
            let eps = noise.values[t.0]
                .as_ref()
                .ok_or_else(|| Error::contract(format!("no noise for `{}`", tmpl.name)))?;
            if eps.shape() != [s, n, d] {
                return Err(Error::contract(format!(
                    "noise for `{}` has shape {:?}, expected [{s}, {n}, {d}]",
                    tmpl.name,
                    eps.shape()
                )));
            }
            let base = prior_conditional(tape, &self.graph, layout, t, &values, s)?;
            let u = base.rsample_unconstrained(tape, tape.constant(eps.clone()))?;

            let mut parts = Vec::new();
            if tf.enc_dim > 0 {
                let e = encodings[t.0].ok_or_else(|| {
                    Error::contract(format!("missing encoding rows for `{}`", tmpl.name))
                })?;
                if tape.shape(e) != [n, tf.enc_dim] {
                    return Err(Error::contract(format!(
                        "encodings for `{}` have shape {:?}, expected [{n}, {}]",
                        tmpl.name,
                        tape.shape(e),
                        tf.enc_dim
                    )));
                }
                let tiled = tape.gather_rows(e, &expand_rows(&(0..n).collect::<Vec<_>>(), s, 0))?;
                parts.push(tiled);
            }
            for (k, &p) in tmpl.parents.iter().enumerate() {
                let pv = values[p.0].expect("parents sampled first");
                let g = gather_parent(tape, pv.unconstrained, layout.parent_rows(t, k))?;
                parts.push(tape.reshape(g, &[s * n, self.graph.template(p).dim])?);
            }
            let ctx = if parts.is_empty() {
                tape.constant(Array::zeros(&[s * n, 0]))
            } else {
                tape.concat(&parts, 1)?
            };
            let rows = tf.per_rv.then(|| expand_rows(layout.ground_rows(t), s, 0));
            let u2 = tape.reshape(u, &[s * n, d])?;
            let (z, logdet) = tf.flow.forward(tape, bound, u2, ctx, rows.as_deref())?;
            let z = tape.reshape(z, &[s, n, d])?;
            let logdet = tape.reshape(logdet, &[s, n])?;

            // log q(θ) = log p_base(u) - log|det ∂z/∂u| - [LogNormal] Σ z
            let mut lq = tape.sub(base.base_log_prob(tape, u)?, logdet)?;
            if tmpl.kind == crate::dist::DistKind::LogNormal {
                lq = tape.sub(lq, tape.sum_axis(z, 2)?)?;
            }
            logq[t.0] = Some(tape.sum_axis(lq, 1)?);
            values[t.0] = Some(TemplateValue {
                natural: tmpl.kind.to_natural(tape, z),
                unconstrained: z,
            });
        }
        Ok(PosteriorSample {
            samples: s,
            values,
            logq,
        })
    }
}

/// Standard-normal base noise per latent template, `[S, rows, D]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Noise {
    samples: usize,
    values: Vec<Option<Array>>,
}

impl Noise {
    pub fn draw<R: Rng + ?Sized>(
        graph: &TemplateGraph,
        layout: &BatchLayout,
        samples: usize,
        rng: &mut R,
    ) -> Self {
        let mut values = vec![None; graph.templates().len()];
        for t in graph.latent_ids() {
            let n = layout.rows(t);
            let d = graph.template(t).dim;
            let data = (0..samples * n * d)
                .map(|_| rng.sample(StandardNormal))
                .collect();
            values[t.0] = Some(Array::new(vec![samples, n, d], data).expect("shape"));
        }
        Noise { samples, values }
    }

    /// Noise for every ground RV of the full model.
    pub fn draw_full<R: Rng + ?Sized>(
        model: &GroundModel,
        samples: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let layout = BatchLayout::new(model.graph(), model.cards(), &model.full_batch())?;
        Ok(Self::draw(model.graph(), &layout, samples, rng))
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn get(&self, t: TemplateId) -> Option<&Array> {
        self.values[t.0].as_ref()
    }

    /// Restricts full-model noise to the rows of `layout`, so that each
    /// ground RV sees the same noise in every batch containing it.
    pub fn slice(&self, layout: &BatchLayout) -> Result<Self> {
        let mut values = Vec::with_capacity(self.values.len());
        for (i, v) in self.values.iter().enumerate() {
            values.push(match v {
                None => None,
                Some(a) => {
                    let (s, n, d) = (a.shape()[0], a.shape()[1], a.shape()[2]);
                    let rows = layout.ground_rows(TemplateId(i));
                    let flat = a.clone().reshape(vec![s * n, d])?;
                    let g = flat.gather_rows(&expand_rows(rows, s, n))?;
                    Some(g.reshape(vec![s, rows.len(), d])?)
                }
            });
        }
        Ok(Noise {
            samples: self.samples,
            values,
        })
    }
}

/// Posterior samples θ̆ with their `log q` contributions.
#[derive(Clone, Debug)]
pub struct PosteriorSample {
    pub samples: usize,
    pub values: Vec<Option<TemplateValue>>,
    /// Per latent template, `Σ_n log q_{i,n}` for each sample, `[S]`.
    pub logq: Vec<Option<Var>>,
}

impl PosteriorSample {
    /// `Σ_i (N_i / N̆_i) Σ_n log q_{i,n}`, `[S]`.
    pub fn scaled_logq(
        &self,
        tape: &Tape,
        full: &GroundModel,
        layout: &BatchLayout,
    ) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for (i, lq) in self.logq.iter().enumerate() {
            let Some(lq) = *lq else { continue };
            let t = TemplateId(i);
            let f = full.count(t) as f64 / layout.rows(t) as f64;
            let term = tape.scale(lq, f);
            acc = Some(match acc {
                None => term,
                Some(a) => tape.add(a, term)?,
            });
        }
        acc.ok_or_else(|| Error::contract("posterior sample has no latent templates"))
    }

    /// Natural-space values of one template, `[S, rows, D]`.
    pub fn value(&self, tape: &Tape, t: TemplateId) -> Option<Array> {
        self.values[t.0].map(|v| tape.value(v.natural))
    }
}

#[cfg(test)]
mod tests;
