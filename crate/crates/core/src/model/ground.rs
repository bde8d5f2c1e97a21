//! Grounding, plate batches and exact log-joint evaluation.
//!
//! Ground RVs of a template are laid out row-major over its plates in
//! declaration order (outer plate first). Tape values of a template are
//! `[S, N_i, D_i]`: `S` Monte Carlo samples of its `N_i` ground RVs.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use super::template::{PlateId, TemplateGraph, TemplateId};
use crate::diff::{Array, Tape, Var};
use crate::dist::DistSpec;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Grounding {
    Full,
    Reduced,
}

/// A template instantiated at concrete plate cardinalities.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundModel {
    graph: Arc<TemplateGraph>,
    cards: Vec<usize>,
    counts: Vec<usize>,
}

fn count_for(graph: &TemplateGraph, t: TemplateId, cards: &[usize]) -> usize {
    graph
        .template(t)
        .plates
        .iter()
        .map(|p| cards[p.0])
        .product()
}

impl GroundModel {
    pub fn ground(graph: Arc<TemplateGraph>, which: Grounding) -> Self {
        let cards = match which {
            Grounding::Full => graph.full_cards(),
            Grounding::Reduced => graph.reduced_cards(),
        };
        let counts = graph.ids().map(|t| count_for(&graph, t, &cards)).collect();
        GroundModel {
            graph,
            cards,
            counts,
        }
    }

    pub fn full(graph: Arc<TemplateGraph>) -> Self {
        Self::ground(graph, Grounding::Full)
    }

    pub fn graph(&self) -> &Arc<TemplateGraph> {
        &self.graph
    }

    pub fn cards(&self) -> &[usize] {
        &self.cards
    }

    /// `N_i`, the number of ground RVs of template `t`.
    pub fn count(&self, t: TemplateId) -> usize {
        self.counts[t.0]
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    /// Total number of latent scalars across all ground RVs.
    pub fn latent_size(&self) -> usize {
        self.graph
            .latent_ids()
            .iter()
            .map(|&t| self.counts[t.0] * self.graph.template(t).dim)
            .sum()
    }

    pub fn full_batch(&self) -> PlateBatch {
        PlateBatch {
            indices: self.cards.iter().map(|&c| (0..c).collect()).collect(),
        }
    }

    /// `log p(Θ, X)` over every ground RV.
    pub fn log_joint(&self, values: &Assignment) -> Result<f64> {
        let batch = self.full_batch();
        self.scaled_log_joint(&batch, values, false)
    }

    /// Log-joint of a batch slice with each template's contribution scaled by
    /// `N_i / N̆_i`.
    pub fn reduced_log_joint(&self, batch: &PlateBatch, slice: &Assignment) -> Result<f64> {
        self.scaled_log_joint(batch, slice, true)
    }

    fn scaled_log_joint(
        &self,
        batch: &PlateBatch,
        values: &Assignment,
        scaled: bool,
    ) -> Result<f64> {
        let layout = BatchLayout::new(&self.graph, &self.cards, batch)?;
        let tape = Tape::untracked();
        let mut bound = Vec::with_capacity(self.graph.templates().len());
        for t in self.graph.ids() {
            let tmpl = self.graph.template(t);
            let a = values
                .values
                .get(t.0)
                .and_then(|v| v.as_ref())
                .ok_or_else(|| Error::contract(format!("no assignment for `{}`", tmpl.name)))?;
            let rows = layout.rows(t);
            if a.shape() != [rows, tmpl.dim] {
                return Err(Error::contract(format!(
                    "assignment for `{}` has shape {:?}, expected [{rows}, {}]",
                    tmpl.name,
                    a.shape(),
                    tmpl.dim
                )));
            }
            bound.push(Some(TemplateValue::constant(&tape, tmpl.kind, a)?));
        }
        let terms = log_prob_terms(&tape, &self.graph, &layout, &bound, 1)?;
        let mut total = 0.0;
        for t in self.graph.ids() {
            let factor = if scaled {
                self.counts[t.0] as f64 / layout.rows(t) as f64
            } else {
                1.0
            };
            total += factor * tape.item(terms[t.0].expect("all templates bound"));
        }
        Ok(total)
    }

    /// Ancestral sample of every template (latent and observed).
    pub fn sample_prior<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Assignment> {
        let batch = self.full_batch();
        let layout = BatchLayout::new(&self.graph, &self.cards, &batch)?;
        let tape = Tape::untracked();
        let mut bound: Vec<Option<TemplateValue>> = vec![None; self.graph.templates().len()];
        let mut out = Assignment::new(&self.graph);
        for &t in self.graph.topo_order() {
            let tmpl = self.graph.template(t);
            let n = layout.rows(t);
            let noise: Vec<f64> = (0..n * tmpl.dim)
                .map(|_| rng.sample(StandardNormal))
                .collect();
            let noise = tape.constant(Array::new(vec![1, n, tmpl.dim], noise)?);
            let dist = prior_conditional(&tape, &self.graph, &layout, t, &bound, 1)?;
            let z = dist.rsample_unconstrained(&tape, noise)?;
            let natural = tmpl.kind.to_natural(&tape, z);
            out.values[t.0] = Some(tape.value(natural).reshape(vec![n, tmpl.dim])?);
            bound[t.0] = Some(TemplateValue {
                natural,
                unconstrained: z,
            });
        }
        Ok(out)
    }
}

/// Values for every template of a grounding (or of a batch slice), each
/// shaped `[rows, dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    values: Vec<Option<Array>>,
}

impl Assignment {
    pub fn new(graph: &TemplateGraph) -> Self {
        Assignment {
            values: vec![None; graph.templates().len()],
        }
    }

    pub fn set(&mut self, t: TemplateId, value: Array) {
        self.values[t.0] = Some(value);
    }

    pub fn set_named(&mut self, graph: &TemplateGraph, name: &str, value: Array) -> Result<()> {
        let t = graph
            .template_id(name)
            .ok_or_else(|| Error::contract(format!("unknown template `{name}`")))?;
        self.set(t, value);
        Ok(())
    }

    pub fn get(&self, t: TemplateId) -> Option<&Array> {
        self.values.get(t.0).and_then(|v| v.as_ref())
    }

    pub fn remove(&mut self, t: TemplateId) -> Option<Array> {
        self.values[t.0].take()
    }

    /// Keeps only observed templates.
    pub fn observed_only(&self, graph: &TemplateGraph) -> Assignment {
        Assignment {
            values: graph
                .templates()
                .iter()
                .zip(&self.values)
                .map(|(t, v)| if t.observed { v.clone() } else { None })
                .collect(),
        }
    }

    /// Rows of each assigned template selected by `layout`.
    pub fn slice(&self, layout: &BatchLayout) -> Result<Assignment> {
        let mut values = Vec::with_capacity(self.values.len());
        for (i, v) in self.values.iter().enumerate() {
            values.push(match v {
                Some(a) => Some(a.gather_rows(layout.ground_rows(TemplateId(i)))?),
                None => None,
            });
        }
        Ok(Assignment { values })
    }
}

/// Per-plate index subsets drawn at one stochastic step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PlateBatch {
    indices: Vec<Vec<usize>>,
}

impl PlateBatch {
    /// Checks indices are unique and within `cards` for every plate.
    pub fn new(cards: &[usize], indices: Vec<Vec<usize>>) -> Result<Self> {
        if indices.len() != cards.len() {
            return Err(Error::contract(format!(
                "batch covers {} plates, model has {}",
                indices.len(),
                cards.len()
            )));
        }
        for (p, (ix, &c)) in indices.iter().zip(cards).enumerate() {
            if ix.is_empty() {
                return Err(Error::contract(format!("plate {p}: empty index set")));
            }
            let mut seen = vec![false; c];
            for &i in ix {
                if i >= c {
                    return Err(Error::Index {
                        op: "plate_batch",
                        index: i,
                        bound: c,
                    });
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(Error::contract(format!("plate {p}: duplicate index {i}")));
                }
            }
        }
        Ok(PlateBatch { indices })
    }

    pub fn indices(&self, p: PlateId) -> &[usize] {
        &self.indices[p.0]
    }

    pub fn all(&self) -> &[Vec<usize>] {
        &self.indices
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.indices.iter().map(Vec::len).collect()
    }
}

/// Row bookkeeping for one batch: which ground RV each local row stands for
/// and where each template's parents sit.
#[derive(Clone, Debug)]
pub struct BatchLayout {
    sizes: Vec<usize>,
    templates: Vec<TemplateRows>,
}

#[derive(Clone, Debug)]
struct TemplateRows {
    ground: Vec<usize>,
    parent_rows: Vec<Vec<usize>>,
}

/// Decomposes `r` (row-major over `sizes`) into per-axis positions.
fn unflatten(mut r: usize, sizes: &[usize], out: &mut [usize]) {
    for k in (0..sizes.len()).rev() {
        out[k] = r % sizes[k];
        r /= sizes[k];
    }
}

impl BatchLayout {
    pub fn new(graph: &TemplateGraph, cards: &[usize], batch: &PlateBatch) -> Result<Self> {
        if batch.indices.len() != cards.len() {
            return Err(Error::contract("batch does not match the model's plates"));
        }
        for (ix, &c) in batch.indices.iter().zip(cards) {
            if let Some(&bad) = ix.iter().find(|&&i| i >= c) {
                return Err(Error::Index {
                    op: "batch_layout",
                    index: bad,
                    bound: c,
                });
            }
        }
        let sizes = batch.sizes();
        let mut templates = Vec::new();
        for t in graph.templates() {
            let plate_sizes: Vec<usize> = t.plates.iter().map(|p| sizes[p.0]).collect();
            let rows: usize = plate_sizes.iter().product();
            let mut pos = vec![0; t.plates.len()];
            let mut ground = Vec::with_capacity(rows);
            for r in 0..rows {
                unflatten(r, &plate_sizes, &mut pos);
                let mut g = 0;
                for (k, p) in t.plates.iter().enumerate() {
                    g = g * cards[p.0] + batch.indices[p.0][pos[k]];
                }
                ground.push(g);
            }
            let parent_rows = t
                .parents
                .iter()
                .map(|&pt| project(&t.plates, &graph.template(pt).plates, &sizes))
                .collect();
            templates.push(TemplateRows {
                ground,
                parent_rows,
            });
        }
        Ok(BatchLayout { sizes, templates })
    }

    /// Number of local rows (`N̆_i` under a reduced batch).
    pub fn rows(&self, t: TemplateId) -> usize {
        self.templates[t.0].ground.len()
    }

    /// Full-grounding index of each local row.
    pub fn ground_rows(&self, t: TemplateId) -> &[usize] {
        &self.templates[t.0].ground
    }

    /// For the `k`-th parent of `t`, the parent's local row for each of
    /// `t`'s local rows.
    pub fn parent_rows(&self, t: TemplateId, k: usize) -> &[usize] {
        &self.templates[t.0].parent_rows[k]
    }

    /// Maps local rows over plates `from` to local rows over the subset `to`.
    pub fn project(&self, from: &[PlateId], to: &[PlateId]) -> Vec<usize> {
        project(from, to, &self.sizes)
    }

    pub fn plate_sizes(&self) -> &[usize] {
        &self.sizes
    }
}

fn project(from: &[PlateId], to: &[PlateId], sizes: &[usize]) -> Vec<usize> {
    let from_sizes: Vec<usize> = from.iter().map(|p| sizes[p.0]).collect();
    let rows: usize = from_sizes.iter().product();
    let keep: Vec<Option<usize>> = to
        .iter()
        .map(|p| from.iter().position(|q| q == p))
        .collect();
    let mut pos = vec![0; from.len()];
    (0..rows)
        .map(|r| {
            unflatten(r, &from_sizes, &mut pos);
            let mut out = 0;
            for (k, p) in to.iter().enumerate() {
                let at = keep[k].map_or(0, |j| pos[j]);
                out = out * sizes[p.0] + at;
            }
            out
        })
        .collect()
}

/// A template's values on a tape, `[S, N_i, D]`, in both parameterizations.
#[derive(Clone, Copy, Debug)]
pub struct TemplateValue {
    pub natural: Var,
    pub unconstrained: Var,
}

impl TemplateValue {
    /// Constant `[1, rows, dim]` value from a `[rows, dim]` array.
    pub fn constant(tape: &Tape, kind: crate::dist::DistKind, a: &Array) -> Result<Self> {
        let shape = [&[1], a.shape()].concat();
        let natural = tape.constant(a.clone().reshape(shape)?);
        let unconstrained = kind.to_unconstrained(tape, natural)?;
        Ok(TemplateValue {
            natural,
            unconstrained,
        })
    }
}

/// Repeats per-row indices across `samples` stacked blocks.
pub(crate) fn expand_rows(rows: &[usize], samples: usize, block: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(rows.len() * samples);
    for s in 0..samples {
        out.extend(rows.iter().map(|&r| s * block + r));
    }
    out
}

/// Gathers `[S', N_p, D]` parent values into the child's `[S', N_i, D]` rows.
pub(crate) fn gather_parent(tape: &Tape, value: Var, rows: &[usize]) -> Result<Var> {
    let shape = tape.shape(value);
    let (s, n, d) = (shape[0], shape[1], shape[2]);
    let flat = tape.reshape(value, &[s * n, d])?;
    let idx = expand_rows(rows, s, n);
    let g = tape.gather_rows(flat, &idx)?;
    tape.reshape(g, &[s, rows.len(), d])
}

/// The prior conditional `p_i(· | π)` of template `t` evaluated at the bound
/// parent values, broadcast over its batch rows.
pub(crate) fn prior_conditional(
    tape: &Tape,
    graph: &TemplateGraph,
    layout: &BatchLayout,
    t: TemplateId,
    bound: &[Option<TemplateValue>],
    _samples: usize,
) -> Result<DistSpec> {
    let tmpl = graph.template(t);
    let mut gathered = Vec::with_capacity(tmpl.parents.len());
    for (k, &p) in tmpl.parents.iter().enumerate() {
        let v = bound[p.0].ok_or_else(|| {
            Error::contract(format!(
                "parent `{}` of `{}` has no value",
                graph.template(p).name,
                tmpl.name
            ))
        })?;
        gathered.push((
            graph.template(p).name.as_str(),
            gather_parent(tape, v.natural, layout.parent_rows(t, k))?,
        ));
    }
    let lookup = |name: &str| gathered.iter().find(|(n, _)| *n == name).map(|(_, v)| *v);
    let loc = tmpl.loc.eval(tape, &lookup)?;
    let scale = tmpl.scale.eval(tape, &lookup)?;
    DistSpec::new(tape, tmpl.kind, loc, scale).map_err(|e| match e {
        Error::Domain { detail, .. } => Error::domain(
            "prior_conditional",
            format!("template `{}`: {detail}", tmpl.name),
        ),
        other => other,
    })
}

/// Per-template log-prob sums, each `[S]` (or `[1]` for sample-free terms).
pub(crate) fn log_prob_terms(
    tape: &Tape,
    graph: &TemplateGraph,
    layout: &BatchLayout,
    bound: &[Option<TemplateValue>],
    samples: usize,
) -> Result<Vec<Option<Var>>> {
    let mut out = vec![None; graph.templates().len()];
    for &t in graph.topo_order() {
        let Some(v) = bound[t.0] else { continue };
        let dist = prior_conditional(tape, graph, layout, t, bound, samples)?;
        let lp = dist.log_prob_unconstrained(tape, v.unconstrained)?;
        let lp = match tape.shape(lp).len() {
            2 => tape.sum_axis(lp, 1)?,
            _ => {
                return Err(Error::Shape {
                    op: "log_prob_terms",
                    lhs: tape.shape(lp),
                    rhs: vec![samples, layout.rows(t)],
                })
            }
        };
        out[t.0] = Some(lp);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::zoo;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gre_ground_counts() {
        let g = Arc::new(zoo::gre(1, 3, 2, 3, 2).unwrap());
        let m = GroundModel::full(g.clone());
        let ids: Vec<usize> = g.ids().map(|t| m.count(t)).collect();
        assert_eq!(ids, vec![1, 3, 6]);
        let g = Arc::new(zoo::gre(1, 100, 10, 2, 10).unwrap());
        let m = GroundModel::full(g.clone());
        assert_eq!(m.count(g.template_id("x").unwrap()), 1000);
        let r = GroundModel::ground(g.clone(), Grounding::Reduced);
        assert_eq!(r.count(g.template_id("theta1").unwrap()), 2);
        assert_eq!(GroundModel::full(g.clone()), GroundModel::full(g));
    }

    #[test]
    fn unit_cards_single_ground_rv() {
        let g = Arc::new(zoo::gre(1, 1, 1, 1, 1).unwrap());
        let m = GroundModel::full(g.clone());
        assert!(g.ids().all(|t| m.count(t) == 1));
    }

    fn zeros(g: &TemplateGraph, m: &GroundModel) -> Assignment {
        let mut a = Assignment::new(g);
        for t in g.ids() {
            a.set(t, Array::zeros(&[m.count(t), g.template(t).dim]));
        }
        a
    }

    #[test]
    fn log_joint_at_zero() {
        let g = Arc::new(zoo::gre(1, 1, 1, 1, 1).unwrap());
        let m = GroundModel::full(g.clone());
        let lj = m.log_joint(&zeros(&g, &m)).unwrap();
        assert!((lj + 2.756_815_599_614_018).abs() < 1e-12, "{lj}");
    }

    #[test]
    fn missing_assignment_names_rv() {
        let g = Arc::new(zoo::gre(1, 1, 1, 1, 1).unwrap());
        let m = GroundModel::full(g.clone());
        let mut a = zeros(&g, &m);
        a.remove(g.template_id("theta1").unwrap());
        let err = m.log_joint(&a).unwrap_err();
        assert!(
            matches!(&err, Error::Contract(msg) if msg.contains("theta1")),
            "{err}"
        );
    }

    #[test]
    fn reduced_scaling_factors() {
        // cards (4,2) reduced to (2,1): each template's term scaled by N/N̆.
        let g = Arc::new(zoo::gre(1, 4, 2, 2, 1).unwrap());
        let m = GroundModel::full(g.clone());
        let batch = PlateBatch::new(m.cards(), vec![vec![1, 3], vec![0]]).unwrap();
        let t1 = g.template_id("theta1").unwrap();
        let x = g.template_id("x").unwrap();
        let t2 = g.template_id("theta2").unwrap();
        let mut a = Assignment::new(&g);
        a.set(t2, Array::matrix(1, 1, vec![0.0]).unwrap());
        a.set(t1, Array::matrix(2, 1, vec![0.5, -0.5]).unwrap());
        a.set(x, Array::matrix(2, 1, vec![1.0, 0.0]).unwrap());
        let got = m.reduced_log_joint(&batch, &a).unwrap();
        let ln = |v: f64, mu: f64| -0.5 * crate::dist::LN_2PI - 0.5 * (v - mu) * (v - mu);
        let expected = ln(0.0, 0.0)
            + 2.0 * (ln(0.5, 0.0) + ln(-0.5, 0.0))
            + 4.0 * (ln(1.0, 0.5) + ln(0.0, -0.5));
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn full_batch_reduced_equals_full() {
        let g = Arc::new(zoo::gre(2, 3, 2, 2, 1).unwrap());
        let m = GroundModel::full(g.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = m.sample_prior(&mut rng).unwrap();
        let full = m.log_joint(&a).unwrap();
        let red = m.reduced_log_joint(&m.full_batch(), &a).unwrap();
        assert_eq!(full, red);
    }

    #[test]
    fn layout_parent_rows() {
        let g = Arc::new(zoo::gre(1, 3, 2, 2, 1).unwrap());
        let m = GroundModel::full(g.clone());
        let batch = PlateBatch::new(m.cards(), vec![vec![0, 2], vec![1]]).unwrap();
        let layout = BatchLayout::new(&g, m.cards(), &batch).unwrap();
        let x = g.template_id("x").unwrap();
        let t1 = g.template_id("theta1").unwrap();
        assert_eq!(layout.ground_rows(t1), &[0, 2]);
        assert_eq!(layout.ground_rows(x), &[1, 5]);
        assert_eq!(layout.parent_rows(x, 0), &[0, 1]);
        assert_eq!(layout.parent_rows(t1, 0), &[0, 0]);
    }

    #[test]
    fn batch_validation() {
        assert!(PlateBatch::new(&[3], vec![vec![0, 0]]).is_err());
        assert!(matches!(
            PlateBatch::new(&[3], vec![vec![3]]),
            Err(Error::Index { index: 3, .. })
        ));
        assert!(PlateBatch::new(&[3], vec![]).is_err());
    }

    #[test]
    fn prior_sampling_is_deterministic_and_degenerate_at_tiny_scale() {
        let g = Arc::new(zoo::gre(2, 3, 2, 3, 2).unwrap());
        let m = GroundModel::full(g.clone());
        let a = m.sample_prior(&mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = m.sample_prior(&mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);

        let tiny = Arc::new(zoo::gre_with_scales(2, 3, 2, 3, 2, 1e-12, 1e-12, 1e-12).unwrap());
        let m = GroundModel::full(tiny.clone());
        let a = m.sample_prior(&mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for t in tiny.ids() {
            assert!(a.get(t).unwrap().data().iter().all(|v| v.abs() < 1e-10));
        }
    }

    #[test]
    fn gre_data_mean_matches_variance_sum() {
        let g = Arc::new(zoo::gre(1, 1, 1, 1, 1).unwrap());
        let m = GroundModel::full(g.clone());
        let x = g.template_id("x").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let mut sum = 0.0;
        for _ in 0..n {
            sum += m.sample_prior(&mut rng).unwrap().get(x).unwrap().item();
        }
        let mean = sum / n as f64;
        let se = 3f64.sqrt() / (n as f64).sqrt();
        assert!(mean.abs() < 3.0 * se, "{mean}");
    }
}
