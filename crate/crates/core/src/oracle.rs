//! Closed-form posterior and evidence for Gaussian random effects.
//!
//! Dimensions are independent, and within one dimension the posterior
//! precision over `(theta2, theta1_1..G)` is an arrowhead matrix: eliminating
//! the group means leaves a scalar Schur complement for `theta2`.

use crate::diff::Array;
use crate::dist::{DistKind, LN_2PI};
use crate::error::{Error, Result};
use crate::model::zoo::GreSpec;
use crate::model::{Assignment, Expr, TemplateGraph};

#[derive(Clone, Debug, PartialEq)]
pub struct GrePosterior {
    pub theta2_mean: Vec<f64>,
    pub theta2_var: Vec<f64>,
    /// `[G, D]`.
    pub theta1_mean: Array,
    pub theta1_var: Array,
    pub log_evidence: f64,
}

/// Observations `[G * n, D]` arranged group-major into per-group sums.
fn group_sums(spec: &GreSpec, x: &Array) -> Result<Vec<Vec<f64>>> {
    let (g, n, d) = (spec.groups, spec.samples, spec.dim);
    if g == 0 || n == 0 {
        return Err(Error::contract(
            "every group needs at least one observation",
        ));
    }
    if x.shape() != [g * n, d] {
        return Err(Error::contract(format!(
            "observations have shape {:?}, expected [{}, {d}]",
            x.shape(),
            g * n
        )));
    }
    let mut sums = vec![vec![0.0; d]; g];
    for (r, row) in x.data().chunks(d).enumerate() {
        for (s, v) in sums[r / n].iter_mut().zip(row) {
            *s += v;
        }
    }
    Ok(sums)
}

pub fn gre_posterior(spec: &GreSpec, x: &Array) -> Result<GrePosterior> {
    let sums = group_sums(spec, x)?;
    let (g, n, d) = (spec.groups, spec.samples as f64, spec.dim);
    let (vx, v1, v2) = (
        spec.sigma_x.powi(2),
        spec.sigma_1.powi(2),
        spec.sigma_2.powi(2),
    );
    // per-group conditional precision of theta1 given theta2
    let a = 1.0 / v1 + n / vx;
    // marginal variance of a group mean given theta2
    let vm = v1 + vx / n;
    let p2 = 1.0 / v2 + g as f64 / vm;

    let mut theta2_mean = vec![0.0; d];
    let mut theta1_mean = Array::zeros(&[g, d]);
    let mut theta1_var = Array::zeros(&[g, d]);
    let mut log_evidence = 0.0;
    for k in 0..d {
        let m2 = sums.iter().map(|s| s[k] / n).sum::<f64>() / vm / p2;
        theta2_mean[k] = m2;
        for (grp, s) in sums.iter().enumerate() {
            let row = theta1_mean.row_mut(grp);
            row[k] = (m2 / v1 + s[k] / vx) / a;
            theta1_var.row_mut(grp)[k] = 1.0 / a + (1.0 / (v1 * a)).powi(2) / p2;
        }
    }
    // log p(x) = log p(x, θ*) - log p(θ* | x) at the posterior mean θ*
    for k in 0..d {
        let m2 = theta2_mean[k];
        let mut joint = normal_lp(m2, 0.0, v2);
        for (grp, rows) in x.data().chunks(d * spec.samples).enumerate() {
            let m1 = theta1_mean.row(grp)[k];
            joint += normal_lp(m1, m2, v1);
            for row in rows.chunks(d) {
                joint += normal_lp(row[k], m1, vx);
            }
        }
        let log_det = g as f64 * a.ln() + p2.ln();
        let post_at_mode = -0.5 * (g + 1) as f64 * LN_2PI + 0.5 * log_det;
        log_evidence += joint - post_at_mode;
    }
    let theta2_var = vec![1.0 / p2; d];
    Ok(GrePosterior {
        theta2_mean,
        theta2_var,
        theta1_mean,
        theta1_var,
        log_evidence,
    })
}

fn normal_lp(v: f64, mu: f64, var: f64) -> f64 {
    -0.5 * (LN_2PI + var.ln()) - 0.5 * (v - mu) * (v - mu) / var
}

/// `E_{v ~ N(a, sa), μ ~ N(b, sb)} log N(v | μ, var)`.
fn expected_lp(a: f64, sa: f64, b: f64, sb: f64, var: f64) -> f64 {
    -0.5 * (LN_2PI + var.ln()) - 0.5 * ((a - b).powi(2) + sa + sb) / var
}

/// Closed-form ELBO of the mean-field Gaussian built from empirical means:
/// each `theta1_g` centred on its group mean and `theta2` on its conditional
/// posterior mean given those, with the matching conditional variances.
pub fn empirical_mean_elbo(spec: &GreSpec, x: &Array) -> Result<f64> {
    let sums = group_sums(spec, x)?;
    let (g, n, d) = (spec.groups, spec.samples as f64, spec.dim);
    let (vx, v1, v2) = (
        spec.sigma_x.powi(2),
        spec.sigma_1.powi(2),
        spec.sigma_2.powi(2),
    );
    let s1 = 1.0 / (1.0 / v1 + n / vx);
    let s2 = 1.0 / (1.0 / v2 + g as f64 / v1);
    let entropy = |var: f64| 0.5 * (LN_2PI + 1.0 + var.ln());
    let mut elbo = 0.0;
    for k in 0..d {
        let means: Vec<f64> = sums.iter().map(|s| s[k] / n).collect();
        let m2 = s2 * means.iter().sum::<f64>() / v1;
        elbo += expected_lp(m2, s2, 0.0, 0.0, v2) + entropy(s2);
        for (grp, rows) in x.data().chunks(d * spec.samples).enumerate() {
            elbo += expected_lp(means[grp], s1, m2, s2, v1) + entropy(s1);
            for row in rows.chunks(d) {
                elbo += expected_lp(row[k], 0.0, means[grp], s1, vx);
            }
        }
    }
    Ok(elbo)
}

/// Recognizes a Gaussian random effects graph and recovers its sizes and
/// scales: a plate-free Normal root with constant location 0, a Normal
/// child on one plate located at the root, and an observed Normal leaf on
/// that plate and one more, located at the child. Scales must be constant.
pub fn gre_structure(graph: &TemplateGraph) -> Option<GreSpec> {
    let ts = graph.templates();
    if ts.len() != 3 || graph.plates().len() != 2 {
        return None;
    }
    let order = graph.topo_order();
    let (root, mid, leaf) = (
        graph.template(order[0]),
        graph.template(order[1]),
        graph.template(order[2]),
    );
    let constant = |e: &Expr| match e {
        Expr::Const(c) => Some(*c),
        _ => None,
    };
    let refers = |e: &Expr, name: &str| matches!(e, Expr::Ref(r) if r == name);
    let normal = [root, mid, leaf].iter().all(|t| t.kind == DistKind::Normal);
    let dims = root.dim == mid.dim && mid.dim == leaf.dim;
    let shape = root.plates.is_empty()
        && mid.plates.len() == 1
        && leaf.plates.len() == 2
        && leaf.plates[0] == mid.plates[0]
        && leaf.observed
        && !root.observed
        && !mid.observed;
    if !(normal && dims && shape && constant(&root.loc) == Some(0.0)) {
        return None;
    }
    if !refers(&mid.loc, &root.name) || !refers(&leaf.loc, &mid.name) {
        return None;
    }
    let (g, s) = (graph.plate(leaf.plates[0]), graph.plate(leaf.plates[1]));
    Some(
        GreSpec::new(root.dim, g.card, s.card)
            .reduced(g.reduced_card, s.reduced_card)
            .scales(
                constant(&leaf.scale)?,
                constant(&mid.scale)?,
                constant(&root.scale)?,
            ),
    )
}

/// The observed array of a GRE dataset.
pub fn observations<'a>(graph: &TemplateGraph, data: &'a Assignment) -> Result<&'a Array> {
    let x = graph
        .observed_ids()
        .first()
        .copied()
        .ok_or_else(|| Error::contract("model has no observed template"))?;
    data.get(x)
        .ok_or_else(|| Error::contract(format!("no data for `{}`", graph.template(x).name)))
}
