//! Built-in models, constructed programmatically.

use serde::{Deserialize, Serialize};

use super::expr::{Expr, Func};
use super::template::{RvTemplateDecl, TemplateGraph};
use crate::dist::DistKind;
use crate::error::Result;

/// Gaussian random effects: population mean `theta2`, group means `theta1`
/// over plate `P1`, observations `x` over `(P1, P0)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GreSpec {
    pub dim: usize,
    pub groups: usize,
    pub samples: usize,
    pub reduced_groups: usize,
    pub reduced_samples: usize,
    pub sigma_x: f64,
    pub sigma_1: f64,
    pub sigma_2: f64,
}

impl GreSpec {
    /// Unit scales, no reduction.
    pub fn new(dim: usize, groups: usize, samples: usize) -> Self {
        GreSpec {
            dim,
            groups,
            samples,
            reduced_groups: groups,
            reduced_samples: samples,
            sigma_x: 1.0,
            sigma_1: 1.0,
            sigma_2: 1.0,
        }
    }

    pub fn reduced(mut self, groups: usize, samples: usize) -> Self {
        self.reduced_groups = groups;
        self.reduced_samples = samples;
        self
    }

    pub fn scales(mut self, sigma_x: f64, sigma_1: f64, sigma_2: f64) -> Self {
        self.sigma_x = sigma_x;
        self.sigma_1 = sigma_1;
        self.sigma_2 = sigma_2;
        self
    }

    pub fn graph(&self) -> Result<TemplateGraph> {
        let c = Expr::constant;
        TemplateGraph::builder()
            .plate("P1", self.groups, self.reduced_groups)
            .plate("P0", self.samples, self.reduced_samples)
            .template(RvTemplateDecl::latent(
                "theta2",
                self.dim,
                &[],
                DistKind::Normal,
                c(0.0),
                c(self.sigma_2),
            ))
            .template(RvTemplateDecl::latent(
                "theta1",
                self.dim,
                &["P1"],
                DistKind::Normal,
                Expr::parent("theta2"),
                c(self.sigma_1),
            ))
            .template(RvTemplateDecl::observed(
                "x",
                self.dim,
                &["P1", "P0"],
                DistKind::Normal,
                Expr::parent("theta1"),
                c(self.sigma_x),
            ))
            .build()
    }
}

/// GRE with unit scales.
pub fn gre(
    dim: usize,
    groups: usize,
    samples: usize,
    reduced_groups: usize,
    reduced_samples: usize,
) -> Result<TemplateGraph> {
    GreSpec::new(dim, groups, samples)
        .reduced(reduced_groups, reduced_samples)
        .graph()
}

#[allow(clippy::too_many_arguments)]
pub fn gre_with_scales(
    dim: usize,
    groups: usize,
    samples: usize,
    reduced_groups: usize,
    reduced_samples: usize,
    sigma_x: f64,
    sigma_1: f64,
    sigma_2: f64,
) -> Result<TemplateGraph> {
    GreSpec::new(dim, groups, samples)
        .reduced(reduced_groups, reduced_samples)
        .scales(sigma_x, sigma_1, sigma_2)
        .graph()
}

/// The three-group, two-observation GRE used for exhaustive batch
/// enumeration: cards (3, 2) reduced to (2, 1), scalar RVs.
pub fn toy() -> Result<TemplateGraph> {
    gre(1, 3, 2, 2, 1)
}

/// Hierarchical variance model: each parent is the variance of its
/// children's log.
pub fn hv(
    groups: usize,
    samples: usize,
    reduced_groups: usize,
    reduced_samples: usize,
) -> Result<TemplateGraph> {
    let c = Expr::constant;
    let sqrt = |name: &str| Expr::call(Func::Sqrt, Expr::parent(name));
    TemplateGraph::builder()
        .plate("P1", groups, reduced_groups)
        .plate("P0", samples, reduced_samples)
        .template(RvTemplateDecl::latent(
            "theta2",
            2,
            &[],
            DistKind::LogNormal,
            c(0.0),
            c(1.0),
        ))
        .template(RvTemplateDecl::latent(
            "theta1",
            2,
            &["P1"],
            DistKind::LogNormal,
            c(0.0),
            sqrt("theta2"),
        ))
        .template(RvTemplateDecl::observed(
            "x",
            2,
            &["P1", "P0"],
            DistKind::LogNormal,
            c(0.0),
            sqrt("theta1"),
        ))
        .build()
}

/// HV at its benchmark size: cards (15, 15) reduced to (3, 3).
pub fn hv_default() -> Result<TemplateGraph> {
    hv(15, 15, 3, 3)
}
