//! The non-amortized baseline: every ground RV owns its own copy of the
//! flow weights, so nothing is shared across a plate. It is built by the
//! family with [`Scheme::SviBaseline`] and trained by the same loop as the
//! amortized schemes, with per-row lazy Adam updates.

use std::sync::Arc;

use rand::Rng;

use crate::error::Result;
use crate::family::{FamilyConfig, Scheme, VariationalFamily};
use crate::flows::FlowConfig;
use crate::model::TemplateGraph;

pub fn svi_family<R: Rng + ?Sized>(
    graph: Arc<TemplateGraph>,
    flow: FlowConfig,
    rng: &mut R,
) -> Result<VariationalFamily> {
    let cfg = FamilyConfig {
        scheme: Scheme::SviBaseline,
        flow,
        encoding_dim: 0,
        ..FamilyConfig::default()
    };
    VariationalFamily::build(graph, &cfg, rng)
}
