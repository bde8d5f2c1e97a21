//! Plate-enriched templates, grounding and log-joint evaluation.

mod expr;
mod file;
mod ground;
mod template;
pub mod zoo;

pub use expr::{BinOp, Expr, Func};
pub use file::{parse_card_flag, parse_model, parse_model_file, GRE_MODEL, HV_MODEL};
pub(crate) use ground::{expand_rows, gather_parent, log_prob_terms, prior_conditional};
pub use ground::{Assignment, BatchLayout, GroundModel, Grounding, PlateBatch, TemplateValue};
pub use template::{
    PlateDecl, PlateId, RvTemplate, RvTemplateDecl, TemplateGraph, TemplateGraphBuilder, TemplateId,
};
