use serde::{Deserialize, Serialize};

use crate::diff::{Array, Bound, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::model::{BatchLayout, PlateId, TemplateGraph, TemplateId};

/// How latent templates that live on the same plates get their encodings.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncodingLayout {
    /// One array per plate level, shared by its templates.
    #[default]
    Shared,
    /// One array per latent template.
    PerTemplate,
}

#[derive(Clone, Debug)]
pub struct EncodingArray {
    pub plates: Vec<PlateId>,
    pub param: ParamId,
    pub rows: usize,
}

/// Free encodings `E`, allocated at full cardinalities and zero-initialized.
#[derive(Clone, Debug)]
pub struct EncodingStore {
    dim: usize,
    arrays: Vec<EncodingArray>,
    by_template: Vec<Option<usize>>,
}

impl EncodingStore {
    pub fn new(
        store: &mut ParamStore,
        graph: &TemplateGraph,
        dim: usize,
        layout: EncodingLayout,
    ) -> Self {
        let mut arrays: Vec<EncodingArray> = Vec::new();
        let mut by_template = vec![None; graph.templates().len()];
        for t in graph.latent_ids() {
            let plates = graph.template(t).plates.clone();
            let existing = match layout {
                EncodingLayout::Shared => arrays.iter().position(|a| a.plates == plates),
                EncodingLayout::PerTemplate => None,
            };
            let k = match existing {
                Some(k) => k,
                None => {
                    let rows: usize = plates.iter().map(|p| graph.plate(*p).card).product();
                    let label = match layout {
                        EncodingLayout::Shared => {
                            let names: Vec<&str> = plates
                                .iter()
                                .map(|p| graph.plate(*p).name.as_str())
                                .collect();
                            format!("encodings.[{}]", names.join(","))
                        }
                        EncodingLayout::PerTemplate => {
                            format!("encodings.{}", graph.template(t).name)
                        }
                    };
                    let param = store.add(label, Array::zeros(&[rows, dim]), true);
                    arrays.push(EncodingArray {
                        plates,
                        param,
                        rows,
                    });
                    arrays.len() - 1
                }
            };
            by_template[t.0] = Some(k);
        }
        EncodingStore {
            dim,
            arrays,
            by_template,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn arrays(&self) -> &[EncodingArray] {
        &self.arrays
    }

    pub fn array_of(&self, t: TemplateId) -> Option<&EncodingArray> {
        self.by_template[t.0].map(|k| &self.arrays[k])
    }

    pub fn weight_count(&self) -> usize {
        self.arrays.iter().map(|a| a.rows * self.dim).sum()
    }

    /// Rows of each template's array selected by the batch, `[N̆_i, dim]`;
    /// gradients scatter back into the store.
    pub fn slice(
        &self,
        tape: &Tape,
        bound: &Bound,
        graph: &TemplateGraph,
        layout: &BatchLayout,
    ) -> Result<Vec<Option<Var>>> {
        let mut out = vec![None; graph.templates().len()];
        for t in graph.latent_ids() {
            let k = self.by_template[t.0].ok_or_else(|| {
                Error::contract(format!(
                    "no encoding array for `{}`",
                    graph.template(t).name
                ))
            })?;
            let a = &self.arrays[k];
            out[t.0] = Some(tape.gather_rows(bound.var(a.param), layout.ground_rows(t))?);
        }
        Ok(out)
    }
}
