use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::expr::Expr;
use crate::dist::DistKind;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PlateId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TemplateId(pub usize);

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PlateDecl {
    pub name: String,
    pub card: usize,
    pub reduced_card: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RvTemplateDecl {
    pub name: String,
    pub dim: usize,
    /// Plate names; normalized to declaration order on validation.
    pub plates: Vec<String>,
    pub kind: DistKind,
    pub loc: Expr,
    pub scale: Expr,
    pub observed: bool,
}

impl RvTemplateDecl {
    pub fn latent(
        name: &str,
        dim: usize,
        plates: &[&str],
        kind: DistKind,
        loc: Expr,
        scale: Expr,
    ) -> Self {
        RvTemplateDecl {
            name: name.into(),
            dim,
            plates: plates.iter().map(|p| p.to_string()).collect(),
            kind,
            loc,
            scale,
            observed: false,
        }
    }

    pub fn observed(
        name: &str,
        dim: usize,
        plates: &[&str],
        kind: DistKind,
        loc: Expr,
        scale: Expr,
    ) -> Self {
        RvTemplateDecl {
            observed: true,
            ..Self::latent(name, dim, plates, kind, loc, scale)
        }
    }
}

/// A validated template after name resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct RvTemplate {
    pub name: String,
    pub dim: usize,
    pub plates: Vec<PlateId>,
    pub kind: DistKind,
    pub loc: Expr,
    pub scale: Expr,
    pub observed: bool,
    /// Referenced templates, ordered by declaration.
    pub parents: Vec<TemplateId>,
}

/// The compact plate-enriched DAG.
#[derive(Clone, Debug, PartialEq)]
pub struct TemplateGraph {
    plates: Vec<PlateDecl>,
    templates: Vec<RvTemplate>,
    topo: Vec<TemplateId>,
}

#[derive(Clone, Debug, Default)]
pub struct TemplateGraphBuilder {
    plates: Vec<PlateDecl>,
    templates: Vec<RvTemplateDecl>,
}

impl TemplateGraphBuilder {
    pub fn plate(mut self, name: &str, card: usize, reduced_card: usize) -> Self {
        self.plates.push(PlateDecl {
            name: name.into(),
            card,
            reduced_card,
        });
        self
    }

    pub fn template(mut self, decl: RvTemplateDecl) -> Self {
        self.templates.push(decl);
        self
    }

    pub fn build(self) -> Result<TemplateGraph> {
        TemplateGraph::new(self.plates, self.templates)
    }
}

fn valid_ident(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_alphabetic() || c == '_')
        && chars.all(|c| c.is_alphanumeric() || c == '_')
}

impl TemplateGraph {
    pub fn builder() -> TemplateGraphBuilder {
        TemplateGraphBuilder::default()
    }

    pub fn new(plates: Vec<PlateDecl>, decls: Vec<RvTemplateDecl>) -> Result<Self> {
        let mut plate_ix = BTreeMap::new();
        for (i, p) in plates.iter().enumerate() {
            if !valid_ident(&p.name) {
                return Err(Error::validation(format!(
                    "invalid plate name `{}`",
                    p.name
                )));
            }
            if plate_ix.insert(p.name.clone(), i).is_some() {
                return Err(Error::validation(format!("duplicate plate `{}`", p.name)));
            }
            if p.card == 0 {
                return Err(Error::validation(format!(
                    "plate `{}`: card must be >= 1",
                    p.name
                )));
            }
            if p.reduced_card == 0 || p.reduced_card > p.card {
                return Err(Error::validation(format!(
                    "plate `{}`: reduced card {} must lie in 1..={}",
                    p.name, p.reduced_card, p.card
                )));
            }
        }
        if decls.is_empty() {
            return Err(Error::validation("model declares no templates"));
        }
        let mut tmpl_ix = BTreeMap::new();
        for (i, t) in decls.iter().enumerate() {
            if !valid_ident(&t.name) {
                return Err(Error::validation(format!(
                    "invalid template name `{}`",
                    t.name
                )));
            }
            if plate_ix.contains_key(&t.name) {
                return Err(Error::validation(format!(
                    "`{}` names both a plate and a template",
                    t.name
                )));
            }
            if tmpl_ix.insert(t.name.clone(), i).is_some() {
                return Err(Error::validation(format!(
                    "duplicate template `{}`",
                    t.name
                )));
            }
        }

        let mut templates = Vec::with_capacity(decls.len());
        for d in &decls {
            if d.dim == 0 {
                return Err(Error::validation(format!(
                    "template `{}`: dim must be >= 1",
                    d.name
                )));
            }
            let mut pids = Vec::new();
            for p in &d.plates {
                let &ix = plate_ix.get(p).ok_or_else(|| {
                    Error::validation(format!("template `{}`: unknown plate `{p}`", d.name))
                })?;
                if pids.contains(&PlateId(ix)) {
                    return Err(Error::validation(format!(
                        "template `{}`: plate `{p}` listed twice",
                        d.name
                    )));
                }
                pids.push(PlateId(ix));
            }
            pids.sort();
            let mut parents = Vec::new();
            for e in [&d.loc, &d.scale] {
                check_constants(e, &d.name)?;
                for r in e.refs() {
                    let &ix = tmpl_ix.get(&r).ok_or_else(|| {
                        Error::validation(format!("template `{}`: unknown parent `{r}`", d.name))
                    })?;
                    if !parents.contains(&TemplateId(ix)) {
                        parents.push(TemplateId(ix));
                    }
                }
            }
            parents.sort();
            templates.push(RvTemplate {
                name: d.name.clone(),
                dim: d.dim,
                plates: pids,
                kind: d.kind,
                loc: d.loc.clone(),
                scale: d.scale.clone(),
                observed: d.observed,
                parents,
            });
        }

        for t in &templates {
            for &p in &t.parents {
                let parent = &templates[p.0];
                if parent.name == t.name {
                    return Err(Error::validation(format!(
                        "template `{}` references itself",
                        t.name
                    )));
                }
                if parent.observed {
                    return Err(Error::validation(format!(
                        "edge {} -> {}: observed templates cannot be parents",
                        parent.name, t.name
                    )));
                }
                if let Some(&missing) = parent.plates.iter().find(|q| !t.plates.contains(q)) {
                    return Err(Error::validation(format!(
                        "edge {} -> {}: parent plate `{}` is not a plate of the child (plates must nest)",
                        parent.name, t.name, plates[missing.0].name
                    )));
                }
                if parent.dim != t.dim && parent.dim != 1 {
                    return Err(Error::validation(format!(
                        "edge {} -> {}: parent dim {} does not broadcast to child dim {}",
                        parent.name, t.name, parent.dim, t.dim
                    )));
                }
            }
        }
        if templates.iter().all(|t| t.observed) {
            return Err(Error::validation("model declares no latent templates"));
        }

        let topo = topo_order(&templates)?;
        Ok(TemplateGraph {
            plates,
            templates,
            topo,
        })
    }

    pub fn plates(&self) -> &[PlateDecl] {
        &self.plates
    }

    pub fn plate(&self, id: PlateId) -> &PlateDecl {
        &self.plates[id.0]
    }

    pub fn plate_id(&self, name: &str) -> Option<PlateId> {
        self.plates.iter().position(|p| p.name == name).map(PlateId)
    }

    pub fn templates(&self) -> &[RvTemplate] {
        &self.templates
    }

    pub fn template(&self, id: TemplateId) -> &RvTemplate {
        &self.templates[id.0]
    }

    pub fn template_id(&self, name: &str) -> Option<TemplateId> {
        self.templates
            .iter()
            .position(|t| t.name == name)
            .map(TemplateId)
    }

    pub fn ids(&self) -> impl Iterator<Item = TemplateId> {
        (0..self.templates.len()).map(TemplateId)
    }

    /// Templates in topological order (parents first, ties by declaration).
    pub fn topo_order(&self) -> &[TemplateId] {
        &self.topo
    }

    pub fn latent_ids(&self) -> Vec<TemplateId> {
        self.topo
            .iter()
            .copied()
            .filter(|&t| !self.templates[t.0].observed)
            .collect()
    }

    pub fn observed_ids(&self) -> Vec<TemplateId> {
        self.topo
            .iter()
            .copied()
            .filter(|&t| self.templates[t.0].observed)
            .collect()
    }

    pub fn full_cards(&self) -> Vec<usize> {
        self.plates.iter().map(|p| p.card).collect()
    }

    pub fn reduced_cards(&self) -> Vec<usize> {
        self.plates.iter().map(|p| p.reduced_card).collect()
    }

    /// A copy with different plate cardinalities; `reduced` is clamped to
    /// the new `card` only when not given explicitly.
    pub fn with_cards(
        &self,
        cards: &[(String, usize)],
        reduced: &[(String, usize)],
    ) -> Result<Self> {
        let mut plates = self.plates.clone();
        for (name, c) in cards {
            let p = plates
                .iter_mut()
                .find(|p| &p.name == name)
                .ok_or_else(|| Error::config(format!("unknown plate `{name}`")))?;
            p.card = *c;
            p.reduced_card = p.reduced_card.min(*c);
        }
        for (name, c) in reduced {
            let p = plates
                .iter_mut()
                .find(|p| &p.name == name)
                .ok_or_else(|| Error::config(format!("unknown plate `{name}`")))?;
            p.reduced_card = *c;
        }
        let decls = self.decls();
        TemplateGraph::new(plates, decls)
    }

    /// The declarations this graph was built from, in normalized form.
    pub fn decls(&self) -> Vec<RvTemplateDecl> {
        self.templates
            .iter()
            .map(|t| RvTemplateDecl {
                name: t.name.clone(),
                dim: t.dim,
                plates: t
                    .plates
                    .iter()
                    .map(|p| self.plates[p.0].name.clone())
                    .collect(),
                kind: t.kind,
                loc: t.loc.clone(),
                scale: t.scale.clone(),
                observed: t.observed,
            })
            .collect()
    }

    /// Distinct plate sets carried by latent templates, each listed once in
    /// order of first appearance along the topological order.
    pub fn latent_plate_levels(&self) -> Vec<Vec<PlateId>> {
        let mut levels: Vec<Vec<PlateId>> = Vec::new();
        for t in self.latent_ids() {
            let ps = &self.templates[t.0].plates;
            if !levels.contains(ps) {
                levels.push(ps.clone());
            }
        }
        levels
    }
}

fn check_constants(e: &Expr, owner: &str) -> Result<()> {
    match e {
        Expr::Const(v) if !v.is_finite() => Err(Error::validation(format!(
            "template `{owner}`: non-finite constant"
        ))),
        Expr::Const(_) | Expr::Ref(_) => Ok(()),
        Expr::Neg(a) | Expr::Call(_, a) => check_constants(a, owner),
        Expr::Bin(_, a, b) => {
            check_constants(a, owner)?;
            check_constants(b, owner)
        }
    }
}

fn topo_order(templates: &[RvTemplate]) -> Result<Vec<TemplateId>> {
    let n = templates.len();
    let mut indeg: Vec<usize> = templates.iter().map(|t| t.parents.len()).collect();
    let mut done = vec![false; n];
    let mut order = Vec::with_capacity(n);
    while order.len() < n {
        let Some(next) = (0..n).find(|&i| !done[i] && indeg[i] == 0) else {
            let cyc: Vec<&str> = (0..n)
                .filter(|&i| !done[i])
                .map(|i| templates[i].name.as_str())
                .collect();
            return Err(Error::validation(format!(
                "cyclic parent references among {}",
                cyc.join(", ")
            )));
        };
        done[next] = true;
        order.push(TemplateId(next));
        for (i, t) in templates.iter().enumerate() {
            if t.parents.contains(&TemplateId(next)) {
                indeg[i] -= 1;
            }
        }
    }
    Ok(order)
}

impl fmt::Display for TemplateGraph {
    /// The normalized model-file form.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for p in &self.plates {
            writeln!(
                f,
                "plate {} card={} reduced={}",
                p.name, p.card, p.reduced_card
            )?;
        }
        for t in &self.templates {
            let plates: Vec<&str> = t
                .plates
                .iter()
                .map(|p| self.plates[p.0].name.as_str())
                .collect();
            writeln!(
                f,
                "{} {} dim={} plates=({}) ~ {}({}, {})",
                if t.observed { "observed" } else { "latent" },
                t.name,
                t.dim,
                plates.join(", "),
                t.kind.name(),
                t.loc,
                t.scale
            )?;
        }
        Ok(())
    }
}
