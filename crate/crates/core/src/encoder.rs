//! Permutation-invariant set encoders producing plate-level encodings from
//! observed data.
//!
//! Stages run from the observed template's plates down to the smallest
//! latent plate level. Each stage maps elements through `ρ`, mean-pools over
//! the plates it contracts and maps the pooled vectors through `g`; its
//! output both serves as that level's encoding and feeds the next stage.

use rand::Rng;

use crate::diff::{Array, Bound, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::flows::nn::Mlp;
use crate::model::{BatchLayout, PlateId, TemplateGraph, TemplateId};

#[derive(Clone, Debug)]
pub struct SetPoolEncoder {
    /// `None` is the identity map.
    rho: Option<Mlp>,
    g: Option<Mlp>,
    from: Vec<PlateId>,
    to: Vec<PlateId>,
    out: usize,
}

impl SetPoolEncoder {
    pub fn from_plates(&self) -> &[PlateId] {
        &self.from
    }

    pub fn to_plates(&self) -> &[PlateId] {
        &self.to
    }

    pub fn out_dim(&self) -> usize {
        self.out
    }

    /// `x: [rows over from-plates, in]` to `[rows over to-plates, out]`.
    pub fn forward(&self, tape: &Tape, bound: &Bound, layout: &BatchLayout, x: Var) -> Result<Var> {
        let h = match &self.rho {
            Some(m) => m.forward(tape, bound, x)?,
            None => x,
        };
        let seg = layout.project(&self.from, &self.to);
        let groups: usize = self.to.iter().map(|p| layout.plate_sizes()[p.0]).product();
        let pooled = mean_pool(tape, h, &seg, groups)?;
        match &self.g {
            Some(m) => m.forward(tape, bound, pooled),
            None => Ok(pooled),
        }
    }
}

/// Mean of the rows of `x` sharing a segment id.
pub fn mean_pool(tape: &Tape, x: Var, seg: &[usize], groups: usize) -> Result<Var> {
    let sums = tape.scatter_add_rows(x, seg, groups)?;
    let mut counts = vec![0.0; groups];
    for &s in seg {
        counts[s] += 1.0;
    }
    if let Some(empty) = counts.iter().position(|&c| c == 0.0) {
        return Err(Error::contract(format!("pooling group {empty} is empty")));
    }
    let inv = Array::new(vec![groups, 1], counts.iter().map(|c| 1.0 / c).collect())?;
    tape.mul(sums, tape.constant(inv))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub encoding_dim: usize,
    /// Hidden widths of every `ρ` and `g`.
    pub hidden: Vec<usize>,
    /// `ρ = g = identity`; encodings are plain means of the observations.
    pub identity: bool,
}

/// The chain of stages for a model with one observed template.
#[derive(Clone, Debug)]
pub struct EncoderStack {
    observed: TemplateId,
    stages: Vec<SetPoolEncoder>,
}

impl EncoderStack {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        graph: &TemplateGraph,
        cfg: &EncoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let observed = graph.observed_ids();
        let &[obs] = observed.as_slice() else {
            return Err(Error::config(format!(
                "the set encoder needs exactly one observed template, found {}",
                observed.len()
            )));
        };
        let mut levels = graph.latent_plate_levels();
        levels.sort_by_key(|l| std::cmp::Reverse(l.len()));
        let mut from = graph.template(obs).plates.clone();
        let mut width = graph.template(obs).dim;
        let mut stages = Vec::new();
        for (k, level) in levels.iter().enumerate() {
            if !level.iter().all(|p| from.contains(p)) {
                let names = |ps: &[PlateId]| {
                    ps.iter()
                        .map(|p| graph.plate(*p).name.clone())
                        .collect::<Vec<_>>()
                        .join(",")
                };
                return Err(Error::config(format!(
                    "plate levels ({}) and ({}) do not nest; only chain-shaped level graphs are encodable",
                    names(&from),
                    names(level)
                )));
            }
            let (rho, g, out) = if cfg.identity {
                (None, None, width)
            } else {
                let mut rw = vec![width];
                rw.extend(&cfg.hidden);
                let rho = Mlp::new(store, &format!("encoder.s{k}.rho"), &rw, rng);
                let mut gw = vec![rho.out()];
                gw.extend(&cfg.hidden);
                gw.push(cfg.encoding_dim);
                let g = Mlp::new(store, &format!("encoder.s{k}.g"), &gw, rng);
                (Some(rho), Some(g), cfg.encoding_dim)
            };
            stages.push(SetPoolEncoder {
                rho,
                g,
                from: from.clone(),
                to: level.clone(),
                out,
            });
            from = level.clone();
            width = out;
        }
        Ok(EncoderStack {
            observed: obs,
            stages,
        })
    }

    pub fn stages(&self) -> &[SetPoolEncoder] {
        &self.stages
    }

    pub fn observed(&self) -> TemplateId {
        self.observed
    }

    /// Encodings for each latent plate level, keyed by the level's plates.
    /// `x` is the observed slice `[rows, D]` laid out by `layout`.
    pub fn encode(
        &self,
        tape: &Tape,
        bound: &Bound,
        layout: &BatchLayout,
        x: Var,
    ) -> Result<Vec<(Vec<PlateId>, Var)>> {
        let rows = layout.rows(self.observed);
        let shape = tape.shape(x);
        if shape.len() != 2 || shape[0] != rows {
            return Err(Error::contract(format!(
                "encoder input must be [{rows}, D] rows laid out over the observed plates, got {shape:?}"
            )));
        }
        let mut cur = x;
        let mut out = Vec::with_capacity(self.stages.len());
        for s in &self.stages {
            cur = s.forward(tape, bound, layout, cur)?;
            out.push((s.to.clone(), cur));
        }
        Ok(out)
    }
}

/// Distances between the first-stage encodings of two sets of elements
/// drawn for a single pooled group.
#[derive(Clone, Debug, PartialEq)]
pub struct SetSizeReport {
    pub small_size: usize,
    pub big_size: usize,
    pub small_encoding: Vec<f64>,
    pub big_encoding: Vec<f64>,
    pub distance: f64,
}

/// Encodes `small` and `big` (`[n, D]` elements of one group) with the
/// first stage of `stack` and reports their Euclidean distance.
pub fn set_size_generalization_check(
    stack: &EncoderStack,
    store: &ParamStore,
    graph: &TemplateGraph,
    small: &Array,
    big: &Array,
) -> Result<SetSizeReport> {
    let stage = stack
        .stages
        .first()
        .ok_or_else(|| Error::contract("encoder has no stages"))?;
    let encode = |x: &Array| -> Result<Vec<f64>> {
        let contracted: Vec<PlateId> = stage
            .from
            .iter()
            .copied()
            .filter(|p| !stage.to.contains(p))
            .collect();
        let mut cards = vec![1; graph.plates().len()];
        if let Some(first) = contracted.first() {
            cards[first.0] = x.rows();
        } else if x.rows() != 1 {
            return Err(Error::contract(
                "first stage pools nothing; sets must be singletons",
            ));
        }
        let batch = crate::model::PlateBatch::new(
            &cards,
            cards.iter().map(|&c| (0..c).collect()).collect(),
        )?;
        let layout = BatchLayout::new(graph, &cards, &batch)?;
        let tape = Tape::untracked();
        let bound = store.bind(&tape);
        let v = stage.forward(&tape, &bound, &layout, tape.constant(x.clone()))?;
        Ok(tape.value(v).into_data())
    };
    let a = encode(small)?;
    let b = encode(big)?;
    let distance = a
        .iter()
        .zip(&b)
        .map(|(p, q)| (p - q) * (p - q))
        .sum::<f64>()
        .sqrt();
    Ok(SetSizeReport {
        small_size: small.rows(),
        big_size: big.rows(),
        small_encoding: a,
        big_encoding: b,
        distance,
    })
}
