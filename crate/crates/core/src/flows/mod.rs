//! Conditional normalizing flows in the sampling direction `u -> θ`.
//!
//! Every block is the identity map at initialization: conditioner output
//! layers start at zero and scales are `softplus(raw + ln(e - 1))`.

mod affine;
pub mod checkpoint;
mod made;
pub mod nn;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use affine::AffineBlock;
pub use made::{made_masks, MadeLayer};

use crate::diff::{Bound, ParamStore, Tape, Var};
use crate::dist::DistSpec;
use crate::error::{Error, Result};

/// `ln(e - 1)`, the softplus pre-image of one.
pub const SOFTPLUS_INV_ONE: f64 = 0.541_324_854_612_918_1;

pub(crate) fn raw_to_scale(tape: &Tape, raw: Var) -> Var {
    tape.softplus(tape.offset(raw, SOFTPLUS_INV_ONE))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlowKind {
    /// A single conditional affine block.
    Affine,
    /// A conditional affine block followed by masked autoregressive layers
    /// with alternating orderings.
    Maf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scaling {
    Diagonal,
    Triangular,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub kind: FlowKind,
    pub scaling: Scaling,
    pub hidden: Vec<usize>,
    /// Number of autoregressive layers for [`FlowKind::Maf`].
    pub maf_layers: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            kind: FlowKind::Maf,
            scaling: Scaling::Triangular,
            hidden: vec![32, 32],
            maf_layers: 2,
        }
    }
}

impl FlowConfig {
    pub fn affine(hidden: Vec<usize>) -> Self {
        FlowConfig {
            kind: FlowKind::Affine,
            scaling: Scaling::Triangular,
            hidden,
            maf_layers: 0,
        }
    }
}

#[derive(Clone, Debug)]
enum Block {
    Affine(AffineBlock),
    Made(MadeLayer),
}

/// A stack of conditional blocks; the log-determinant of the composition is
/// the sum of the blocks'.
#[derive(Clone, Debug)]
pub struct Flow {
    dim: usize,
    ctx_dim: usize,
    blocks: Vec<Block>,
}

impl Flow {
    /// Registers the flow's weights in `store` under `name`. With
    /// `per_row = Some(n)` every weight is replicated `n` times and rows pick
    /// their own copy.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        ctx_dim: usize,
        cfg: &FlowConfig,
        per_row: Option<usize>,
        rng: &mut R,
    ) -> Self {
        let mut blocks = vec![Block::Affine(AffineBlock::new(
            store,
            &format!("{name}.affine"),
            dim,
            ctx_dim,
            &cfg.hidden,
            cfg.scaling,
            per_row,
            rng,
        ))];
        if cfg.kind == FlowKind::Maf {
            for l in 0..cfg.maf_layers {
                blocks.push(Block::Made(MadeLayer::new(
                    store,
                    &format!("{name}.made{l}"),
                    dim,
                    ctx_dim,
                    &cfg.hidden,
                    l % 2 == 1,
                    per_row,
                    rng,
                )));
            }
        }
        Flow {
            dim,
            ctx_dim,
            blocks,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ctx_dim(&self) -> usize {
        self.ctx_dim
    }

    /// Pushes `u: [R, D]` through the flow given `ctx: [R, C]`; returns
    /// `θ: [R, D]` and `log|det ∂θ/∂u|: [R]`.
    pub fn forward(
        &self,
        tape: &Tape,
        bound: &Bound,
        u: Var,
        ctx: Var,
        rows: Option<&[usize]>,
    ) -> Result<(Var, Var)> {
        let us = tape.shape(u);
        let cs = tape.shape(ctx);
        if us.len() != 2 || us[1] != self.dim {
            return Err(Error::contract(format!(
                "flow expects [rows, {}] samples, got {us:?}",
                self.dim
            )));
        }
        if cs.len() != 2 || cs[1] != self.ctx_dim || cs[0] != us[0] {
            return Err(Error::contract(format!(
                "flow context must be [{}, {}], got {cs:?}",
                us[0], self.ctx_dim
            )));
        }
        let mut x = u;
        let mut logdet = None;
        for b in &self.blocks {
            let (y, ld) = match b {
                Block::Affine(a) => a.forward(tape, bound, x, ctx, rows)?,
                Block::Made(m) => m.forward(tape, bound, x, ctx, rows)?,
            };
            x = y;
            logdet = Some(match logdet {
                None => ld,
                Some(acc) => tape.add(acc, ld)?,
            });
        }
        Ok((x, logdet.expect("at least one block")))
    }

    /// Autoregressive degree orderings of the masked layers, in order.
    pub fn orderings(&self) -> Vec<Vec<usize>> {
        self.blocks
            .iter()
            .filter_map(|b| match b {
                Block::Made(m) => Some(m.degrees().to_vec()),
                Block::Affine(_) => None,
            })
            .collect()
    }
}

/// `log q(θ) = log p_base(u) - log|det ∂θ/∂u|`, per row.
pub fn logq_of_sample(tape: &Tape, base: &DistSpec, u: Var, logdet: Var) -> Result<Var> {
    let lp = base.log_prob_unconstrained(tape, u)?;
    tape.sub(lp, logdet)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::check::{log_abs_det, numeric_jacobian};
    use crate::diff::Array;
    use crate::dist::DistKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randomize(store: &mut ParamStore, rng: &mut ChaCha8Rng, sd: f64) {
        for id in store.ids().collect::<Vec<_>>() {
            let mut v = store.value(id).clone();
            v.data_mut()
                .iter_mut()
                .for_each(|x| *x = rng.random_range(-sd..sd));
            store.set_value(id, v);
        }
    }

    fn eval(flow: &Flow, store: &ParamStore, u: &[f64], ctx: &[f64]) -> (Vec<f64>, f64) {
        let t = Tape::untracked();
        let b = store.bind(&t);
        let uv = t.constant(Array::matrix(1, u.len(), u.to_vec()).unwrap());
        let cv = t.constant(Array::matrix(1, ctx.len(), ctx.to_vec()).unwrap());
        let (y, ld) = flow.forward(&t, &b, uv, cv, None).unwrap();
        (t.value(y).into_data(), t.item(ld))
    }

    #[test]
    fn identity_at_init() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for cfg in [FlowConfig::default(), FlowConfig::affine(vec![8])] {
            let mut store = ParamStore::new();
            let flow = Flow::new(&mut store, "f", 3, 2, &cfg, None, &mut rng);
            let (y, ld) = eval(&flow, &store, &[0.3, -1.0, 2.0], &[5.0, -5.0]);
            for (a, b) in y.iter().zip([0.3, -1.0, 2.0]) {
                assert!((a - b).abs() < 1e-15);
            }
            assert!(ld.abs() < 1e-15);
        }
    }

    #[test]
    fn diagonal_affine_logdet() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let cfg = FlowConfig {
            kind: FlowKind::Affine,
            scaling: Scaling::Diagonal,
            hidden: vec![],
            maf_layers: 0,
        };
        let flow = Flow::new(&mut store, "f", 2, 1, &cfg, None, &mut rng);
        let bias = store.find("f.affine.out.b").unwrap();
        let raw = |s: f64| (s.exp_m1()).ln() - SOFTPLUS_INV_ONE;
        store.set_value(bias, Array::vector(vec![0.0, 0.0, raw(2.0), raw(0.5)]));
        let (y, ld) = eval(&flow, &store, &[1.0, 1.0], &[0.0]);
        assert!((y[0] - 2.0).abs() < 1e-12 && (y[1] - 0.5).abs() < 1e-12);
        assert!((ld - (2f64.ln() + 0.5f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn logdet_matches_numeric_jacobian() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for d in 1..=3 {
            for cfg in [FlowConfig::default(), FlowConfig::affine(vec![6])] {
                let mut store = ParamStore::new();
                let flow = Flow::new(&mut store, "f", d, 2, &cfg, None, &mut rng);
                randomize(&mut store, &mut rng, 0.5);
                let u: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
                let ctx = [0.4, -0.9];
                let (_, ld) = eval(&flow, &store, &u, &ctx);
                let jac = numeric_jacobian(|x| eval(&flow, &store, x, &ctx).0, &u, 1e-5);
                assert!((ld - log_abs_det(&jac)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn autoregressive_masking() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let cfg = FlowConfig {
            kind: FlowKind::Maf,
            scaling: Scaling::Diagonal,
            hidden: vec![8, 8],
            maf_layers: 1,
        };
        let flow = Flow::new(&mut store, "f", 4, 1, &cfg, None, &mut rng);
        randomize(&mut store, &mut rng, 0.7);
        assert_eq!(flow.orderings(), vec![vec![1, 2, 3, 4]]);
        for _ in 0..100 {
            let u: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
            let (base, _) = eval(&flow, &store, &u, &[1.0]);
            let k = rng.random_range(0..4);
            let mut v = u.clone();
            v[k] += rng.random_range(-1.0..1.0);
            let (y, _) = eval(&flow, &store, &v, &[1.0]);
            for j in 0..k {
                assert_eq!(y[j], base[j], "θ_{j} moved when u_{k} changed");
            }
        }
    }

    #[test]
    fn context_width_is_checked() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let flow = Flow::new(
            &mut store,
            "f",
            2,
            3,
            &FlowConfig::default(),
            None,
            &mut rng,
        );
        let t = Tape::untracked();
        let b = store.bind(&t);
        let u = t.constant(Array::zeros(&[1, 2]));
        let c = t.constant(Array::zeros(&[1, 2]));
        assert!(matches!(
            flow.forward(&t, &b, u, c, None),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn logq_by_change_of_variables() {
        let t = Tape::untracked();
        let base = DistSpec::new(&t, DistKind::Normal, t.scalar(0.0), t.scalar(1.0)).unwrap();
        let u = t.constant(Array::zeros(&[1, 1]));
        let ld = t.constant(Array::vector(vec![2f64.ln()]));
        let lq = logq_of_sample(&t, &base, u, ld).unwrap();
        assert!((t.item(lq) - (-0.918_938_533_204_672_7 - 2f64.ln())).abs() < 1e-12);
    }
}
