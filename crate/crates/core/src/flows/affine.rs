use rand::Rng;

use super::nn::{Conditioner, Masks};
use super::{raw_to_scale, Scaling};
use crate::diff::{tril_len, Bound, ParamStore, Tape, Var};
use crate::error::Result;

/// `θ = shift(c) + (diag(scale(c)) + L(c)) u`, with `L` strictly lower
/// triangular under [`Scaling::Triangular`] and absent otherwise.
#[derive(Clone, Debug)]
pub struct AffineBlock {
    dim: usize,
    scaling: Scaling,
    cond: Conditioner,
}

impl AffineBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        ctx_dim: usize,
        hidden: &[usize],
        scaling: Scaling,
        per_row: Option<usize>,
        rng: &mut R,
    ) -> Self {
        let out = 2 * dim
            + match scaling {
                Scaling::Diagonal => 0,
                Scaling::Triangular => tril_len(dim),
            };
        AffineBlock {
            dim,
            scaling,
            cond: Conditioner::new(
                store,
                name,
                ctx_dim,
                hidden,
                out,
                None::<Masks>,
                per_row,
                rng,
            ),
        }
    }

    pub fn forward(
        &self,
        tape: &Tape,
        bound: &Bound,
        u: Var,
        ctx: Var,
        rows: Option<&[usize]>,
    ) -> Result<(Var, Var)> {
        let d = self.dim;
        let params = self.cond.forward(tape, bound, ctx, rows)?;
        let shift = tape.narrow_last(params, 0, d)?;
        let raw = tape.narrow_last(params, d, 2 * d)?;
        let scale = raw_to_scale(tape, raw);
        let mut out = tape.add(shift, tape.mul(scale, u)?)?;
        if self.scaling == Scaling::Triangular && d > 1 {
            let off = tape.narrow_last(params, 2 * d, 2 * d + tril_len(d))?;
            out = tape.add(out, tape.tril_matvec(off, u)?)?;
        }
        let logdet = tape.sum_axis(tape.log(scale)?, 1)?;
        Ok((out, logdet))
    }
}
