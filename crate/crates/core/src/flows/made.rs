use rand::Rng;

use super::nn::{Conditioner, Masks};
use super::raw_to_scale;
use crate::diff::{Array, Bound, ParamStore, Tape, Var};
use crate::error::Result;

/// One masked autoregressive affine layer in the sampling direction:
/// `θ_k = shift_k(u_<k, c) + scale_k(u_<k, c) · u_k`, where `<` follows the
/// layer's degree ordering.
#[derive(Clone, Debug)]
pub struct MadeLayer {
    dim: usize,
    degrees: Vec<usize>,
    cond: Conditioner,
}

/// Masks for a conditioner reading `[u (dim), ctx (ctx_dim)]`.
///
/// Input coordinate `k` has degree `degrees[k]` in `1..=dim`; context units
/// have degree 0. Hidden unit `h` gets degree `h mod dim`, so degree-0 units
/// see only the context. Connections: input→hidden when `d_in <= m`,
/// hidden→hidden when `m_prev <= m`, hidden→output and skip when strictly
/// below the output's degree.
pub fn made_masks(degrees: &[usize], ctx_dim: usize, hidden: &[usize]) -> Masks {
    let dim = degrees.len();
    let in_deg: Vec<usize> = degrees
        .iter()
        .copied()
        .chain(std::iter::repeat_n(0, ctx_dim))
        .collect();
    let out_deg: Vec<usize> = degrees.iter().chain(degrees).copied().collect();
    let mask = |from: &[usize], to: &[usize], strict: bool| {
        let mut m = Array::zeros(&[from.len(), to.len()]);
        for (i, &a) in from.iter().enumerate() {
            for (j, &b) in to.iter().enumerate() {
                if (strict && a < b) || (!strict && a <= b) {
                    m.data_mut()[i * to.len() + j] = 1.0;
                }
            }
        }
        m
    };
    let mut hidden_masks = Vec::new();
    let mut prev = in_deg.clone();
    for &h in hidden {
        let deg: Vec<usize> = (0..h).map(|u| u % dim).collect();
        hidden_masks.push(mask(&prev, &deg, false));
        prev = deg;
    }
    Masks {
        hidden: hidden_masks,
        last: mask(&prev, &out_deg, true),
        skip: mask(&in_deg, &out_deg, true),
    }
}

impl MadeLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        ctx_dim: usize,
        hidden: &[usize],
        reversed: bool,
        per_row: Option<usize>,
        rng: &mut R,
    ) -> Self {
        let degrees: Vec<usize> = if reversed {
            (0..dim).map(|k| dim - k).collect()
        } else {
            (0..dim).map(|k| k + 1).collect()
        };
        let masks = made_masks(&degrees, ctx_dim, hidden);
        MadeLayer {
            dim,
            degrees,
            cond: Conditioner::new(
                store,
                name,
                dim + ctx_dim,
                hidden,
                2 * dim,
                Some(masks),
                per_row,
                rng,
            ),
        }
    }

    /// Degree of each coordinate; `θ_k` depends on `u_j` only when
    /// `degrees[j] <= degrees[k]`.
    pub fn degrees(&self) -> &[usize] {
        &self.degrees
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
        let inp = tape.concat(&[u, ctx], 1)?;
        let params = self.cond.forward(tape, bound, inp, rows)?;
        let shift = tape.narrow_last(params, 0, d)?;
        let raw = tape.narrow_last(params, d, 2 * d)?;
        let scale = raw_to_scale(tape, raw);
        let out = tape.add(shift, tape.mul(scale, u)?)?;
        let logdet = tape.sum_axis(tape.log(scale)?, 1)?;
        Ok((out, logdet))
    }
}
