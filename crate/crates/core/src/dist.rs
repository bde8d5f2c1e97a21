//! Reparameterizable Normal and LogNormal distributions on the tape.
//!
//! A `LogNormal(loc, scale)` value `x` is `exp(z)` with `z ~ Normal(loc,
//! scale)`; its density carries the `-sum(log x)` change-of-variables term.

use serde::{Deserialize, Serialize};

use crate::diff::{Tape, Var};
use crate::error::{Error, Result};

/// `ln(2π)`.
pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DistKind {
    Normal,
    LogNormal,
}

impl DistKind {
    pub fn name(self) -> &'static str {
        match self {
            DistKind::Normal => "Normal",
            DistKind::LogNormal => "LogNormal",
        }
    }

    /// Maps a natural-space value to the unconstrained (Normal) space.
    pub fn to_unconstrained(self, tape: &Tape, value: Var) -> Result<Var> {
        match self {
            DistKind::Normal => Ok(value),
            DistKind::LogNormal => tape
                .log(value)
                .map_err(|_| Error::domain("lognormal", "non-positive value")),
        }
    }

    pub fn to_natural(self, tape: &Tape, z: Var) -> Var {
        match self {
            DistKind::Normal => z,
            DistKind::LogNormal => tape.exp(z),
        }
    }
}

/// A distribution whose location and scale live on a tape. Event values
/// are the last axis of `[rows, D]` arrays; `loc`/`scale` broadcast
/// against them.
#[derive(Clone, Copy, Debug)]
pub struct DistSpec {
    pub kind: DistKind,
    pub loc: Var,
    pub scale: Var,
}

impl DistSpec {
    pub fn new(tape: &Tape, kind: DistKind, loc: Var, scale: Var) -> Result<Self> {
        let bad = tape.with_value(scale, |s| s.data().iter().copied().find(|&v| !(v > 0.0)));
        if let Some(v) = bad {
            return Err(Error::domain(
                "dist",
                format!("scale must be positive, got {v}"),
            ));
        }
        Ok(DistSpec { kind, loc, scale })
    }

    /// Log density of the underlying Normal at `z`, summed over the event
    /// axis (no change-of-variables term).
    pub fn base_log_prob(&self, tape: &Tape, z: Var) -> Result<Var> {
        let diff = tape.sub(z, self.loc)?;
        let std = tape.div(diff, self.scale)?;
        let quad = tape.scale(tape.square(std), -0.5);
        let log_scale = tape.log(self.scale)?;
        let per = tape.sub(quad, log_scale)?;
        let per = tape.offset(per, -0.5 * LN_2PI);
        sum_event(tape, per, z)
    }

    /// Exact log density of a natural-space value.
    pub fn log_prob(&self, tape: &Tape, value: Var) -> Result<Var> {
        match self.kind {
            DistKind::Normal => self.base_log_prob(tape, value),
            DistKind::LogNormal => {
                let bad = tape.with_value(value, |x| x.data().iter().any(|&v| !(v > 0.0)));
                if bad {
                    return Err(Error::domain(
                        "lognormal.log_prob",
                        "value must be strictly positive",
                    ));
                }
                let z = tape.log(value)?;
                self.log_prob_unconstrained(tape, z)
            }
        }
    }

    /// Log density of `kind.to_natural(z)` evaluated through `z`.
    pub fn log_prob_unconstrained(&self, tape: &Tape, z: Var) -> Result<Var> {
        let base = self.base_log_prob(tape, z)?;
        match self.kind {
            DistKind::Normal => Ok(base),
            DistKind::LogNormal => {
                let jac = sum_event(tape, z, z)?;
                tape.sub(base, jac)
            }
        }
    }

    /// `loc + scale * noise` in unconstrained space.
    pub fn rsample_unconstrained(&self, tape: &Tape, noise: Var) -> Result<Var> {
        let scaled = tape.mul(self.scale, noise)?;
        let out = tape.add(self.loc, scaled)?;
        if tape.shape(out) != tape.shape(noise) {
            return Err(Error::Shape {
                op: "rsample",
                lhs: tape.shape(out),
                rhs: tape.shape(noise),
            });
        }
        Ok(out)
    }

    pub fn rsample(&self, tape: &Tape, noise: Var) -> Result<Var> {
        let z = self.rsample_unconstrained(tape, noise)?;
        Ok(self.kind.to_natural(tape, z))
    }
}

fn sum_event(tape: &Tape, per: Var, like: Var) -> Result<Var> {
    let rank = tape.with_value(like, |a| a.rank());
    if rank == 0 {
        Ok(per)
    } else {
        tape.sum_axis(per, rank - 1)
    }
}
