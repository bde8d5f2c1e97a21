//! Dense layers and the conditioner network shared by every flow block.

use std::sync::Arc;

use rand::Rng;

use crate::diff::{Array, Bound, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    Zero,
    /// Uniform on `±sqrt(6 / (in + out))`.
    Glorot,
}

/// `x · (W ⊙ mask) + b`. With `per_row = Some(n)` the layer holds `n`
/// independent weight sets and each input row selects one.
#[derive(Clone, Debug)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    inp: usize,
    out: usize,
    mask: Option<Arc<Array>>,
    per_row: Option<usize>,
}

impl Dense {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        inp: usize,
        out: usize,
        init: Init,
        mask: Option<Array>,
        per_row: Option<usize>,
        rng: &mut R,
    ) -> Self {
        let limit = (6.0 / (inp + out).max(1) as f64).sqrt();
        let mut draw = |n: usize| -> Vec<f64> {
            match init {
                Init::Zero => vec![0.0; n],
                Init::Glorot => (0..n).map(|_| rng.random_range(-limit..limit)).collect(),
            }
        };
        let mask = mask.map(|m| {
            assert_eq!(m.shape(), [inp, out], "mask shape");
            Arc::new(m)
        });
        let (w, b) = match per_row {
            None => (
                Array::new(vec![inp, out], draw(inp * out)).expect("shape"),
                Array::zeros(&[out]),
            ),
            Some(n) => (
                Array::new(vec![n, inp * out], draw(n * inp * out)).expect("shape"),
                Array::zeros(&[n, out]),
            ),
        };
        let sparse = per_row.is_some();
        Dense {
            w: store.add(format!("{name}.w"), w, sparse),
            b: store.add(format!("{name}.b"), b, sparse),
            inp,
            out,
            mask,
            per_row,
        }
    }

    pub fn inp(&self) -> usize {
        self.inp
    }

    pub fn out(&self) -> usize {
        self.out
    }

    /// `rows` selects, per input row, which weight set to use; required
    /// exactly when the layer is per-row.
    pub fn forward(
        &self,
        tape: &Tape,
        bound: &Bound,
        x: Var,
        rows: Option<&[usize]>,
    ) -> Result<Var> {
        let w = bound.var(self.w);
        let b = bound.var(self.b);
        match (self.per_row, rows) {
            (None, _) => {
                let w = match &self.mask {
                    Some(m) => tape.mul(w, tape.constant((**m).clone()))?,
                    None => w,
                };
                let y = tape.matmul(x, w)?;
                tape.add(y, b)
            }
            (Some(_), Some(rows)) if self.inp == 0 => tape.gather_rows(b, rows),
            (Some(_), Some(rows)) => {
                let mut wr = tape.gather_rows(w, rows)?;
                if let Some(m) = &self.mask {
                    let flat = (**m).clone().reshape(vec![self.inp * self.out])?;
                    wr = tape.mul(wr, tape.constant(flat))?;
                }
                let y = tape.rowwise_matvec(x, wr)?;
                let br = tape.gather_rows(b, rows)?;
                tape.add(y, br)
            }
            (Some(_), None) => Err(Error::contract("per-row layer evaluated without row ids")),
        }
    }
}

/// A tanh MLP with a linear skip from input to output. The output layer and
/// the skip start at zero so the network initially outputs exactly zero.
#[derive(Clone, Debug)]
pub struct Conditioner {
    hidden: Vec<Dense>,
    last: Dense,
    skip: Option<Dense>,
    inp: usize,
    out: usize,
}

/// Connectivity masks for an autoregressive conditioner.
#[derive(Clone, Debug)]
pub struct Masks {
    pub hidden: Vec<Array>,
    pub last: Array,
    pub skip: Array,
}

impl Conditioner {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        inp: usize,
        hidden: &[usize],
        out: usize,
        masks: Option<Masks>,
        per_row: Option<usize>,
        rng: &mut R,
    ) -> Self {
        let (mut hmasks, last_mask, skip_mask) = match masks {
            Some(m) => (
                m.hidden.into_iter().map(Some).collect(),
                Some(m.last),
                Some(m.skip),
            ),
            None => (vec![None; hidden.len()], None, None),
        };
        let mut layers = Vec::new();
        let mut width = inp;
        for (l, &h) in hidden.iter().enumerate() {
            let mask = std::mem::take(&mut hmasks[l]);
            layers.push(Dense::new(
                store,
                &format!("{name}.h{l}"),
                width,
                h,
                Init::Glorot,
                mask,
                per_row,
                rng,
            ));
            width = h;
        }
        let last = Dense::new(
            store,
            &format!("{name}.out"),
            width,
            out,
            Init::Zero,
            last_mask,
            per_row,
            rng,
        );
        let skip = (!hidden.is_empty() && inp > 0).then(|| {
            Dense::new(
                store,
                &format!("{name}.skip"),
                inp,
                out,
                Init::Zero,
                skip_mask,
                per_row,
                rng,
            )
        });
        Conditioner {
            hidden: layers,
            last,
            skip,
            inp,
            out,
        }
    }

    pub fn inp(&self) -> usize {
        self.inp
    }

    pub fn out(&self) -> usize {
        self.out
    }

    pub fn forward(
        &self,
        tape: &Tape,
        bound: &Bound,
        x: Var,
        rows: Option<&[usize]>,
    ) -> Result<Var> {
        let shape = tape.shape(x);
        if shape.len() != 2 || shape[1] != self.inp {
            return Err(Error::contract(format!(
                "conditioner expects [rows, {}] input, got {:?}",
                self.inp, shape
            )));
        }
        let mut h = x;
        for layer in &self.hidden {
            h = tape.tanh(layer.forward(tape, bound, h, rows)?);
        }
        let mut y = self.last.forward(tape, bound, h, rows)?;
        if let Some(skip) = &self.skip {
            y = tape.add(y, skip.forward(tape, bound, x, rows)?)?;
        }
        // Zero-width input with no hidden layers: broadcast the bias over rows.
        if tape.shape(y)[0] != shape[0] {
            y = tape.broadcast_to(y, &[shape[0], self.out])?;
        }
        Ok(y)
    }
}

/// A plain tanh MLP, randomly initialized, linear output.
#[derive(Clone, Debug)]
pub struct Mlp {
    layers: Vec<Dense>,
}

impl Mlp {
    /// `widths` lists input, hidden and output widths.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        widths: &[usize],
        rng: &mut R,
    ) -> Self {
        assert!(widths.len() >= 2, "an MLP needs input and output widths");
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(l, w)| {
                Dense::new(
                    store,
                    &format!("{name}.l{l}"),
                    w[0],
                    w[1],
                    Init::Glorot,
                    None,
                    None,
                    rng,
                )
            })
            .collect();
        Mlp { layers }
    }

    pub fn out(&self) -> usize {
        self.layers.last().expect("non-empty").out()
    }

    pub fn forward(&self, tape: &Tape, bound: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        for (l, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, bound, h, None)?;
            if l + 1 < self.layers.len() {
                h = tape.tanh(h);
            }
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_initialized_output() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = Conditioner::new(&mut store, "c", 3, &[8], 4, None, None, &mut rng);
        let t = Tape::new();
        let b = store.bind(&t);
        let x = t.constant(Array::full(&[5, 3], 0.7));
        let y = c.forward(&t, &b, x, None).unwrap();
        assert_eq!(t.shape(y), vec![5, 4]);
        assert!(t.value(y).data().iter().all(|&v| v == 0.0));
        assert!(c
            .forward(&t, &b, t.constant(Array::zeros(&[5, 2])), None)
            .is_err());
    }

    #[test]
    fn per_row_layers_select_weights() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = Dense::new(&mut store, "d", 2, 1, Init::Zero, None, Some(3), &mut rng);
        store.set_value(
            d.w,
            Array::matrix(3, 2, vec![1.0, 0.0, 0.0, 1.0, 2.0, 2.0]).unwrap(),
        );
        let t = Tape::new();
        let b = store.bind(&t);
        let x = t.constant(Array::matrix(2, 2, vec![3.0, 4.0, 3.0, 4.0]).unwrap());
        let y = d.forward(&t, &b, x, Some(&[1, 2])).unwrap();
        assert_eq!(t.value(y).data(), &[4.0, 14.0]);
        let g = t.backward(t.sum(y)).unwrap();
        assert_eq!(g.wrt(b.var(d.w)).row(0), &[0.0, 0.0]);
        assert!(d.forward(&t, &b, x, None).is_err());
    }

    #[test]
    fn zero_width_input_uses_bias() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = Conditioner::new(&mut store, "c", 0, &[4], 2, None, None, &mut rng);
        store.set_value(c.last.b, Array::vector(vec![1.0, 2.0]));
        let t = Tape::new();
        let b = store.bind(&t);
        let x = t.constant(Array::zeros(&[3, 0]));
        let y = c.forward(&t, &b, x, None).unwrap();
        assert_eq!(t.value(y).data(), &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
    }
}
