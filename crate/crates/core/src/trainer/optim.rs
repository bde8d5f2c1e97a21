use crate::diff::{Array, ParamStore};

/// Adam with lazy updates for row-sparse parameters: a row's moments and
/// step counter only advance on steps where its gradient is non-zero.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Multiplicative learning-rate decay per step (1 disables it).
    pub decay: f64,
    steps: u64,
    state: Vec<Moments>,
}

#[derive(Clone, Debug)]
struct Moments {
    m: Array,
    v: Array,
    /// One counter per row for sparse parameters, one overall otherwise.
    t: Vec<u64>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay: 1.0,
            steps: 0,
            state: Vec::new(),
        }
    }

    pub fn with_decay(mut self, decay: f64) -> Self {
        self.decay = decay;
        self
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn current_lr(&self) -> f64 {
        self.lr * self.decay.powf(self.steps as f64)
    }

    /// Applies one update from the gradients stored in `store`.
    pub fn step(&mut self, store: &mut ParamStore) {
        if self.state.is_empty() {
            self.state = store
                .iter()
                .map(|(_, p)| Moments {
                    m: Array::zeros(p.value.shape()),
                    v: Array::zeros(p.value.shape()),
                    t: vec![0; if p.row_sparse { p.value.rows() } else { 1 }],
                })
                .collect();
        }
        let lr = self.current_lr();
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for (k, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let p = store.get_mut(id);
            let st = &mut self.state[k];
            if p.row_sparse {
                let width = p.value.row_len();
                if width == 0 {
                    continue;
                }
                for r in 0..p.value.rows() {
                    let g = &p.grad.data()[r * width..(r + 1) * width];
                    if g.iter().all(|&x| x == 0.0) {
                        continue;
                    }
                    st.t[r] += 1;
                    update(
                        &mut p.value.data_mut()[r * width..(r + 1) * width],
                        g,
                        &mut st.m.data_mut()[r * width..(r + 1) * width],
                        &mut st.v.data_mut()[r * width..(r + 1) * width],
                        st.t[r],
                        lr,
                        b1,
                        b2,
                        eps,
                    );
                }
            } else {
                st.t[0] += 1;
                update(
                    p.value.data_mut(),
                    p.grad.data(),
                    st.m.data_mut(),
                    st.v.data_mut(),
                    st.t[0],
                    lr,
                    b1,
                    b2,
                    eps,
                );
            }
        }
        self.steps += 1;
    }
}

/// Gradient *ascent* is the caller's business: `grad` is the gradient of
/// the loss being minimized.
#[allow(clippy::too_many_arguments)]
fn update(
    value: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    lr: f64,
    b1: f64,
    b2: f64,
    eps: f64,
) {
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    for i in 0..value.len() {
        let g = grad[i];
        m[i] = b1 * m[i] + (1.0 - b1) * g;
        v[i] = b2 * v[i] + (1.0 - b2) * g * g;
        let mh = m[i] / c1;
        let vh = v[i] / c2;
        value[i] -= lr * mh / (vh.sqrt() + eps);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store.add("w", Array::vector(vec![1.0, -1.0]), false);
        store.get_mut(id).grad = Array::vector(vec![3.0, -0.5]);
        let mut adam = Adam::new(0.1);
        adam.step(&mut store);
        let v = store.value(id).data().to_vec();
        assert!(
            (v[0] - 0.9).abs() < 1e-7 && (v[1] + 0.9).abs() < 1e-7,
            "{v:?}"
        );
    }

    #[test]
    fn minimizes_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("w", Array::vector(vec![5.0]), false);
        let mut adam = Adam::new(0.1);
        for _ in 0..2000 {
            let w = store.value(id).item();
            store.get_mut(id).grad = Array::vector(vec![2.0 * (w - 2.0)]);
            adam.step(&mut store);
        }
        assert!((store.value(id).item() - 2.0).abs() < 1e-3);
    }

    #[test]
    fn sparse_rows_untouched_without_gradient() {
        let mut store = ParamStore::new();
        let id = store.add("e", Array::zeros(&[3, 2]), true);
        store.get_mut(id).grad = Array::matrix(3, 2, vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0]).unwrap();
        let mut adam = Adam::new(0.5);
        adam.step(&mut store);
        let v = store.value(id);
        assert_eq!(v.row(0), &[0.0, 0.0]);
        assert_eq!(v.row(2), &[0.0, 0.0]);
        assert!(v.row(1)[0] < 0.0);
        // a second step moving only row 0 leaves row 1 where it was
        let before = v.row(1).to_vec();
        store.get_mut(id).grad = Array::matrix(3, 2, vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        adam.step(&mut store);
        assert_eq!(store.value(id).row(1), before.as_slice());
        assert!((store.value(id).row(0)[0] + 0.5).abs() < 1e-6);
    }

    #[test]
    fn zero_lr_is_a_no_op() {
        let mut store = ParamStore::new();
        let id = store.add("w", Array::vector(vec![1.5]), false);
        store.get_mut(id).grad = Array::vector(vec![1.0]);
        let mut adam = Adam::new(0.0);
        adam.step(&mut store);
        assert_eq!(store.value(id).item(), 1.5);
    }
}
