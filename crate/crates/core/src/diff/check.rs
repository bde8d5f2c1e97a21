//! Central finite differences for validating tape gradients.

/// Central-difference gradient of `f` at `x` with step `h`.
pub fn numeric_gradient(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `||a - b|| / max(||a||, ||b||)`, or the absolute norm when both are tiny.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Numeric Jacobian `J[i][j] = d out_i / d x_j`.
pub fn numeric_jacobian(mut f: impl FnMut(&[f64]) -> Vec<f64>, x: &[f64], h: f64) -> Vec<Vec<f64>> {
    let n_out = f(x).len();
    let mut jac = vec![vec![0.0; x.len()]; n_out];
    let mut probe = x.to_vec();
    for j in 0..x.len() {
        let orig = probe[j];
        probe[j] = orig + h;
        let up = f(&probe);
        probe[j] = orig - h;
        let down = f(&probe);
        probe[j] = orig;
        for i in 0..n_out {
            jac[i][j] = (up[i] - down[i]) / (2.0 * h);
        }
    }
    jac
}

/// Numeric Jacobian by Ridders' extrapolation: central differences over a
/// geometrically shrinking step starting at `h`, extrapolated in a Neville
/// tableau, keeping per column the estimate with the smallest error estimate.
pub fn richardson_jacobian(
    mut f: impl FnMut(&[f64]) -> Vec<f64>,
    x: &[f64],
    h: f64,
) -> Vec<Vec<f64>> {
    const SHRINK: f64 = 1.4;
    const ROUNDS: usize = 12;
    let rows = f(x).len();
    let mut jac = vec![vec![0.0; x.len()]; rows];
    let mut probe = x.to_vec();
    for col in 0..x.len() {
        let mut central = |step: f64| -> Vec<f64> {
            probe[col] = x[col] + step;
            let up = f(&probe);
            probe[col] = x[col] - step;
            let down = f(&probe);
            probe[col] = x[col];
            up.iter()
                .zip(&down)
                .map(|(u, d)| (u - d) / (2.0 * step))
                .collect()
        };
        let gap = |a: &[f64], b: &[f64]| {
            a.iter()
                .zip(b)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max)
        };
        let mut step = h;
        let mut prev: Vec<Vec<f64>> = vec![central(step)];
        let mut best = prev[0].clone();
        let mut best_err = f64::INFINITY;
        for _ in 1..ROUNDS {
            step /= SHRINK;
            let mut row = vec![central(step)];
            let mut factor = SHRINK * SHRINK;
            for k in 1..=prev.len() {
                let next: Vec<f64> = row[k - 1]
                    .iter()
                    .zip(&prev[k - 1])
                    .map(|(a, b)| (a * factor - b) / (factor - 1.0))
                    .collect();
                factor *= SHRINK * SHRINK;
                let err = gap(&next, &row[k - 1]).max(gap(&next, &prev[k - 1]));
                if err <= best_err {
                    best_err = err;
                    best = next.clone();
                }
                row.push(next);
            }
            let k = row.len() - 1;
            let diverging = gap(&row[k], &prev[k - 1]) >= 2.0 * best_err;
            prev = row;
            if diverging {
                break;
            }
        }
        for (r, v) in best.into_iter().enumerate() {
            jac[r][col] = v;
        }
    }
    jac
}

/// `log |det m|` by partial-pivot Gaussian elimination.
pub fn log_abs_det(m: &[Vec<f64>]) -> f64 {
    let n = m.len();
    let mut a: Vec<Vec<f64>> = m.to_vec();
    let mut acc = 0.0;
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        a.swap(col, pivot);
        let p = a[col][col];
        if p == 0.0 {
            return f64::NEG_INFINITY;
        }
        acc += p.abs().ln();
        for r in col + 1..n {
            let factor = a[r][col] / p;
            for c in col..n {
                a[r][c] -= factor * a[col][c];
            }
        }
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_of_quadratic() {
        let g = numeric_gradient(|x| x[0] * x[0] + 3.0 * x[1], &[2.0, 0.0], 1e-5);
        assert!((g[0] - 4.0).abs() < 1e-8);
        assert!((g[1] - 3.0).abs() < 1e-8);
    }

    #[test]
    fn richardson_beats_central_differences() {
        let f = |x: &[f64]| vec![x[0].exp() * x[1].sin(), (3.0 * x[0]).cos()];
        let x = [0.7_f64, 1.1];
        let exact = [
            [x[0].exp() * x[1].sin(), x[0].exp() * x[1].cos()],
            [-3.0 * (3.0 * x[0]).sin(), 0.0],
        ];
        let err = |j: Vec<Vec<f64>>| {
            (0..2)
                .flat_map(|r| (0..2).map(move |c| (r, c)))
                .map(|(r, c)| (j[r][c] - exact[r][c]).abs())
                .fold(0.0, f64::max)
        };
        let plain = err(numeric_jacobian(f, &x, 1e-3));
        let refined = err(richardson_jacobian(f, &x, 0.1));
        assert!(
            refined < 1e-11 && refined < plain / 100.0,
            "{refined} vs {plain}"
        );
    }

    #[test]
    fn determinant() {
        let m = vec![vec![2.0, 1.0], vec![1.0, 3.0]];
        assert!((log_abs_det(&m) - 5f64.ln()).abs() < 1e-14);
    }
}
