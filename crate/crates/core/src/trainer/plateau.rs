/// Whether a trace has stopped improving: the mean of the last `window`
/// values exceeds the mean of the `window` before by at most
/// `tol * |mean|`. Needs at least `2 * window` values.
pub fn plateaued(values: &[f64], window: usize, tol: f64) -> bool {
    if window == 0 || values.len() < 2 * window {
        return false;
    }
    let n = values.len();
    let last = mean(&values[n - window..]);
    let prev = mean(&values[n - 2 * window..n - window]);
    last - prev <= tol * last.abs()
}

/// First trace length at which [`plateaued`] holds.
pub fn plateau_step(values: &[f64], window: usize, tol: f64) -> Option<usize> {
    (2 * window.max(1)..=values.len()).find(|&n| plateaued(&values[..n], window, tol))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}
