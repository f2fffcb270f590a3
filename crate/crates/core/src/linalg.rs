//! Dense row-major helpers used by the encoders and evaluators.

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `out = W x + b` for `W` of shape `rows x cols`.
pub fn affine(w: &[f64], b: &[f64], x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(x.len(), cols);
    (0..rows)
        .map(|r| b[r] + dot(&w[r * cols..(r + 1) * cols], x))
        .collect()
}

/// `out = W^T g` for `W` of shape `rows x cols`.
pub fn matvec_t(w: &[f64], g: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for r in 0..rows {
        let gr = g[r];
        if gr == 0.0 {
            continue;
        }
        for (o, wv) in out.iter_mut().zip(&w[r * cols..(r + 1) * cols]) {
            *o += gr * wv;
        }
    }
    out
}

/// `acc += g x^T`.
pub fn add_outer(acc: &mut [f64], g: &[f64], x: &[f64]) {
    let cols = x.len();
    debug_assert_eq!(acc.len(), g.len() * cols);
    for (r, gr) in g.iter().enumerate() {
        if *gr == 0.0 {
            continue;
        }
        for (a, xv) in acc[r * cols..(r + 1) * cols].iter_mut().zip(x) {
            *a += gr * xv;
        }
    }
}

pub fn axpy(acc: &mut [f64], alpha: f64, x: &[f64]) {
    for (a, v) in acc.iter_mut().zip(x) {
        *a += alpha * v;
    }
}

/// Returns `(x / |x|, |x|)`.
pub fn l2_normalize(x: &[f64]) -> (Vec<f64>, f64) {
    let n = norm(x);
    (x.iter().map(|v| v / n).collect(), n)
}
