use crate::error::{Error, Result};

/// Top-two principal components of a point set.
#[derive(Debug, Clone, PartialEq)]
pub struct Pca2 {
    pub mean: Vec<f64>,
    pub components: [Vec<f64>; 2],
    pub eigenvalues: [f64; 2],
    pub projection: Vec<[f64; 2]>,
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns `(eigenvalues, eigenvectors as columns of a row-major matrix)`.
pub fn symmetric_eigen(a: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut a = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum();
        let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().max(f64::MIN_POSITIVE);
        if off <= 1e-30 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| a[i * n + i]).collect(), v)
}

/// Covariance PCA. Components are ordered by descending eigenvalue and
/// sign-fixed so each one's largest-magnitude coordinate is positive.
pub fn pca_2d(data: &[Vec<f64>]) -> Result<Pca2> {
    if data.len() < 2 {
        return Err(Error::Shape(format!(
            "PCA needs at least 2 samples, got {}",
            data.len()
        )));
    }
    let d = data[0].len();
    if d < 2 || data.iter().any(|r| r.len() != d) {
        return Err(Error::Shape("PCA needs rows of equal width >= 2".into()));
    }
    let n = data.len() as f64;
    let mut mean = vec![0.0; d];
    for r in data {
        crate::linalg::axpy(&mut mean, 1.0 / n, r);
    }
    let mut cov = vec![0.0; d * d];
    for r in data {
        let c: Vec<f64> = r.iter().zip(&mean).map(|(x, m)| x - m).collect();
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] += c[i] * c[j] / (n - 1.0);
            }
        }
    }
    let (vals, vecs) = symmetric_eigen(&cov, d);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]));
    let component = |idx: usize| -> Vec<f64> {
        let mut c: Vec<f64> = (0..d).map(|k| vecs[k * d + idx]).collect();
        let lead = c
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
            .unwrap();
        if c[lead] < 0.0 {
            c.iter_mut().for_each(|x| *x = -*x);
        }
        c
    };
    let components = [component(order[0]), component(order[1])];
    let projection = data
        .iter()
        .map(|r| {
            let c: Vec<f64> = r.iter().zip(&mean).map(|(x, m)| x - m).collect();
            [
                crate::linalg::dot(&c, &components[0]),
                crate::linalg::dot(&c, &components[1]),
            ]
        })
        .collect();
    Ok(Pca2 {
        mean,
        components,
        eigenvalues: [vals[order[0]], vals[order[1]]],
        projection,
    })
}
