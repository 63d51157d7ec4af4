//! Shared oracles for the integration suites, implemented independently of
//! the library code paths they check. Each test target compiles its own
//! copy and uses a subset.
#![allow(dead_code)]
#![allow(clippy::needless_range_loop)]

use dlvm::data::Dataset;

pub const LN_2PI: f64 = 1.8378770664093453;

/// Per-datum log-likelihood of the blow-up decoder by 1-D quadrature.
///
/// The decoder's output depends on the latent point only through
/// `t = w^T z ~ N(0, ||w||^2)`, so each marginal is the 1-D integral of
/// `N(x_j | x_i, s(t) I) phi(t; ||w||^2)` with
/// `s(t) = exp(alpha tanh(alpha t) - alpha)`, evaluated here on a fixed
/// midpoint grid over `[-8||w||, 8||w||]` in log space.
pub fn quadrature_blowup_loglik(
    data: &Dataset,
    target: usize,
    w: &[f64],
    alpha: f64,
    nodes: usize,
) -> Vec<f64> {
    let sd = w.iter().map(|v| v * v).sum::<f64>().sqrt();
    let p = data.p() as f64;
    let lo = -8.0 * sd;
    let hi = 8.0 * sd;
    let dt = (hi - lo) / nodes as f64;
    let x_i = data.row(target);

    (0..data.n())
        .map(|j| {
            let dist_sq: f64 = data
                .row(j)
                .iter()
                .zip(x_i)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            let mut max_term = f64::NEG_INFINITY;
            let mut terms = Vec::with_capacity(nodes);
            for k in 0..nodes {
                let t = lo + (k as f64 + 0.5) * dt;
                let s = (alpha * (alpha * t).tanh() - alpha).exp();
                let log_gauss = -(p / 2.0) * (LN_2PI + s.ln()) - dist_sq / (2.0 * s);
                let log_weight = -0.5 * (LN_2PI + (sd * sd).ln()) - t * t / (2.0 * sd * sd);
                let term = log_gauss + log_weight + dt.ln();
                max_term = max_term.max(term);
                terms.push(term);
            }
            max_term + terms.iter().map(|t| (t - max_term).exp()).sum::<f64>().ln()
        })
        .collect()
}

/// Dense multivariate Gaussian log-density via Gaussian elimination with
/// partial pivoting (no shared code with the library's Cholesky).
pub fn dense_gaussian_logpdf(x: &[f64], mean: &[f64], cov: &[Vec<f64>]) -> f64 {
    let n = x.len();
    let mut a: Vec<Vec<f64>> = cov.to_vec();
    let mut b: Vec<f64> = x.iter().zip(mean).map(|(xi, mi)| xi - mi).collect();
    let mut log_det = 0.0;
    let mut sign = 1.0;
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())
            .unwrap();
        if pivot != col {
            a.swap(col, pivot);
            b.swap(col, pivot);
            sign = -sign;
        }
        let diag = a[col][col];
        log_det += diag.abs().ln();
        if diag < 0.0 {
            sign = -sign;
        }
        for row in (col + 1)..n {
            let factor = a[row][col] / diag;
            for k in col..n {
                a[row][k] -= factor * a[col][k];
            }
            b[row] -= factor * b[col];
        }
    }
    assert!(sign > 0.0, "covariance must be positive definite");
    // back substitution for cov^-1 (x - mean)
    let mut y = vec![0.0; n];
    for row in (0..n).rev() {
        let mut acc = b[row];
        for k in (row + 1)..n {
            acc -= a[row][k] * y[k];
        }
        y[row] = acc / a[row][row];
    }
    let quad: f64 = x
        .iter()
        .zip(mean)
        .zip(&y)
        .map(|((xi, mi), yi)| (xi - mi) * yi)
        .sum();
    -0.5 * (n as f64 * LN_2PI + log_det + quad)
}

/// Sample mean and standard error of a slice.
pub fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}
