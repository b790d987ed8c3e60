//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Cox–de Boor recursion straight from the definition, with `0/0 = 0` and the
/// last nonempty span closed on the right.
pub fn basis_value(t: &[f64], j: usize, m: usize, x: f64) -> f64 {
    if m == 1 {
        let last = t[t.len() - 1];
        let inside = t[j] <= x && x < t[j + 1];
        let right_end = x == last && t[j] < t[j + 1] && t[j + 1] == last;
        return if inside || right_end { 1.0 } else { 0.0 };
    }
    let mut v = 0.0;
    let d1 = t[j + m - 1] - t[j];
    if d1 > 0.0 {
        v += (x - t[j]) / d1 * basis_value(t, j, m - 1, x);
    }
    let d2 = t[j + m] - t[j + 1];
    if d2 > 0.0 {
        v += (t[j + m] - x) / d2 * basis_value(t, j + 1, m - 1, x);
    }
    v
}

/// `d`-th derivative of `B_{j,m}` by the standard derivative recursion.
pub fn basis_derivative(t: &[f64], j: usize, m: usize, d: usize, x: f64) -> f64 {
    if d == 0 {
        return basis_value(t, j, m, x);
    }
    let mut v = 0.0;
    let d1 = t[j + m - 1] - t[j];
    if d1 > 0.0 {
        v += basis_derivative(t, j, m - 1, d - 1, x) / d1;
    }
    let d2 = t[j + m] - t[j + 1];
    if d2 > 0.0 {
        v -= basis_derivative(t, j + 1, m - 1, d - 1, x) / d2;
    }
    (m - 1) as f64 * v
}

pub fn spline_derivative(t: &[f64], m: usize, coef: &[f64], d: usize, x: f64) -> f64 {
    coef.iter().enumerate().map(|(j, c)| c * basis_derivative(t, j, m, d, x)).sum()
}

/// Gauss–Legendre rule on `[-1, 1]` by Golub–Welsch.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut j = DMatrix::<f64>::zeros(n, n);
    for k in 1..n {
        let b = k as f64 / ((4 * k * k - 1) as f64).sqrt();
        j[(k, k - 1)] = b;
        j[(k - 1, k)] = b;
    }
    let eig = SymmetricEigen::new(j);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| (eig.eigenvalues[i], 2.0 * eig.eigenvectors[(0, i)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

/// `∫ (s^{(q)})^2` over the knot range by per-span quadrature. Evaluation
/// points stay strictly inside spans so the right-continuous convention does
/// not matter.
pub fn roughness_by_quadrature(t: &[f64], m: usize, coef: &[f64], q: usize) -> f64 {
    let (nodes, weights) = gauss_legendre(m.max(2) + 2);
    let mut total = 0.0;
    for w in t.windows(2) {
        let (a, b) = (w[0], w[1]);
        if b <= a {
            continue;
        }
        let half = 0.5 * (b - a);
        for (z, wt) in nodes.iter().zip(&weights) {
            let x = a + half * (z + 1.0);
            total += wt * half * spline_derivative(t, m, coef, q, x).powi(2);
        }
    }
    total
}

/// Coefficients of `x^k` in the B-spline basis via Marsden's identity:
/// `c_j = e_k(t_{j+1}, …, t_{j+m-1}) / C(m-1, k)`.
pub fn monomial_coefficients(t: &[f64], m: usize, k: usize) -> Vec<f64> {
    let dim = t.len() - m;
    (0..dim)
        .map(|j| {
            let inner = &t[j + 1..j + m];
            elementary_symmetric(inner, k) / binomial(m - 1, k)
        })
        .collect()
}

fn elementary_symmetric(v: &[f64], k: usize) -> f64 {
    let mut e = vec![0.0; k + 1];
    e[0] = 1.0;
    for &x in v {
        for i in (1..=k).rev() {
            e[i] += x * e[i - 1];
        }
    }
    e[k]
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Penalized least squares `|W(Na - y)|^2 / n_w + λ a'D'GDa` as a stacked
/// least-squares problem `[N/√n_w; √λ R'D] a ≈ [y/√n_w; 0]` with `G = RR'`,
/// solved by QR. Avoids squaring the condition number.
pub fn dense_penalized_fit(
    n_rows: &[Vec<f64>],
    y: &[f64],
    diff: &DMatrix<f64>,
    gram: &DMatrix<f64>,
    lambda: f64,
    mask: &[bool],
) -> Vec<f64> {
    let k = diff.ncols();
    let used: Vec<usize> = (0..y.len()).filter(|&i| mask[i]).collect();
    let scale = 1.0 / (used.len() as f64).sqrt();
    let r = gram.clone().cholesky().expect("gram is positive definite").l();
    let pen = r.transpose() * diff * lambda.sqrt();
    let rows = used.len() + pen.nrows();
    let a = DMatrix::from_fn(rows, k, |i, j| {
        if i < used.len() {
            n_rows[used[i]][j] * scale
        } else {
            pen[(i - used.len(), j)]
        }
    });
    let b = DVector::from_fn(rows, |i, _| if i < used.len() { y[used[i]] * scale } else { 0.0 });
    let qr = a.qr();
    let qtb = qr.q().transpose() * b;
    qr.r().solve_upper_triangular(&qtb).expect("full rank").iter().copied().collect()
}

/// Mean of `log φ` terms making up `-Q(θ | θ*)` under the population of
/// `xi`, with responsibilities fixed at the truth.
pub fn neg_q(xi: &[f64], gamma_star: &[f64], theta: [f64; 3]) -> f64 {
    let [a, mu, s2] = theta;
    let lnorm = |x: f64, m: f64| -0.5 * (2.0 * std::f64::consts::PI * s2).ln() - (x - m).powi(2) / (2.0 * s2);
    let s: f64 = xi
        .iter()
        .zip(gamma_star)
        .map(|(&x, &g)| (1.0 - g) * (a.ln() + lnorm(x, 0.0)) + g * ((1.0 - a).ln() + lnorm(x, mu)))
        .sum();
    -s / xi.len() as f64
}

pub fn spike_posterior(x: f64, theta: [f64; 3]) -> f64 {
    let [a, mu, s2] = theta;
    let la = a.ln() - x * x / (2.0 * s2);
    let lb = (1.0 - a).ln() - (x - mu).powi(2) / (2.0 * s2);
    1.0 / (1.0 + (la - lb).exp())
}

/// `1 - (2ν - γ)/(L + ν)` with the known-alpha constants written out from
/// their definitions.
pub fn known_alpha_rate(sigma_star: f64, r: f64, one_minus_alpha: f64) -> f64 {
    let s = sigma_star * sigma_star;
    let p = one_minus_alpha;
    let nu_var = (s - r) / (2.0 * (s + r).powi(3)) - p * r / (s - r).powi(2);
    let nu_mean = p / (s + r) - p * r / (s - r).powi(2);
    let nu = nu_var.min(nu_mean);
    let l_mean = p * s / (s - r).powi(2);
    let l_var = (s + r) / (2.0 * (s - r).powi(3)) + p / (s - r);
    let l = l_mean.max(l_var);
    1.0 - 2.0 * nu / (l + nu)
}
