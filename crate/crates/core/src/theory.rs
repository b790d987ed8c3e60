//! Convergence constants for EM on the two-component mixture: strong
//! concavity `nu`, smoothness `L`, the gradient-stability term `gamma`, the
//! contraction rate and iteration counts. The population Hessian of
//! `f = -Q(. | theta*)` is exposed so the constants can be checked
//! numerically.
//!
//! Parameter vectors are ordered `(alpha, mu, sigma2)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TheoryError {
    #[error("radius r = {r} must be positive and below sigma_star^2 = {sigma_star2}")]
    InvalidRadius { r: f64, sigma_star2: f64 },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("mu_star = {mu_star} must exceed r = {r}")]
    InvalidMean { mu_star: f64, r: f64 },
    #[error("no contraction: rate {rate} (nu = {nu}, L = {l}, gamma = {gamma})")]
    NoContraction {
        rate: f64,
        nu: f64,
        l: f64,
        gamma: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConstantSet {
    /// All of `(alpha, mu, sigma2)` estimated.
    FullUnknown,
    /// `alpha` fixed at the truth; only the `(mu, sigma2)` block matters.
    KnownAlpha,
}

/// Two printed forms of the alpha term of `nu`: `max(1/(a*+r)^2, 1)` and
/// `1/min(a*+r, 1)^2`. They coincide for positive arguments; both are kept
/// so either can be cited.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NuForm {
    Statement,
    #[default]
    Proof,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GammaMode {
    /// The idealization `gamma = 0`.
    #[default]
    Zero,
    /// The order bound with leading constant 1.
    Bound,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoryInputs {
    pub alpha_star: f64,
    pub sigma_star2: f64,
    pub r: f64,
    pub mu_star: f64,
    pub omega: f64,
    pub omega0: f64,
    pub constant_set: ConstantSet,
}

impl TheoryInputs {
    /// Inputs with `omega = omega0 = 1e-3`.
    pub fn new(
        alpha_star: f64,
        sigma_star2: f64,
        r: f64,
        mu_star: f64,
        constant_set: ConstantSet,
    ) -> Result<Self, TheoryError> {
        let t = Self {
            alpha_star,
            sigma_star2,
            r,
            mu_star,
            omega: 1e-3,
            omega0: 1e-3,
            constant_set,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), TheoryError> {
        if !(self.alpha_star > 0.0 && self.alpha_star < 1.0) {
            return Err(TheoryError::InvalidInput("alpha_star must lie in (0, 1)".into()));
        }
        if !(self.sigma_star2 > 0.0 && self.sigma_star2.is_finite()) {
            return Err(TheoryError::InvalidInput("sigma_star2 must be positive".into()));
        }
        if !(self.omega > 0.0 && self.omega0 > 0.0) {
            return Err(TheoryError::InvalidInput("omega, omega0 must be positive".into()));
        }
        if !self.mu_star.is_finite() {
            return Err(TheoryError::InvalidInput("mu_star must be finite".into()));
        }
        if !(self.r > 0.0 && self.r < self.sigma_star2) {
            return Err(TheoryError::InvalidRadius {
                r: self.r,
                sigma_star2: self.sigma_star2,
            });
        }
        Ok(())
    }

    fn p(&self) -> f64 {
        1.0 - self.alpha_star
    }

    /// `theta* = (alpha*, mu*, sigma*^2)`.
    pub fn theta_star(&self) -> [f64; 3] {
        [self.alpha_star, self.mu_star, self.sigma_star2]
    }
}

fn nu_alpha_term(inputs: &TheoryInputs, form: NuForm) -> f64 {
    let a = inputs.alpha_star + inputs.r;
    match form {
        NuForm::Statement => (1.0 / (a * a)).max(1.0),
        NuForm::Proof => 1.0 / a.min(1.0).powi(2),
    }
}

/// Strong-concavity constant. May be nonpositive when `r` is large; the value
/// is returned as-is.
pub fn nu(inputs: &TheoryInputs) -> Result<f64, TheoryError> {
    nu_with(inputs, NuForm::default())
}

pub fn nu_with(inputs: &TheoryInputs, form: NuForm) -> Result<f64, TheoryError> {
    inputs.validate()?;
    let (s, r, p) = (inputs.sigma_star2, inputs.r, inputs.p());
    let cross = p * r / (s - r).powi(2);
    let var = (s - r) / (2.0 * (s + r).powi(3)) - cross;
    let mean = p / (s + r) - cross;
    let v = var.min(mean);
    Ok(match inputs.constant_set {
        ConstantSet::KnownAlpha => v,
        ConstantSet::FullUnknown => v.min(nu_alpha_term(inputs, form)),
    })
}

/// Smoothness constant.
pub fn lipschitz_l(inputs: &TheoryInputs) -> Result<f64, TheoryError> {
    inputs.validate()?;
    let (s, r, p, a) = (inputs.sigma_star2, inputs.r, inputs.p(), inputs.alpha_star);
    let mean = p * s / (s - r).powi(2);
    let var = (s + r) / (2.0 * (s - r).powi(3)) + p / (s - r);
    let v = mean.max(var);
    Ok(match inputs.constant_set {
        ConstantSet::KnownAlpha => v,
        ConstantSet::FullUnknown => {
            let alpha = a / (a - r).max(0.7).powi(2) + p / (p - r).max(inputs.omega).powi(2);
            v.max(alpha)
        }
    })
}

/// `(mu*^5 / sigma*^8) exp(-(mu* - r) / (sigma*^2 + r) * omega0)`, or 0 in
/// [`GammaMode::Zero`].
pub fn gamma_bound(inputs: &TheoryInputs, mode: GammaMode) -> Result<f64, TheoryError> {
    inputs.validate()?;
    if inputs.mu_star <= inputs.r {
        return Err(TheoryError::InvalidMean {
            mu_star: inputs.mu_star,
            r: inputs.r,
        });
    }
    Ok(match mode {
        GammaMode::Zero => 0.0,
        GammaMode::Bound => {
            let (s, r, m) = (inputs.sigma_star2, inputs.r, inputs.mu_star);
            m.powi(5) / s.powi(4) * (-(m - r) / (s + r) * inputs.omega0).exp()
        }
    })
}

/// `1 - (2 nu - gamma) / (L + nu)`.
pub fn convergence_rate(nu: f64, l: f64, gamma: f64) -> Result<f64, TheoryError> {
    let rate = 1.0 - (2.0 * nu - gamma) / (l + nu);
    if !(gamma >= 0.0) {
        return Err(TheoryError::InvalidInput("gamma must be nonnegative".into()));
    }
    if gamma >= nu {
        return Err(TheoryError::NoContraction { rate, nu, l, gamma });
    }
    if nu > l {
        return Err(TheoryError::InvalidInput(format!("nu = {nu} exceeds L = {l}")));
    }
    Ok(rate)
}

/// Smallest `k` with `cr^k < target`.
pub fn iterations_to(cr: f64, target: f64) -> Result<u64, TheoryError> {
    if !(cr < 1.0) {
        return Err(TheoryError::NoContraction {
            rate: cr,
            nu: f64::NAN,
            l: f64::NAN,
            gamma: f64::NAN,
        });
    }
    if !(cr > 0.0) || !(target > 0.0 && target < 1.0) {
        return Err(TheoryError::InvalidInput(format!(
            "need 0 < cr < 1 and 0 < target < 1, got cr = {cr}, target = {target}"
        )));
    }
    let mut k = (target.ln() / cr.ln()).ceil().max(1.0) as u64;
    // guard the float estimate on both sides
    while k > 1 && cr.powf((k - 1) as f64) < target {
        k -= 1;
    }
    while cr.powf(k as f64) >= target {
        k += 1;
    }
    Ok(k)
}

fn check_theta(theta: &[f64; 3]) -> Result<(), TheoryError> {
    if !(theta[0] > 0.0 && theta[0] < 1.0 && theta[2] > 0.0 && theta[1].is_finite()) {
        return Err(TheoryError::InvalidInput(format!("theta {theta:?} outside the valid region")));
    }
    Ok(())
}

/// Closed-form Hessian of `f = -Q(. | theta*)` in the form used to derive
/// `nu` and `L`. Its `(sigma2, sigma2)` entry omits the
/// `(1 - alpha*)(mu* - mu)^2 / sigma^6` contribution; see
/// [`q_hessian_exact`].
pub fn q_hessian(theta: &[f64; 3], theta_star: &[f64; 3]) -> Result<[[f64; 3]; 3], TheoryError> {
    check_theta(theta)?;
    check_theta(theta_star)?;
    let [a, mu, s2] = *theta;
    let [a_s, mu_s, s2_s] = *theta_star;
    let p = 1.0 - a_s;
    let off = p * (mu_s - mu) / (s2 * s2);
    Ok([
        [a_s / (a * a) + p / ((1.0 - a) * (1.0 - a)), 0.0, 0.0],
        [0.0, p / s2, off],
        [0.0, off, -0.5 / (s2 * s2) + s2_s / s2.powi(3)],
    ])
}

/// The exact Hessian of `f = -Q(. | theta*)`.
pub fn q_hessian_exact(
    theta: &[f64; 3],
    theta_star: &[f64; 3],
) -> Result<[[f64; 3]; 3], TheoryError> {
    let mut h = q_hessian(theta, theta_star)?;
    let p = 1.0 - theta_star[0];
    let d = theta_star[1] - theta[1];
    h[2][2] += p * d * d / theta[2].powi(3);
    Ok(h)
}

fn sym2_eigs(a: f64, b: f64, d: f64) -> (f64, f64) {
    let mean = 0.5 * (a + d);
    let rad = (0.25 * (a - d) * (a - d) + b * b).sqrt();
    (mean - rad, mean + rad)
}

/// Outcome of sampling Hessian eigenvalues over the ball `B(r; theta*)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundsReport {
    pub nu: f64,
    pub l: f64,
    pub samples: usize,
    /// Draws that fell outside the valid parameter region.
    pub skipped: usize,
    pub min_eig: f64,
    pub max_eig: f64,
    pub lower_violations: usize,
    pub upper_violations: usize,
}

impl BoundsReport {
    pub fn violations(&self) -> usize {
        self.lower_violations + self.upper_violations
    }
}

/// Samples `n_samples` points uniformly in the ball of radius `r` around
/// `theta*` and checks every eigenvalue of the matching Hessian block against
/// `[nu, L]` with slack `1e-9`. `KnownAlpha` samples the `(mu, sigma2)` disc
/// with `alpha = alpha*`.
pub fn verify_bounds(
    inputs: &TheoryInputs,
    n_samples: usize,
    seed: u64,
) -> Result<BoundsReport, TheoryError> {
    let nu = nu(inputs)?;
    let l = lipschitz_l(inputs)?;
    verify_bounds_against(inputs, nu, l, n_samples, seed)
}

/// As [`verify_bounds`] with caller-supplied `nu` and `L`.
pub fn verify_bounds_against(
    inputs: &TheoryInputs,
    nu: f64,
    l: f64,
    n_samples: usize,
    seed: u64,
) -> Result<BoundsReport, TheoryError> {
    inputs.validate()?;
    let star = inputs.theta_star();
    let dim = match inputs.constant_set {
        ConstantSet::KnownAlpha => 2,
        ConstantSet::FullUnknown => 3,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rep = BoundsReport {
        nu,
        l,
        samples: 0,
        skipped: 0,
        min_eig: f64::INFINITY,
        max_eig: f64::NEG_INFINITY,
        lower_violations: 0,
        upper_violations: 0,
    };
    let slack = 1e-9;
    for _ in 0..n_samples {
        let offset = uniform_in_ball(&mut rng, dim, inputs.r);
        let theta = match dim {
            2 => [star[0], star[1] + offset[0], star[2] + offset[1]],
            _ => [star[0] + offset[0], star[1] + offset[1], star[2] + offset[2]],
        };
        let h = match q_hessian(&theta, &star) {
            Ok(h) => h,
            Err(_) => {
                rep.skipped += 1;
                continue;
            }
        };
        rep.samples += 1;
        let (lo, hi) = sym2_eigs(h[1][1], h[1][2], h[2][2]);
        let mut eigs = vec![lo, hi];
        if dim == 3 {
            eigs.push(h[0][0]);
        }
        for e in eigs {
            rep.min_eig = rep.min_eig.min(e);
            rep.max_eig = rep.max_eig.max(e);
            if e < nu - slack {
                rep.lower_violations += 1;
            }
            if e > l + slack {
                rep.upper_violations += 1;
            }
        }
    }
    Ok(rep)
}

fn uniform_in_ball(rng: &mut ChaCha8Rng, dim: usize, r: f64) -> Vec<f64> {
    // rejection from the enclosing cube
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..=1.0)).collect();
        let n2: f64 = v.iter().map(|x| x * x).sum();
        if n2 <= 1.0 {
            return v.into_iter().map(|x| x * r).collect();
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RowFlag {
    Ok,
    InvalidRadius,
    NonpositiveNu,
    NoContraction,
}

impl RowFlag {
    pub fn as_str(self) -> &'static str {
        match self {
            RowFlag::Ok => "ok",
            RowFlag::InvalidRadius => "invalid-radius",
            RowFlag::NonpositiveNu => "nonpositive-nu",
            RowFlag::NoContraction => "no-contraction",
        }
    }
}

/// One line of a rate table. Numeric fields are NaN where the flag says they
/// could not be computed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TheoryRow {
    pub sigma_star: f64,
    pub r: f64,
    pub one_minus_alpha: f64,
    pub nu: f64,
    pub l: f64,
    pub gamma: f64,
    pub cr: f64,
    pub k: Option<u64>,
    pub flag: RowFlag,
}

/// Target used for the iteration column.
pub const ITERATION_TARGET: f64 = 1e-4;

/// `(sigma*, r)` pairs and spike fractions of the reference rate table.
pub const TABLE_PAIRS: [(f64, f64); 5] = [(1.1, 0.37), (2.1, 0.7), (3.1, 1.03), (4.1, 1.37), (5.1, 1.7)];
pub const TABLE_SPIKE_FRACTIONS: [f64; 2] = [0.1, 0.05];

/// Evaluates one table row. `mu_star` only matters for [`GammaMode::Bound`].
pub fn theory_row(
    sigma_star: f64,
    r: f64,
    one_minus_alpha: f64,
    mu_star: f64,
    constant_set: ConstantSet,
    gamma_mode: GammaMode,
) -> Result<TheoryRow, TheoryError> {
    let mut row = TheoryRow {
        sigma_star,
        r,
        one_minus_alpha,
        nu: f64::NAN,
        l: f64::NAN,
        gamma: f64::NAN,
        cr: f64::NAN,
        k: None,
        flag: RowFlag::Ok,
    };
    let inputs = match TheoryInputs::new(
        1.0 - one_minus_alpha,
        sigma_star * sigma_star,
        r,
        mu_star,
        constant_set,
    ) {
        Ok(t) => t,
        Err(TheoryError::InvalidRadius { .. }) => {
            row.flag = RowFlag::InvalidRadius;
            return Ok(row);
        }
        Err(e) => return Err(e),
    };
    row.nu = nu(&inputs)?;
    row.l = lipschitz_l(&inputs)?;
    row.gamma = gamma_bound(&inputs, gamma_mode)?;
    if row.nu <= 0.0 {
        row.flag = RowFlag::NonpositiveNu;
        return Ok(row);
    }
    match convergence_rate(row.nu, row.l, row.gamma) {
        Ok(cr) => {
            row.cr = cr;
            row.k = iterations_to(cr, ITERATION_TARGET).ok();
        }
        Err(_) => row.flag = RowFlag::NoContraction,
    }
    Ok(row)
}

/// The full reference grid under `KnownAlpha` with `gamma = 0`.
pub fn table1_rows() -> Vec<TheoryRow> {
    let mut rows = Vec::new();
    for &(s, r) in &TABLE_PAIRS {
        for &p in &TABLE_SPIKE_FRACTIONS {
            rows.push(
                theory_row(s, r, p, 6.0 * s, ConstantSet::KnownAlpha, GammaMode::Zero)
                    .expect("reference grid inputs are valid"),
            );
        }
    }
    rows
}
