//! Two-component Gaussian mixture for residuals: a zero-mean "smooth"
//! component with weight `alpha` and a shifted "spike" component with mean
//! `mu`. The spike component either shares the variance (`EqualVariance`) or
//! carries an extra `sigma_h2` (`InflatedVariance`).
//!
//! Responsibilities `gamma_i` are posterior probabilities of the spike
//! component.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EmError {
    #[error("invalid mixture parameters: {0}")]
    InvalidParams(String),
    #[error("data contains non-finite values")]
    InvalidData,
    #[error("length mismatch: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("mixture component collapsed (spike weight {spike}, smooth weight {smooth})")]
    ComponentCollapse { spike: f64, smooth: f64 },
    #[error("operation supports only the equal-variance model")]
    UnsupportedVariant,
    #[error("no threshold candidates supplied")]
    NoCandidates,
    #[error("step size must be positive, got {0}")]
    InvalidStepSize(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    EqualVariance,
    InflatedVariance,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixtureParams<T> {
    /// Weight of the smooth (non-spike) component.
    pub alpha: T,
    pub mu: T,
    pub sigma2: T,
    pub sigma_h2: Option<T>,
    pub variant: Variant,
}

impl<T: Scalar> MixtureParams<T> {
    pub fn equal(alpha: T, mu: T, sigma2: T) -> Result<Self, EmError> {
        let p = Self {
            alpha,
            mu,
            sigma2,
            sigma_h2: None,
            variant: Variant::EqualVariance,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn inflated(alpha: T, mu: T, sigma2: T, sigma_h2: T) -> Result<Self, EmError> {
        let p = Self {
            alpha,
            mu,
            sigma2,
            sigma_h2: Some(sigma_h2),
            variant: Variant::InflatedVariance,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), EmError> {
        let bad = |m: &str| Err(EmError::InvalidParams(m.to_string()));
        if !(self.alpha > T::zero() && self.alpha < T::one()) {
            return bad("alpha must lie in (0, 1)");
        }
        if !self.mu.is_finite() {
            return bad("mu must be finite");
        }
        if !(self.sigma2 > T::zero() && self.sigma2.is_finite()) {
            return bad("sigma2 must be positive");
        }
        match (self.variant, self.sigma_h2) {
            (Variant::EqualVariance, None) => Ok(()),
            (Variant::EqualVariance, Some(_)) => bad("equal-variance model has no sigma_h2"),
            (Variant::InflatedVariance, Some(h)) if h >= T::zero() && h.is_finite() => Ok(()),
            (Variant::InflatedVariance, _) => bad("sigma_h2 must be present and nonnegative"),
        }
    }

    /// Variance of the spike component.
    pub fn spike_variance(&self) -> T {
        self.sigma2 + self.sigma_h2.unwrap_or(T::zero())
    }

    /// `(alpha, mu, sigma2)` as an array.
    pub fn theta(&self) -> [T; 3] {
        [self.alpha, self.mu, self.sigma2]
    }

    fn log_terms(&self, x: T) -> (T, T) {
        let la = self.alpha.ln() + log_normal_pdf(x, T::zero(), self.sigma2);
        let lb = (T::one() - self.alpha).ln() + log_normal_pdf(x, self.mu, self.spike_variance());
        (la, lb)
    }
}

/// Stopping rule for [`run_em`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for EmOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmResult<T> {
    pub params: MixtureParams<T>,
    pub responsibilities: Vec<T>,
    /// Mean log-likelihood of the initial point and of every iterate.
    pub loglik_trace: Vec<T>,
    pub iterations: usize,
    pub converged: bool,
    pub collapsed: bool,
}

fn log_normal_pdf<T: Scalar>(x: T, mean: T, var: T) -> T {
    let d = x - mean;
    -T::lit(0.5) * (T::lit(2.0 * std::f64::consts::PI) * var).ln() - d * d / (var + var)
}

fn check_data<T: Scalar>(xi: &[T]) -> Result<(), EmError> {
    if xi.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(EmError::InvalidData)
    }
}

/// Mean log mixture density `(1/n) Σ log(A_i + B_i)`.
pub fn loglik<T: Scalar>(xi: &[T], params: &MixtureParams<T>) -> Result<T, EmError> {
    params.validate()?;
    check_data(xi)?;
    let total: T = xi
        .iter()
        .map(|&x| {
            let (la, lb) = params.log_terms(x);
            let mx = la.max(lb);
            mx + ((la - mx).exp() + (lb - mx).exp()).ln()
        })
        .sum();
    Ok(total / T::from_usize_lossy(xi.len().max(1)))
}

/// Posterior spike probabilities `B_i / (A_i + B_i)`.
pub fn responsibilities<T: Scalar>(xi: &[T], params: &MixtureParams<T>) -> Vec<T> {
    xi.iter()
        .map(|&x| {
            let (la, lb) = params.log_terms(x);
            T::one() / (T::one() + (la - lb).exp())
        })
        .collect()
}

/// Closed-form maximizer of `Q_n(. | theta')` for responsibilities `gamma`.
pub fn m_step<T: Scalar>(
    xi: &[T],
    gamma: &[T],
    variant: Variant,
) -> Result<MixtureParams<T>, EmError> {
    if xi.len() != gamma.len() {
        return Err(EmError::LengthMismatch {
            expected: xi.len(),
            found: gamma.len(),
        });
    }
    check_data(xi)?;
    let n = T::from_usize_lossy(xi.len());
    let spike_w: T = gamma.iter().copied().sum();
    let smooth_w: T = gamma.iter().map(|&g| T::one() - g).sum();
    let floor = T::lit(1e-8) * n;
    if spike_w < floor || smooth_w < floor {
        return Err(EmError::ComponentCollapse {
            spike: spike_w.as_f64(),
            smooth: smooth_w.as_f64(),
        });
    }
    let alpha = smooth_w / n;
    let mu = xi.iter().zip(gamma).map(|(&x, &g)| g * x).sum::<T>() / spike_w;
    let ss0: T = xi.iter().zip(gamma).map(|(&x, &g)| (T::one() - g) * x * x).sum();
    let ss1: T = xi
        .iter()
        .zip(gamma)
        .map(|(&x, &g)| g * (x - mu) * (x - mu))
        .sum();
    let pooled = (ss0 + ss1) / n;
    let params = match variant {
        Variant::EqualVariance => MixtureParams {
            alpha,
            mu,
            sigma2: pooled,
            sigma_h2: None,
            variant,
        },
        Variant::InflatedVariance => {
            let s0 = ss0 / smooth_w;
            let s1 = ss1 / spike_w;
            if s1 > s0 {
                MixtureParams {
                    alpha,
                    mu,
                    sigma2: s0,
                    sigma_h2: Some(s1 - s0),
                    variant,
                }
            } else {
                MixtureParams {
                    alpha,
                    mu,
                    sigma2: pooled,
                    sigma_h2: Some(T::zero()),
                    variant,
                }
            }
        }
    };
    if !(params.sigma2 > T::zero()) {
        return Err(EmError::ComponentCollapse {
            spike: spike_w.as_f64(),
            smooth: smooth_w.as_f64(),
        });
    }
    Ok(params)
}

/// Alternates E and M steps from `init` until the mean log-likelihood
/// changes by less than `opts.tol`. A collapsing component stops the run and
/// keeps the last valid iterate.
pub fn run_em<T: Scalar>(
    xi: &[T],
    init: &MixtureParams<T>,
    opts: EmOptions,
) -> Result<EmResult<T>, EmError> {
    let mut params = *init;
    let mut ll = loglik(xi, &params)?;
    let mut trace = vec![ll];
    let mut converged = false;
    let mut collapsed = false;
    let mut iterations = 0;
    let tol = T::lit(opts.tol);
    while iterations < opts.max_iter {
        let gamma = responsibilities(xi, &params);
        let next = match m_step(xi, &gamma, init.variant) {
            Ok(p) if p.validate().is_ok() => p,
            Ok(_) | Err(EmError::ComponentCollapse { .. }) => {
                collapsed = true;
                break;
            }
            Err(e) => return Err(e),
        };
        iterations += 1;
        let next_ll = loglik(xi, &next)?;
        trace.push(next_ll);
        params = next;
        if (next_ll - ll).abs() < tol {
            converged = true;
            break;
        }
        ll = next_ll;
    }
    Ok(EmResult {
        responsibilities: responsibilities(xi, &params),
        params,
        loglik_trace: trace,
        iterations,
        converged,
        collapsed,
    })
}

/// `Q_n(theta | theta')` where `gamma` are the responsibilities at `theta'`.
pub fn q_value<T: Scalar>(xi: &[T], gamma: &[T], params: &MixtureParams<T>) -> T {
    let la0 = params.alpha.ln();
    let lb0 = (T::one() - params.alpha).ln();
    let s: T = xi
        .iter()
        .zip(gamma)
        .map(|(&x, &g)| {
            (T::one() - g) * (la0 + log_normal_pdf(x, T::zero(), params.sigma2))
                + g * (lb0 + log_normal_pdf(x, params.mu, params.spike_variance()))
        })
        .sum();
    s / T::from_usize_lossy(xi.len())
}

/// Gradient of `Q_n(. | theta')` in `(alpha, mu, sigma2)` at `params`, for the
/// equal-variance model.
pub fn q_gradient<T: Scalar>(
    xi: &[T],
    gamma: &[T],
    params: &MixtureParams<T>,
) -> Result<[T; 3], EmError> {
    if params.variant != Variant::EqualVariance {
        return Err(EmError::UnsupportedVariant);
    }
    let (a, mu, s2) = (params.alpha, params.mu, params.sigma2);
    let half = T::lit(0.5);
    let mut g = [T::zero(); 3];
    for (&x, &w) in xi.iter().zip(gamma) {
        let v = T::one() - w;
        g[0] += v / a - w / (T::one() - a);
        g[1] += w * (x - mu) / s2;
        g[2] += -half / s2 + (v * x * x + w * (x - mu) * (x - mu)) * half / (s2 * s2);
    }
    let n = T::from_usize_lossy(xi.len());
    Ok(g.map(|v| v / n))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientStep<T> {
    pub params: MixtureParams<T>,
    /// The raw step left the valid region and was projected back.
    pub projected: bool,
}

/// One first-order EM update `theta + s * grad Q_n(theta | theta)`.
pub fn gradient_em_step<T: Scalar>(
    xi: &[T],
    params: &MixtureParams<T>,
    stepsize: T,
) -> Result<GradientStep<T>, EmError> {
    if !(stepsize > T::zero()) {
        return Err(EmError::InvalidStepSize(stepsize.as_f64()));
    }
    params.validate()?;
    check_data(xi)?;
    let gamma = responsibilities(xi, params);
    let g = q_gradient(xi, &gamma, params)?;
    let eps = T::lit(1e-6);
    let mut alpha = params.alpha + stepsize * g[0];
    let mu = params.mu + stepsize * g[1];
    let mut sigma2 = params.sigma2 + stepsize * g[2];
    let mut projected = false;
    if alpha <= T::zero() {
        alpha = eps;
        projected = true;
    } else if alpha >= T::one() {
        alpha = T::one() - eps;
        projected = true;
    }
    if sigma2 <= T::zero() {
        sigma2 = eps;
        projected = true;
    }
    Ok(GradientStep {
        params: MixtureParams::equal(alpha, mu, sigma2)?,
        projected,
    })
}

/// Iterates [`gradient_em_step`] until the parameter change is below `tol`.
pub fn run_gradient_em<T: Scalar>(
    xi: &[T],
    init: &MixtureParams<T>,
    stepsize: T,
    tol: f64,
    max_iter: usize,
) -> Result<(MixtureParams<T>, usize, bool), EmError> {
    let mut p = *init;
    let tol = T::lit(tol);
    for it in 1..=max_iter {
        let next = gradient_em_step(xi, &p, stepsize)?.params;
        let d = next
            .theta()
            .iter()
            .zip(p.theta())
            .map(|(&a, b)| (a - b) * (a - b))
            .sum::<T>()
            .sqrt();
        p = next;
        if d < tol {
            return Ok((p, it, true));
        }
    }
    Ok((p, max_iter, false))
}

/// Spike iff `gamma_i >= threshold`.
pub fn classify<T: Scalar>(gamma: &[T], threshold: T) -> Vec<bool> {
    gamma.iter().map(|&g| g >= threshold).collect()
}

/// Complete-data MLE treating `labels` (true = spike) as known memberships.
/// Falls back to a near-single-component parameter set when either group is
/// empty.
pub fn init_from_labels<T: Scalar>(
    xi: &[T],
    labels: &[bool],
    variant: Variant,
) -> Result<MixtureParams<T>, EmError> {
    if xi.len() != labels.len() {
        return Err(EmError::LengthMismatch {
            expected: xi.len(),
            found: labels.len(),
        });
    }
    check_data(xi)?;
    let spikes = labels.iter().filter(|&&l| l).count();
    if spikes == 0 || spikes == labels.len() {
        return Ok(no_spike_params(xi, variant));
    }
    let gamma: Vec<T> = labels
        .iter()
        .map(|&l| if l { T::one() } else { T::zero() })
        .collect();
    m_step(xi, &gamma, variant)
}

/// `alpha = 1 - 1/n`, `mu = max |xi|`, `sigma2 = var(xi)`.
pub fn no_spike_params<T: Scalar>(xi: &[T], variant: Variant) -> MixtureParams<T> {
    let n = T::from_usize_lossy(xi.len().max(2));
    let mean = xi.iter().copied().sum::<T>() / n;
    let var = xi.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / n;
    let mu = xi.iter().fold(T::zero(), |m, &x| m.max(x.abs()));
    MixtureParams {
        alpha: T::one() - T::one() / n,
        mu,
        sigma2: var.max(T::min_positive_value().sqrt()),
        sigma_h2: match variant {
            Variant::EqualVariance => None,
            Variant::InflatedVariance => Some(T::zero()),
        },
        variant,
    }
}

/// Mean complete-data log-likelihood of hard `labels` under `params`.
pub fn complete_loglik<T: Scalar>(xi: &[T], labels: &[bool], params: &MixtureParams<T>) -> T {
    let s: T = xi
        .iter()
        .zip(labels)
        .map(|(&x, &spike)| {
            if spike {
                (T::one() - params.alpha).ln()
                    + log_normal_pdf(x, params.mu, params.spike_variance())
            } else {
                params.alpha.ln() + log_normal_pdf(x, T::zero(), params.sigma2)
            }
        })
        .sum();
    s / T::from_usize_lossy(xi.len())
}

/// Likelihood that ranks threshold candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ThresholdLikelihood {
    #[default]
    Complete,
    Observed,
}

pub const DEFAULT_THRESHOLDS: [f64; 11] =
    [0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95, 0.99];

#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdChoice<T> {
    pub threshold: T,
    pub labels: Vec<bool>,
    /// Score of the chosen candidate; `-inf` when no candidate split the data.
    pub score: T,
    pub no_spikes: bool,
}

/// Picks the candidate threshold whose hard labels, with their complete-data
/// MLE, give the largest log-likelihood. Ties go to the smallest threshold.
pub fn select_threshold<T: Scalar>(
    xi: &[T],
    gamma: &[T],
    variant: Variant,
    candidates: &[T],
    likelihood: ThresholdLikelihood,
) -> Result<ThresholdChoice<T>, EmError> {
    if candidates.is_empty() {
        return Err(EmError::NoCandidates);
    }
    if xi.len() != gamma.len() {
        return Err(EmError::LengthMismatch {
            expected: xi.len(),
            found: gamma.len(),
        });
    }
    let mut sorted = candidates.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let mut best: Option<ThresholdChoice<T>> = None;
    for &t in &sorted {
        let labels = classify(gamma, t);
        let spikes = labels.iter().filter(|&&l| l).count();
        if spikes == 0 || spikes == labels.len() {
            continue;
        }
        let params = match init_from_labels(xi, &labels, variant) {
            Ok(p) if p.validate().is_ok() => p,
            _ => continue,
        };
        let score = match likelihood {
            ThresholdLikelihood::Complete => complete_loglik(xi, &labels, &params),
            ThresholdLikelihood::Observed => loglik(xi, &params)?,
        };
        if best.as_ref().is_none_or(|b| score > b.score) {
            best = Some(ThresholdChoice {
                threshold: t,
                labels,
                score,
                no_spikes: false,
            });
        }
    }
    Ok(best.unwrap_or_else(|| ThresholdChoice {
        threshold: *sorted.last().unwrap(),
        labels: vec![false; xi.len()],
        score: T::neg_infinity(),
        no_spikes: true,
    }))
}
