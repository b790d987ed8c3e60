//! The smoothEM procedure. For every smoothing parameter on a grid:
//!
//! 1. fit a penalized spline to all points and take residuals;
//! 2. split residuals into "smooth" and "spike" groups by magnitude;
//! 3. refit on the smooth group, recompute residuals for every point, and
//!    score how strongly the masked fit follows perturbed data;
//! 4. run EM on the residuals, initialized from the split, and threshold the
//!    posteriors.
//!
//! The λ maximizing `loglik - β·F` wins, and the curve is refit at that λ on
//! the points not labelled as spikes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bspline::{design_matrix, make_knots, penalty_matrix, DesignMatrix, KnotVector, PenaltyMatrix, SplineError};
use crate::mixture_em::{
    init_from_labels, loglik, no_spike_params, responsibilities, run_em, select_threshold,
    EmError, EmOptions, MixtureParams, ThresholdLikelihood, Variant, DEFAULT_THRESHOLDS,
};
use crate::scalar::{mad, Scalar};
use crate::smoother::{PenalizedSystem, SmoothError, SmoothFit};

/// Minimum number of observations accepted by [`run_smoothem`].
pub const MIN_OBSERVATIONS: usize = 20;
/// Points in the grid the overfit score is measured on.
pub const OVERFIT_GRID: usize = 512;
const SIGMA_TAU_FLOOR: f64 = 1e-8;
const KMEANS_STARTS: usize = 10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PipelineError {
    #[error("need at least {min} observations, got {found}")]
    TooFewObservations { min: usize, found: usize },
    #[error("x and y lengths differ ({x} vs {y})")]
    LengthMismatch { x: usize, y: usize },
    #[error("input contains non-finite values")]
    NonFinite,
    #[error("all x values are equal")]
    DegenerateDomain,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Smooth(#[from] SmoothError),
    #[error(transparent)]
    Spline(#[from] SplineError),
    #[error(transparent)]
    Em(#[from] EmError),
}

/// How residuals are first split into smooth and spike groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitialClassifier {
    #[default]
    KMeans,
    LargestGap,
}

/// Sign with which the overfit score enters the selection criterion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OverfitSign {
    /// `loglik - β·F`: penalize fits that chase noise.
    #[default]
    Subtract,
    /// `loglik + β·F`, the literal printed form.
    Add,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub lambda_grid: Vec<f64>,
    pub spline_order: usize,
    pub penalty_order: usize,
    /// Interior knot count; `None` means `min(296, n/2)`.
    pub interior_knots: Option<usize>,
    pub max_spike_fraction: f64,
    pub variant: Variant,
    pub overfit_weight: f64,
    pub overfit_sign: OverfitSign,
    pub perturbation_seed: u64,
    pub thresholds: Vec<f64>,
    pub threshold_likelihood: ThresholdLikelihood,
    pub em_tol: f64,
    pub em_max_iter: usize,
    pub initial_classifier: InitialClassifier,
    /// Minimum center separation, in MADs of the residuals, for a spike group.
    pub separation_mads: f64,
    pub loess_span: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            lambda_grid: vec![1e3, 1e2, 1e1, 1.0, 1e-1, 1e-2, 1e-3, 1e-4],
            spline_order: 4,
            penalty_order: 2,
            interior_knots: None,
            max_spike_fraction: 0.5,
            variant: Variant::EqualVariance,
            overfit_weight: 1.0,
            overfit_sign: OverfitSign::Subtract,
            perturbation_seed: 0,
            thresholds: DEFAULT_THRESHOLDS.to_vec(),
            threshold_likelihood: ThresholdLikelihood::Complete,
            em_tol: 1e-8,
            em_max_iter: 500,
            initial_classifier: InitialClassifier::KMeans,
            separation_mads: 3.0,
            loess_span: 0.3,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::InvalidConfig(m.to_string()));
        if self.lambda_grid.is_empty() || self.lambda_grid.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
            return bad("lambda grid must be nonempty and positive");
        }
        if self.spline_order == 0 {
            return bad("spline order must be at least 1");
        }
        if self.penalty_order == 0 || self.penalty_order >= self.spline_order {
            return bad("penalty order must lie in 1..spline order");
        }
        if !(self.max_spike_fraction > 0.0 && self.max_spike_fraction < 1.0) {
            return bad("max spike fraction must lie in (0, 1)");
        }
        if !(self.overfit_weight >= 0.0 && self.overfit_weight.is_finite()) {
            return bad("overfit weight must be nonnegative");
        }
        if self.thresholds.is_empty() || self.thresholds.iter().any(|&t| !(0.5..1.0).contains(&t)) {
            return bad("thresholds must be nonempty and lie in [0.5, 1)");
        }
        if !(self.em_tol >= 0.0) || self.em_max_iter == 0 {
            return bad("EM tolerance must be nonnegative and the iteration cap positive");
        }
        if !(self.separation_mads >= 0.0) {
            return bad("separation must be nonnegative");
        }
        if !(self.loess_span > 0.0 && self.loess_span <= 1.0) {
            return bad("loess span must lie in (0, 1]");
        }
        Ok(())
    }

    pub fn interior_knots_for(&self, n: usize) -> usize {
        self.interior_knots.unwrap_or_else(|| 296.min(n / 2))
    }

    /// `loglik ∓ β·F` according to [`OverfitSign`].
    pub fn criterion<T: Scalar>(&self, loglik: T, overfit: T) -> T {
        let b = T::lit(self.overfit_weight);
        match self.overfit_sign {
            OverfitSign::Subtract => criterion(loglik, overfit, b),
            OverfitSign::Add => loglik + b * overfit,
        }
    }
}

/// `loglik - beta·F`.
pub fn criterion<T: Scalar>(loglik: T, overfit: T, beta: T) -> T {
    loglik - beta * overfit
}

/// Spline space on the data range, with `x` mapped affinely onto `[0, 1]`.
#[derive(Debug, Clone)]
pub struct SplineBasis<T> {
    lo: T,
    hi: T,
    knots: KnotVector<T>,
    penalty: PenaltyMatrix<T>,
}

impl<T: Scalar> SplineBasis<T> {
    /// Basis spanning `[min xs, max xs]`.
    pub fn for_data(xs: &[T], interior: usize, order: usize, q: usize) -> Result<Self, PipelineError> {
        let lo = xs.iter().copied().fold(T::infinity(), T::min);
        let hi = xs.iter().copied().fold(T::neg_infinity(), T::max);
        if !(lo.is_finite() && hi.is_finite()) {
            return Err(PipelineError::NonFinite);
        }
        if hi <= lo {
            return Err(PipelineError::DegenerateDomain);
        }
        let knots = make_knots((T::zero(), T::one()), interior, order)?;
        let penalty = penalty_matrix(&knots, q)?;
        Ok(Self { lo, hi, knots, penalty })
    }

    pub fn knots(&self) -> &KnotVector<T> {
        &self.knots
    }

    pub fn penalty(&self) -> &PenaltyMatrix<T> {
        &self.penalty
    }

    /// Data range `(min x, max x)`.
    pub fn range(&self) -> (T, T) {
        (self.lo, self.hi)
    }

    /// Position in `[0, 1]`; points outside the data range are clamped.
    pub fn normalize(&self, x: T) -> T {
        ((x - self.lo) / (self.hi - self.lo)).max(T::zero()).min(T::one())
    }

    pub fn design(&self, xs: &[T]) -> Result<DesignMatrix<T>, PipelineError> {
        let u: Vec<T> = xs.iter().map(|&x| self.normalize(x)).collect();
        Ok(design_matrix(&self.knots, &u)?)
    }

    /// Evaluates the spline with `coefficients` at data-scale `xs`.
    pub fn predict(&self, coefficients: &[T], xs: &[T]) -> Result<Vec<T>, PipelineError> {
        xs.iter()
            .map(|&x| {
                self.knots
                    .eval_spline(coefficients, self.normalize(x))
                    .map_err(PipelineError::from)
            })
            .collect()
    }

    /// `n` equispaced data-scale points spanning the range.
    pub fn grid(&self, n: usize) -> Vec<T> {
        let d = T::from_usize_lossy(n.max(2) - 1);
        (0..n)
            .map(|i| self.lo + (self.hi - self.lo) * T::from_usize_lossy(i) / d)
            .collect()
    }
}

/// Penalized fit of `ys` at `lambda` using only points with `mask[i]`.
pub fn masked_fit<T: Scalar>(
    basis: &SplineBasis<T>,
    xs: &[T],
    ys: &[T],
    lambda: T,
    mask: &[bool],
) -> Result<SmoothFit<T>, PipelineError> {
    let design = basis.design(xs)?;
    Ok(PenalizedSystem::new(&design, &basis.penalty, lambda, mask)?.fit(&design, ys)?)
}

/// One row of the λ search.
#[derive(Debug, Clone, PartialEq)]
pub struct LambdaRow<T> {
    pub lambda: T,
    pub loglik: T,
    pub overfit: T,
    pub criterion: T,
    /// Magnitude split before EM.
    pub initial_labels: Vec<bool>,
    /// Labels after EM and threshold selection.
    pub labels: Vec<bool>,
    pub params: MixtureParams<T>,
    pub responsibilities: Vec<T>,
    pub threshold: Option<T>,
    pub em_iterations: usize,
    pub collapsed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct PipelineFlags {
    pub no_spikes_found: bool,
    pub collapse_events: usize,
}

#[derive(Debug, Clone)]
pub struct PipelineResult<T> {
    pub lambda_star: T,
    pub params: MixtureParams<T>,
    pub labels: Vec<bool>,
    /// Posterior spike probabilities at `lambda_star`.
    pub posterior: Vec<T>,
    /// Final fit at `lambda_star` on the points not labelled as spikes.
    pub fit: SmoothFit<T>,
    pub per_lambda: Vec<LambdaRow<T>>,
    pub flags: PipelineFlags,
    pub sigma_tau: T,
    pub basis: SplineBasis<T>,
}

impl<T: Scalar> PipelineResult<T> {
    /// The final curve at data-scale `xs`.
    pub fn predict(&self, xs: &[T]) -> Result<Vec<T>, PipelineError> {
        self.basis.predict(&self.fit.coefficients, xs)
    }

    pub fn star_row(&self) -> &LambdaRow<T> {
        self.per_lambda
            .iter()
            .find(|r| r.lambda == self.lambda_star)
            .expect("lambda_star comes from per_lambda")
    }
}

fn lloyd<T: Scalar>(sorted: &[T], mut c0: T, mut c1: T) -> (T, T, T) {
    // 1-D: clusters are contiguous in sorted order
    for _ in 0..100 {
        if c0 > c1 {
            std::mem::swap(&mut c0, &mut c1);
        }
        let cut = (c0 + c1) * T::lit(0.5);
        let split = sorted.partition_point(|&v| v <= cut);
        if split == 0 || split == sorted.len() {
            break;
        }
        let mean = |s: &[T]| s.iter().copied().sum::<T>() / T::from_usize_lossy(s.len());
        let (n0, n1) = (mean(&sorted[..split]), mean(&sorted[split..]));
        if n0 == c0 && n1 == c1 {
            break;
        }
        c0 = n0;
        c1 = n1;
    }
    let cut = (c0 + c1) * T::lit(0.5);
    let wss: T = sorted
        .iter()
        .map(|&v| {
            let c = if v <= cut { c0 } else { c1 };
            (v - c) * (v - c)
        })
        .sum();
    (c0, c1, wss)
}

/// Two-means clustering of scalar data: best of several deterministic
/// starts. Returns the two centers, lower first.
pub fn two_means<T: Scalar>(values: &[T]) -> (T, T) {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let n = sorted.len();
    let mut best = (sorted[0], sorted[n - 1], T::infinity());
    for s in 0..KMEANS_STARTS {
        // starts at spread-out order statistics, extremes first
        let lo = s * (n - 1) / (2 * KMEANS_STARTS);
        let hi = n - 1 - lo;
        let (c0, c1, w) = lloyd(&sorted, sorted[lo], sorted[hi]);
        if w < best.2 {
            best = (c0, c1, w);
        }
    }
    (best.0.min(best.1), best.0.max(best.1))
}

/// Splits residuals into smooth (false) and spike (true) by magnitude. The
/// spike group is the cluster whose center is farther from zero; it is
/// discarded when it holds more than `max_spike_fraction` of the points or
/// the centers are closer than `separation_mads` MADs of the residuals.
pub fn magnitude_classify<T: Scalar>(
    residuals: &[T],
    max_spike_fraction: f64,
    classifier: InitialClassifier,
    separation_mads: f64,
) -> Vec<bool> {
    let n = residuals.len();
    let none = vec![false; n];
    if n < 4 || residuals.iter().any(|v| !v.is_finite()) {
        return none;
    }
    let first = residuals[0];
    if residuals.iter().all(|&v| v == first) {
        return none;
    }
    let mut sorted = residuals.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let (c0, c1, cut) = match classifier {
        InitialClassifier::KMeans => {
            let (c0, c1) = two_means(residuals);
            (c0, c1, (c0 + c1) * T::lit(0.5))
        }
        InitialClassifier::LargestGap => {
            let (k, _) = sorted
                .windows(2)
                .enumerate()
                .map(|(i, w)| (i, w[1] - w[0]))
                .fold((0, T::neg_infinity()), |b, c| if c.1 > b.1 { c } else { b });
            let mean = |s: &[T]| s.iter().copied().sum::<T>() / T::from_usize_lossy(s.len());
            let cut = (sorted[k] + sorted[k + 1]) * T::lit(0.5);
            (mean(&sorted[..=k]), mean(&sorted[k + 1..]), cut)
        }
    };
    let spike_high = c1.abs() > c0.abs();
    let labels: Vec<bool> = residuals
        .iter()
        .map(|&v| if spike_high { v > cut } else { v <= cut })
        .collect();
    let count = labels.iter().filter(|&&l| l).count();
    if count == 0 || count as f64 > max_spike_fraction * n as f64 {
        return none;
    }
    if (c1 - c0) < T::lit(separation_mads) * mad(residuals) {
        return none;
    }
    labels
}

/// Local linear regression with tricube weights over the `span·n` nearest
/// neighbours, evaluated at every `xs[i]`.
pub fn loess_pilot<T: Scalar>(xs: &[T], ys: &[T], span: f64) -> Vec<T> {
    let n = xs.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).unwrap_or(std::cmp::Ordering::Equal));
    let sx: Vec<T> = idx.iter().map(|&i| xs[i]).collect();
    let sy: Vec<T> = idx.iter().map(|&i| ys[i]).collect();
    let k = ((span * n as f64).ceil() as usize).clamp(2.min(n), n);
    let mut out = vec![T::zero(); n];
    let mut left = 0;
    for (pos, &x0) in sx.iter().enumerate() {
        // slide a k-wide window to the nearest neighbours of x0
        while left + k < n && x0 - sx[left] > sx[left + k] - x0 {
            left += 1;
        }
        let win = left..left + k;
        let h = (x0 - sx[left]).max(sx[left + k - 1] - x0) * T::lit(1.0 + 1e-10);
        let (mut sw, mut swx, mut swy, mut swxx, mut swxy) =
            (T::zero(), T::zero(), T::zero(), T::zero(), T::zero());
        for j in win {
            let w = if h > T::zero() {
                let u = ((sx[j] - x0) / h).abs();
                let t = T::one() - u * u * u;
                if t > T::zero() { t * t * t } else { T::zero() }
            } else {
                T::one()
            };
            let dx = sx[j] - x0;
            sw += w;
            swx += w * dx;
            swy += w * sy[j];
            swxx += w * dx * dx;
            swxy += w * dx * sy[j];
        }
        let det = sw * swxx - swx * swx;
        let fit = if det.abs() > T::epsilon() * sw * swxx.max(T::min_positive_value()) {
            (swxx * swy - swx * swxy) / det
        } else {
            swy / sw
        };
        out[idx[pos]] = fit;
    }
    out
}

/// Unscaled MAD of residuals from a loess pilot fit.
pub fn robust_scale<T: Scalar>(xs: &[T], ys: &[T], span: f64) -> T {
    let pilot = loess_pilot(xs, ys, span);
    let r: Vec<T> = ys.iter().zip(&pilot).map(|(&y, &f)| y - f).collect();
    mad(&r)
}

fn gaussian_noise<T: Scalar>(n: usize, scale: T, rng: &mut ChaCha8Rng) -> Vec<T> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::lit(z) * scale
        })
        .collect()
}

fn rms<T: Scalar>(v: &[T]) -> T {
    (v.iter().map(|&e| e * e).sum::<T>() / T::from_usize_lossy(v.len())).sqrt()
}

/// Overfit score: fit the smooth-labelled points twice, once as given and
/// once with `N(0, sigma_tau^2)` noise added, and return the RMS difference
/// of the two curves over [`OVERFIT_GRID`] equispaced points.
#[allow(clippy::too_many_arguments)]
pub fn overfit_score<T: Scalar>(
    basis: &SplineBasis<T>,
    xs: &[T],
    ys: &[T],
    labels: &[bool],
    lambda: T,
    sigma_tau: T,
    seed: u64,
) -> Result<T, PipelineError> {
    let mask: Vec<bool> = labels.iter().map(|&l| !l).collect();
    let design = basis.design(xs)?;
    let sys = PenalizedSystem::new(&design, &basis.penalty, lambda, &mask)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tau = gaussian_noise(xs.len(), sigma_tau.max(T::lit(SIGMA_TAU_FLOOR)), &mut rng);
    let perturbed: Vec<T> = ys.iter().zip(&tau).map(|(&y, &t)| y + t).collect();
    let grid = basis.grid(OVERFIT_GRID);
    let a = basis.predict(&sys.solve(&design, ys)?, &grid)?;
    let b = basis.predict(&sys.solve(&design, &perturbed)?, &grid)?;
    let d: Vec<T> = a.iter().zip(&b).map(|(&u, &v)| u - v).collect();
    Ok(rms(&d))
}

struct Prepared<T> {
    basis: SplineBasis<T>,
    design: DesignMatrix<T>,
    grid_design: DesignMatrix<T>,
}

fn check_inputs<T: Scalar>(xs: &[T], ys: &[T]) -> Result<(), PipelineError> {
    if xs.len() != ys.len() {
        return Err(PipelineError::LengthMismatch {
            x: xs.len(),
            y: ys.len(),
        });
    }
    if xs.len() < MIN_OBSERVATIONS {
        return Err(PipelineError::TooFewObservations {
            min: MIN_OBSERVATIONS,
            found: xs.len(),
        });
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(PipelineError::NonFinite);
    }
    Ok(())
}

fn prepare<T: Scalar>(xs: &[T], cfg: &PipelineConfig) -> Result<Prepared<T>, PipelineError> {
    let basis = SplineBasis::for_data(
        xs,
        cfg.interior_knots_for(xs.len()),
        cfg.spline_order,
        cfg.penalty_order,
    )?;
    let design = basis.design(xs)?;
    let grid_design = basis.design(&basis.grid(OVERFIT_GRID))?;
    Ok(Prepared {
        basis,
        design,
        grid_design,
    })
}

fn lambda_row<T: Scalar>(
    prep: &Prepared<T>,
    ys: &[T],
    lambda: T,
    sigma_tau: T,
    rng: &mut ChaCha8Rng,
    cfg: &PipelineConfig,
) -> Result<LambdaRow<T>, PipelineError> {
    let n = ys.len();
    let penalty = &prep.basis.penalty;
    let all = vec![true; n];

    let plain = PenalizedSystem::new(&prep.design, penalty, lambda, &all)?.fit(&prep.design, ys)?;
    let xi: Vec<T> = ys.iter().zip(&plain.fitted).map(|(&y, &f)| y - f).collect();

    let initial = magnitude_classify(
        &xi,
        cfg.max_spike_fraction,
        cfg.initial_classifier,
        cfg.separation_mads,
    );
    let mask: Vec<bool> = initial.iter().map(|&l| !l).collect();
    let sys = PenalizedSystem::new(&prep.design, penalty, lambda, &mask)?;
    let coef = sys.solve(&prep.design, ys)?;
    let fitted = prep.design.apply(&coef);
    let xi2: Vec<T> = ys.iter().zip(&fitted).map(|(&y, &f)| y - f).collect();

    // the smoother is linear, so the curve moves by the fit to the noise alone
    let tau = gaussian_noise(n, sigma_tau.max(T::lit(SIGMA_TAU_FLOOR)), rng);
    let moved = prep.grid_design.apply(&sys.solve(&prep.design, &tau)?);
    let overfit = rms(&moved);

    let has_spikes = initial.iter().any(|&l| l);
    let (params, resp, labels, threshold, iters, collapsed) = if has_spikes {
        let init = init_from_labels(&xi2, &initial, cfg.variant)?;
        let em = run_em(
            &xi2,
            &init,
            EmOptions {
                tol: cfg.em_tol,
                max_iter: cfg.em_max_iter,
            },
        )?;
        let cands: Vec<T> = cfg.thresholds.iter().map(|&t| T::lit(t)).collect();
        let choice = select_threshold(
            &xi2,
            &em.responsibilities,
            cfg.variant,
            &cands,
            cfg.threshold_likelihood,
        )?;
        let threshold = (!choice.no_spikes).then_some(choice.threshold);
        (em.params, em.responsibilities, choice.labels, threshold, em.iterations, em.collapsed)
    } else {
        let p = no_spike_params(&xi2, cfg.variant);
        let resp = responsibilities(&xi2, &p);
        (p, resp, vec![false; n], None, 0, false)
    };
    let ll = loglik(&xi2, &params)?;
    Ok(LambdaRow {
        lambda,
        loglik: ll,
        overfit,
        criterion: cfg.criterion(ll, overfit),
        initial_labels: initial,
        labels,
        params,
        responsibilities: resp,
        threshold,
        em_iterations: iters,
        collapsed,
    })
}

/// Runs the full procedure. Deterministic for a fixed
/// `cfg.perturbation_seed`, independent of the thread count.
pub fn run_smoothem<T: Scalar>(
    xs: &[T],
    ys: &[T],
    cfg: &PipelineConfig,
) -> Result<PipelineResult<T>, PipelineError> {
    cfg.validate()?;
    check_inputs(xs, ys)?;
    let prep = prepare(xs, cfg)?;
    let sigma_tau = robust_scale(xs, ys, cfg.loess_span);

    let rows: Vec<LambdaRow<T>> = cfg
        .lambda_grid
        .par_iter()
        .enumerate()
        .map(|(_, &lam)| {
            // every λ sees the same perturbation, so F differences reflect λ
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.perturbation_seed);
            lambda_row(&prep, ys, T::lit(lam), sigma_tau, &mut rng, cfg)
        })
        .collect::<Result<_, _>>()?;

    // ties go to the larger λ
    let mut star = None::<usize>;
    for (i, row) in rows.iter().enumerate() {
        if row.criterion.is_nan() {
            continue;
        }
        star = Some(match star {
            None => i,
            Some(b) => {
                let best = &rows[b];
                if row.criterion > best.criterion
                    || (row.criterion == best.criterion && row.lambda > best.lambda)
                {
                    i
                } else {
                    b
                }
            }
        });
    }
    let star = star.ok_or(PipelineError::Smooth(SmoothError::NonFinite))?;
    let best = &rows[star];
    let mask: Vec<bool> = best.labels.iter().map(|&l| !l).collect();
    let fit = PenalizedSystem::new(&prep.design, &prep.basis.penalty, best.lambda, &mask)?
        .fit(&prep.design, ys)?;

    Ok(PipelineResult {
        lambda_star: best.lambda,
        params: best.params,
        labels: best.labels.clone(),
        posterior: best.responsibilities.clone(),
        fit,
        flags: PipelineFlags {
            no_spikes_found: !best.labels.iter().any(|&l| l),
            collapse_events: rows.iter().filter(|r| r.collapsed).count(),
        },
        per_lambda: rows,
        sigma_tau,
        basis: prep.basis,
    })
}

/// Plain smoothing with λ chosen by generalized cross-validation over the
/// configured grid. Ties go to the larger λ.
pub fn gcv_baseline<T: Scalar>(
    xs: &[T],
    ys: &[T],
    cfg: &PipelineConfig,
) -> Result<(T, SmoothFit<T>, SplineBasis<T>), PipelineError> {
    cfg.validate()?;
    check_inputs(xs, ys)?;
    let prep = prepare(xs, cfg)?;
    let mut best: Option<(T, T)> = None;
    for &lam in &cfg.lambda_grid {
        let lam = T::lit(lam);
        let score = crate::smoother::gcv(&prep.design, ys, lam, &prep.basis.penalty)?;
        let better = match best {
            None => true,
            Some((bl, bs)) => score < bs || (score == bs && lam > bl),
        };
        if better {
            best = Some((lam, score));
        }
    }
    let (lam, _) = best.expect("grid is nonempty");
    let fit = PenalizedSystem::new(&prep.design, &prep.basis.penalty, lam, &vec![true; xs.len()])?
        .fit(&prep.design, ys)?;
    Ok((lam, fit, prep.basis))
}
