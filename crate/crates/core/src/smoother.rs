//! Penalized least-squares spline smoothing with an observation mask.
//!
//! Minimizes `(1/n_used) Σ_inc (y_i - N(x_i)'a)^2 + λ a'Pa` over the included
//! observations. The normal matrix `H = N_inc'N_inc / n_used + λP` is banded
//! and solved by banded Cholesky. The linear algebra runs in double precision
//! for every scalar type: `λP` can exceed the data term by more than single
//! precision resolves.

use std::marker::PhantomData;

use thiserror::Error;

use crate::banded::{BandedCholesky, BandedSym};
use crate::bspline::{DesignMatrix, KnotVector, PenaltyMatrix, SplineError};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SmoothError {
    #[error("length mismatch: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("penalty is {penalty}x{penalty} but the design has {basis} columns")]
    PenaltyDimension { penalty: usize, basis: usize },
    #[error("mask selects no observations")]
    EmptyMask,
    #[error("smoothing parameter must be finite and nonnegative, got {0}")]
    InvalidLambda(f64),
    #[error("response contains non-finite values")]
    NonFinite,
    #[error("penalized normal equations are singular even after diagonal jitter")]
    Singular,
    #[error("degenerate smoother: trace of hat matrix {trace} >= n = {n}")]
    DegenerateSmoother { trace: f64, n: usize },
    #[error(transparent)]
    Spline(#[from] SplineError),
}

/// Result of one penalized fit.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothFit<T> {
    pub coefficients: Vec<T>,
    pub lambda: T,
    pub included: Vec<bool>,
    /// `N(x_i)'a` for every observation, masked or not.
    pub fitted: Vec<T>,
    pub n_used: usize,
}

impl<T: Scalar> SmoothFit<T> {
    /// Roughness `a'Pa` of the fitted coefficients.
    pub fn roughness(&self, penalty: &PenaltyMatrix<T>) -> T {
        penalty.quad_form(&self.coefficients)
    }
}

const REFINE_STEPS: usize = 8;

/// Factorized `H` for a fixed design, penalty, λ and mask. Reusable for any
/// number of right-hand sides.
#[derive(Debug, Clone)]
pub struct PenalizedSystem<T> {
    chol: BandedCholesky<f64>,
    gram: BandedSym<f64>,
    penalty: PenaltyMatrix<f64>,
    lambda: f64,
    included: Vec<bool>,
    n_used: usize,
    scalar: PhantomData<T>,
}

fn validate<T: Scalar>(
    design: &DesignMatrix<T>,
    penalty: &PenaltyMatrix<T>,
    lambda: T,
    mask: &[bool],
) -> Result<usize, SmoothError> {
    if penalty.dim() != design.ncols() {
        return Err(SmoothError::PenaltyDimension {
            penalty: penalty.dim(),
            basis: design.ncols(),
        });
    }
    if mask.len() != design.nrows() {
        return Err(SmoothError::LengthMismatch {
            expected: design.nrows(),
            found: mask.len(),
        });
    }
    if !(lambda.is_finite() && lambda >= T::zero()) {
        return Err(SmoothError::InvalidLambda(lambda.as_f64()));
    }
    let n_used = mask.iter().filter(|&&b| b).count();
    if n_used == 0 {
        return Err(SmoothError::EmptyMask);
    }
    Ok(n_used)
}

impl<T: Scalar> PenalizedSystem<T> {
    pub fn new(
        design: &DesignMatrix<T>,
        penalty: &PenaltyMatrix<T>,
        lambda: T,
        mask: &[bool],
    ) -> Result<Self, SmoothError> {
        let n_used = validate(design, penalty, lambda, mask)?;
        let k = design.ncols();
        let width = design.width();
        let inv_n = 1.0 / n_used as f64;
        let lambda = lambda.as_f64();
        let penalty = penalty.to_f64();

        let mut gram = BandedSym::zeros(k, width - 1);
        for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            let (first, vals) = design.row(i);
            for a in 0..width {
                for b in 0..=a {
                    gram.add(first + a, first + b, vals[a].as_f64() * vals[b].as_f64() * inv_n);
                }
            }
        }

        let bw = (width - 1).max(penalty.bandwidth());
        let mut h = BandedSym::zeros(k, bw);
        for i in 0..k {
            let lo = i.saturating_sub(width - 1);
            for j in lo..=i {
                h.add(i, j, gram.get(i, j));
            }
        }
        if lambda > 0.0 {
            let p = penalty.matrix();
            for i in 0..k {
                let lo = i.saturating_sub(penalty.bandwidth());
                for j in lo..=i {
                    h.add(i, j, lambda * p[[i, j]]);
                }
            }
        }

        // Escalating diagonal jitter when the factorization breaks down. The
        // refinement in `solve_rhs` uses the unjittered operator, so the
        // shift only slows convergence, it does not bias the answer.
        let mean_diag = h.trace() / k as f64;
        let mut chol = h.cholesky().ok();
        let mut rel = 1e-10;
        while chol.is_none() && rel <= 1.0 {
            let mut shifted = h.clone();
            shifted.add_diagonal(rel * mean_diag);
            chol = shifted.cholesky().ok();
            rel *= 100.0;
        }
        let chol = chol.ok_or(SmoothError::Singular)?;
        Ok(Self {
            chol,
            gram,
            penalty,
            lambda,
            included: mask.to_vec(),
            n_used,
            scalar: PhantomData,
        })
    }

    pub fn n_used(&self) -> usize {
        self.n_used
    }

    /// Coefficients `H^{-1} N_inc'y_inc / n_used`.
    pub fn solve(&self, design: &DesignMatrix<T>, y: &[T]) -> Result<Vec<T>, SmoothError> {
        if y.len() != design.nrows() {
            return Err(SmoothError::LengthMismatch {
                expected: design.nrows(),
                found: y.len(),
            });
        }
        let inv_n = 1.0 / self.n_used as f64;
        let mut rhs = vec![0.0; design.ncols()];
        for (i, &yi) in y.iter().enumerate() {
            if !self.included[i] {
                continue;
            }
            if !yi.is_finite() {
                return Err(SmoothError::NonFinite);
            }
            let (first, vals) = design.row(i);
            for (k, &v) in vals.iter().enumerate() {
                rhs[first + k] += v.as_f64() * yi.as_f64() * inv_n;
            }
        }
        Ok(self.solve_rhs(&rhs).into_iter().map(T::lit).collect())
    }

    /// `H^{-1} b` with iterative refinement. The residual uses the factored
    /// penalty, which keeps the polynomial null space exact when `λP`
    /// dwarfs the data term.
    fn solve_rhs(&self, b: &[f64]) -> Vec<f64> {
        let mut x = self.chol.solve(b);
        let norm = |v: &[f64]| v.iter().fold(0.0f64, |m, &e| m.max(e.abs()));
        let mut prev = f64::INFINITY;
        for _ in 0..REFINE_STEPS {
            let gx = self.gram.mul_vec(&x);
            let px = if self.lambda > 0.0 {
                self.penalty.apply(&x)
            } else {
                vec![0.0; x.len()]
            };
            let r: Vec<f64> = b
                .iter()
                .zip(gx.iter().zip(&px))
                .map(|(&bi, (&g, &p))| bi - g - self.lambda * p)
                .collect();
            let rn = norm(&r);
            if !(rn < prev) || rn == 0.0 {
                break;
            }
            prev = rn;
            let dx = self.chol.solve(&r);
            x.iter_mut().zip(&dx).for_each(|(xi, &d)| *xi += d);
        }
        x
    }

    pub fn fit(&self, design: &DesignMatrix<T>, y: &[T]) -> Result<SmoothFit<T>, SmoothError> {
        let coefficients = self.solve(design, y)?;
        let fitted = design.apply(&coefficients);
        Ok(SmoothFit {
            coefficients,
            lambda: T::lit(self.lambda),
            included: self.included.clone(),
            fitted,
            n_used: self.n_used,
        })
    }

    /// Trace of the hat matrix restricted to included rows,
    /// `tr(H^{-1} N_inc'N_inc / n_used)`.
    pub fn hat_trace(&self) -> T {
        let k = self.gram.dim();
        let bw = self.gram.bandwidth();
        let mut col = vec![0.0; k];
        let mut acc = 0.0;
        for j in 0..k {
            col.iter_mut().for_each(|c| *c = 0.0);
            for (i, c) in col
                .iter_mut()
                .enumerate()
                .take((j + bw).min(k - 1) + 1)
                .skip(j.saturating_sub(bw))
            {
                *c = self.gram.get(i, j);
            }
            acc += self.solve_rhs(&col)[j];
        }
        T::lit(acc)
    }
}

/// Minimizer of the penalized criterion over the observations with `mask[i]`.
pub fn fit<T: Scalar>(
    design: &DesignMatrix<T>,
    y: &[T],
    lambda: T,
    penalty: &PenaltyMatrix<T>,
    mask: &[bool],
) -> Result<SmoothFit<T>, SmoothError> {
    PenalizedSystem::new(design, penalty, lambda, mask)?.fit(design, y)
}

pub fn predict<T: Scalar>(
    fit: &SmoothFit<T>,
    kv: &KnotVector<T>,
    xs: &[T],
) -> Result<Vec<T>, SmoothError> {
    xs.iter()
        .map(|&x| kv.eval_spline(&fit.coefficients, x).map_err(SmoothError::from))
        .collect()
}

/// `y_i - fitted_i` for every observation, including masked ones.
pub fn residuals<T: Scalar>(fit: &SmoothFit<T>, y: &[T]) -> Result<Vec<T>, SmoothError> {
    if y.len() != fit.fitted.len() {
        return Err(SmoothError::LengthMismatch {
            expected: fit.fitted.len(),
            found: y.len(),
        });
    }
    Ok(y.iter().zip(&fit.fitted).map(|(&y, &f)| y - f).collect())
}

/// Hat-matrix trace of the unmasked smoother at `lambda`.
pub fn hat_trace<T: Scalar>(
    design: &DesignMatrix<T>,
    lambda: T,
    penalty: &PenaltyMatrix<T>,
) -> Result<T, SmoothError> {
    let mask = vec![true; design.nrows()];
    Ok(PenalizedSystem::new(design, penalty, lambda, &mask)?.hat_trace())
}

/// Generalized cross-validation score `n RSS / (n - tr S)^2` of the unmasked
/// fit.
pub fn gcv<T: Scalar>(
    design: &DesignMatrix<T>,
    y: &[T],
    lambda: T,
    penalty: &PenaltyMatrix<T>,
) -> Result<T, SmoothError> {
    let n = design.nrows();
    let mask = vec![true; n];
    let sys = PenalizedSystem::new(design, penalty, lambda, &mask)?;
    let fit = sys.fit(design, y)?;
    let rss: T = y
        .iter()
        .zip(&fit.fitted)
        .map(|(&y, &f)| (y - f) * (y - f))
        .sum();
    let tr = sys.hat_trace();
    let nf = T::from_usize_lossy(n);
    if tr >= nf {
        return Err(SmoothError::DegenerateSmoother {
            trace: tr.as_f64(),
            n,
        });
    }
    Ok(nf * rss / ((nf - tr) * (nf - tr)))
}
