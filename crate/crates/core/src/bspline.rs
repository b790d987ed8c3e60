//! Clamped B-spline bases, weighted difference operators and the derivative
//! penalty `P_q = D_q' G D_q`.
//!
//! Knots are stored in domain coordinates. A basis of order `m` (degree
//! `m - 1`) over `K0` interior knots has `K = K0 + m` functions; the boundary
//! knots are repeated `m` times.

use ndarray::Array2;
use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SplineError {
    #[error("invalid domain [{lo}, {hi}]: bounds must be finite with lo < hi")]
    InvalidDomain { lo: f64, hi: f64 },
    #[error("spline order must be at least 1")]
    InvalidOrder,
    #[error("interior knots must be finite, strictly increasing and strictly inside the domain")]
    InvalidKnots,
    #[error("x = {x} lies outside the domain [{lo}, {hi}]")]
    OutOfDomain { x: f64, lo: f64, hi: f64 },
    #[error("derivative order q = {q} must satisfy 1 <= q < m = {m}")]
    InvalidDerivativeOrder { q: usize, m: usize },
    #[error("coefficient vector has length {found}, basis has {expected} functions")]
    CoefficientLength { expected: usize, found: usize },
}

/// Clamped knot sequence of a B-spline space of order `m`.
#[derive(Debug, Clone, PartialEq)]
pub struct KnotVector<T> {
    order: usize,
    lo: T,
    hi: T,
    interior: Vec<T>,
    knots: Vec<T>,
}

impl<T: Scalar> KnotVector<T> {
    /// Clamped knot vector over `domain` with the given interior knots.
    pub fn clamped(domain: (T, T), interior: Vec<T>, order: usize) -> Result<Self, SplineError> {
        let (lo, hi) = domain;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(SplineError::InvalidDomain {
                lo: lo.as_f64(),
                hi: hi.as_f64(),
            });
        }
        if order == 0 {
            return Err(SplineError::InvalidOrder);
        }
        let inside = interior.iter().all(|&t| t.is_finite() && t > lo && t < hi);
        let increasing = interior.windows(2).all(|w| w[0] < w[1]);
        if !inside || !increasing {
            return Err(SplineError::InvalidKnots);
        }
        let mut knots = Vec::with_capacity(interior.len() + 2 * order);
        knots.extend(std::iter::repeat_n(lo, order));
        knots.extend_from_slice(&interior);
        knots.extend(std::iter::repeat_n(hi, order));
        Ok(Self {
            order,
            lo,
            hi,
            interior,
            knots,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// Number of basis functions, `K0 + m`.
    pub fn dim(&self) -> usize {
        self.interior.len() + self.order
    }

    pub fn domain(&self) -> (T, T) {
        (self.lo, self.hi)
    }

    pub fn interior(&self) -> &[T] {
        &self.interior
    }

    /// Full knot sequence including the repeated boundary knots.
    pub fn knots(&self) -> &[T] {
        &self.knots
    }

    /// Same interior knots, order lowered by `by`. This is the space the
    /// `by`-th derivative lives in.
    pub fn reduced(&self, by: usize) -> Result<Self, SplineError> {
        if by >= self.order {
            return Err(SplineError::InvalidDerivativeOrder {
                q: by,
                m: self.order,
            });
        }
        Self::clamped((self.lo, self.hi), self.interior.clone(), self.order - by)
    }

    pub fn contains(&self, x: T) -> bool {
        x >= self.lo && x <= self.hi
    }

    fn check(&self, x: T) -> Result<(), SplineError> {
        if self.contains(x) {
            Ok(())
        } else {
            Err(SplineError::OutOfDomain {
                x: x.as_f64(),
                lo: self.lo.as_f64(),
                hi: self.hi.as_f64(),
            })
        }
    }

    /// Index `s` of the knot span `[t_s, t_{s+1})` holding `x`; the last span
    /// is closed on the right.
    fn span(&self, x: T) -> usize {
        let p = self.order - 1;
        let last = self.dim() - 1;
        if x >= self.knots[last + 1] {
            return last;
        }
        // largest s in [p, last] with knots[s] <= x
        let (mut lo, mut hi) = (p, last + 1);
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if self.knots[mid] <= x {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    }

    /// Nonzero basis values at `x` by the de Boor–Cox recursion. Returns the
    /// index of the first nonzero function and `m` values.
    pub fn eval_local(&self, x: T) -> Result<(usize, Vec<T>), SplineError> {
        self.check(x)?;
        let s = self.span(x);
        Ok((s + 1 - self.order, self.local_values(s, x)))
    }

    fn local_values(&self, s: usize, x: T) -> Vec<T> {
        let m = self.order;
        let t = &self.knots;
        let mut vals = vec![T::zero(); m];
        let mut left = vec![T::zero(); m];
        let mut right = vec![T::zero(); m];
        vals[0] = T::one();
        for j in 1..m {
            left[j] = x - t[s + 1 - j];
            right[j] = t[s + j] - x;
            let mut saved = T::zero();
            for r in 0..j {
                let denom = right[r + 1] + left[j - r];
                let temp = vals[r] / denom;
                vals[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            vals[j] = saved;
        }
        vals
    }

    /// Value of the spline with coefficients `coef` at `x`.
    pub fn eval_spline(&self, coef: &[T], x: T) -> Result<T, SplineError> {
        if coef.len() != self.dim() {
            return Err(SplineError::CoefficientLength {
                expected: self.dim(),
                found: coef.len(),
            });
        }
        let (first, vals) = self.eval_local(x)?;
        Ok(vals
            .iter()
            .zip(&coef[first..first + self.order])
            .map(|(&v, &c)| v * c)
            .sum())
    }
}

/// Clamped knots with `k0` equispaced interior knots.
pub fn make_knots<T: Scalar>(
    domain: (T, T),
    k0: usize,
    order: usize,
) -> Result<KnotVector<T>, SplineError> {
    let (lo, hi) = domain;
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(SplineError::InvalidDomain {
            lo: lo.as_f64(),
            hi: hi.as_f64(),
        });
    }
    let width = hi - lo;
    let denom = T::from_usize_lossy(k0 + 1);
    let interior = (1..=k0)
        .map(|j| lo + width * T::from_usize_lossy(j) / denom)
        .collect();
    KnotVector::clamped(domain, interior, order)
}

/// All `K` basis values at `x`.
pub fn eval_basis<T: Scalar>(kv: &KnotVector<T>, x: T) -> Result<Vec<T>, SplineError> {
    let (first, vals) = kv.eval_local(x)?;
    let mut out = vec![T::zero(); kv.dim()];
    out[first..first + kv.order()].copy_from_slice(&vals);
    Ok(out)
}

/// Design matrix in row-compressed form: each row holds exactly `m`
/// consecutive (possibly zero) entries starting at `first[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix<T> {
    ncols: usize,
    width: usize,
    first: Vec<usize>,
    values: Vec<T>,
}

impl<T: Scalar> DesignMatrix<T> {
    pub fn nrows(&self) -> usize {
        self.first.len()
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    /// Number of stored entries per row (the spline order).
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn row(&self, i: usize) -> (usize, &[T]) {
        (self.first[i], &self.values[i * self.width..(i + 1) * self.width])
    }

    pub fn row_dot(&self, i: usize, coef: &[T]) -> T {
        let (first, vals) = self.row(i);
        vals.iter()
            .zip(&coef[first..first + self.width])
            .map(|(&v, &c)| v * c)
            .sum()
    }

    /// `N a` for every row.
    pub fn apply(&self, coef: &[T]) -> Vec<T> {
        (0..self.nrows()).map(|i| self.row_dot(i, coef)).collect()
    }

    pub fn to_dense(&self) -> Array2<T> {
        let mut out = Array2::from_elem((self.nrows(), self.ncols), T::zero());
        for i in 0..self.nrows() {
            let (first, vals) = self.row(i);
            for (k, &v) in vals.iter().enumerate() {
                out[[i, first + k]] = v;
            }
        }
        out
    }
}

pub fn design_matrix<T: Scalar>(
    kv: &KnotVector<T>,
    xs: &[T],
) -> Result<DesignMatrix<T>, SplineError> {
    let width = kv.order();
    let mut first = Vec::with_capacity(xs.len());
    let mut values = Vec::with_capacity(xs.len() * width);
    for &x in xs {
        let (f, vals) = kv.eval_local(x)?;
        first.push(f);
        values.extend(vals);
    }
    Ok(DesignMatrix {
        ncols: kv.dim(),
        width,
        first,
        values,
    })
}

/// `W D_1`: maps order-`m` coefficients to the coefficients of the first
/// derivative in the order-`(m-1)` basis. Shape `(K-1) x K`.
fn weighted_first_difference<T: Scalar>(kv: &KnotVector<T>) -> Array2<T> {
    let k = kv.dim();
    let m = kv.order();
    let t = kv.knots();
    let scale = T::from_usize_lossy(m - 1);
    let mut d = Array2::from_elem((k - 1, k), T::zero());
    for j in 0..k - 1 {
        let w = scale / (t[j + m] - t[j + 1]);
        d[[j, j]] = -w;
        d[[j, j + 1]] = w;
    }
    d
}

fn matmul<T: Scalar>(a: &Array2<T>, b: &Array2<T>) -> Array2<T> {
    let (n, inner) = a.dim();
    let p = b.ncols();
    let mut out = Array2::from_elem((n, p), T::zero());
    for i in 0..n {
        for l in 0..inner {
            let ail = a[[i, l]];
            if ail == T::zero() {
                continue;
            }
            for j in 0..p {
                let blj = b[[l, j]];
                if blj != T::zero() {
                    out[[i, j]] += ail * blj;
                }
            }
        }
    }
    out
}

/// Weighted `q`-th order difference operator, shape `(K-q) x K`, built by the
/// recursion `D_{q} = D_{q-1}(reduced) * D_1`.
pub fn difference_operator<T: Scalar>(
    kv: &KnotVector<T>,
    q: usize,
) -> Result<Array2<T>, SplineError> {
    let m = kv.order();
    if q == 0 || q >= m {
        return Err(SplineError::InvalidDerivativeOrder { q, m });
    }
    let mut op = weighted_first_difference(kv);
    let mut cur = kv.reduced(1)?;
    for _ in 1..q {
        op = matmul(&weighted_first_difference(&cur), &op);
        cur = cur.reduced(1)?;
    }
    Ok(op)
}

/// Gauss–Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre<T: Scalar>(n: usize) -> (Vec<T>, Vec<T>) {
    if n == 1 {
        return (vec![T::zero()], vec![T::lit(2.0)]);
    }
    let mut nodes = vec![0.0f64; n];
    let mut weights = vec![0.0f64; n];
    for i in 0..n.div_ceil(2) {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * z * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (z * p1 - p0) / (z * z - 1.0);
            let dz = p1 / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        nodes[i] = -z;
        nodes[n - 1 - i] = z;
        let w = 2.0 / ((1.0 - z * z) * dp * dp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (
        nodes.into_iter().map(T::lit).collect(),
        weights.into_iter().map(T::lit).collect(),
    )
}

/// `G = ∫ N(x) N(x)' dx` over the domain, exact for the piecewise polynomial
/// integrand (per-span Gauss–Legendre with `m` nodes).
pub fn gram_matrix<T: Scalar>(kv: &KnotVector<T>) -> Array2<T> {
    let k = kv.dim();
    let m = kv.order();
    let t = kv.knots();
    let (nodes, weights) = gauss_legendre::<T>(m);
    let half = T::lit(0.5);
    let mut g = Array2::from_elem((k, k), T::zero());
    for s in (m - 1)..k {
        let (a, b) = (t[s], t[s + 1]);
        if b <= a {
            continue;
        }
        let mid = (a + b) * half;
        let rad = (b - a) * half;
        let first = s + 1 - m;
        for (&z, &w) in nodes.iter().zip(&weights) {
            let vals = kv.local_values(s, mid + rad * z);
            let wr = w * rad;
            for (i, &vi) in vals.iter().enumerate() {
                for (j, &vj) in vals.iter().enumerate() {
                    g[[first + i, first + j]] += wr * vi * vj;
                }
            }
        }
    }
    g
}

/// Roughness penalty with `a' P a = ∫ (f^(q))^2` for `f = Σ a_k N_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyMatrix<T> {
    q: usize,
    bw: usize,
    matrix: Array2<T>,
    order: usize,
    // factored form D'GD: first-difference weights per level, then G
    steps: Vec<Vec<T>>,
    inner: Array2<T>,
}

impl<T: Scalar> PenaltyMatrix<T> {
    pub fn derivative_order(&self) -> usize {
        self.q
    }

    pub fn matrix(&self) -> &Array2<T> {
        &self.matrix
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// `D a`, applied level by level so that polynomials of degree `< q`
    /// map to exactly zero.
    pub fn differences(&self, a: &[T]) -> Vec<T> {
        let mut v = a.to_vec();
        for w in &self.steps {
            v = w.iter().enumerate().map(|(j, &wj)| wj * (v[j + 1] - v[j])).collect();
        }
        v
    }

    fn differences_t(&self, mut v: Vec<T>) -> Vec<T> {
        for w in self.steps.iter().rev() {
            let mut out = vec![T::zero(); w.len() + 1];
            for (j, (&wj, &vj)) in w.iter().zip(&v).enumerate() {
                out[j] -= wj * vj;
                out[j + 1] += wj * vj;
            }
            v = out;
        }
        v
    }

    fn inner_apply(&self, d: &[T]) -> Vec<T> {
        let k = d.len();
        let bw = self.inner_bandwidth();
        (0..k)
            .map(|i| {
                let lo = i.saturating_sub(bw);
                let hi = (i + bw).min(k - 1);
                (lo..=hi).map(|j| self.inner[[i, j]] * d[j]).sum()
            })
            .collect()
    }

    fn inner_bandwidth(&self) -> usize {
        // G lives on the order m - q space
        self.order - self.q - 1
    }

    /// `a'Pa`, evaluated in factored form.
    pub fn quad_form(&self, a: &[T]) -> T {
        let d = self.differences(a);
        let gd = self.inner_apply(&d);
        d.iter().zip(&gd).map(|(&x, &y)| x * y).sum()
    }

    /// `P a`, evaluated in factored form.
    pub fn apply(&self, a: &[T]) -> Vec<T> {
        let d = self.differences(a);
        self.differences_t(self.inner_apply(&d))
    }

    /// Largest `|i - j|` with a nonzero entry.
    pub fn bandwidth(&self) -> usize {
        self.bw
    }

    /// The same penalty in double precision. For narrower types the dense
    /// matrix is rebuilt from the factors so that it carries no rounding from
    /// the narrow type.
    pub fn to_f64(&self) -> PenaltyMatrix<f64> {
        let mut out = PenaltyMatrix {
            q: self.q,
            bw: self.bw,
            matrix: self.matrix.mapv(|v| v.as_f64()),
            order: self.order,
            steps: self.steps.iter().map(|w| w.iter().map(|v| v.as_f64()).collect()).collect(),
            inner: self.inner.mapv(|v| v.as_f64()),
        };
        if T::epsilon().as_f64() <= f64::EPSILON {
            return out;
        }
        let k = self.dim();
        let mut e = vec![0.0; k];
        for j in 0..k {
            e[j] = 1.0;
            let col = out.apply(&e);
            e[j] = 0.0;
            for (i, v) in col.into_iter().enumerate() {
                out.matrix[[i, j]] = v;
            }
        }
        // exact symmetry
        for i in 0..k {
            for j in 0..i {
                let v = 0.5 * (out.matrix[[i, j]] + out.matrix[[j, i]]);
                out.matrix[[i, j]] = v;
                out.matrix[[j, i]] = v;
            }
        }
        out
    }
}

pub fn penalty_matrix<T: Scalar>(
    kv: &KnotVector<T>,
    q: usize,
) -> Result<PenaltyMatrix<T>, SplineError> {
    let d = difference_operator(kv, q)?;
    let g = gram_matrix(&kv.reduced(q)?);
    let gd = matmul(&g, &d);
    let dt = d.t().to_owned();
    let mut p = matmul(&dt, &gd);
    // exact symmetry
    let k = p.nrows();
    let half = T::lit(0.5);
    for i in 0..k {
        for j in (i + 1)..k {
            let v = (p[[i, j]] + p[[j, i]]) * half;
            p[[i, j]] = v;
            p[[j, i]] = v;
        }
    }
    let mut bw = 0;
    for i in 0..k {
        for j in i..k {
            if p[[i, j]] != T::zero() {
                bw = bw.max(j - i);
            }
        }
    }
    let mut steps = Vec::with_capacity(q);
    for level in 0..q {
        let cur = kv.reduced(level)?;
        let t = cur.knots();
        let mc = cur.order();
        let scale = T::from_usize_lossy(mc - 1);
        steps.push(
            (0..cur.dim() - 1)
                .map(|j| scale / (t[j + mc] - t[j + 1]))
                .collect(),
        );
    }
    Ok(PenaltyMatrix {
        q,
        bw,
        matrix: p,
        order: kv.order(),
        steps,
        inner: g,
    })
}
