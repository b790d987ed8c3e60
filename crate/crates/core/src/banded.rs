//! Symmetric banded matrices and their Cholesky factorization.

use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Error)]
#[error("matrix is not positive definite (pivot {pivot} = {value})")]
pub struct NotPositiveDefinite {
    pub pivot: usize,
    pub value: f64,
}

/// Lower band of a symmetric `n x n` matrix with half-bandwidth `bw`.
#[derive(Debug, Clone, PartialEq)]
pub struct BandedSym<T> {
    n: usize,
    bw: usize,
    // row-major; row i holds columns i-bw ..= i
    data: Vec<T>,
}

impl<T: Scalar> BandedSym<T> {
    pub fn zeros(n: usize, bw: usize) -> Self {
        Self {
            n,
            bw,
            data: vec![T::zero(); n * (bw + 1)],
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn bandwidth(&self) -> usize {
        self.bw
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> Option<usize> {
        let (i, j) = if j > i { (j, i) } else { (i, j) };
        if i - j > self.bw {
            None
        } else {
            Some(i * (self.bw + 1) + self.bw - (i - j))
        }
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.idx(i, j).map_or(T::zero(), |k| self.data[k])
    }

    /// Adds `v` to entries `(i, j)` and `(j, i)`. Panics outside the band.
    pub fn add(&mut self, i: usize, j: usize, v: T) {
        let k = self.idx(i, j).expect("entry outside band");
        self.data[k] += v;
    }

    pub fn trace(&self) -> T {
        (0..self.n).map(|i| self.get(i, i)).sum()
    }

    pub fn add_diagonal(&mut self, v: T) {
        for i in 0..self.n {
            self.add(i, i, v);
        }
    }

    pub fn mul_vec(&self, x: &[T]) -> Vec<T> {
        let mut y = vec![T::zero(); self.n];
        for i in 0..self.n {
            let lo = i.saturating_sub(self.bw);
            for j in lo..=i {
                let v = self.get(i, j);
                y[i] += v * x[j];
                if j != i {
                    y[j] += v * x[i];
                }
            }
        }
        y
    }

    pub fn cholesky(&self) -> Result<BandedCholesky<T>, NotPositiveDefinite> {
        let (n, bw) = (self.n, self.bw);
        let mut l = self.clone();
        for j in 0..n {
            let lo = j.saturating_sub(bw);
            let mut d = l.get(j, j);
            for k in lo..j {
                let v = l.get(j, k);
                d -= v * v;
            }
            if !(d > T::zero()) || !d.is_finite() {
                return Err(NotPositiveDefinite {
                    pivot: j,
                    value: d.as_f64(),
                });
            }
            let d = d.sqrt();
            let kjj = l.idx(j, j).unwrap();
            l.data[kjj] = d;
            let hi = (j + bw).min(n - 1);
            for i in (j + 1)..=hi {
                let lo_i = i.saturating_sub(bw).max(lo);
                let mut s = l.get(i, j);
                for k in lo_i..j {
                    s -= l.get(i, k) * l.get(j, k);
                }
                let kij = l.idx(i, j).unwrap();
                l.data[kij] = s / d;
            }
        }
        Ok(BandedCholesky { l })
    }
}

/// `A = L L'` with `L` lower banded.
#[derive(Debug, Clone)]
pub struct BandedCholesky<T> {
    l: BandedSym<T>,
}

impl<T: Scalar> BandedCholesky<T> {
    pub fn dim(&self) -> usize {
        self.l.n
    }

    pub fn solve(&self, b: &[T]) -> Vec<T> {
        let (n, bw) = (self.l.n, self.l.bw);
        let mut y = b.to_vec();
        for i in 0..n {
            let lo = i.saturating_sub(bw);
            let mut s = y[i];
            for k in lo..i {
                s -= self.l.get(i, k) * y[k];
            }
            y[i] = s / self.l.get(i, i);
        }
        for i in (0..n).rev() {
            let hi = (i + bw).min(n - 1);
            let mut s = y[i];
            for k in (i + 1)..=hi {
                s -= self.l.get(k, i) * y[k];
            }
            y[i] = s / self.l.get(i, i);
        }
        y
    }

    /// `tr(A^{-1} B)` for a symmetric banded `B`.
    pub fn trace_inv_times(&self, b: &BandedSym<T>) -> T {
        let n = self.dim();
        let mut acc = T::zero();
        let mut col = vec![T::zero(); n];
        for j in 0..n {
            // column j of B
            col.iter_mut().for_each(|c| *c = T::zero());
            let lo = j.saturating_sub(b.bw);
            let hi = (j + b.bw).min(n - 1);
            for (i, c) in col.iter_mut().enumerate().take(hi + 1).skip(lo) {
                *c = b.get(i, j);
            }
            let x = self.solve(&col);
            acc += x[j];
        }
        acc
    }
}
