//! Small dense linear algebra for the normal equations of low-dimensional
//! regressions (a handful of columns, many rows).

use crate::num::Real;

/// Row-major dense square matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Square<T> {
    dim: usize,
    data: Vec<T>,
}

impl<T: Real> Square<T> {
    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            data: vec![T::zero(); dim * dim],
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Self {
        let dim = rows.len();
        let mut m = Self::zeros(dim);
        for (i, row) in rows.iter().enumerate() {
            assert_eq!(row.len(), dim, "matrix must be square");
            for (j, &v) in row.iter().enumerate() {
                m[(i, j)] = v;
            }
        }
        m
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Adds `scale * v v'`.
    pub fn add_outer(&mut self, v: &[T], scale: T) {
        debug_assert_eq!(v.len(), self.dim);
        for i in 0..self.dim {
            let vi = v[i] * scale;
            for j in 0..self.dim {
                self.data[i * self.dim + j] += vi * v[j];
            }
        }
    }

    pub fn mul_vec(&self, v: &[T]) -> Vec<T> {
        (0..self.dim)
            .map(|i| (0..self.dim).map(|j| self[(i, j)] * v[j]).sum())
            .collect()
    }

    pub fn mul(&self, other: &Square<T>) -> Square<T> {
        let n = self.dim;
        let mut out = Square::zeros(n);
        for i in 0..n {
            for k in 0..n {
                let a = self[(i, k)];
                for j in 0..n {
                    out.data[i * n + j] += a * other[(k, j)];
                }
            }
        }
        out
    }

    /// `self * middle * self` for symmetric `self`, the sandwich form.
    pub fn sandwich(&self, middle: &Square<T>) -> Square<T> {
        self.mul(middle).mul(self)
    }

    pub fn scale(&mut self, s: T) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn diag(&self) -> Vec<T> {
        (0..self.dim).map(|i| self[(i, i)]).collect()
    }

    /// Lower Cholesky factor of a symmetric positive definite matrix.
    pub fn cholesky(&self) -> Option<Square<T>> {
        let n = self.dim;
        let mut l = Square::zeros(n);
        for j in 0..n {
            let mut d = self[(j, j)];
            for k in 0..j {
                d -= l[(j, k)] * l[(j, k)];
            }
            if !(d > T::zero()) || !d.is_finite() {
                return None;
            }
            let d = d.sqrt();
            l[(j, j)] = d;
            for i in (j + 1)..n {
                let mut s = self[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / d;
            }
        }
        Some(l)
    }

    /// Solves `self x = b` for symmetric positive definite `self`.
    pub fn solve_spd(&self, b: &[T]) -> Option<Vec<T>> {
        let l = self.cholesky()?;
        Some(l.cholesky_solve(b))
    }

    /// Inverse of a symmetric positive definite matrix.
    pub fn inverse_spd(&self) -> Option<Square<T>> {
        let l = self.cholesky()?;
        let n = self.dim;
        let mut inv = Square::zeros(n);
        let mut e = vec![T::zero(); n];
        for j in 0..n {
            e.iter_mut().for_each(|v| *v = T::zero());
            e[j] = T::one();
            let col = l.cholesky_solve(&e);
            for i in 0..n {
                inv[(i, j)] = col[i];
            }
        }
        // symmetrize away rounding asymmetry
        for i in 0..n {
            for j in (i + 1)..n {
                let avg = (inv[(i, j)] + inv[(j, i)]) * T::of(0.5);
                inv[(i, j)] = avg;
                inv[(j, i)] = avg;
            }
        }
        Some(inv)
    }

    fn cholesky_solve(&self, b: &[T]) -> Vec<T> {
        let n = self.dim;
        let mut y = vec![T::zero(); n];
        for i in 0..n {
            let mut s = b[i];
            for k in 0..i {
                s -= self[(i, k)] * y[k];
            }
            y[i] = s / self[(i, i)];
        }
        let mut x = vec![T::zero(); n];
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in (i + 1)..n {
                s -= self[(k, i)] * x[k];
            }
            x[i] = s / self[(i, i)];
        }
        x
    }

    /// Greedy column selection for a Gram matrix: walks the columns in order
    /// and keeps a column only if its squared norm after projecting out the
    /// already-kept columns exceeds `rel_tol` times its original squared norm.
    pub fn independent_columns(&self, rel_tol: T) -> Vec<usize> {
        let n = self.dim;
        let mut kept: Vec<usize> = Vec::new();
        for j in 0..n {
            let orig = self[(j, j)];
            if !(orig > T::zero()) {
                continue;
            }
            let mut trial = kept.clone();
            trial.push(j);
            let sub = self.submatrix(&trial);
            match sub.cholesky() {
                Some(l) => {
                    let last = l[(trial.len() - 1, trial.len() - 1)];
                    if last * last > rel_tol * orig {
                        kept.push(j);
                    }
                }
                None => continue,
            }
        }
        kept
    }

    pub fn submatrix(&self, idx: &[usize]) -> Square<T> {
        let mut m = Square::zeros(idx.len());
        for (a, &i) in idx.iter().enumerate() {
            for (b, &j) in idx.iter().enumerate() {
                m[(a, b)] = self[(i, j)];
            }
        }
        m
    }

    /// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, ascending.
    pub fn symmetric_eigenvalues(&self) -> Vec<T> {
        let n = self.dim;
        let mut a = self.clone();
        let eps = T::epsilon();
        for _sweep in 0..100 {
            let mut off = T::zero();
            for i in 0..n {
                for j in (i + 1)..n {
                    off += a[(i, j)] * a[(i, j)];
                }
            }
            if off.sqrt() <= eps * a.frobenius() {
                break;
            }
            for p in 0..n {
                for q in (p + 1)..n {
                    let apq = a[(p, q)];
                    if apq == T::zero() {
                        continue;
                    }
                    let theta = (a[(q, q)] - a[(p, p)]) / (T::of(2.0) * apq);
                    let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                    let c = T::one() / (t * t + T::one()).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let akp = a[(k, p)];
                        let akq = a[(k, q)];
                        a[(k, p)] = c * akp - s * akq;
                        a[(k, q)] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let apk = a[(p, k)];
                        let aqk = a[(q, k)];
                        a[(p, k)] = c * apk - s * aqk;
                        a[(q, k)] = s * apk + c * aqk;
                    }
                }
            }
        }
        let mut ev = a.diag();
        ev.sort_by(|x, y| x.partial_cmp(y).unwrap_or(std::cmp::Ordering::Equal));
        ev
    }

    fn frobenius(&self) -> T {
        self.data.iter().map(|&v| v * v).sum::<T>().sqrt()
    }
}

impl<T> std::ops::Index<(usize, usize)> for Square<T> {
    type Output = T;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &T {
        &self.data[i * self.dim + j]
    }
}

impl<T> std::ops::IndexMut<(usize, usize)> for Square<T> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        &mut self.data[i * self.dim + j]
    }
}
