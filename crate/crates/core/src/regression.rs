//! Weighted least squares with heteroskedasticity-robust (HC1) and
//! cluster-robust covariance.
//!
//! The design always carries an intercept as coefficient 0; `columns` holds
//! the remaining regressors. Weights are analytic weights: rescaling them by
//! a constant leaves coefficients, R² and robust covariances unchanged.
//! Cluster-robust covariance uses the small-sample factor
//! `G/(G−1) · (n−1)/(n−k)`; otherwise HC1 scales the White sandwich by
//! `n/(n−k)`.

use serde::Serialize;

use crate::error::{MobilabError, Result};
use crate::linalg::Square;
use crate::num::Real;

#[derive(Debug, Clone)]
pub struct LinearFit<T> {
    /// Intercept first, then one entry per column.
    pub coef: Vec<T>,
    pub cov: Square<T>,
    pub se: Vec<T>,
    pub residuals: Vec<T>,
    pub r2: T,
    pub adj_r2: T,
    pub n: usize,
    /// Ratio of the largest to smallest eigenvalue of the weighted design
    /// cross-product after scaling to unit diagonal.
    pub condition_number: T,
}

impl<T: Real> LinearFit<T> {
    pub fn k(&self) -> usize {
        self.coef.len()
    }

    pub fn t_stats(&self) -> Vec<T> {
        self.coef
            .iter()
            .zip(&self.se)
            .map(|(&b, &s)| {
                if s > T::zero() {
                    b / s
                } else {
                    T::infinity() * b.signum()
                }
            })
            .collect()
    }
}

pub struct Wls<'a, T> {
    y: &'a [T],
    columns: Vec<&'a [T]>,
    weights: Option<&'a [T]>,
    clusters: Option<&'a [u32]>,
}

impl<'a, T: Real> Wls<'a, T> {
    pub fn new(y: &'a [T]) -> Self {
        Self {
            y,
            columns: Vec::new(),
            weights: None,
            clusters: None,
        }
    }

    pub fn column(mut self, x: &'a [T]) -> Self {
        self.columns.push(x);
        self
    }

    pub fn columns(mut self, xs: impl IntoIterator<Item = &'a [T]>) -> Self {
        self.columns.extend(xs);
        self
    }

    pub fn weights(mut self, w: Option<&'a [T]>) -> Self {
        self.weights = w;
        self
    }

    pub fn clusters(mut self, c: Option<&'a [u32]>) -> Self {
        self.clusters = c;
        self
    }

    fn row(&self, i: usize, buf: &mut [T]) {
        buf[0] = T::one();
        for (j, col) in self.columns.iter().enumerate() {
            buf[j + 1] = col[i];
        }
    }

    #[inline]
    fn w(&self, i: usize) -> T {
        self.weights.map_or(T::one(), |w| w[i])
    }

    pub fn fit(&self) -> Result<LinearFit<T>> {
        let n = self.y.len();
        let k = self.columns.len() + 1;
        for c in &self.columns {
            if c.len() != n {
                return Err(MobilabError::Spec("regressor length mismatch".into()));
            }
        }
        if let Some(w) = self.weights {
            if w.len() != n {
                return Err(MobilabError::Spec("weight length mismatch".into()));
            }
            if w.iter().any(|&v| v < T::zero() || !v.is_finite()) {
                return Err(MobilabError::Spec("weights must be finite and non-negative".into()));
            }
        }
        if n < k {
            return Err(MobilabError::insufficient("observations", k, n));
        }

        let mut xtwx = Square::zeros(k);
        let mut xtwy = vec![T::zero(); k];
        let mut row = vec![T::zero(); k];
        for i in 0..n {
            self.row(i, &mut row);
            let w = self.w(i);
            xtwx.add_outer(&row, w);
            for j in 0..k {
                xtwy[j] += w * row[j] * self.y[i];
            }
        }
        let bread = xtwx
            .inverse_spd()
            .ok_or_else(|| MobilabError::Singular("design matrix is rank deficient".into()))?;
        let coef = bread.mul_vec(&xtwy);

        let mut residuals = Vec::with_capacity(n);
        for i in 0..n {
            self.row(i, &mut row);
            let fitted: T = row.iter().zip(&coef).map(|(&a, &b)| a * b).sum();
            residuals.push(self.y[i] - fitted);
        }

        let wsum: T = (0..n).map(|i| self.w(i)).sum();
        let ybar: T = (0..n).map(|i| self.w(i) * self.y[i]).sum::<T>() / wsum;
        let sst: T = (0..n)
            .map(|i| self.w(i) * (self.y[i] - ybar) * (self.y[i] - ybar))
            .sum();
        let ssr: T = (0..n).map(|i| self.w(i) * residuals[i] * residuals[i]).sum();
        let r2 = if sst > T::zero() {
            T::one() - ssr / sst
        } else {
            T::zero()
        };
        let adj_r2 = if n > k {
            T::one() - (T::one() - r2) * T::of_usize(n - 1) / T::of_usize(n - k)
        } else {
            r2
        };

        let mut meat = Square::zeros(k);
        match self.clusters {
            Some(groups) => {
                let mut sums: std::collections::BTreeMap<u32, Vec<T>> = Default::default();
                for i in 0..n {
                    self.row(i, &mut row);
                    let s = sums.entry(groups[i]).or_insert_with(|| vec![T::zero(); k]);
                    let we = self.w(i) * residuals[i];
                    for j in 0..k {
                        s[j] += we * row[j];
                    }
                }
                let g = sums.len();
                for s in sums.values() {
                    meat.add_outer(s, T::one());
                }
                if g > 1 && n > k {
                    meat.scale(T::of_usize(g) / T::of_usize(g - 1) * T::of_usize(n - 1) / T::of_usize(n - k));
                }
            }
            None => {
                for i in 0..n {
                    self.row(i, &mut row);
                    let we = self.w(i) * residuals[i];
                    meat.add_outer(&row, we * we);
                }
                if n > k {
                    meat.scale(T::of_usize(n) / T::of_usize(n - k));
                }
            }
        }
        let cov = bread.sandwich(&meat);
        let se = cov.diag().into_iter().map(|v| v.max(T::zero()).sqrt()).collect();

        let condition_number = scaled_condition(&xtwx);

        Ok(LinearFit {
            coef,
            cov,
            se,
            residuals,
            r2,
            adj_r2,
            n,
            condition_number,
        })
    }
}

fn scaled_condition<T: Real>(m: &Square<T>) -> T {
    let k = m.dim();
    let d: Vec<T> = m.diag().into_iter().map(|v| v.sqrt()).collect();
    let mut s = Square::zeros(k);
    for i in 0..k {
        for j in 0..k {
            s[(i, j)] = m[(i, j)] / (d[i] * d[j]);
        }
    }
    let ev = s.symmetric_eigenvalues();
    let lo = ev.first().copied().unwrap_or(T::zero());
    let hi = ev.last().copied().unwrap_or(T::zero());
    if lo > T::zero() {
        hi / lo
    } else {
        T::infinity()
    }
}

/// One named coefficient of a cross-regional regression report.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct Coefficient {
    pub name: String,
    pub estimate: f64,
    pub se: f64,
    pub t: f64,
    pub p_value: f64,
}

/// Serializable summary of a [`LinearFit`].
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct RegressionReport {
    pub dependent: String,
    pub coefficients: Vec<Coefficient>,
    pub n: usize,
    pub r2: f64,
    pub adj_r2: f64,
    pub condition_number: f64,
    pub warnings: Vec<String>,
}

impl RegressionReport {
    pub fn coef(&self, name: &str) -> Option<&Coefficient> {
        self.coefficients.iter().find(|c| c.name == name)
    }

    pub fn from_fit<T: Real>(dependent: &str, names: &[&str], fit: &LinearFit<T>) -> Self {
        let df = fit.n.saturating_sub(fit.k()).max(1);
        let coefficients = std::iter::once("intercept")
            .chain(names.iter().copied())
            .zip(fit.coef.iter().zip(&fit.se))
            .map(|(name, (&b, &s))| {
                let (b, s) = (b.to_f64_lossy(), s.to_f64_lossy());
                let t = if s > 0.0 {
                    b / s
                } else if b == 0.0 {
                    0.0
                } else {
                    f64::INFINITY.copysign(b)
                };
                Coefficient {
                    name: name.to_string(),
                    estimate: b,
                    se: s,
                    t,
                    p_value: crate::inference::two_sided_t_p(t, df as f64),
                }
            })
            .collect();
        let condition_number = fit.condition_number.to_f64_lossy();
        let mut warnings = Vec::new();
        if condition_number > 1e6 {
            warnings.push(format!(
                "ill-conditioned design (condition number {condition_number:.3e})"
            ));
        }
        Self {
            dependent: dependent.to_string(),
            coefficients,
            n: fit.n,
            r2: fit.r2.to_f64_lossy(),
            adj_r2: fit.adj_r2.to_f64_lossy(),
            condition_number,
            warnings,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn simple_line() {
        let y = [0.0, 1.0];
        let x = [0.0, 1.0];
        let f = Wls::new(&y).column(&x).fit().unwrap();
        assert_abs_diff_eq!(f.coef[0], 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(f.coef[1], 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(f.r2, 1.0, epsilon = 1e-14);
    }

    #[test]
    fn rank_deficient_design_is_an_error() {
        let y = [1.0, 2.0, 3.0];
        let x = [1.0, 1.0, 1.0];
        assert!(matches!(Wls::new(&y).column(&x).fit(), Err(MobilabError::Singular(_))));
    }

    #[test]
    fn weights_are_scale_free() {
        let y = [1.0, 3.0, 2.0, 5.0, 4.0];
        let x = [0.0, 1.0, 2.0, 3.0, 4.0];
        let w = [1.0, 2.0, 1.0, 3.0, 1.0];
        let w10: Vec<f64> = w.iter().map(|v| v * 10.0).collect();
        let a = Wls::new(&y).column(&x).weights(Some(&w)).fit().unwrap();
        let b = Wls::new(&y).column(&x).weights(Some(&w10)).fit().unwrap();
        for j in 0..2 {
            assert_abs_diff_eq!(a.coef[j], b.coef[j], epsilon = 1e-12);
            assert_abs_diff_eq!(a.se[j], b.se[j], epsilon = 1e-12);
        }
        assert_abs_diff_eq!(a.r2, b.r2, epsilon = 1e-12);
    }

    #[test]
    fn cluster_covariance_runs_and_differs_from_hc1() {
        let y: [f64; 6] = [1.0, 3.0, 2.0, 5.0, 4.0, 6.0];
        let x = [0.0, 1.0, 2.0, 3.0, 4.0, 5.0];
        let g = [0u32, 0, 1, 1, 2, 2];
        let a = Wls::new(&y).column(&x).fit().unwrap();
        let b = Wls::new(&y).column(&x).clusters(Some(&g)).fit().unwrap();
        assert_eq!(a.coef, b.coef);
        assert!((a.se[1] - b.se[1]).abs() > 1e-6);
    }

    #[test]
    fn f32_path_agrees_with_f64() {
        let y64 = [1.0, 3.0, 2.0, 5.0];
        let x64 = [0.0, 1.0, 2.0, 3.0];
        let y32 = y64.map(|v| v as f32);
        let x32 = x64.map(|v| v as f32);
        let a = Wls::new(&y64).column(&x64).fit().unwrap();
        let b = Wls::new(&y32).column(&x32).fit().unwrap();
        assert!((a.coef[1] - b.coef[1] as f64).abs() < 1e-5);
        assert!((a.se[1] - b.se[1] as f64).abs() < 1e-5);
    }
}
