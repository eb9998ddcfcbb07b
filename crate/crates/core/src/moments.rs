//! Descriptive moments, correlations and ranks, written against [`Real`].
//!
//! Variances here are population moments (divisor `n`) unless the function
//! name says otherwise; the estimators that need finite-sample corrections
//! apply them explicitly.

use crate::error::{MobilabError, Result};
use crate::num::Real;

pub fn mean<T: Real>(xs: &[T]) -> Option<T> {
    if xs.is_empty() {
        return None;
    }
    Some(xs.iter().copied().sum::<T>() / T::of_usize(xs.len()))
}

pub fn weighted_mean<T: Real>(xs: &[T], ws: &[T]) -> Option<T> {
    debug_assert_eq!(xs.len(), ws.len());
    let wsum: T = ws.iter().copied().sum();
    if xs.is_empty() || !(wsum > T::zero()) {
        return None;
    }
    Some(xs.iter().zip(ws).map(|(&x, &w)| x * w).sum::<T>() / wsum)
}

/// Population variance.
pub fn variance<T: Real>(xs: &[T]) -> Option<T> {
    let m = mean(xs)?;
    Some(xs.iter().map(|&x| (x - m) * (x - m)).sum::<T>() / T::of_usize(xs.len()))
}

/// Sample standard deviation (divisor `n - 1`).
pub fn sample_sd<T: Real>(xs: &[T]) -> Option<T> {
    if xs.len() < 2 {
        return None;
    }
    let m = mean(xs)?;
    let ss: T = xs.iter().map(|&x| (x - m) * (x - m)).sum();
    Some((ss / T::of_usize(xs.len() - 1)).sqrt())
}

/// Weighted standard deviation with frequency-style normalisation by the
/// weight total.
pub fn weighted_sd<T: Real>(xs: &[T], ws: &[T]) -> Option<T> {
    let m = weighted_mean(xs, ws)?;
    let wsum: T = ws.iter().copied().sum();
    let v = xs.iter().zip(ws).map(|(&x, &w)| w * (x - m) * (x - m)).sum::<T>() / wsum;
    Some(v.sqrt())
}

/// Centred cross-products of a paired sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairMoments<T> {
    pub n: usize,
    pub mean_x: T,
    pub mean_y: T,
    pub sxx: T,
    pub syy: T,
    pub sxy: T,
}

impl<T: Real> PairMoments<T> {
    pub fn from_slices(x: &[T], y: &[T]) -> Self {
        assert_eq!(x.len(), y.len());
        let n = x.len();
        let nt = T::of_usize(n.max(1));
        let mean_x = x.iter().copied().sum::<T>() / nt;
        let mean_y = y.iter().copied().sum::<T>() / nt;
        let (mut sxx, mut syy, mut sxy) = (T::zero(), T::zero(), T::zero());
        for (&a, &b) in x.iter().zip(y) {
            let dx = a - mean_x;
            let dy = b - mean_y;
            sxx += dx * dx;
            syy += dy * dy;
            sxy += dx * dy;
        }
        Self {
            n,
            mean_x,
            mean_y,
            sxx,
            syy,
            sxy,
        }
    }

    /// OLS slope of `y` on `x`.
    pub fn slope(&self) -> Option<T> {
        (self.sxx > T::zero()).then(|| self.sxy / self.sxx)
    }

    pub fn correlation(&self) -> Option<T> {
        let d = (self.sxx * self.syy).sqrt();
        (d > T::zero()).then(|| clamp_unit(self.sxy / d))
    }
}

#[inline]
fn clamp_unit<T: Real>(r: T) -> T {
    r.max(-T::one()).min(T::one())
}

pub fn pearson<T: Real>(x: &[T], y: &[T]) -> Option<T> {
    PairMoments::from_slices(x, y).correlation()
}

/// Weighted Pearson correlation.
pub fn weighted_pearson<T: Real>(x: &[T], y: &[T], w: &[T]) -> Option<T> {
    let mx = weighted_mean(x, w)?;
    let my = weighted_mean(y, w)?;
    let (mut sxx, mut syy, mut sxy) = (T::zero(), T::zero(), T::zero());
    for ((&a, &b), &wi) in x.iter().zip(y).zip(w) {
        let dx = a - mx;
        let dy = b - my;
        sxx += wi * dx * dx;
        syy += wi * dy * dy;
        sxy += wi * dx * dy;
    }
    let d = (sxx * syy).sqrt();
    (d > T::zero()).then(|| clamp_unit(sxy / d))
}

/// A statistic together with its per-observation influence values, such
/// that `Var(stat) ≈ Σ ψᵢ² / n²` and `Cov(a, b) ≈ Σ ψᵃᵢ ψᵇᵢ / (nₐ n_b)` over
/// the observations the two samples share.
#[derive(Debug, Clone)]
pub struct Influence<T> {
    pub estimate: T,
    pub psi: Vec<T>,
}

impl<T: Real> Influence<T> {
    pub fn n(&self) -> usize {
        self.psi.len()
    }

    /// Robust variance with the `n / (n - k)` small-sample factor.
    pub fn variance(&self, k: usize) -> T {
        let n = self.psi.len();
        let nt = T::of_usize(n);
        let ss: T = self.psi.iter().map(|&p| p * p).sum();
        ss / (nt * nt) * dof_factor::<T>(n, k)
    }
}

pub(crate) fn dof_factor<T: Real>(n: usize, k: usize) -> T {
    if n > k {
        T::of_usize(n) / T::of_usize(n - k)
    } else {
        T::one()
    }
}

/// Pearson correlation with its moment-based (non-normal-theory) influence
/// function `ψᵢ = zₓzᵧ − r(zₓ² + zᵧ²)/2`.
pub fn correlation_influence<T: Real>(x: &[T], y: &[T]) -> Result<Influence<T>> {
    let m = PairMoments::from_slices(x, y);
    if m.n < 2 {
        return Err(MobilabError::insufficient("pairs", 2, m.n));
    }
    if !(m.sxx > T::zero()) || !(m.syy > T::zero()) {
        return Err(MobilabError::UndefinedSlope);
    }
    let nt = T::of_usize(m.n);
    let sx = (m.sxx / nt).sqrt();
    let sy = (m.syy / nt).sqrt();
    let r = clamp_unit(m.sxy / (m.sxx * m.syy).sqrt());
    let half = T::of(0.5);
    let psi = x
        .iter()
        .zip(y)
        .map(|(&a, &b)| {
            let zx = (a - m.mean_x) / sx;
            let zy = (b - m.mean_y) / sy;
            zx * zy - half * r * (zx * zx + zy * zy)
        })
        .collect();
    Ok(Influence { estimate: r, psi })
}

/// OLS slope of `y` on `x` with influence `ψᵢ = n (xᵢ − x̄) eᵢ / Sxx`, whose
/// squared sum reproduces the White (HC0) sandwich.
pub fn slope_influence<T: Real>(x: &[T], y: &[T]) -> Result<Influence<T>> {
    let m = PairMoments::from_slices(x, y);
    if m.n < 2 {
        return Err(MobilabError::insufficient("pairs", 2, m.n));
    }
    let b = m.slope().ok_or(MobilabError::UndefinedSlope)?;
    let a = m.mean_y - b * m.mean_x;
    let scale = T::of_usize(m.n) / m.sxx;
    let psi = x
        .iter()
        .zip(y)
        .map(|(&xi, &yi)| scale * (xi - m.mean_x) * (yi - a - b * xi))
        .collect();
    Ok(Influence { estimate: b, psi })
}

/// Percentile ranks `(i − 0.5)/n` with tied values sharing the average of
/// their positions. A single value gets 0.5.
pub fn midranks<T: Real>(values: &[T]) -> Vec<T> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap_or(std::cmp::Ordering::Equal));
    let mut ranks = vec![T::zero(); n];
    let nt = T::of_usize(n);
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && values[order[j]] == values[order[i]] {
            j += 1;
        }
        // positions i+1..=j (1-based) share their mean position
        let mean_pos = T::of_usize(i + 1 + j) * T::of(0.5);
        let r = (mean_pos - T::of(0.5)) / nt;
        for &k in &order[i..j] {
            ranks[k] = r;
        }
        i = j;
    }
    ranks
}

/// Empirical quantile by the inverse of the empirical CDF (type 1).
/// `sorted` must be ascending and non-empty.
pub fn quantile_sorted<T: Real>(sorted: &[T], p: f64) -> T {
    let n = sorted.len();
    let idx = ((p * n as f64).ceil() as usize).clamp(1, n) - 1;
    sorted[idx]
}

/// Median with ties broken to the midpoint of the two central values.
pub fn median<T: Real>(values: &[T]) -> Option<T> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) * T::of(0.5)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn ranks_without_ties() {
        let r = midranks(&[10.0, 20.0, 30.0]);
        assert_abs_diff_eq!(r[0], 1.0 / 6.0, epsilon = 1e-15);
        assert_abs_diff_eq!(r[1], 3.0 / 6.0, epsilon = 1e-15);
        assert_abs_diff_eq!(r[2], 5.0 / 6.0, epsilon = 1e-15);
    }

    #[test]
    fn tied_pair_shares_mean_position() {
        let r = midranks(&[5.0, 5.0, 9.0]);
        assert_eq!(r[0], r[1]);
        assert_abs_diff_eq!(r[0], 1.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(r[2], 5.0 / 6.0, epsilon = 1e-15);
    }

    #[test]
    fn singleton_rank_is_half() {
        assert_eq!(midranks(&[42.0]), vec![0.5]);
    }

    #[test]
    fn perfect_lines() {
        assert_abs_diff_eq!(pearson(&[0.0, 1.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert_abs_diff_eq!(pearson(&[0.0, 1.0], &[1.0, 0.0]).unwrap(), -1.0);
    }

    #[test]
    fn slope_influence_matches_hc0_by_hand() {
        // x = 0,1,2,3; y = 1,3,2,5 -> b = 1.1, a = 1.1
        let x = [0.0, 1.0, 2.0, 3.0];
        let y = [1.0, 3.0, 2.0, 5.0];
        let inf = slope_influence(&x, &y).unwrap();
        assert_abs_diff_eq!(inf.estimate, 1.1, epsilon = 1e-14);
        // residuals -0.1, 0.8, -1.3, 0.6; x - xbar = -1.5,-0.5,0.5,1.5; Sxx = 5
        let hc0: f64 = [(-1.5f64, -0.1f64), (-0.5, 0.8), (0.5, -1.3), (1.5, 0.6)]
            .iter()
            .map(|(d, e)| (d * e).powi(2))
            .sum::<f64>()
            / 25.0;
        assert_abs_diff_eq!(inf.variance(0), hc0, epsilon = 1e-14);
    }

    proptest! {
        #[test]
        fn ranks_invariant_to_monotone_transform(v in prop::collection::vec(-50.0f64..50.0, 1..40)) {
            let a = midranks(&v);
            let t: Vec<f64> = v.iter().map(|x| (x / 10.0).exp() * 3.0 + 1.0).collect();
            prop_assert_eq!(a, midranks(&t));
        }

        #[test]
        fn ranks_average_one_half(v in prop::collection::vec(0i32..5, 1..40)) {
            let v: Vec<f64> = v.into_iter().map(f64::from).collect();
            let r = midranks(&v);
            let m = r.iter().sum::<f64>() / r.len() as f64;
            prop_assert!((m - 0.5).abs() < 1e-12);
            prop_assert!(r.iter().all(|&x| x > 0.0 && x < 1.0));
        }

        #[test]
        fn correlation_symmetric_and_bounded(
            pts in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 3..30)
        ) {
            let (x, y): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
            if let (Some(a), Some(b)) = (pearson(&x, &y), pearson(&y, &x)) {
                prop_assert!((a - b).abs() < 1e-12);
                prop_assert!(a.abs() <= 1.0);
            }
        }

        #[test]
        fn equal_weights_match_unweighted(
            pts in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 3..30),
            w in 0.1f64..10.0,
        ) {
            let (x, y): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
            let ws = vec![w; x.len()];
            if let (Some(a), Some(b)) = (pearson(&x, &y), weighted_pearson(&x, &y, &ws)) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
