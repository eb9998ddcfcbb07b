//! Regional inequality and its association with mobility statistics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{MobilabError, Result};
use crate::inference::two_sided_t_p;
use crate::latent::{regress_on_latent, LatentEstimate, LatentRegressors};
use crate::mobility::{group_by_region, RegionEstimates};
use crate::moments::{weighted_pearson, weighted_sd};
use crate::num::Real;
use crate::record::{LineageRecord, RegionId, Relative};
use crate::regression::{RegressionReport, Wls};

/// Population Gini coefficient. Unweighted it is
/// `2 Σ i x₍ᵢ₎ / (n Σ x) − (n + 1)/n` over ascending values; with weights,
/// `Σ wᵢ xᵢ (2Cᵢ − wᵢ) / (W Σ w x) − 1` where `Cᵢ` is the cumulative weight
/// through `i`. Both equal half the mean absolute difference over the mean.
pub fn gini<T: Real>(values: &[T], weights: Option<&[T]>) -> Result<T> {
    if values.is_empty() {
        return Err(MobilabError::insufficient("values", 1, 0));
    }
    if values.iter().any(|&v| v < T::zero() || !v.is_finite()) {
        return Err(MobilabError::ParameterDomain(
            "gini needs finite non-negative values".into(),
        ));
    }
    if let Some(w) = weights {
        if w.len() != values.len() || w.iter().any(|&v| !(v >= T::zero()) || !v.is_finite()) {
            return Err(MobilabError::ParameterDomain(
                "gini weights must be non-negative and aligned".into(),
            ));
        }
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap_or(std::cmp::Ordering::Equal));
    let w = |i: usize| weights.map_or(T::one(), |w| w[i]);
    let total_w: T = order.iter().map(|&i| w(i)).sum();
    let total_wx: T = order.iter().map(|&i| w(i) * values[i]).sum();
    if !(total_wx > T::zero()) || !(total_w > T::zero()) {
        return Err(MobilabError::ParameterDomain(
            "gini is undefined when all values are zero".into(),
        ));
    }
    let two = T::of(2.0);
    let mut cum = T::zero();
    let mut acc = T::zero();
    for &i in &order {
        let wi = w(i);
        cum += wi;
        acc += wi * values[i] * (two * cum - wi);
    }
    Ok(acc / (total_w * total_wx) - T::one())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GiniGeneration {
    Father,
    /// Both grandfathers pooled.
    #[default]
    Grandfather,
}

impl GiniGeneration {
    fn members(self) -> &'static [Relative] {
        match self {
            GiniGeneration::Father => &[Relative::Father],
            GiniGeneration::Grandfather => &[Relative::PaternalGrandfather, Relative::MaternalGrandfather],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            GiniGeneration::Father => "father",
            GiniGeneration::Grandfather => "grandfather",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InequalityMeasure {
    pub region_id: RegionId,
    pub generation: GiniGeneration,
    pub gini: f64,
    pub sd_log: f64,
    pub n: usize,
}

/// Gini of earnings levels (exponentiated log earnings) per region.
/// Regions with no observed earnings in the generation are skipped.
pub fn regional_inequality(records: &[LineageRecord], generation: GiniGeneration) -> Vec<InequalityMeasure> {
    group_by_region(records)
        .into_iter()
        .filter_map(|(id, recs)| {
            let logs: Vec<f64> = recs
                .iter()
                .flat_map(|r| generation.members().iter().filter_map(move |&w| r.of(w).log_earnings))
                .collect();
            let levels: Vec<f64> = logs.iter().map(|v| v.exp()).collect();
            let g = gini(&levels, None).ok()?;
            let ones = vec![1.0; logs.len()];
            Some(InequalityMeasure {
                region_id: id,
                generation,
                gini: g,
                sd_log: weighted_sd(&logs, &ones).unwrap_or(0.0),
                n: logs.len(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GatsbyResult {
    pub statistic: String,
    pub correlation: f64,
    pub p_value: f64,
    pub n_regions: usize,
    pub weighted: bool,
    pub size_controlled: bool,
}

/// Residuals of a WLS of `y` on `control` (with intercept).
fn residualize<T: Real>(y: &[T], control: &[T], w: &[T]) -> Result<Vec<T>> {
    Ok(Wls::new(y).column(control).weights(Some(w)).fit()?.residuals)
}

/// Weighted Pearson correlation with a two-sided t-approximation p-value.
/// With `control`, both series are first residualized on it.
pub fn correlation_test<T: Real>(x: &[T], y: &[T], w: &[T], control: Option<&[T]>) -> Result<(T, f64)> {
    let n = x.len();
    if n < 3 {
        return Err(MobilabError::insufficient("regions", 3, n));
    }
    if y.len() != n || w.len() != n || control.is_some_and(|c| c.len() != n) {
        return Err(MobilabError::Spec("series are not aligned".into()));
    }
    let (xr, yr, lost) = match control {
        Some(c) => (residualize(x, c, w)?, residualize(y, c, w)?, 1),
        None => (x.to_vec(), y.to_vec(), 0),
    };
    let r = weighted_pearson(&xr, &yr, w).ok_or(MobilabError::UndefinedSlope)?;
    let df = (n - 2 - lost) as f64;
    let rf = r.to_f64_lossy();
    let p = if df <= 0.0 {
        f64::NAN
    } else if rf.abs() >= 1.0 {
        0.0
    } else {
        two_sided_t_p(rf * (df / (1.0 - rf * rf)).sqrt(), df)
    };
    Ok((r, p))
}

/// Correlation across regions between a mobility statistic and regional
/// Gini, weighted by pair counts when `weighted`. `size_control`
/// residualizes both series on the pair count first.
pub fn gatsby_correlation(
    mobility: &RegionEstimates,
    inequality: &[InequalityMeasure],
    weighted: bool,
    size_control: bool,
) -> Result<GatsbyResult> {
    let gini_by: BTreeMap<RegionId, f64> = inequality.iter().map(|m| (m.region_id, m.gini)).collect();
    let mut stat = Vec::new();
    let mut g = Vec::new();
    let mut w = Vec::new();
    let mut size = Vec::new();
    for e in &mobility.estimates {
        if let Some(&gi) = gini_by.get(&e.region_id) {
            stat.push(e.beta);
            g.push(gi);
            size.push(e.n_pairs as f64);
            w.push(if weighted { e.n_pairs as f64 } else { 1.0 });
        }
    }
    let (r, p) = correlation_test(&stat, &g, &w, size_control.then_some(&size[..]))?;
    Ok(GatsbyResult {
        statistic: mobility.estimates.first().map(|e| e.spec.label()).unwrap_or_default(),
        correlation: r,
        p_value: p,
        n_regions: stat.len(),
        weighted,
        size_controlled: size_control,
    })
}

/// WLS of regional Gini on the recovered latent parameters. Regions without
/// an inequality measure are dropped.
pub fn latent_inequality_regression(
    inequality: &[InequalityMeasure],
    estimates: &[LatentEstimate<f64>],
    regressors: LatentRegressors,
    weighted: bool,
) -> Result<RegressionReport> {
    let gini_by: BTreeMap<RegionId, f64> = inequality.iter().map(|m| (m.region_id, m.gini)).collect();
    let (dep, est): (Vec<f64>, Vec<LatentEstimate<f64>>) = estimates
        .iter()
        .filter_map(|e| gini_by.get(&e.region_id).map(|&g| (g, e.clone())))
        .unzip();
    regress_on_latent("gini", &dep, &est, regressors, false, weighted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latent::recover_latent;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pairwise_gini(x: &[f64]) -> f64 {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let mut s = 0.0;
        for a in x {
            for b in x {
                s += (a - b).abs();
            }
        }
        s / (2.0 * n * n * mean)
    }

    #[test]
    fn equality_and_polar_cases() {
        assert_eq!(gini(&[5.0, 5.0, 5.0, 5.0], None).unwrap(), 0.0);
        assert!((gini(&[0.0f64, 100.0], None).unwrap() - 0.5).abs() < 1e-15);
        assert!(gini(&[0.0, 0.0], None).is_err());
        assert!(gini::<f64>(&[], None).is_err());
        assert!(gini(&[-1.0, 2.0], None).is_err());
    }

    #[test]
    fn matches_pairwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x: Vec<f64> = (0..1000).map(|_| rng.random::<f64>() * 100.0).collect();
        assert!((gini(&x, None).unwrap() - pairwise_gini(&x)).abs() < 1e-12);
    }

    #[test]
    fn integer_weights_equal_replication() {
        let x: [f64; 5] = [3.0, 1.0, 7.0, 7.0, 2.0];
        let w = [2.0, 1.0, 3.0, 1.0, 2.0];
        let mut rep = Vec::new();
        for (v, k) in x.iter().zip(w) {
            for _ in 0..k as usize {
                rep.push(*v);
            }
        }
        assert!((gini(&x, Some(&w)).unwrap() - gini(&rep, None).unwrap()).abs() < 1e-14);
        let ones = [1.0; 5];
        assert_eq!(gini(&x, Some(&ones)).unwrap(), gini(&x, None).unwrap());
    }

    #[test]
    fn f32_gini() {
        let g = gini(&[0.0f32, 100.0], None).unwrap();
        assert!((g - 0.5).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn scale_invariant(x in prop::collection::vec(0.0f64..1e4, 2..60), c in 0.001f64..1000.0) {
            prop_assume!(x.iter().any(|&v| v > 0.0));
            let scaled: Vec<f64> = x.iter().map(|v| v * c).collect();
            prop_assert!((gini(&x, None).unwrap() - gini(&scaled, None).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn bounded_and_replication_stable(x in prop::collection::vec(0.0f64..1e3, 2..60)) {
            prop_assume!(x.iter().any(|&v| v > 0.0));
            let g = gini(&x, None).unwrap();
            prop_assert!((0.0..1.0).contains(&g) || g.abs() < 1e-15);
            let doubled: Vec<f64> = x.iter().chain(&x).copied().collect();
            // the population formula is exactly replication invariant
            prop_assert!((gini(&doubled, None).unwrap() - g).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_series_correlate_perfectly() {
        let x: [f64; 5] = [0.1, 0.3, 0.2, 0.5, 0.4];
        let w = [1.0; 5];
        let (r, p) = correlation_test(&x, &x, &w, None).unwrap();
        assert!((r - 1.0).abs() < 1e-12);
        assert_eq!(p, 0.0);
        assert!(correlation_test(&x[..2], &x[..2], &w[..2], None).is_err());
    }

    #[test]
    fn residualized_equals_partial_correlation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 200;
        let z: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 1000.0).collect();
        let x: Vec<f64> = z.iter().map(|v| 0.001 * v + rng.random::<f64>()).collect();
        let y: Vec<f64> = z
            .iter()
            .zip(&x)
            .map(|(v, a)| -0.0005 * v + 0.3 * a + rng.random::<f64>())
            .collect();
        let w: Vec<f64> = (0..n).map(|_| 1.0 + rng.random::<f64>() * 5.0).collect();
        let (r, _) = correlation_test(&x, &y, &w, Some(&z)).unwrap();
        let rxy = weighted_pearson(&x, &y, &w).unwrap();
        let rxz = weighted_pearson(&x, &z, &w).unwrap();
        let ryz = weighted_pearson(&y, &z, &w).unwrap();
        let partial = (rxy - rxz * ryz) / ((1.0 - rxz * rxz) * (1.0 - ryz * ryz)).sqrt();
        assert!((r - partial).abs() < 1e-10);
    }

    #[test]
    fn independent_series_near_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let r_count = 2000;
        let x: Vec<f64> = (0..r_count).map(|_| rng.random()).collect();
        let y: Vec<f64> = (0..r_count).map(|_| rng.random()).collect();
        let (r, _) = correlation_test(&x, &y, &vec![1.0; r_count], None).unwrap();
        assert!(r.abs() < 4.0 / (r_count as f64).sqrt());
    }

    fn latent_fixture(n: usize, seed: u64) -> (Vec<LatentEstimate<f64>>, Vec<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut est = Vec::new();
        let mut rho = Vec::new();
        let mut lambda = Vec::new();
        for i in 0..n {
            let r: f64 = 0.8 + 0.15 * rng.random::<f64>();
            let l: f64 = 0.2 + 0.4 * rng.random::<f64>();
            est.push(recover_latent(
                RegionId(i as u32),
                r * r * l,
                None,
                r * r * l * l,
                500.0 + 10.0 * i as f64,
            ));
            rho.push(r);
            lambda.push(l);
        }
        (est, rho, lambda)
    }

    fn measures(gini_values: &[f64]) -> Vec<InequalityMeasure> {
        gini_values
            .iter()
            .enumerate()
            .map(|(i, &g)| InequalityMeasure {
                region_id: RegionId(i as u32),
                generation: GiniGeneration::Father,
                gini: g,
                sd_log: 0.0,
                n: 100,
            })
            .collect()
    }

    #[test]
    fn lambda_driven_gini_prefers_lambda() {
        let (est, _, lambda) = latent_fixture(120, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let g: Vec<f64> = lambda
            .iter()
            .map(|l| 0.2 + 0.3 * l + 0.02 * (rng.random::<f64>() - 0.5))
            .collect();
        let m = measures(&g);
        let lam = latent_inequality_regression(&m, &est, LatentRegressors::Lambda, true).unwrap();
        let rho = latent_inequality_regression(&m, &est, LatentRegressors::Rho, true).unwrap();
        assert!(lam.r2 > rho.r2);
        let c = lam.coef("lambda_hat").unwrap();
        assert!((c.estimate - 0.3).abs() < 2.0 * c.se);
    }

    #[test]
    fn constant_gini_gives_zero_slope() {
        let (est, _, _) = latent_fixture(30, 8);
        let m = measures(&[0.3; 30]);
        let rep = latent_inequality_regression(&m, &est, LatentRegressors::Lambda, true).unwrap();
        assert!(rep.coef("lambda_hat").unwrap().estimate.abs() < 1e-12);
        assert_eq!(rep.r2, 0.0);
    }
}
