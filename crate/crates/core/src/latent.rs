//! Excess persistence and latent-parameter recovery.
//!
//! Under the latent factor model the parent-child statistic is `ρ²λ` and the
//! grandparent-child statistic is `ρ²λ²`, so `Δ = β₋₂ − β₋₁²` is positive
//! whenever outcomes are noisy signals of a persistent endowment, and the two
//! statistics identify `λ = β₋₂ / β₋₁` and `ρ = (β₋₁² / β₋₂)^½`.
//!
//! The two statistics are joined as a seemingly-unrelated system: each
//! equation is estimated on its own complete pairs and the joint covariance
//! is built from per-observation influence values, summed over the lineages
//! the two equations share.

use std::collections::BTreeMap;

use log::debug;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{MobilabError, Result};
use crate::inference::{normal_cdf, two_sided_normal_p};
use crate::mobility::{
    context_for, group_by_region, lineage_pair, EstimatorSpec, NationalContext, PairType, Statistic,
};
use crate::moments::{correlation_influence, dof_factor, slope_influence, Influence};
use crate::num::Real;
use crate::record::{LineageRecord, RegionId, Relative};
use crate::regression::{RegressionReport, Wls};

/// Upper guardrail on recovered parameters.
pub const GUARDRAIL: f64 = 1.5;

/// `Var(β₋₂) + (2β₋₁)² Var(β₋₁) − 2 (2β₋₁) Cov(β₋₂, β₋₁)`
pub fn delta_variance<T: Real>(var_b2: T, var_b1: T, cov_b1b2: T, b1: T) -> T {
    let g = T::of(2.0) * b1;
    var_b2 + g * g * var_b1 - T::of(2.0) * g * cov_b1b2
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurSample {
    /// Each equation on its own complete pairs.
    #[default]
    Union,
    /// Only lineages with child, father and paternal grandfather observed.
    TripletComplete,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeltaTest {
    pub region_id: RegionId,
    pub beta1: f64,
    pub beta2: f64,
    pub delta: f64,
    pub var_beta1: f64,
    pub var_beta2: f64,
    pub cov_b1b2: f64,
    pub var_delta: f64,
    /// `None` when the joint covariance is degenerate.
    pub t_stat: Option<f64>,
    pub p_two_sided: Option<f64>,
    /// For H₀: Δ ≤ 0.
    pub p_one_sided: Option<f64>,
    pub n_parent: usize,
    pub n_grandparent: usize,
    pub n_common: usize,
}

/// Influence values of one equation keyed by lineage position.
struct Equation {
    index: Vec<usize>,
    inf: Influence<f64>,
}

fn equation(pairs: &[(usize, f64, f64)], statistic: Statistic) -> Result<Equation> {
    let x: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let y: Vec<f64> = pairs.iter().map(|p| p.2).collect();
    let inf = match statistic {
        Statistic::PearsonCorrelation => correlation_influence(&x, &y)?,
        Statistic::RegressionSlope => slope_influence(&x, &y)?,
    };
    Ok(Equation {
        index: pairs.iter().map(|p| p.0).collect(),
        inf,
    })
}

/// Cross-equation covariance over shared positions; both indices ascending.
fn cross_cov(a: &Equation, b: &Equation) -> (f64, usize) {
    let (na, nb) = (a.inf.n(), b.inf.n());
    let (mut i, mut j, mut s, mut common) = (0, 0, 0.0, 0);
    while i < na && j < nb {
        match a.index[i].cmp(&b.index[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                s += a.inf.psi[i] * b.inf.psi[j];
                common += 1;
                i += 1;
                j += 1;
            }
        }
    }
    let scale = (dof_factor::<f64>(na, 2) * dof_factor::<f64>(nb, 2)).sqrt();
    (s / (na as f64 * nb as f64) * scale, common)
}

fn assemble(region_id: RegionId, e1: &Equation, e2: &Equation) -> DeltaTest {
    let (b1, b2) = (e1.inf.estimate, e2.inf.estimate);
    let var_beta1 = e1.inf.variance(2);
    let var_beta2 = e2.inf.variance(2);
    let (cov_b1b2, n_common) = cross_cov(e1, e2);
    let delta = b2 - b1 * b1;
    let raw = delta_variance(var_beta2, var_beta1, cov_b1b2, b1);
    let ok = raw.is_finite() && raw > 0.0;
    let t_stat = ok.then(|| delta / raw.sqrt());
    DeltaTest {
        region_id,
        beta1: b1,
        beta2: b2,
        delta,
        var_beta1,
        var_beta2,
        cov_b1b2,
        var_delta: raw.max(0.0),
        t_stat,
        p_two_sided: t_stat.map(two_sided_normal_p),
        p_one_sided: t_stat.map(|t| 1.0 - normal_cdf(t)),
        n_parent: e1.inf.n(),
        n_grandparent: e2.inf.n(),
        n_common,
    }
}

fn delta_test_with<'a>(
    records: impl IntoIterator<Item = &'a LineageRecord>,
    spec: &EstimatorSpec,
    sample: SurSample,
    ctx: &NationalContext,
) -> Result<DeltaTest> {
    let mut region_id = None;
    let mut p1 = Vec::new();
    let mut p2 = Vec::new();
    for (i, rec) in records.into_iter().enumerate() {
        region_id.get_or_insert(rec.region_id);
        let a = lineage_pair(rec, spec, PairType::Father, ctx);
        let b = lineage_pair(rec, spec, PairType::PaternalGrandfather, ctx);
        if sample == SurSample::TripletComplete && (a.is_none() || b.is_none()) {
            continue;
        }
        if let Some((x, y)) = a {
            p1.push((i, x, y));
        }
        if let Some((x, y)) = b {
            p2.push((i, x, y));
        }
    }
    let e1 = equation(&p1, spec.statistic)?;
    let e2 = equation(&p2, spec.statistic)?;
    Ok(assemble(region_id.unwrap_or(RegionId(0)), &e1, &e2))
}

/// Δ test for one region's records. `spec` supplies the outcome, statistic
/// and gender filter; the pairs are always father-child and paternal
/// grandfather-child.
pub fn delta_test(records: &[LineageRecord], spec: &EstimatorSpec, sample: SurSample) -> Result<DeltaTest> {
    delta_test_with(records, spec, sample, &context_for(records, spec))
}

/// Δ test on complete (grandparent, parent, child) triplets.
pub fn delta_test_triplets(triplets: &[[f64; 3]], statistic: Statistic) -> Result<DeltaTest> {
    let p1: Vec<(usize, f64, f64)> = triplets.iter().enumerate().map(|(i, t)| (i, t[1], t[2])).collect();
    let p2: Vec<(usize, f64, f64)> = triplets.iter().enumerate().map(|(i, t)| (i, t[0], t[2])).collect();
    Ok(assemble(
        RegionId(0),
        &equation(&p1, statistic)?,
        &equation(&p2, statistic)?,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeltaTests {
    pub tests: Vec<DeltaTest>,
    pub flagged: Vec<(RegionId, String)>,
}

pub fn delta_test_all(records: &[LineageRecord], spec: &EstimatorSpec, sample: SurSample) -> DeltaTests {
    let ctx = context_for(records, spec);
    let groups: Vec<(RegionId, Vec<&LineageRecord>)> = group_by_region(records).into_iter().collect();
    let results: Vec<(RegionId, Result<DeltaTest>)> = groups
        .par_iter()
        .map(|(id, recs)| (*id, delta_test_with(recs.iter().copied(), spec, sample, &ctx)))
        .collect();
    let mut tests = Vec::new();
    let mut flagged = Vec::new();
    for (id, r) in results {
        match r {
            Ok(t) => {
                if t.t_stat.is_none() {
                    flagged.push((id, "degenerate joint covariance".to_string()));
                }
                tests.push(t);
            }
            Err(e) => flagged.push((id, e.to_string())),
        }
    }
    DeltaTests { tests, flagged }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RejectShares {
    pub share_delta_pos: f64,
    pub share_t_gt_196: f64,
    pub weighted_share_delta_pos: f64,
    pub weighted_share_t_gt_196: f64,
    pub n_regions: usize,
}

/// Shares of regions with Δ > 0 and with t > 1.96, unweighted and weighted
/// by grandparent-child pair counts. Regions without a t statistic are
/// left out.
pub fn reject_shares(tests: &[DeltaTest]) -> Result<RejectShares> {
    let usable: Vec<&DeltaTest> = tests.iter().filter(|t| t.t_stat.is_some()).collect();
    if usable.is_empty() {
        return Err(MobilabError::insufficient("regions with a delta test", 1, 0));
    }
    let share = |pred: &dyn Fn(&DeltaTest) -> bool, weighted: bool| {
        let (mut hit, mut total) = (0.0, 0.0);
        for t in &usable {
            let w = if weighted { t.n_grandparent as f64 } else { 1.0 };
            total += w;
            if pred(t) {
                hit += w;
            }
        }
        hit / total
    };
    let pos = |t: &DeltaTest| t.delta > 0.0;
    let big = |t: &DeltaTest| t.t_stat.is_some_and(|v| v > 1.96);
    Ok(RejectShares {
        share_delta_pos: share(&pos, false),
        share_t_gt_196: share(&big, false),
        weighted_share_delta_pos: share(&pos, true),
        weighted_share_t_gt_196: share(&big, true),
        n_regions: usable.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatentEstimate<T> {
    pub region_id: RegionId,
    /// Child-parent statistic.
    pub beta1_child_parent: T,
    /// Parent-grandparent statistic, when available.
    pub beta1_parent_grandparent: Option<T>,
    /// Geometric mean of the two, or the child-parent statistic alone.
    pub beta1_adj: T,
    pub beta2: T,
    pub lambda_hat: T,
    pub rho_hat: T,
    pub valid: bool,
    pub reason: Option<String>,
    /// Grandparent-child pair count.
    pub weight: T,
}

/// `λ̂ = β₋₂ / β₋₁` and `ρ̂ = (β₋₁² / β₋₂)^½` with `β₋₁` the geometric mean
/// of the child-parent and parent-grandparent statistics. Invalid when any
/// input is non-positive or either estimate exceeds [`GUARDRAIL`].
pub fn recover_latent<T: Real>(
    region_id: RegionId,
    beta1_child_parent: T,
    beta1_parent_grandparent: Option<T>,
    beta2: T,
    weight: T,
) -> LatentEstimate<T> {
    let zero = T::zero();
    let mut reason = None;
    let inputs_ok = beta1_child_parent > zero && beta2 > zero && beta1_parent_grandparent.is_none_or(|b| b > zero);
    let beta1_adj = match beta1_parent_grandparent {
        Some(b) if inputs_ok => (beta1_child_parent * b).sqrt(),
        _ => beta1_child_parent,
    };
    let (lambda_hat, rho_hat) = if inputs_ok {
        (beta2 / beta1_adj, (beta1_adj * beta1_adj / beta2).sqrt())
    } else {
        reason = Some("non-positive input statistic".to_string());
        (T::nan(), T::nan())
    };
    let limit = T::of(GUARDRAIL);
    if reason.is_none() && lambda_hat > limit {
        reason = Some(format!("lambda_hat {lambda_hat} above guardrail"));
    }
    if reason.is_none() && rho_hat > limit {
        reason = Some(format!("rho_hat {rho_hat} above guardrail"));
    }
    LatentEstimate {
        region_id,
        beta1_child_parent,
        beta1_parent_grandparent,
        beta1_adj,
        beta2,
        lambda_hat,
        rho_hat,
        valid: reason.is_none(),
        reason,
        weight,
    }
}

fn region_latent<'a>(
    records: impl IntoIterator<Item = &'a LineageRecord> + Clone,
    spec: &EstimatorSpec,
    ctx: &NationalContext,
) -> Result<LatentEstimate<f64>> {
    let region_id = records.clone().into_iter().next().map_or(RegionId(0), |r| r.region_id);
    let stat = |pairs: Vec<(f64, f64)>| -> Result<(f64, usize)> {
        let (x, y): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let inf = match spec.statistic {
            Statistic::PearsonCorrelation => correlation_influence(&x, &y)?,
            Statistic::RegressionSlope => slope_influence(&x, &y)?,
        };
        Ok((inf.estimate, inf.n()))
    };
    let child_parent: Vec<(f64, f64)> = records
        .clone()
        .into_iter()
        .filter_map(|r| lineage_pair(r, spec, PairType::Father, ctx))
        .collect();
    let child_grand: Vec<(f64, f64)> = records
        .clone()
        .into_iter()
        .filter_map(|r| lineage_pair(r, spec, PairType::PaternalGrandfather, ctx))
        .collect();
    let parent_grand: Vec<(f64, f64)> = records
        .into_iter()
        .filter_map(|r| parent_grandparent_pair(r, spec))
        .collect();
    let (b1, _) = stat(child_parent)?;
    let (b2, n2) = stat(child_grand)?;
    let b1g = stat(parent_grand).ok().map(|s| s.0);
    let est = recover_latent(region_id, b1, b1g, b2, n2 as f64);
    if let Some(r) = &est.reason {
        debug!("region {region_id} excluded: {r}");
    }
    Ok(est)
}

/// The father as the child of the paternal grandfather.
fn parent_grandparent_pair(rec: &LineageRecord, spec: &EstimatorSpec) -> Option<(f64, f64)> {
    if !spec.gender_filter.admits(rec.child_gender) {
        return None;
    }
    let kind = spec.outcome.kind();
    let f = rec.outcome(Relative::Father, kind)?;
    let g = rec.outcome(Relative::PaternalGrandfather, kind)?;
    Some((g, f))
}

/// Latent estimates for one region's records.
pub fn recover_region(records: &[LineageRecord], spec: &EstimatorSpec) -> Result<LatentEstimate<f64>> {
    region_latent(records, spec, &context_for(records, spec))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatentEstimates {
    pub estimates: Vec<LatentEstimate<f64>>,
    pub flagged: Vec<(RegionId, String)>,
}

impl LatentEstimates {
    pub fn valid(&self) -> Vec<&LatentEstimate<f64>> {
        self.estimates.iter().filter(|e| e.valid).collect()
    }
}

pub fn recover_all_regions(records: &[LineageRecord], spec: &EstimatorSpec) -> LatentEstimates {
    let ctx = context_for(records, spec);
    let groups: Vec<(RegionId, Vec<&LineageRecord>)> = group_by_region(records).into_iter().collect();
    let results: Vec<(RegionId, Result<LatentEstimate<f64>>)> = groups
        .par_iter()
        .map(|(id, recs)| (*id, region_latent(recs.iter().copied(), spec, &ctx)))
        .collect();
    let mut estimates = Vec::new();
    let mut flagged = Vec::new();
    for (id, r) in results {
        match r {
            Ok(e) => {
                if let Some(reason) = &e.reason {
                    flagged.push((id, reason.clone()));
                }
                estimates.push(e);
            }
            Err(e) => flagged.push((id, e.to_string())),
        }
    }
    LatentEstimates { estimates, flagged }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentRegressors {
    Rho,
    Lambda,
    Both,
}

impl LatentRegressors {
    pub const ALL: [LatentRegressors; 3] = [LatentRegressors::Rho, LatentRegressors::Lambda, LatentRegressors::Both];

    pub fn name(self) -> &'static str {
        match self {
            LatentRegressors::Rho => "rho",
            LatentRegressors::Lambda => "lambda",
            LatentRegressors::Both => "both",
        }
    }
}

/// WLS of a region-level dependent variable on `ρ̂` and/or `λ̂` (or their
/// logs), weighted by grandparent-child pairs when `weighted`, with HC1
/// standard errors. Only valid estimates enter; `dep` is aligned with
/// `estimates`.
pub fn regress_on_latent<T: Real>(
    dependent: &str,
    dep: &[T],
    estimates: &[LatentEstimate<T>],
    regressors: LatentRegressors,
    log_mode: bool,
    weighted: bool,
) -> Result<RegressionReport> {
    if dep.len() != estimates.len() {
        return Err(MobilabError::Spec(
            "dependent variable not aligned with estimates".into(),
        ));
    }
    let rows: Vec<usize> = (0..dep.len())
        .filter(|&i| estimates[i].valid && dep[i].is_finite())
        .collect();
    if rows.len() < 3 {
        return Err(MobilabError::insufficient("valid regions", 3, rows.len()));
    }
    let tf = |v: T| if log_mode { v.ln() } else { v };
    let y: Vec<T> = rows.iter().map(|&i| tf(dep[i])).collect();
    if y.iter().any(|v| !v.is_finite()) {
        return Err(MobilabError::Spec(
            "log mode needs a positive dependent variable".into(),
        ));
    }
    let rho: Vec<T> = rows.iter().map(|&i| tf(estimates[i].rho_hat)).collect();
    let lambda: Vec<T> = rows.iter().map(|&i| tf(estimates[i].lambda_hat)).collect();
    let w: Vec<T> = rows.iter().map(|&i| estimates[i].weight).collect();
    let prefix = if log_mode { "log_" } else { "" };
    let (rho_name, lambda_name) = (format!("{prefix}rho_hat"), format!("{prefix}lambda_hat"));
    let (cols, names): (Vec<&[T]>, Vec<&str>) = match regressors {
        LatentRegressors::Rho => (vec![&rho], vec![&rho_name]),
        LatentRegressors::Lambda => (vec![&lambda], vec![&lambda_name]),
        LatentRegressors::Both => (vec![&rho, &lambda], vec![&rho_name, &lambda_name]),
    };
    let fit = Wls::new(&y).columns(cols).weights(weighted.then_some(&w[..])).fit()?;
    let dep_name = format!("{prefix}{dependent}");
    Ok(RegressionReport::from_fit(&dep_name, &names, &fit))
}

/// Regression of the grandparent-child statistic on the recovered
/// parameters.
pub fn latent_regression<T: Real>(
    estimates: &[LatentEstimate<T>],
    regressors: LatentRegressors,
    log_mode: bool,
    weighted: bool,
) -> Result<RegressionReport> {
    let dep: Vec<T> = estimates.iter().map(|e| e.beta2).collect();
    regress_on_latent("beta2", &dep, estimates, regressors, log_mode, weighted)
}

/// Weighted mean and SD of valid estimates of λ̂ and ρ̂.
pub fn latent_summary(estimates: &[LatentEstimate<f64>], weighted: bool) -> BTreeMap<&'static str, (f64, f64)> {
    let valid: Vec<&LatentEstimate<f64>> = estimates.iter().filter(|e| e.valid).collect();
    let w: Vec<f64> = valid.iter().map(|e| if weighted { e.weight } else { 1.0 }).collect();
    let mut out = BTreeMap::new();
    for (name, v) in [
        ("lambda_hat", valid.iter().map(|e| e.lambda_hat).collect::<Vec<_>>()),
        ("rho_hat", valid.iter().map(|e| e.rho_hat).collect()),
    ] {
        if let (Some(m), Some(s)) = (
            crate::moments::weighted_mean(&v, &w),
            crate::moments::weighted_sd(&v, &w),
        ) {
            out.insert(name, (m, s));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mobility::Outcome;
    use crate::synthkit::{generate_population, simulate_paternal_line, GeneratorConfig, RegionParams, ShockDist};
    use proptest::prelude::*;

    fn corr_spec() -> EstimatorSpec {
        EstimatorSpec::new(Outcome::SchoolingYears, Statistic::PearsonCorrelation, PairType::Father)
    }

    #[test]
    fn delta_arithmetic() {
        let t = recover_latent(RegionId(1), 0.3f64, None, 0.12, 1.0);
        assert!((t.beta2 - t.beta1_adj * t.beta1_adj - 0.03).abs() < 1e-15);
        assert!((delta_variance(1.0f64, 2.0, 3.0, 0.3) - (1.0 + 0.36 * 2.0 - 1.2 * 3.0)).abs() < 1e-15);
    }

    #[test]
    fn recovery_arithmetic() {
        let e = recover_latent(RegionId(1), 0.3f64, None, 0.12, 1.0);
        assert!((e.lambda_hat - 0.4).abs() < 1e-15);
        assert!((e.rho_hat - 0.75f64.sqrt()).abs() < 1e-15);
        let g = recover_latent(RegionId(1), 0.32f64, Some(0.28), 0.1, 1.0);
        assert!((g.beta1_adj - 0.0896f64.sqrt()).abs() < 1e-15);
        assert!((g.beta1_adj - 0.2993).abs() < 1e-4);
    }

    #[test]
    fn guardrails() {
        assert!(!recover_latent(RegionId(1), 0.3, None, -0.01, 1.0).valid);
        assert!(!recover_latent(RegionId(1), 0.3, Some(-0.1), 0.05, 1.0).valid);
        let big_lambda = recover_latent(RegionId(1), 0.1, None, 0.2, 1.0);
        assert!(!big_lambda.valid && big_lambda.reason.unwrap().contains("lambda"));
        let big_rho = recover_latent(RegionId(1), 0.5, None, 0.05, 1.0);
        assert!(!big_rho.valid && big_rho.reason.unwrap().contains("rho"));
    }

    proptest! {
        #[test]
        fn identity_closure(b1 in 0.01f64..0.9, b1g in 0.01f64..0.9, ratio in 0.05f64..1.2) {
            let adj = (b1 * b1g).sqrt();
            let b2 = adj * ratio;
            let e = recover_latent(RegionId(1), b1, Some(b1g), b2, 1.0);
            if e.valid {
                prop_assert!((e.rho_hat * e.rho_hat * e.lambda_hat - e.beta1_adj).abs() < 1e-10);
                prop_assert!((e.rho_hat.powi(2) * e.lambda_hat.powi(2) - e.beta2).abs() < 1e-10);
            }
        }

        #[test]
        fn identity_closure_f32(b1 in 0.05f32..0.9, ratio in 0.1f32..1.2) {
            let b2 = b1 * ratio;
            let e = recover_latent(RegionId(1), b1, None, b2, 1.0f32);
            if e.valid {
                prop_assert!((e.rho_hat * e.rho_hat * e.lambda_hat - b1).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn variance_matches_direct_substitution() {
        let trip = simulate_paternal_line(0.9, 0.4, 2000, 5, 0, ShockDist::Gaussian).unwrap();
        let t = delta_test_triplets(&trip, Statistic::PearsonCorrelation).unwrap();
        let direct = t.var_beta2 + 4.0 * t.beta1 * t.beta1 * t.var_beta1 - 4.0 * t.beta1 * t.cov_b1b2;
        assert!((t.var_delta - direct).abs() < 1e-15);
        assert!((t.delta - (t.beta2 - t.beta1 * t.beta1)).abs() == 0.0);
        assert_eq!(t.n_common, 2000);
    }

    #[test]
    fn union_sample_uses_equation_specific_pairs() {
        let mut region = RegionParams::standardized(1, 0.9, 0.4, 3000);
        region.missing_rates = [0.0, 0.1, 0.0, 0.3, 0.0, 0.0, 0.0];
        let recs = generate_population(&GeneratorConfig::new(8, vec![region])).unwrap();
        let u = delta_test(&recs, &corr_spec(), SurSample::Union).unwrap();
        let b = delta_test(&recs, &corr_spec(), SurSample::TripletComplete).unwrap();
        assert!(u.n_parent > b.n_parent && u.n_grandparent > b.n_grandparent);
        assert_eq!(u.n_common, b.n_common);
        assert_eq!(b.n_parent, b.n_common);
    }

    #[test]
    fn slope_mode_runs() {
        let trip = simulate_paternal_line(0.9, 0.4, 1000, 5, 1, ShockDist::Gaussian).unwrap();
        let t = delta_test_triplets(&trip, Statistic::RegressionSlope).unwrap();
        assert!(t.var_delta > 0.0 && t.t_stat.is_some());
    }

    #[test]
    fn constant_regressor_is_an_error() {
        let trip = vec![[1.0, 1.0, 0.0], [1.0, 1.0, 1.0], [1.0, 1.0, 2.0]];
        assert!(delta_test_triplets(&trip, Statistic::PearsonCorrelation).is_err());
    }

    #[test]
    fn reject_shares_all_positive() {
        let trip = simulate_paternal_line(0.7, 0.6, 5000, 9, 0, ShockDist::Gaussian).unwrap();
        let t = delta_test_triplets(&trip, Statistic::PearsonCorrelation).unwrap();
        assert!(t.delta > 0.0);
        let s = reject_shares(&[t.clone(), t]).unwrap();
        assert_eq!(s.share_delta_pos, 1.0);
        assert_eq!(s.weighted_share_delta_pos, 1.0);
        assert!(reject_shares(&[]).is_err());
    }

    #[test]
    fn log_mode_with_both_regressors_is_exact() {
        let est: Vec<LatentEstimate<f64>> = (0..12)
            .map(|i| {
                let rho = 0.7 + 0.02 * i as f64;
                let lambda = 0.25 + 0.037 * ((i * 5) % 12) as f64;
                let b1 = rho * rho * lambda;
                let b2 = b1 * lambda;
                recover_latent(RegionId(i), b1, None, b2, 1000.0 + 50.0 * i as f64)
            })
            .collect();
        let rep = latent_regression(&est, LatentRegressors::Both, true, true).unwrap();
        assert!((rep.coef("log_rho_hat").unwrap().estimate - 2.0).abs() < 1e-8);
        assert!((rep.coef("log_lambda_hat").unwrap().estimate - 2.0).abs() < 1e-8);
        assert!((rep.r2 - 1.0).abs() < 1e-8);
    }

    #[test]
    fn omitted_parameter_heterogeneity_drives_fit() {
        let make = |rho_spread: f64| -> Vec<LatentEstimate<f64>> {
            (0..40)
                .map(|i| {
                    let rho = 0.85 + rho_spread * (((i * 7) % 40) as f64 / 40.0 - 0.5);
                    let lambda = 0.2 + 0.4 * i as f64 / 40.0;
                    recover_latent(RegionId(i), rho * rho * lambda, None, rho * rho * lambda * lambda, 1.0)
                })
                .collect()
        };
        let loose = latent_regression(&make(0.2), LatentRegressors::Lambda, true, false).unwrap();
        let tight = latent_regression(&make(0.02), LatentRegressors::Lambda, true, false).unwrap();
        assert!(tight.r2 > loose.r2);
        assert!(tight.r2 > 0.99);
    }

    #[test]
    fn too_few_regions() {
        let est = vec![recover_latent(RegionId(1), 0.3, None, 0.12, 1.0); 2];
        assert!(matches!(
            latent_regression(&est, LatentRegressors::Rho, false, true),
            Err(MobilabError::InsufficientData { .. })
        ));
    }

    #[test]
    fn recovery_on_large_region() {
        let recs = generate_population(&GeneratorConfig::new(
            31,
            vec![RegionParams::standardized(1, 0.85, 0.5, 200_000)],
        ))
        .unwrap();
        let e = recover_region(&recs, &corr_spec()).unwrap();
        assert!(e.valid);
        assert!((e.lambda_hat - 0.5).abs() < 0.03, "{}", e.lambda_hat);
        assert!((e.rho_hat - 0.85).abs() < 0.03, "{}", e.rho_hat);
    }
}
