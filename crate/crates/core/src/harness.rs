//! Sampling-error diagnostics and robustness drivers: placebo reshuffling
//! of pairs across regions, random subsample replicates, and Monte-Carlo
//! recovery experiments for the latent model.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{MobilabError, Result};
use crate::latent::{delta_test_triplets, recover_latent};
use crate::mobility::{context_for, group_by_region, lineage_pair, EstimatorSpec, Statistic};
use crate::moments::{pearson, sample_sd, PairMoments};
use crate::record::{LineageRecord, RegionId};
use crate::regression::{Coefficient, RegressionReport};
use crate::synthkit::{implied_moments, simulate_paternal_line, validate_rho_lambda, ShockDist};

fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlaceboConfig {
    pub seed: u64,
    pub n_permutations: usize,
    /// Regions with at most this many pairs are "small".
    pub split_threshold: usize,
}

impl Default for PlaceboConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_permutations: 20,
            split_threshold: 2000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeGroup {
    Small,
    Large,
    All,
}

impl SizeGroup {
    pub fn name(self) -> &'static str {
        match self {
            SizeGroup::Small => "small",
            SizeGroup::Large => "large",
            SizeGroup::All => "all",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DispersionReport {
    pub group: SizeGroup,
    pub n_regions: usize,
    pub mean_pairs: f64,
    pub actual_sd: f64,
    /// Mean over permutations of the SD across placebo regions.
    pub placebo_sd: f64,
    /// `placebo_sd / actual_sd`, when `actual_sd > 0`.
    pub ratio: Option<f64>,
}

fn pair_statistic(x: &[f64], y: &[f64], statistic: Statistic) -> Option<f64> {
    let m = PairMoments::from_slices(x, y);
    match statistic {
        Statistic::PearsonCorrelation => m.correlation(),
        Statistic::RegressionSlope => m.slope(),
    }
}

/// Region estimates from actual pairs and from pairs randomly reassigned to
/// regions with each region's pair count preserved.
pub fn placebo_reshuffle(
    records: &[LineageRecord],
    config: &PlaceboConfig,
    spec: &EstimatorSpec,
) -> Result<Vec<DispersionReport>> {
    if config.n_permutations == 0 {
        return Err(MobilabError::Config("need at least one permutation".into()));
    }
    let ctx = context_for(records, spec);
    let mut regions: Vec<(RegionId, Vec<(f64, f64)>)> = group_by_region(records)
        .into_iter()
        .map(|(id, recs)| {
            (
                id,
                recs.into_iter()
                    .filter_map(|r| lineage_pair(r, spec, spec.pair, &ctx))
                    .collect(),
            )
        })
        .collect();
    regions.retain(|(_, p)| p.len() >= 2);
    if regions.len() < 2 {
        return Err(MobilabError::insufficient("regions with pairs", 2, regions.len()));
    }
    let sizes: Vec<usize> = regions.iter().map(|(_, p)| p.len()).collect();
    let stat_of = |pairs: &[(f64, f64)]| -> Option<f64> {
        let (x, y): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
        pair_statistic(&x, &y, spec.statistic)
    };
    let actual: Vec<Option<f64>> = regions.iter().map(|(_, p)| stat_of(p)).collect();
    let pool: Vec<(f64, f64)> = regions.iter().flat_map(|(_, p)| p.iter().copied()).collect();

    let placebo: Vec<Vec<Option<f64>>> = (0..config.n_permutations)
        .into_par_iter()
        .map(|k| {
            let mut shuffled = pool.clone();
            shuffled.shuffle(&mut seeded(config.seed, k as u64));
            let mut out = Vec::with_capacity(sizes.len());
            let mut start = 0;
            for &n in &sizes {
                out.push(stat_of(&shuffled[start..start + n]));
                start += n;
            }
            out
        })
        .collect();

    let groups = [SizeGroup::Small, SizeGroup::Large, SizeGroup::All];
    let reports = groups
        .iter()
        .filter_map(|&g| {
            let members: Vec<usize> = (0..sizes.len())
                .filter(|&i| match g {
                    SizeGroup::Small => sizes[i] <= config.split_threshold,
                    SizeGroup::Large => sizes[i] > config.split_threshold,
                    SizeGroup::All => true,
                })
                .collect();
            if members.len() < 2 {
                return None;
            }
            let sd_of = |vals: &[Option<f64>]| -> f64 {
                let v: Vec<f64> = members.iter().filter_map(|&i| vals[i]).collect();
                sample_sd(&v).unwrap_or(0.0)
            };
            let actual_sd = sd_of(&actual);
            let placebo_sd = placebo.iter().map(|p| sd_of(p)).sum::<f64>() / placebo.len() as f64;
            Some(DispersionReport {
                group: g,
                n_regions: members.len(),
                mean_pairs: members.iter().map(|&i| sizes[i] as f64).sum::<f64>() / members.len() as f64,
                actual_sd,
                placebo_sd,
                ratio: (actual_sd > 0.0).then(|| placebo_sd / actual_sd),
            })
        })
        .collect();
    Ok(reports)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsampleConfig {
    pub seed: u64,
    pub replicates: usize,
    /// Inclusion probability of each lineage, in (0, 1].
    pub fraction: f64,
}

impl Default for SubsampleConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            replicates: 10,
            fraction: 1.0 / 3.0,
        }
    }
}

/// Lineages kept in replicate `k`: independent Bernoulli draws at
/// `fraction`, from a stream fixed by the seed and `k`.
pub fn subsample(records: &[LineageRecord], config: &SubsampleConfig, k: usize) -> Vec<LineageRecord> {
    if config.fraction >= 1.0 {
        return records.to_vec();
    }
    let mut rng = seeded(config.seed, k as u64);
    records
        .iter()
        .filter(|_| rng.random::<f64>() < config.fraction)
        .cloned()
        .collect()
}

/// Runs `analysis` on each subsample replicate and averages every report's
/// coefficients, standard errors and fit statistics across replicates.
/// Reports are matched by position and coefficients by name.
pub fn subsample_replicates<F>(
    records: &[LineageRecord],
    config: &SubsampleConfig,
    analysis: F,
) -> Result<Vec<RegressionReport>>
where
    F: Fn(&[LineageRecord]) -> Result<Vec<RegressionReport>> + Sync,
{
    if !(config.fraction > 0.0 && config.fraction <= 1.0) {
        return Err(MobilabError::Config(format!(
            "subsample fraction must lie in (0, 1], got {}",
            config.fraction
        )));
    }
    if config.replicates == 0 {
        return Err(MobilabError::Config("need at least one replicate".into()));
    }
    let runs: Vec<Vec<RegressionReport>> = (0..config.replicates)
        .into_par_iter()
        .map(|k| analysis(&subsample(records, config, k)))
        .collect::<Result<_>>()?;
    let first = &runs[0];
    if runs.iter().any(|r| r.len() != first.len()) {
        return Err(MobilabError::Spec(
            "replicates produced different numbers of reports".into(),
        ));
    }
    let k = runs.len() as f64;
    let averaged = (0..first.len())
        .map(|j| {
            let template = &first[j];
            let coefficients = template
                .coefficients
                .iter()
                .map(|c| {
                    let matching: Vec<&Coefficient> = runs
                        .iter()
                        .filter_map(|r| r[j].coefficients.iter().find(|d| d.name == c.name))
                        .collect();
                    let m = matching.len() as f64;
                    let estimate = matching.iter().map(|d| d.estimate).sum::<f64>() / m;
                    let se = matching.iter().map(|d| d.se).sum::<f64>() / m;
                    Coefficient {
                        name: c.name.clone(),
                        estimate,
                        se,
                        t: if se > 0.0 { estimate / se } else { f64::NAN },
                        p_value: matching.iter().map(|d| d.p_value).sum::<f64>() / m,
                    }
                })
                .collect();
            RegressionReport {
                dependent: template.dependent.clone(),
                coefficients,
                n: (runs.iter().map(|r| r[j].n as f64).sum::<f64>() / k).round() as usize,
                r2: runs.iter().map(|r| r[j].r2).sum::<f64>() / k,
                adj_r2: runs.iter().map(|r| r[j].adj_r2).sum::<f64>() / k,
                condition_number: runs.iter().map(|r| r[j].condition_number).fold(0.0, f64::max),
                warnings: runs
                    .iter()
                    .flat_map(|r| r[j].warnings.iter().cloned())
                    .collect::<std::collections::BTreeSet<_>>()
                    .into_iter()
                    .collect(),
            }
        })
        .collect();
    Ok(averaged)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryGrid {
    pub rhos: Vec<f64>,
    pub lambdas: Vec<f64>,
    pub sizes: Vec<usize>,
    pub replicates: usize,
    pub seed: u64,
    #[serde(default)]
    pub shocks: ShockDist,
    #[serde(default)]
    pub statistic: Statistic,
}

impl Default for RecoveryGrid {
    fn default() -> Self {
        Self {
            rhos: vec![0.7, 0.8, 0.9, 1.0],
            lambdas: vec![0.2, 0.4, 0.6],
            sizes: vec![5000],
            replicates: 100,
            seed: 0,
            shocks: ShockDist::Gaussian,
            statistic: Statistic::PearsonCorrelation,
        }
    }
}

impl RecoveryGrid {
    pub fn validate(&self) -> Result<()> {
        if self.rhos.is_empty() || self.lambdas.is_empty() || self.sizes.is_empty() || self.replicates == 0 {
            return Err(MobilabError::EmptyConfig);
        }
        for &r in &self.rhos {
            for &l in &self.lambdas {
                validate_rho_lambda(r, l)?;
            }
        }
        if self.sizes.iter().any(|&n| n < 3) {
            return Err(MobilabError::Config("sample sizes must be at least 3".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuantitySummary {
    pub name: &'static str,
    pub truth: f64,
    pub mean: f64,
    pub bias: f64,
    pub sd: f64,
    /// Monte-Carlo standard error of the mean.
    pub mc_se: f64,
    pub n: usize,
}

impl QuantitySummary {
    fn new(name: &'static str, truth: f64, values: &[f64]) -> Self {
        let n = values.len();
        let mean = if n > 0 {
            values.iter().sum::<f64>() / n as f64
        } else {
            f64::NAN
        };
        let sd = sample_sd(values).unwrap_or(f64::NAN);
        Self {
            name,
            truth,
            mean,
            bias: mean - truth,
            sd,
            mc_se: sd / (n as f64).sqrt(),
            n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecoveryCell {
    pub rho: f64,
    pub lambda: f64,
    pub n: usize,
    pub replicates: usize,
    /// beta1, beta2, delta, lambda_hat, rho_hat.
    pub quantities: Vec<QuantitySummary>,
    /// Share of replicates with |Δ̂ − Δ| / SE < 1.96.
    pub delta_coverage: f64,
    /// Share of replicates with |Δ̂| / SE > 1.96.
    pub delta_rejection_rate: f64,
    pub mean_var_delta: f64,
    /// Variance of Δ̂ across replicates.
    pub empirical_var_delta: f64,
    /// Correlation of ρ̂ and λ̂ across valid replicates.
    pub corr_rho_lambda: f64,
    pub invalid_share: f64,
}

impl RecoveryCell {
    pub fn quantity(&self, name: &str) -> Option<&QuantitySummary> {
        self.quantities.iter().find(|q| q.name == name)
    }
}

struct Replicate {
    b1: f64,
    b2: f64,
    delta: f64,
    var_delta: f64,
    latent: Option<(f64, f64)>,
}

fn run_replicate(rho: f64, lambda: f64, n: usize, seed: u64, k: usize, grid: &RecoveryGrid) -> Result<Replicate> {
    let trip = simulate_paternal_line(rho, lambda, n, seed, k, grid.shocks)?;
    let t = delta_test_triplets(&trip, grid.statistic)?;
    let gp: Vec<f64> = trip.iter().map(|t| t[0]).collect();
    let p: Vec<f64> = trip.iter().map(|t| t[1]).collect();
    let b_pg = match grid.statistic {
        Statistic::PearsonCorrelation => pearson(&gp, &p),
        Statistic::RegressionSlope => PairMoments::from_slices(&gp, &p).slope(),
    };
    let est = recover_latent(RegionId(0), t.beta1, b_pg, t.beta2, n as f64);
    Ok(Replicate {
        b1: t.beta1,
        b2: t.beta2,
        delta: t.delta,
        var_delta: t.var_delta,
        latent: est.valid.then_some((est.lambda_hat, est.rho_hat)),
    })
}

/// Replicate-level Monte-Carlo summary for every (ρ, λ, n) cell. Cell `c`
/// (in ρ-major, then λ, then n order) draws from seed `seed + c·φ` with
/// replicate `k` on stream `k`.
pub fn recovery_experiment(grid: &RecoveryGrid) -> Result<Vec<RecoveryCell>> {
    grid.validate()?;
    let mut cells = Vec::new();
    let mut c = 0u64;
    for &rho in &grid.rhos {
        for &lambda in &grid.lambdas {
            for &n in &grid.sizes {
                let seed = grid.seed.wrapping_add(c.wrapping_mul(0x9E37_79B9_7F4A_7C15));
                c += 1;
                let reps: Vec<Replicate> = (0..grid.replicates)
                    .into_par_iter()
                    .map(|k| run_replicate(rho, lambda, n, seed, k, grid))
                    .collect::<Result<_>>()?;
                cells.push(summarize(rho, lambda, n, &reps));
            }
        }
    }
    Ok(cells)
}

fn summarize(rho: f64, lambda: f64, n: usize, reps: &[Replicate]) -> RecoveryCell {
    let (b1, b2, delta) = implied_moments(rho, lambda);
    let col = |f: fn(&Replicate) -> f64| reps.iter().map(f).collect::<Vec<f64>>();
    let deltas = col(|r| r.delta);
    let valid: Vec<(f64, f64)> = reps.iter().filter_map(|r| r.latent).collect();
    let lambdas: Vec<f64> = valid.iter().map(|v| v.0).collect();
    let rhos: Vec<f64> = valid.iter().map(|v| v.1).collect();
    let r = reps.len() as f64;
    let covered = reps
        .iter()
        .filter(|x| x.var_delta > 0.0 && ((x.delta - delta) / x.var_delta.sqrt()).abs() < 1.96)
        .count() as f64;
    let rejected = reps
        .iter()
        .filter(|x| x.var_delta > 0.0 && (x.delta / x.var_delta.sqrt()).abs() > 1.96)
        .count() as f64;
    let mean_delta = deltas.iter().sum::<f64>() / r;
    let empirical_var_delta = deltas.iter().map(|d| (d - mean_delta).powi(2)).sum::<f64>() / (r - 1.0).max(1.0);
    RecoveryCell {
        rho,
        lambda,
        n,
        replicates: reps.len(),
        quantities: vec![
            QuantitySummary::new("beta1", b1, &col(|r| r.b1)),
            QuantitySummary::new("beta2", b2, &col(|r| r.b2)),
            QuantitySummary::new("delta", delta, &deltas),
            QuantitySummary::new("lambda_hat", lambda, &lambdas),
            QuantitySummary::new("rho_hat", rho, &rhos),
        ],
        delta_coverage: covered / r,
        delta_rejection_rate: rejected / r,
        mean_var_delta: col(|r| r.var_delta).iter().sum::<f64>() / r,
        empirical_var_delta,
        corr_rho_lambda: pearson(&rhos, &lambdas).unwrap_or(f64::NAN),
        invalid_share: 1.0 - valid.len() as f64 / r,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mobility::{estimate_national, Outcome, PairType};
    use crate::synthkit::{generate_population, GeneratorConfig, RegionParams};

    fn spec() -> EstimatorSpec {
        EstimatorSpec::new(Outcome::SchoolingYears, Statistic::PearsonCorrelation, PairType::Father)
    }

    fn homogeneous(regions: u32, n: usize, seed: u64) -> Vec<LineageRecord> {
        let params = (0..regions)
            .map(|i| RegionParams::standardized(100 + i, 0.9, 0.4, n))
            .collect();
        generate_population(&GeneratorConfig::new(seed, params)).unwrap()
    }

    #[test]
    fn placebo_matches_sampling_sd_under_homogeneity() {
        let recs = homogeneous(120, 1000, 4);
        let reports = placebo_reshuffle(&recs, &PlaceboConfig::default(), &spec()).unwrap();
        let all = reports.iter().find(|r| r.group == SizeGroup::All).unwrap();
        let r = 0.81 * 0.4;
        let analytic = (1.0 - r * r) / 1000f64.sqrt();
        assert!(
            (all.placebo_sd / analytic - 1.0).abs() < 0.15,
            "{} vs {analytic}",
            all.placebo_sd
        );
        assert!((all.placebo_sd / all.actual_sd - 1.0).abs() < 0.3);
    }

    #[test]
    fn permutation_preserves_pool_and_sizes() {
        let recs = homogeneous(5, 300, 2);
        let ctx = context_for(&recs, &spec());
        let pool: Vec<(f64, f64)> = recs
            .iter()
            .filter_map(|r| lineage_pair(r, &spec(), PairType::Father, &ctx))
            .collect();
        let mut shuffled = pool.clone();
        shuffled.shuffle(&mut seeded(1, 0));
        let national = estimate_national(&recs, &spec()).unwrap().beta;
        let (x, y): (Vec<f64>, Vec<f64>) = shuffled.iter().copied().unzip();
        let pooled = pair_statistic(&x, &y, Statistic::PearsonCorrelation).unwrap();
        assert!((pooled - national).abs() < 1e-12);
    }

    #[test]
    fn placebo_needs_two_regions() {
        let recs = homogeneous(1, 100, 2);
        assert!(placebo_reshuffle(&recs, &PlaceboConfig::default(), &spec()).is_err());
    }

    #[test]
    fn large_regions_have_smaller_placebo_sd() {
        let mut params: Vec<RegionParams> = (0..40)
            .map(|i| RegionParams::standardized(100 + i, 0.9, 0.4, 800))
            .collect();
        params.extend((0..40).map(|i| RegionParams::standardized(200 + i, 0.9, 0.4, 7200)));
        let recs = generate_population(&GeneratorConfig::new(5, params)).unwrap();
        let reports = placebo_reshuffle(&recs, &PlaceboConfig::default(), &spec()).unwrap();
        let small = reports.iter().find(|r| r.group == SizeGroup::Small).unwrap();
        let large = reports.iter().find(|r| r.group == SizeGroup::Large).unwrap();
        let expected = (small.mean_pairs / large.mean_pairs).sqrt();
        assert!((large.placebo_sd / small.placebo_sd / expected - 1.0).abs() < 0.2);
    }

    fn national_report(recs: &[LineageRecord]) -> Result<Vec<RegressionReport>> {
        let e = estimate_national(
            recs,
            &EstimatorSpec::new(Outcome::SchoolingYears, Statistic::RegressionSlope, PairType::Father),
        )?;
        Ok(vec![RegressionReport {
            dependent: "child".into(),
            coefficients: vec![Coefficient {
                name: "father".into(),
                estimate: e.beta,
                se: e.se_beta,
                t: e.beta / e.se_beta,
                p_value: 0.0,
            }],
            n: e.n_pairs,
            r2: e.r2,
            adj_r2: e.r2,
            condition_number: 1.0,
            warnings: vec![],
        }])
    }

    #[test]
    fn full_fraction_single_replicate_is_identity() {
        let recs = homogeneous(2, 500, 8);
        let cfg = SubsampleConfig {
            seed: 1,
            replicates: 1,
            fraction: 1.0,
        };
        let avg = subsample_replicates(&recs, &cfg, national_report).unwrap();
        assert_eq!(avg[0].coefficients, national_report(&recs).unwrap()[0].coefficients);
    }

    #[test]
    fn subsamples_are_deterministic_and_sized() {
        let recs = homogeneous(2, 3000, 8);
        let cfg = SubsampleConfig::default();
        let a = subsample_replicates(&recs, &cfg, national_report).unwrap();
        let b = subsample_replicates(&recs, &cfg, national_report).unwrap();
        assert_eq!(a, b);
        let kept = subsample(&recs, &cfg, 0).len() as f64 / recs.len() as f64;
        assert!((kept - 1.0 / 3.0).abs() < 0.03);
        let bad = SubsampleConfig { fraction: 0.0, ..cfg };
        assert!(matches!(
            subsample_replicates(&recs, &bad, national_report),
            Err(MobilabError::Config(_))
        ));
    }

    #[test]
    fn markov_null_cell_centres_on_zero() {
        let grid = RecoveryGrid {
            rhos: vec![1.0],
            lambdas: vec![0.4],
            sizes: vec![2000],
            replicates: 200,
            seed: 3,
            shocks: ShockDist::Gaussian,
            statistic: Statistic::PearsonCorrelation,
        };
        let cell = &recovery_experiment(&grid).unwrap()[0];
        let d = cell.quantity("delta").unwrap();
        assert!(d.mean.abs() < 2.0 * d.mc_se + 1e-4, "{d:?}");
        assert_eq!(d.truth, 0.0);
    }

    #[test]
    fn lambda_recovered_at_moderate_n() {
        let grid = RecoveryGrid {
            rhos: vec![0.9],
            lambdas: vec![0.4],
            sizes: vec![5000],
            replicates: 500,
            seed: 12,
            shocks: ShockDist::Gaussian,
            statistic: Statistic::PearsonCorrelation,
        };
        let cell = &recovery_experiment(&grid).unwrap()[0];
        assert!((cell.quantity("lambda_hat").unwrap().mean - 0.4).abs() < 0.02);
        assert!(cell.corr_rho_lambda < 0.0);
    }

    #[test]
    fn grid_validation() {
        let grid = RecoveryGrid {
            rhos: vec![1.2],
            lambdas: vec![0.4],
            sizes: vec![100],
            replicates: 2,
            seed: 0,
            shocks: ShockDist::Gaussian,
            statistic: Statistic::PearsonCorrelation,
        };
        assert!(matches!(
            recovery_experiment(&grid),
            Err(MobilabError::ParameterDomain(_))
        ));
    }
}
