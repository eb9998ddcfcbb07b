//! Synthetic three-generation regional populations drawn from a latent
//! factor transmission model.
//!
//! Within region `r`, every person carries a standardized latent endowment
//! `e` and an observed outcome `y = ρᵣ e + u` with `Var(u) = 1 − ρᵣ²`.
//! Endowments follow an AR(1) down the paternal line,
//! `e_next = λᵣ e + v` with `Var(v) = 1 − λᵣ²`, starting from the stationary
//! distribution at the grandparent generation. The observed outcome is then
//! mapped affinely onto per-generation means and standard deviations.
//!
//! Spouses (mother, both grandmothers) are noisy copies of their partner's
//! endowment with latent correlation `spousal_corr`; the maternal grandfather
//! is drawn backwards from the mother with the same `λᵣ`, which is the
//! time-reversal of a stationary Gaussian AR(1).
//!
//! Earnings follow a second endowment chain mixed with the schooling chain
//! (`outcome_link`), so the two outcomes share `λᵣ` but have their own
//! returns.
//!
//! Every lineage draws from its own ChaCha stream keyed by
//! `(region index, lineage index)`, so output does not depend on scheduling.

mod education;
mod panel;
mod preset;

pub use education::{apply_categorical_education, EducationThresholds, SCHOOLING_CODES};
pub use panel::{
    flag_below_floor, generate_earnings_panel, EarningsPanelRow, EduGroup, GroupProfile, PanelConfig, ProfileTable,
    ProfileTerm, AGE_CENTER, YEAR_CENTER,
};
pub use preset::{sweden_preset, SwedenPreset, PRESET_AGGREGATES, PRESET_REGIONS};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, StudentT};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{MobilabError, Result};
use crate::moments::midranks;
use crate::record::{Gender, LineageRecord, Outcomes, RegionId, Relative};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EarningsParams {
    pub rho: f64,
    /// Log earnings means, indexed grandparent, parent, child.
    pub gen_means: [f64; 3],
    pub gen_sds: [f64; 3],
    /// Per relative, indexed like [`Relative::ALL`].
    pub missing_rates: [f64; 7],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionParams {
    pub region_id: RegionId,
    pub rho: f64,
    pub lambda: f64,
    pub n_lineages: usize,
    /// Schooling means, indexed grandparent, parent, child.
    pub gen_means: [f64; 3],
    pub gen_sds: [f64; 3],
    pub missing_rates: [f64; 7],
    #[serde(default)]
    pub earnings: Option<EarningsParams>,
}

impl RegionParams {
    /// Standardized outcomes (mean 0, sd 1 in every generation), no
    /// missingness, no earnings.
    pub fn standardized(region_id: u32, rho: f64, lambda: f64, n_lineages: usize) -> Self {
        Self {
            region_id: RegionId(region_id),
            rho,
            lambda,
            n_lineages,
            gen_means: [0.0; 3],
            gen_sds: [1.0; 3],
            missing_rates: [0.0; 7],
            earnings: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        validate_rho_lambda(self.rho, self.lambda)?;
        if self.n_lineages == 0 {
            return Err(MobilabError::EmptyConfig);
        }
        check_sds(&self.gen_sds)?;
        check_rates(&self.missing_rates)?;
        if let Some(e) = &self.earnings {
            if !(e.rho > 0.0 && e.rho <= 1.0) {
                return Err(MobilabError::ParameterDomain(format!(
                    "earnings rho must lie in (0, 1], got {}",
                    e.rho
                )));
            }
            check_sds(&e.gen_sds)?;
            check_rates(&e.missing_rates)?;
        }
        Ok(())
    }
}

pub fn validate_rho_lambda(rho: f64, lambda: f64) -> Result<()> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(MobilabError::ParameterDomain(format!(
            "rho must lie in (0, 1], got {rho}"
        )));
    }
    if !(0.0..1.0).contains(&lambda) {
        return Err(MobilabError::ParameterDomain(format!(
            "lambda must lie in [0, 1), got {lambda}"
        )));
    }
    Ok(())
}

fn check_sds(sds: &[f64; 3]) -> Result<()> {
    if sds.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(MobilabError::ParameterDomain(format!(
            "generation standard deviations must be positive, got {sds:?}"
        )));
    }
    Ok(())
}

fn check_rates(rates: &[f64; 7]) -> Result<()> {
    if rates.iter().any(|&p| !(0.0..1.0).contains(&p)) {
        return Err(MobilabError::ParameterDomain(format!(
            "missing rates must lie in [0, 1), got {rates:?}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutcomeMode {
    #[default]
    Continuous,
    CategoricalEducation,
    /// Categorical schooling plus a person-year earnings panel.
    EarningsPanel,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ShockDist {
    #[default]
    Gaussian,
    /// Student-t rescaled to unit variance; `df` must exceed 2.
    StudentT { df: f64 },
}

/// Departures from the steady state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Drift {
    /// Variance of the grandparent endowment when not in steady state.
    pub initial_variance: f64,
    /// Added to the generation means (grandparent, parent, child).
    pub mean_shift: [f64; 3],
    /// Multiplies the generation standard deviations.
    pub sd_scale: [f64; 3],
}

impl Default for Drift {
    fn default() -> Self {
        Self {
            initial_variance: 1.0,
            mean_shift: [0.0; 3],
            sd_scale: [1.0; 3],
        }
    }
}

fn default_true() -> bool {
    true
}
fn default_spousal() -> f64 {
    0.5
}
fn default_link() -> f64 {
    0.5
}
fn default_birth_years() -> (i32, i32) {
    (1981, 1989)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub seed: u64,
    pub regions: Vec<RegionParams>,
    #[serde(default)]
    pub outcome_mode: OutcomeMode,
    #[serde(default = "default_true")]
    pub steady_state: bool,
    #[serde(default)]
    pub drift: Option<Drift>,
    /// Latent correlation between partners.
    #[serde(default = "default_spousal")]
    pub spousal_corr: f64,
    /// Correlation between a person's schooling and earnings endowments.
    #[serde(default = "default_link")]
    pub outcome_link: f64,
    #[serde(default)]
    pub shocks: ShockDist,
    /// Inclusive range of child birth years.
    #[serde(default = "default_birth_years")]
    pub birth_years: (i32, i32),
    #[serde(default)]
    pub education_thresholds: Option<EducationThresholds>,
}

impl GeneratorConfig {
    pub fn new(seed: u64, regions: Vec<RegionParams>) -> Self {
        Self {
            seed,
            regions,
            outcome_mode: OutcomeMode::Continuous,
            steady_state: true,
            drift: None,
            spousal_corr: default_spousal(),
            outcome_link: default_link(),
            shocks: ShockDist::Gaussian,
            birth_years: default_birth_years(),
            education_thresholds: None,
        }
    }

    pub fn total_lineages(&self) -> usize {
        self.regions.iter().map(|r| r.n_lineages).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.regions.is_empty() {
            return Err(MobilabError::EmptyConfig);
        }
        for r in &self.regions {
            r.validate()?;
        }
        for (name, v) in [("spousal_corr", self.spousal_corr), ("outcome_link", self.outcome_link)] {
            if !(-1.0..=1.0).contains(&v) {
                return Err(MobilabError::ParameterDomain(format!(
                    "{name} must lie in [-1, 1], got {v}"
                )));
            }
        }
        if let ShockDist::StudentT { df } = self.shocks {
            if !(df > 2.0) {
                return Err(MobilabError::ParameterDomain(format!(
                    "student-t shocks need df > 2 for a finite variance, got {df}"
                )));
            }
        }
        if self.birth_years.0 > self.birth_years.1 {
            return Err(MobilabError::Config("birth year range is empty".into()));
        }
        if let Some(d) = &self.drift {
            if !(d.initial_variance > 0.0) || d.sd_scale.iter().any(|&s| !(s > 0.0)) {
                return Err(MobilabError::ParameterDomain("drift variances must be positive".into()));
            }
        }
        if let Some(t) = &self.education_thresholds {
            t.validate()?;
        }
        let mut ids: Vec<_> = self.regions.iter().map(|r| r.region_id).collect();
        ids.sort();
        ids.dedup();
        if ids.len() != self.regions.len() {
            return Err(MobilabError::Config("region ids must be unique".into()));
        }
        Ok(())
    }
}

/// Unit-variance shock sampler.
#[derive(Debug, Clone, Copy)]
pub(crate) enum Shock {
    Gaussian,
    StudentT(StudentT<f64>, f64),
}

impl Shock {
    pub(crate) fn new(dist: ShockDist) -> Self {
        match dist {
            ShockDist::Gaussian => Shock::Gaussian,
            ShockDist::StudentT { df } => {
                Shock::StudentT(StudentT::new(df).expect("df validated"), ((df - 2.0) / df).sqrt())
            }
        }
    }

    #[inline]
    pub(crate) fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            Shock::Gaussian => StandardNormal.sample(rng),
            Shock::StudentT(t, scale) => t.sample(rng) * scale,
        }
    }
}

/// RNG for one lineage: the config seed fixes the key, the lineage fixes the
/// stream.
pub(crate) fn lineage_rng(seed: u64, region_index: usize, lineage_index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((region_index as u64) << 32) | lineage_index as u64);
    rng
}

/// `λ x + √(1−λ²) ε`
#[inline]
fn ar_step(lambda: f64, x: f64, eps: f64) -> f64 {
    lambda * x + (1.0 - lambda * lambda).sqrt() * eps
}

/// `ρ e + √(1−ρ²) u`
#[inline]
fn observe(rho: f64, e: f64, u: f64) -> f64 {
    rho * e + (1.0 - rho * rho).sqrt() * u
}

/// Latent endowments of the seven relatives, indexed like [`Relative::ALL`].
fn latent_family<R: Rng>(rng: &mut R, shock: &Shock, lambda: f64, spousal: f64, initial_sd: f64) -> [f64; 7] {
    let pgf = initial_sd * shock.draw(rng);
    let father = ar_step(lambda, pgf, shock.draw(rng));
    let child = ar_step(lambda, father, shock.draw(rng));
    let mother = ar_step(spousal, father, shock.draw(rng));
    let pgm = ar_step(spousal, pgf, shock.draw(rng));
    let mgf = ar_step(lambda, mother, shock.draw(rng));
    let mgm = ar_step(spousal, mgf, shock.draw(rng));
    [child, father, mother, pgf, pgm, mgf, mgm]
}

struct RegionDraw<'a> {
    cfg: &'a GeneratorConfig,
    region: &'a RegionParams,
    region_index: usize,
    shock: Shock,
    initial_sd: f64,
    drift: Drift,
}

impl RegionDraw<'_> {
    fn lineage(&self, lineage_index: usize, child_id: u64) -> LineageRecord {
        let mut rng = lineage_rng(self.cfg.seed, self.region_index, lineage_index);
        let lambda = self.region.lambda;
        let spousal = self.cfg.spousal_corr;
        let school = latent_family(&mut rng, &self.shock, lambda, spousal, self.initial_sd);
        let second = latent_family(&mut rng, &self.shock, lambda, spousal, self.initial_sd);
        let link = self.cfg.outcome_link;
        let link_c = (1.0 - link * link).sqrt();

        let drift = &self.drift;
        let mut outcomes = [Outcomes::default(); 7];
        for who in Relative::ALL {
            let i = who.index();
            let g = who.generation().index();
            let y = observe(self.region.rho, school[i], self.shock.draw(&mut rng));
            let mean = self.region.gen_means[g] + drift.mean_shift[g];
            let sd = self.region.gen_sds[g] * drift.sd_scale[g];
            outcomes[i].schooling = Some(mean + sd * y);
        }
        if let Some(e) = &self.region.earnings {
            for who in Relative::ALL {
                let i = who.index();
                let g = who.generation().index();
                let latent = link * school[i] + link_c * second[i];
                let y = observe(e.rho, latent, self.shock.draw(&mut rng));
                let mean = e.gen_means[g] + drift.mean_shift[g];
                let sd = e.gen_sds[g] * drift.sd_scale[g];
                outcomes[i].log_earnings = Some(mean + sd * y);
            }
        }
        for who in Relative::ALL {
            let i = who.index();
            if rng.random::<f64>() < self.region.missing_rates[i] {
                outcomes[i].schooling = None;
            }
        }
        if let Some(e) = &self.region.earnings {
            for who in Relative::ALL {
                let i = who.index();
                if rng.random::<f64>() < e.missing_rates[i] {
                    outcomes[i].log_earnings = None;
                }
            }
        }
        let child_gender = if rng.random::<bool>() { Gender::M } else { Gender::F };
        let (lo, hi) = self.cfg.birth_years;
        let child_birth_year = rng.random_range(lo..=hi);
        LineageRecord {
            child_id,
            region_id: self.region.region_id,
            child_birth_year,
            child_gender,
            outcomes,
        }
    }
}

/// Draws the full population described by `config`.
///
/// Child ids are assigned consecutively in region order. In the categorical
/// and panel modes schooling is recoded onto the seven-value code set, and
/// earnings ranks are filled in per relative and child birth year whenever
/// earnings are generated.
pub fn generate_population(config: &GeneratorConfig) -> Result<Vec<LineageRecord>> {
    config.validate()?;
    let shock = Shock::new(config.shocks);
    let initial_sd = if config.steady_state {
        1.0
    } else {
        config.drift.as_ref().map_or(1.0, |d| d.initial_variance.sqrt())
    };
    let mut offset = 0u64;
    let mut records = Vec::with_capacity(config.total_lineages());
    for (region_index, region) in config.regions.iter().enumerate() {
        let draw = RegionDraw {
            cfg: config,
            region,
            region_index,
            shock,
            initial_sd,
            drift: config.drift.clone().unwrap_or_default(),
        };
        let base = offset;
        let chunk: Vec<LineageRecord> = (0..region.n_lineages)
            .into_par_iter()
            .map(|k| draw.lineage(k, base + k as u64))
            .collect();
        records.extend(chunk);
        offset += region.n_lineages as u64;
    }
    match config.outcome_mode {
        OutcomeMode::Continuous => {}
        OutcomeMode::CategoricalEducation | OutcomeMode::EarningsPanel => {
            let thresholds = config.education_thresholds.clone().unwrap_or_default();
            apply_categorical_education(&mut records, &thresholds)?;
        }
    }
    assign_earnings_ranks(&mut records);
    Ok(records)
}

/// Fills `earnings_rank` from `log_earnings`, ranking nationally within
/// each relative type and child birth year.
pub fn assign_earnings_ranks(records: &mut [LineageRecord]) {
    use std::collections::BTreeMap;
    for who in Relative::ALL {
        let mut cells: BTreeMap<i32, Vec<usize>> = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            if r.of(who).log_earnings.is_some() {
                cells.entry(r.child_birth_year).or_default().push(i);
            }
        }
        for idx in cells.values() {
            let vals: Vec<f64> = idx.iter().map(|&i| records[i].of(who).log_earnings.unwrap()).collect();
            for (&i, rank) in idx.iter().zip(midranks(&vals)) {
                records[i].of_mut(who).earnings_rank = Some(rank);
            }
        }
        for r in records.iter_mut() {
            if r.of(who).log_earnings.is_none() {
                r.of_mut(who).earnings_rank = None;
            }
        }
    }
}

/// Standardized (grandparent, parent, child) outcomes along the paternal
/// line only: the lean path used by Monte-Carlo recovery experiments.
pub fn simulate_paternal_line(
    rho: f64,
    lambda: f64,
    n: usize,
    seed: u64,
    replicate: usize,
    shocks: ShockDist,
) -> Result<Vec<[f64; 3]>> {
    validate_rho_lambda(rho, lambda)?;
    if n == 0 {
        return Err(MobilabError::EmptyConfig);
    }
    let shock = Shock::new(shocks);
    Ok((0..n)
        .map(|k| {
            let mut rng = lineage_rng(seed, replicate, k);
            let g0 = shock.draw(&mut rng);
            let g1 = ar_step(lambda, g0, shock.draw(&mut rng));
            let g2 = ar_step(lambda, g1, shock.draw(&mut rng));
            [
                observe(rho, g0, shock.draw(&mut rng)),
                observe(rho, g1, shock.draw(&mut rng)),
                observe(rho, g2, shock.draw(&mut rng)),
            ]
        })
        .collect())
}

/// Population correlations implied by the model: (parent-child,
/// grandparent-child, excess persistence).
pub fn implied_moments(rho: f64, lambda: f64) -> (f64, f64, f64) {
    let b1 = rho * rho * lambda;
    let b2 = rho * rho * lambda * lambda;
    (b1, b2, b2 - b1 * b1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moments::pearson;
    use crate::record::OutcomeKind;

    fn column(records: &[LineageRecord], who: Relative) -> Vec<f64> {
        records
            .iter()
            .map(|r| r.outcome(who, OutcomeKind::Schooling).unwrap())
            .collect()
    }

    #[test]
    fn rejects_out_of_domain_parameters() {
        let bad = GeneratorConfig::new(1, vec![RegionParams::standardized(1, 1.2, 0.3, 10)]);
        assert!(matches!(
            generate_population(&bad),
            Err(MobilabError::ParameterDomain(_))
        ));
        let bad = GeneratorConfig::new(1, vec![RegionParams::standardized(1, 0.9, 1.0, 10)]);
        assert!(matches!(
            generate_population(&bad),
            Err(MobilabError::ParameterDomain(_))
        ));
        let empty = GeneratorConfig::new(1, vec![RegionParams::standardized(1, 0.9, 0.3, 0)]);
        assert!(matches!(generate_population(&empty), Err(MobilabError::EmptyConfig)));
        assert!(matches!(
            generate_population(&GeneratorConfig::new(1, vec![])),
            Err(MobilabError::EmptyConfig)
        ));
    }

    #[test]
    fn zero_transferability_severs_transmission() {
        let n = 100_000;
        let cfg = GeneratorConfig::new(11, vec![RegionParams::standardized(1, 1.0, 0.0, n)]);
        let recs = generate_population(&cfg).unwrap();
        let r = pearson(&column(&recs, Relative::Child), &column(&recs, Relative::Father)).unwrap();
        assert!(r.abs() < 4.0 / (n as f64).sqrt(), "corr {r}");
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let mut region = RegionParams::standardized(7, 0.8, 0.5, 500);
        region.missing_rates = [0.0, 0.1, 0.1, 0.3, 0.3, 0.3, 0.3];
        let cfg = GeneratorConfig::new(99, vec![region]);
        assert_eq!(generate_population(&cfg).unwrap(), generate_population(&cfg).unwrap());
    }

    #[test]
    fn standardized_generations_have_unit_moments() {
        let n = 200_000;
        let cfg = GeneratorConfig::new(5, vec![RegionParams::standardized(1, 0.85, 0.45, n)]);
        let recs = generate_population(&cfg).unwrap();
        let tol = 5.0 / (n as f64).sqrt();
        for who in Relative::ALL {
            let v = column(&recs, who);
            let m = crate::moments::mean(&v).unwrap();
            let var = crate::moments::variance(&v).unwrap();
            assert!(m.abs() < tol, "{who:?} mean {m}");
            assert!((var - 1.0).abs() < 2.0 * tol, "{who:?} var {var}");
        }
    }

    #[test]
    fn missingness_independent_of_outcomes() {
        let n = 100_000;
        let mut region = RegionParams::standardized(1, 0.9, 0.4, n);
        region.missing_rates[Relative::Father.index()] = 0.3;
        let cfg = GeneratorConfig::new(3, vec![region]);
        let recs = generate_population(&cfg).unwrap();
        let child = column(&recs, Relative::Child);
        let miss: Vec<f64> = recs
            .iter()
            .map(|r| r.outcome(Relative::Father, OutcomeKind::Schooling).is_none() as u8 as f64)
            .collect();
        let share = miss.iter().sum::<f64>() / n as f64;
        assert!((share - 0.3).abs() < 4.0 * (0.21f64 / n as f64).sqrt());
        let r = pearson(&child, &miss).unwrap();
        assert!(r.abs() < 4.0 / (n as f64).sqrt(), "corr {r}");
    }

    #[test]
    fn heavy_tailed_shocks_keep_unit_variance() {
        let n = 200_000;
        let mut cfg = GeneratorConfig::new(8, vec![RegionParams::standardized(1, 0.9, 0.4, n)]);
        cfg.shocks = ShockDist::StudentT { df: 5.0 };
        let recs = generate_population(&cfg).unwrap();
        let v = column(&recs, Relative::Child);
        let var = crate::moments::variance(&v).unwrap();
        assert!((var - 1.0).abs() < 0.03, "var {var}");
    }

    #[test]
    fn excess_persistence_is_positive_off_markov() {
        for &(rho, lambda) in &[(0.9, 0.4), (0.7, 0.6), (0.95, 0.2)] {
            let (b1, b2, d) = implied_moments(rho, lambda);
            assert!((d - rho * rho * lambda * lambda * (1.0 - rho * rho)).abs() < 1e-15);
            assert!(d > 0.0 && b2 < b1);
        }
        assert_eq!(implied_moments(1.0, 0.4).2, 0.0);
    }

    #[test]
    fn earnings_ranks_lie_in_unit_interval() {
        let mut region = RegionParams::standardized(1, 0.9, 0.4, 2_000);
        region.earnings = Some(EarningsParams {
            rho: 0.75,
            gen_means: [12.4, 12.4, 12.9],
            gen_sds: [0.5; 3],
            missing_rates: [0.0, 0.05, 0.05, 0.2, 0.2, 0.2, 0.2],
        });
        let recs = generate_population(&GeneratorConfig::new(2, vec![region])).unwrap();
        for r in &recs {
            for who in Relative::ALL {
                let o = r.of(who);
                assert_eq!(o.log_earnings.is_some(), o.earnings_rank.is_some());
                if let Some(q) = o.earnings_rank {
                    assert!(q > 0.0 && q < 1.0);
                }
            }
        }
    }
}
