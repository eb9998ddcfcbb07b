//! Region-level inter- and multigenerational mobility statistics.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{MobilabError, Result};
use crate::moments::{correlation_influence, median, weighted_pearson, PairMoments};
use crate::record::{Gender, Generation, LineageRecord, OutcomeKind, RegionId, Relative};
use crate::regression::Wls;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    #[default]
    SchoolingYears,
    EarningsRank,
    LogEarnings,
    /// Schooling above the national median of the same variable; ties count
    /// as low.
    BinaryEducation,
}

impl Outcome {
    pub(crate) fn kind(self) -> OutcomeKind {
        match self {
            Outcome::SchoolingYears | Outcome::BinaryEducation => OutcomeKind::Schooling,
            Outcome::EarningsRank => OutcomeKind::EarningsRank,
            Outcome::LogEarnings => OutcomeKind::LogEarnings,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Outcome::SchoolingYears => "schooling_years",
            Outcome::EarningsRank => "earnings_rank",
            Outcome::LogEarnings => "log_earnings",
            Outcome::BinaryEducation => "binary_education",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Statistic {
    RegressionSlope,
    #[default]
    PearsonCorrelation,
}

impl Statistic {
    pub fn name(self) -> &'static str {
        match self {
            Statistic::RegressionSlope => "regression_slope",
            Statistic::PearsonCorrelation => "pearson_correlation",
        }
    }
}

/// The relative (or generational average) paired with the child.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairType {
    #[default]
    Father,
    Mother,
    ParentalAverage,
    PaternalGrandfather,
    MaternalGrandfather,
    PaternalGrandmother,
    MaternalGrandmother,
    GrandparentalAverage,
}

impl PairType {
    pub const ALL: [PairType; 8] = [
        PairType::Father,
        PairType::Mother,
        PairType::ParentalAverage,
        PairType::PaternalGrandfather,
        PairType::MaternalGrandfather,
        PairType::PaternalGrandmother,
        PairType::MaternalGrandmother,
        PairType::GrandparentalAverage,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PairType::Father => "father",
            PairType::Mother => "mother",
            PairType::ParentalAverage => "parental_average",
            PairType::PaternalGrandfather => "pat_grandfather",
            PairType::MaternalGrandfather => "mat_grandfather",
            PairType::PaternalGrandmother => "pat_grandmother",
            PairType::MaternalGrandmother => "mat_grandmother",
            PairType::GrandparentalAverage => "grandparental_average",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == s)
    }

    fn relative(self) -> Option<Relative> {
        match self {
            PairType::Father => Some(Relative::Father),
            PairType::Mother => Some(Relative::Mother),
            PairType::PaternalGrandfather => Some(Relative::PaternalGrandfather),
            PairType::MaternalGrandfather => Some(Relative::MaternalGrandfather),
            PairType::PaternalGrandmother => Some(Relative::PaternalGrandmother),
            PairType::MaternalGrandmother => Some(Relative::MaternalGrandmother),
            PairType::ParentalAverage | PairType::GrandparentalAverage => None,
        }
    }

    /// Raw value of the paired relative (or average) for one lineage.
    pub fn value(self, rec: &LineageRecord, kind: OutcomeKind) -> Option<f64> {
        match self {
            PairType::ParentalAverage => rec.generation_average(Generation::Parent, kind).map(|a| a.0),
            PairType::GrandparentalAverage => rec.generation_average(Generation::Grandparent, kind).map(|a| a.0),
            other => rec.outcome(other.relative().expect("single relative"), kind),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    Unweighted,
    #[default]
    PairCount,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenderFilter {
    #[default]
    All,
    Sons,
    Daughters,
}

impl GenderFilter {
    pub fn admits(self, g: Gender) -> bool {
        match self {
            GenderFilter::All => true,
            GenderFilter::Sons => g == Gender::M,
            GenderFilter::Daughters => g == Gender::F,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "all" => Some(GenderFilter::All),
            "sons" => Some(GenderFilter::Sons),
            "daughters" => Some(GenderFilter::Daughters),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            GenderFilter::All => "all",
            GenderFilter::Sons => "sons",
            GenderFilter::Daughters => "daughters",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EstimatorSpec {
    pub outcome: Outcome,
    pub statistic: Statistic,
    pub pair: PairType,
    #[serde(default)]
    pub weighting: Weighting,
    #[serde(default)]
    pub gender_filter: GenderFilter,
    /// Keep only lineages with child, father and paternal grandfather
    /// observed.
    #[serde(default)]
    pub balanced: bool,
}

impl EstimatorSpec {
    pub fn new(outcome: Outcome, statistic: Statistic, pair: PairType) -> Self {
        Self {
            outcome,
            statistic,
            pair,
            ..Self::default()
        }
    }

    pub fn label(&self) -> String {
        format!(
            "{}/{}/{}/{}{}",
            self.outcome.name(),
            self.statistic.name(),
            self.pair.name(),
            self.gender_filter.name(),
            if self.balanced { "/balanced" } else { "" }
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MobilityEstimate {
    pub region_id: RegionId,
    pub spec: EstimatorSpec,
    pub alpha: f64,
    pub beta: f64,
    pub se_beta: f64,
    pub n_pairs: usize,
    pub r2: f64,
    /// Cross-region weight: the pair count or 1.
    pub weight: f64,
}

/// National medians used to dichotomise schooling, keyed by the child and
/// by each pair type.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NationalContext {
    child_median: Option<f64>,
    pair_medians: BTreeMap<PairType, f64>,
}

impl NationalContext {
    /// Medians over `records`; only needed for binary education.
    pub fn from_records<'a>(records: impl IntoIterator<Item = &'a LineageRecord> + Clone) -> Self {
        let child: Vec<f64> = records
            .clone()
            .into_iter()
            .filter_map(|r| r.outcome(Relative::Child, OutcomeKind::Schooling))
            .collect();
        let pair_medians = PairType::ALL
            .into_iter()
            .filter_map(|p| {
                let v: Vec<f64> = records
                    .clone()
                    .into_iter()
                    .filter_map(|r| p.value(r, OutcomeKind::Schooling))
                    .collect();
                median(&v).map(|m| (p, m))
            })
            .collect();
        Self {
            child_median: median(&child),
            pair_medians,
        }
    }
}

fn dichotomise(v: f64, m: Option<f64>) -> Option<f64> {
    m.map(|m| if v > m { 1.0 } else { 0.0 })
}

fn balanced_ok(rec: &LineageRecord, kind: OutcomeKind) -> bool {
    [Relative::Child, Relative::Father, Relative::PaternalGrandfather]
        .iter()
        .all(|&w| rec.outcome(w, kind).is_some())
}

/// The (relative, child) values of one lineage under `spec` for `pair`, or
/// `None` when the lineage is filtered out or either side is missing.
pub fn lineage_pair(
    rec: &LineageRecord,
    spec: &EstimatorSpec,
    pair: PairType,
    ctx: &NationalContext,
) -> Option<(f64, f64)> {
    let kind = spec.outcome.kind();
    if !spec.gender_filter.admits(rec.child_gender) || (spec.balanced && !balanced_ok(rec, kind)) {
        return None;
    }
    let yc = rec.outcome(Relative::Child, kind)?;
    let xp = pair.value(rec, kind)?;
    if spec.outcome == Outcome::BinaryEducation {
        let yb = dichotomise(yc, ctx.child_median)?;
        let xb = dichotomise(xp, ctx.pair_medians.get(&pair).copied())?;
        return Some((xb, yb));
    }
    Some((xp, yc))
}

/// Listwise-complete (relative, child) pairs under `spec`.
pub fn extract_pairs<'a>(
    records: impl IntoIterator<Item = &'a LineageRecord>,
    spec: &EstimatorSpec,
    ctx: &NationalContext,
) -> (Vec<f64>, Vec<f64>) {
    records
        .into_iter()
        .filter_map(|rec| lineage_pair(rec, spec, spec.pair, ctx))
        .unzip()
}

pub(crate) fn context_for<'a>(
    records: impl IntoIterator<Item = &'a LineageRecord> + Clone,
    spec: &EstimatorSpec,
) -> NationalContext {
    if spec.outcome == Outcome::BinaryEducation {
        NationalContext::from_records(records)
    } else {
        NationalContext::default()
    }
}

fn estimate_pairs(region_id: RegionId, spec: &EstimatorSpec, x: &[f64], y: &[f64]) -> Result<MobilityEstimate> {
    let n = x.len();
    if n < 2 {
        return Err(MobilabError::insufficient("pairs", 2, n));
    }
    let m = PairMoments::from_slices(x, y);
    if !(m.sxx > 0.0) {
        return Err(MobilabError::UndefinedSlope);
    }
    let (alpha, beta, se_beta, r2) = match spec.statistic {
        Statistic::RegressionSlope => {
            let fit = Wls::new(y).column(x).fit()?;
            (fit.coef[0], fit.coef[1], fit.se[1], fit.r2)
        }
        Statistic::PearsonCorrelation => {
            if !(m.syy > 0.0) {
                return Err(MobilabError::UndefinedSlope);
            }
            let inf = correlation_influence(x, y)?;
            let r = inf.estimate;
            (0.0, r, inf.variance(2).sqrt(), r * r)
        }
    };
    Ok(MobilityEstimate {
        region_id,
        spec: *spec,
        alpha,
        beta,
        se_beta,
        n_pairs: n,
        r2,
        weight: match spec.weighting {
            Weighting::PairCount => n as f64,
            Weighting::Unweighted => 1.0,
        },
    })
}

/// One region's statistic. Binary education is dichotomised at medians of
/// the records passed in; use [`estimate_region_with`] for national medians.
pub fn estimate_region(records: &[LineageRecord], spec: &EstimatorSpec) -> Result<MobilityEstimate> {
    estimate_region_with(records, spec, &context_for(records, spec))
}

pub fn estimate_region_with<'a>(
    records: impl IntoIterator<Item = &'a LineageRecord> + Clone,
    spec: &EstimatorSpec,
    ctx: &NationalContext,
) -> Result<MobilityEstimate> {
    let region_id = records.clone().into_iter().next().map_or(RegionId(0), |r| r.region_id);
    let (x, y) = extract_pairs(records, spec, ctx);
    estimate_pairs(region_id, spec, &x, &y)
}

pub fn group_by_region(records: &[LineageRecord]) -> BTreeMap<RegionId, Vec<&LineageRecord>> {
    let mut map: BTreeMap<RegionId, Vec<&LineageRecord>> = BTreeMap::new();
    for r in records {
        map.entry(r.region_id).or_default().push(r);
    }
    map
}

/// Region estimates plus the regions that could not be estimated.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegionEstimates {
    pub estimates: Vec<MobilityEstimate>,
    pub flagged: Vec<(RegionId, String)>,
}

impl RegionEstimates {
    pub fn by_region(&self) -> BTreeMap<RegionId, &MobilityEstimate> {
        self.estimates.iter().map(|e| (e.region_id, e)).collect()
    }

    /// Weighted mean and SD of the region estimates.
    pub fn summary(&self, weighted: bool) -> Option<(f64, f64)> {
        let v: Vec<f64> = self.estimates.iter().map(|e| e.beta).collect();
        let w: Vec<f64> = self
            .estimates
            .iter()
            .map(|e| if weighted { e.n_pairs as f64 } else { 1.0 })
            .collect();
        let m = crate::moments::weighted_mean(&v, &w)?;
        let sd = crate::moments::weighted_sd(&v, &w)?;
        Some((m, sd))
    }
}

/// Estimates `spec` in every region, with binary-education medians taken
/// over all records. Output is ordered by region id.
pub fn estimate_all_regions(records: &[LineageRecord], spec: &EstimatorSpec) -> RegionEstimates {
    let ctx = context_for(records, spec);
    let groups: Vec<(RegionId, Vec<&LineageRecord>)> = group_by_region(records).into_iter().collect();
    let results: Vec<(RegionId, Result<MobilityEstimate>)> = groups
        .par_iter()
        .map(|(id, recs)| (*id, estimate_region_with(recs.iter().copied(), spec, &ctx)))
        .collect();
    let mut estimates = Vec::new();
    let mut flagged = Vec::new();
    for (id, r) in results {
        match r {
            Ok(e) => estimates.push(e),
            Err(e) => flagged.push((id, e.to_string())),
        }
    }
    RegionEstimates { estimates, flagged }
}

/// Pooled estimate over all records, labelled with region id 0.
pub fn estimate_national(records: &[LineageRecord], spec: &EstimatorSpec) -> Result<MobilityEstimate> {
    let ctx = NationalContext::from_records(records);
    let (x, y) = extract_pairs(records, spec, &ctx);
    estimate_pairs(RegionId(0), spec, &x, &y)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GenerationalAverage {
    pub child_id: u64,
    pub value: Option<f64>,
    pub contributors: usize,
}

/// Per-child mean over the observed relatives of one generation.
pub fn generational_average(
    records: &[LineageRecord],
    generation: Generation,
    kind: OutcomeKind,
) -> Vec<GenerationalAverage> {
    records
        .iter()
        .map(|r| {
            let avg = r.generation_average(generation, kind);
            GenerationalAverage {
                child_id: r.child_id,
                value: avg.map(|a| a.0),
                contributors: avg.map_or(0, |a| a.1),
            }
        })
        .collect()
}

/// Expected child rank for parents at the 25th percentile, `α + β/4`.
pub fn p25_upward_mobility(estimate: &MobilityEstimate) -> Result<f64> {
    if estimate.spec.outcome != Outcome::EarningsRank || estimate.spec.statistic != Statistic::RegressionSlope {
        return Err(MobilabError::Spec(format!(
            "upward mobility needs a rank-rank regression slope, got {}",
            estimate.spec.label()
        )));
    }
    Ok(estimate.alpha + 0.25 * estimate.beta)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "level", content = "region")]
pub enum CefLevel {
    National,
    Region(RegionId),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CefBin {
    pub center: f64,
    pub mean: Option<f64>,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CefProfile {
    pub level: CefLevel,
    pub pair: PairType,
    pub bins: Vec<CefBin>,
    pub r2_linear: f64,
    pub r2_quadratic: f64,
    /// Quadratic over linear R², minus one.
    pub linearity_index: f64,
}

/// Mean child rank within equal-width bins of the relative's rank, with the
/// linear and quadratic rank-rank fits on the underlying pairs.
pub fn cef_bins(records: &[LineageRecord], n_bins: usize, level: CefLevel, pair: PairType) -> Result<CefProfile> {
    if n_bins == 0 {
        return Err(MobilabError::Config("need at least one bin".into()));
    }
    let spec = EstimatorSpec::new(Outcome::EarningsRank, Statistic::RegressionSlope, pair);
    let selected = records.iter().filter(|r| match level {
        CefLevel::National => true,
        CefLevel::Region(id) => r.region_id == id,
    });
    let (x, y) = extract_pairs(selected, &spec, &NationalContext::default());
    if x.len() < 3 {
        return Err(MobilabError::insufficient("rank pairs", 3, x.len()));
    }
    let width = 1.0 / n_bins as f64;
    let mut sums = vec![(0.0, 0usize); n_bins];
    for (&xi, &yi) in x.iter().zip(&y) {
        let b = ((xi / width).floor() as usize).min(n_bins - 1);
        sums[b].0 += yi;
        sums[b].1 += 1;
    }
    let bins = sums
        .iter()
        .enumerate()
        .map(|(b, &(s, n))| CefBin {
            center: (b as f64 + 0.5) * width,
            mean: (n > 0).then(|| s / n as f64),
            n,
        })
        .collect();
    let lin = Wls::new(&y).column(&x).fit()?;
    let x2: Vec<f64> = x.iter().map(|v| v * v).collect();
    let quad = Wls::new(&y).column(&x).column(&x2).fit()?;
    let linearity_index = if lin.r2 > 0.0 { quad.r2 / lin.r2 - 1.0 } else { 0.0 };
    Ok(CefProfile {
        level,
        pair,
        bins,
        r2_linear: lin.r2,
        r2_quadratic: quad.r2,
        linearity_index,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CrossMatrix {
    pub names: Vec<String>,
    pub matrix: Vec<Vec<f64>>,
    pub n_regions: usize,
}

/// Weighted correlations between region-level statistics over the regions
/// where every statistic reaches `min_pairs`. A region's weight is its
/// smallest pair count across the statistics.
pub fn cross_measure_matrix(series: &[(String, RegionEstimates)], min_pairs: usize) -> Result<CrossMatrix> {
    let maps: Vec<BTreeMap<RegionId, &MobilityEstimate>> = series.iter().map(|(_, s)| s.by_region()).collect();
    let Some(first) = maps.first() else {
        return Err(MobilabError::insufficient("statistics", 1, 0));
    };
    let regions: Vec<RegionId> = first
        .keys()
        .copied()
        .filter(|id| maps.iter().all(|m| m.get(id).is_some_and(|e| e.n_pairs >= min_pairs)))
        .collect();
    if regions.len() < 2 {
        return Err(MobilabError::insufficient(
            "regions passing the size filter",
            2,
            regions.len(),
        ));
    }
    let weights: Vec<f64> = regions
        .iter()
        .map(|id| maps.iter().map(|m| m[id].n_pairs).min().unwrap_or(0) as f64)
        .collect();
    let cols: Vec<Vec<f64>> = maps
        .iter()
        .map(|m| regions.iter().map(|id| m[id].beta).collect())
        .collect();
    let k = cols.len();
    let mut matrix = vec![vec![f64::NAN; k]; k];
    for i in 0..k {
        for j in i..k {
            let r = if i == j {
                1.0
            } else {
                weighted_pearson(&cols[i], &cols[j], &weights).unwrap_or(f64::NAN)
            };
            matrix[i][j] = r;
            matrix[j][i] = r;
        }
    }
    Ok(CrossMatrix {
        names: series.iter().map(|(n, _)| n.clone()).collect(),
        matrix,
        n_regions: regions.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::record::Outcomes;
    use crate::synthkit::{generate_population, GeneratorConfig, RegionParams};
    use proptest::prelude::*;

    fn pairs_to_records(pairs: &[(f64, f64)], region: u32) -> Vec<LineageRecord> {
        pairs
            .iter()
            .enumerate()
            .map(|(i, &(xf, yc))| {
                let mut o = [Outcomes::default(); 7];
                o[Relative::Father.index()].schooling = Some(xf);
                o[Relative::Child.index()].schooling = Some(yc);
                o[Relative::Father.index()].earnings_rank = Some(xf);
                o[Relative::Child.index()].earnings_rank = Some(yc);
                LineageRecord {
                    child_id: i as u64,
                    region_id: RegionId(region),
                    child_birth_year: 1985,
                    child_gender: if i % 2 == 0 { Gender::M } else { Gender::F },
                    outcomes: o,
                }
            })
            .collect()
    }

    fn slope_spec() -> EstimatorSpec {
        EstimatorSpec::new(Outcome::SchoolingYears, Statistic::RegressionSlope, PairType::Father)
    }

    fn corr_spec() -> EstimatorSpec {
        EstimatorSpec::new(Outcome::SchoolingYears, Statistic::PearsonCorrelation, PairType::Father)
    }

    #[test]
    fn perfect_line() {
        let recs = pairs_to_records(&[(0.0, 0.0), (1.0, 1.0)], 1);
        let e = estimate_region(&recs, &slope_spec()).unwrap();
        assert!((e.beta - 1.0).abs() < 1e-12 && e.alpha.abs() < 1e-12);
    }

    #[test]
    fn perfect_negative_correlation() {
        let recs = pairs_to_records(&[(0.0, 1.0), (1.0, 0.0)], 1);
        let e = estimate_region(&recs, &corr_spec()).unwrap();
        assert!((e.beta + 1.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_regions_are_errors() {
        let recs = pairs_to_records(&[(1.0, 0.0), (1.0, 2.0)], 1);
        assert!(matches!(
            estimate_region(&recs, &slope_spec()),
            Err(MobilabError::UndefinedSlope)
        ));
        let recs = pairs_to_records(&[(1.0, 0.0)], 1);
        assert!(matches!(
            estimate_region(&recs, &slope_spec()),
            Err(MobilabError::InsufficientData { .. })
        ));
    }

    #[test]
    fn listwise_deletion() {
        let mut recs = pairs_to_records(&[(0.0, 0.0), (1.0, 1.0), (2.0, 5.0)], 1);
        recs[2].of_mut(Relative::Father).schooling = None;
        let e = estimate_region(&recs, &slope_spec()).unwrap();
        assert_eq!(e.n_pairs, 2);
    }

    #[test]
    fn p25_arithmetic() {
        let mut e = estimate_region(
            &pairs_to_records(&[(0.0, 0.0), (1.0, 1.0)], 1),
            &EstimatorSpec::new(Outcome::EarningsRank, Statistic::RegressionSlope, PairType::Father),
        )
        .unwrap();
        e.alpha = 0.4;
        e.beta = 0.12;
        assert!((p25_upward_mobility(&e).unwrap() - 0.43).abs() < 1e-15);
        e.beta = 0.0;
        assert_eq!(p25_upward_mobility(&e).unwrap(), 0.4);
        e.alpha = 0.0;
        e.beta = 1.0;
        assert_eq!(p25_upward_mobility(&e).unwrap(), 0.25);
        e.spec.outcome = Outcome::SchoolingYears;
        assert!(matches!(p25_upward_mobility(&e), Err(MobilabError::Spec(_))));
    }

    #[test]
    fn p25_follows_affine_maps_of_child_ranks() {
        let pairs: Vec<(f64, f64)> = (0..50)
            .map(|i| (i as f64 / 50.0, ((i * 7) % 50) as f64 / 50.0))
            .collect();
        let spec = EstimatorSpec::new(Outcome::EarningsRank, Statistic::RegressionSlope, PairType::Father);
        let base = p25_upward_mobility(&estimate_region(&pairs_to_records(&pairs, 1), &spec).unwrap()).unwrap();
        let mapped: Vec<(f64, f64)> = pairs.iter().map(|&(x, y)| (x, 0.3 + 0.5 * y)).collect();
        let after = p25_upward_mobility(&estimate_region(&pairs_to_records(&mapped, 1), &spec).unwrap()).unwrap();
        assert!((after - (0.3 + 0.5 * base)).abs() < 1e-12);
    }

    #[test]
    fn slope_equals_correlation_times_sd_ratio() {
        let cfg = GeneratorConfig::new(
            3,
            vec![RegionParams::standardized(1, 0.8, 0.5, 3000), {
                let mut r = RegionParams::standardized(2, 0.9, 0.3, 2000);
                r.gen_sds = [2.0, 3.0, 2.5];
                r
            }],
        );
        let recs = generate_population(&cfg).unwrap();
        let slopes = estimate_all_regions(&recs, &slope_spec());
        let corrs = estimate_all_regions(&recs, &corr_spec());
        for (s, c) in slopes.estimates.iter().zip(&corrs.estimates) {
            let region: Vec<LineageRecord> = recs.iter().filter(|r| r.region_id == s.region_id).cloned().collect();
            let (x, y) = extract_pairs(&region, &slope_spec(), &NationalContext::default());
            let ratio = crate::moments::variance(&y).unwrap().sqrt() / crate::moments::variance(&x).unwrap().sqrt();
            assert!((s.beta - c.beta * ratio).abs() < 1e-10);
        }
    }

    #[test]
    fn weighted_slope_matches_normal_equations_on_small_fixture() {
        let x: [f64; 5] = [0.0, 1.0, 2.0, 4.0, 5.0];
        let y = [1.0, 2.0, 2.5, 6.0, 5.5];
        let w = [1.0, 3.0, 2.0, 1.0, 0.5];
        let fit = Wls::new(&y).column(&x).weights(Some(&w)).fit().unwrap();
        let (sw, swx, swy, swxx, swxy) =
            x.iter()
                .zip(&y)
                .zip(&w)
                .fold((0.0, 0.0, 0.0, 0.0, 0.0), |a, ((&xi, &yi), &wi)| {
                    (
                        a.0 + wi,
                        a.1 + wi * xi,
                        a.2 + wi * yi,
                        a.3 + wi * xi * xi,
                        a.4 + wi * xi * yi,
                    )
                });
        let det = sw * swxx - swx * swx;
        let b = (sw * swxy - swx * swy) / det;
        let a = (swxx * swy - swx * swxy) / det;
        assert!((fit.coef[0] - a).abs() < 1e-10 && (fit.coef[1] - b).abs() < 1e-10);
    }

    #[test]
    fn gender_pooled_between_sons_and_daughters() {
        let cfg = GeneratorConfig::new(12, vec![RegionParams::standardized(1, 0.9, 0.5, 20_000)]);
        let mut recs = generate_population(&cfg).unwrap();
        // daughters get a weaker link by shrinking their outcome toward noise
        for r in recs.iter_mut().filter(|r| r.child_gender == Gender::F) {
            let v = r.of(Relative::Child).schooling.unwrap();
            r.of_mut(Relative::Child).schooling = Some(0.5 * v);
        }
        let b = |g| {
            let mut s = slope_spec();
            s.gender_filter = g;
            estimate_region(&recs, &s).unwrap().beta
        };
        let (all, sons, daughters) = (b(GenderFilter::All), b(GenderFilter::Sons), b(GenderFilter::Daughters));
        assert!(all < sons.max(daughters) && all > sons.min(daughters));
    }

    #[test]
    fn binary_education_ties_go_low() {
        let recs = pairs_to_records(&[(1.0, 1.0), (2.0, 2.0), (2.0, 2.0), (3.0, 3.0)], 1);
        let spec = EstimatorSpec::new(Outcome::BinaryEducation, Statistic::RegressionSlope, PairType::Father);
        let (x, y) = extract_pairs(&recs, &spec, &NationalContext::from_records(&recs));
        assert_eq!(x, vec![0.0, 0.0, 0.0, 1.0]);
        assert_eq!(y, x);
    }

    #[test]
    fn balanced_mode_requires_grandfather() {
        let mut recs = pairs_to_records(&[(0.0, 0.0), (1.0, 1.0), (2.0, 2.5)], 1);
        recs[0].of_mut(Relative::PaternalGrandfather).schooling = Some(1.0);
        recs[1].of_mut(Relative::PaternalGrandfather).schooling = Some(1.0);
        let mut spec = slope_spec();
        spec.balanced = true;
        assert_eq!(estimate_region(&recs, &spec).unwrap().n_pairs, 2);
    }

    #[test]
    fn generational_average_counts_contributors() {
        let mut recs = pairs_to_records(&[(12.0, 10.0)], 1);
        recs[0].of_mut(Relative::Mother).schooling = Some(14.0);
        let avg = generational_average(&recs, Generation::Parent, OutcomeKind::Schooling);
        assert_eq!(avg[0].value, Some(13.0));
        assert_eq!(avg[0].contributors, 2);
        let g = generational_average(&recs, Generation::Grandparent, OutcomeKind::Schooling);
        assert_eq!((g[0].value, g[0].contributors), (None, 0));
    }

    #[test]
    fn cef_bins_follow_linear_cef() {
        // child rank = 0.2 + 0.2 * parent rank + bounded noise
        let n = 20_000;
        let pairs: Vec<(f64, f64)> = (0..n)
            .map(|i| {
                let x = (i as f64 + 0.5) / n as f64;
                let noise = 0.3 * (((i * 7919) % 1000) as f64 / 1000.0 - 0.4995);
                (x, 0.2 + 0.2 * x + noise)
            })
            .collect();
        let recs = pairs_to_records(&pairs, 1);
        let prof = cef_bins(&recs, 10, CefLevel::National, PairType::Father).unwrap();
        for b in &prof.bins {
            let m = b.mean.unwrap();
            assert!((m - (0.2 + 0.2 * b.center)).abs() < 4.0 / (b.n as f64).sqrt(), "{b:?}");
        }
        assert!(prof.linearity_index >= 0.0);
        assert!(prof.linearity_index < 0.01, "{}", prof.linearity_index);
    }

    #[test]
    fn cef_empty_bins_report_zero() {
        let recs = pairs_to_records(&[(0.05, 0.1), (0.06, 0.2), (0.95, 0.9), (0.93, 0.7)], 1);
        let prof = cef_bins(&recs, 10, CefLevel::Region(RegionId(1)), PairType::Father).unwrap();
        assert_eq!(prof.bins[4].n, 0);
        assert!(prof.bins[4].mean.is_none());
    }

    fn series(name: &str, values: &[(u32, f64, usize)]) -> (String, RegionEstimates) {
        let estimates = values
            .iter()
            .map(|&(id, beta, n)| MobilityEstimate {
                region_id: RegionId(id),
                spec: slope_spec(),
                alpha: 0.0,
                beta,
                se_beta: 0.0,
                n_pairs: n,
                r2: 0.0,
                weight: n as f64,
            })
            .collect();
        (
            name.to_string(),
            RegionEstimates {
                estimates,
                flagged: vec![],
            },
        )
    }

    #[test]
    fn cross_matrix_diagonal_and_filter() {
        let a = series("a", &[(1, 0.1, 2000), (2, 0.3, 1500), (3, 0.2, 999), (4, 0.5, 3000)]);
        let b = series("b", &[(1, 0.4, 2000), (2, 0.1, 1500), (3, 0.2, 999), (4, 0.6, 3000)]);
        let m = cross_measure_matrix(&[a.clone(), b], 1000).unwrap();
        assert_eq!(m.n_regions, 3);
        assert_eq!(m.matrix[0][0], 1.0);
        assert_eq!(m.matrix[0][1], m.matrix[1][0]);
        let only = series("c", &[(1, 0.1, 2000), (2, 0.3, 10)]);
        assert!(cross_measure_matrix(&[only], 1000).is_err());
    }

    #[test]
    fn cross_matrix_independent_series_near_zero() {
        let r = 4000;
        let a: Vec<(u32, f64, usize)> = (0..r).map(|i| (i, ((i * 7919 + 13) % 1009) as f64, 1000)).collect();
        let b: Vec<(u32, f64, usize)> = (0..r).map(|i| (i, ((i * 104_729 + 7) % 1013) as f64, 1000)).collect();
        let m = cross_measure_matrix(&[series("a", &a), series("b", &b)], 1000).unwrap();
        assert!(m.matrix[0][1].abs() < 4.0 / (r as f64).sqrt());
    }

    proptest! {
        #[test]
        fn correlation_is_symmetric_and_bounded(pts in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 3..40)) {
            let recs = pairs_to_records(&pts, 1);
            let swapped: Vec<(f64, f64)> = pts.iter().map(|&(a, b)| (b, a)).collect();
            let recs2 = pairs_to_records(&swapped, 1);
            if let (Ok(a), Ok(b)) = (estimate_region(&recs, &corr_spec()), estimate_region(&recs2, &corr_spec())) {
                prop_assert!((a.beta - b.beta).abs() < 1e-12);
                prop_assert!(a.beta.abs() <= 1.0);
            }
        }
    }
}
