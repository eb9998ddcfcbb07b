//! Batch orchestration: load or simulate lineages, run the requested
//! analyses, and write one CSV per analysis plus a manifest. Table presets
//! reshape a finished bundle into publication-style layouts.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::earnings::{
    attach_predictions, fit_fe_model, persons_from_records, predict_at_40, rank_within_cells, EvalRule, PersonInfo,
};
use crate::error::{MobilabError, Result};
use crate::gatsby::{
    gatsby_correlation, latent_inequality_regression, regional_inequality, GiniGeneration, InequalityMeasure,
};
use crate::harness::{
    placebo_reshuffle, recovery_experiment, subsample_replicates, PlaceboConfig, RecoveryGrid, SubsampleConfig,
};
use crate::io::{
    cef_table, cross_matrix_table, delta_table, dispersion_table, estimates_table, gatsby_table, inequality_table,
    ingest_lineage_csv, latent_table, num, panel_table, predictions_table, read_panel_csv, recovery_table, ErrorMode,
    IngestOptions, Table,
};
use crate::latent::{
    delta_test_all, latent_regression, recover_all_regions, reject_shares, LatentEstimate, LatentRegressors, SurSample,
};
use crate::mobility::{
    cef_bins, cross_measure_matrix, estimate_all_regions, estimate_national, group_by_region, p25_upward_mobility,
    CefLevel, EstimatorSpec, GenderFilter, Outcome, PairType, RegionEstimates, Statistic, Weighting,
};
use crate::moments::{weighted_mean, weighted_sd};
use crate::record::{split_person_id, Gender, LineageRecord, OutcomeKind, Outcomes, Relative};
use crate::regression::RegressionReport;
use crate::synthkit::{
    generate_earnings_panel, generate_population, sweden_preset, EarningsPanelRow, GeneratorConfig, PanelConfig,
    SwedenPreset,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Analysis {
    Estimates,
    Delta,
    Latent,
    Gatsby,
    Placebo,
    Subsamples,
    Recovery,
    Cef,
    CrossMatrix,
}

impl Analysis {
    pub const ALL: [Analysis; 9] = [
        Analysis::Estimates,
        Analysis::Delta,
        Analysis::Latent,
        Analysis::Gatsby,
        Analysis::Placebo,
        Analysis::Subsamples,
        Analysis::Recovery,
        Analysis::Cef,
        Analysis::CrossMatrix,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Analysis::Estimates => "estimates",
            Analysis::Delta => "delta",
            Analysis::Latent => "latent",
            Analysis::Gatsby => "gatsby",
            Analysis::Placebo => "placebo",
            Analysis::Subsamples => "subsamples",
            Analysis::Recovery => "recovery",
            Analysis::Cef => "cef",
            Analysis::CrossMatrix => "cross_matrix",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s)
    }

    /// Analyses that cannot run without earnings in the input.
    pub fn needs_earnings(self) -> bool {
        matches!(self, Analysis::Gatsby | Analysis::Cef | Analysis::CrossMatrix)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InputSource {
    /// Calibrated 290-region population.
    Preset(SwedenPreset),
    Generator(Box<GeneratorConfig>),
    LineageCsv {
        path: PathBuf,
        #[serde(default)]
        categorical_schooling: bool,
        #[serde(default)]
        skip_invalid: bool,
    },
    /// Person-year earnings, optionally joined to a lineage CSV. Without one,
    /// lineages are rebuilt from the person ids.
    PanelCsv {
        path: PathBuf,
        #[serde(default)]
        lineage: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalysisOptions {
    /// Weight cross-region summaries and regressions by pair counts.
    pub weighted: bool,
    pub balanced: bool,
    /// Regions with fewer pairs are dropped from every region-level output.
    pub min_pairs: usize,
    pub gender: GenderFilter,
    pub statistics: Vec<Statistic>,
    pub sur_sample: SurSample,
    /// Replace simulated earnings with age-40 predictions from a simulated
    /// person-year panel.
    pub earnings_panel: bool,
    pub write_panel: bool,
    pub panel: Option<PanelConfig>,
    pub eval_rule: EvalRule,
    pub placebo_permutations: usize,
    pub split_threshold: usize,
    pub subsample_replicates: usize,
    pub subsample_fraction: f64,
    pub recovery: RecoveryGrid,
    pub cef_bins: usize,
    /// Number of largest regions that also get a CEF profile.
    pub cef_regions: usize,
    pub kde_bandwidth: f64,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        Self {
            weighted: true,
            balanced: false,
            min_pairs: 0,
            gender: GenderFilter::All,
            statistics: vec![Statistic::PearsonCorrelation],
            sur_sample: SurSample::Union,
            earnings_panel: false,
            write_panel: false,
            panel: None,
            eval_rule: EvalRule::ClampedBirthPlus40,
            placebo_permutations: 20,
            split_threshold: 2000,
            subsample_replicates: 10,
            subsample_fraction: 1.0 / 3.0,
            recovery: RecoveryGrid::default(),
            cef_bins: 20,
            cef_regions: 3,
            kde_bandwidth: 0.01,
        }
    }
}

fn default_output() -> PathBuf {
    PathBuf::from("mobilab-out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Master seed. Overrides the generator seed and seeds every random
    /// analysis.
    pub seed: u64,
    pub input: InputSource,
    pub analyses: BTreeSet<Analysis>,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub options: AnalysisOptions,
}

impl PipelineConfig {
    pub fn new(seed: u64, input: InputSource, analyses: impl IntoIterator<Item = Analysis>) -> Self {
        Self {
            seed,
            input,
            analyses: analyses.into_iter().collect(),
            output_dir: default_output(),
            options: AnalysisOptions::default(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| MobilabError::Config(e.to_string()))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| MobilabError::Config(e.to_string()))
    }

    /// SHA-256 of the canonical JSON form, ignoring the output directory.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.output_dir = PathBuf::new();
        let bytes = serde_json::to_vec(&canonical).expect("config serializes");
        hex(&Sha256::digest(bytes))
    }

    fn input_has_earnings(&self) -> Option<bool> {
        match &self.input {
            InputSource::Preset(_) | InputSource::PanelCsv { .. } => Some(true),
            InputSource::Generator(g) => Some(g.regions.iter().any(|r| r.earnings.is_some())),
            InputSource::LineageCsv { .. } => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.analyses.is_empty() {
            return Err(MobilabError::EmptyConfig);
        }
        let o = &self.options;
        if !(o.subsample_fraction > 0.0 && o.subsample_fraction <= 1.0) {
            return Err(MobilabError::Config(format!(
                "subsample fraction must lie in (0, 1], got {}",
                o.subsample_fraction
            )));
        }
        for (name, v) in [
            ("placebo_permutations", o.placebo_permutations),
            ("subsample_replicates", o.subsample_replicates),
            ("cef_bins", o.cef_bins),
        ] {
            if v == 0 {
                return Err(MobilabError::Config(format!("{name} must be at least 1")));
            }
        }
        if o.statistics.is_empty() {
            return Err(MobilabError::Config("statistics must not be empty".into()));
        }
        if !(o.kde_bandwidth > 0.0) {
            return Err(MobilabError::Config("kde bandwidth must be positive".into()));
        }
        if self.analyses.contains(&Analysis::Recovery) {
            o.recovery.validate()?;
        }
        if let InputSource::Generator(g) = &self.input {
            g.validate()?;
        }
        if self.input_has_earnings() == Some(false) {
            check_earnings(&self.analyses)?;
        }
        Ok(())
    }
}

fn check_earnings(analyses: &BTreeSet<Analysis>) -> Result<()> {
    let missing: Vec<&str> = analyses
        .iter()
        .filter(|a| a.needs_earnings())
        .map(|a| a.name())
        .collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(MobilabError::Config(format!(
            "{} require earnings, which the input does not provide",
            missing.join(", ")
        )))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn derive_seed(seed: u64, salt: u64) -> u64 {
    seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisFailure {
    pub analysis: String,
    pub error: String,
    pub exit_code: i32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seed: u64,
    pub versions: BTreeMap<String, String>,
    pub weighted: bool,
    pub kde_bandwidth: f64,
    pub n_records: usize,
    pub analyses: Vec<String>,
    pub failures: Vec<AnalysisFailure>,
    /// SHA-256 of every output file except the run log.
    pub files: BTreeMap<String, String>,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const RUN_LOG_FILE: &str = "run_log.txt";

#[derive(Debug, Clone, PartialEq)]
pub struct ReportBundle {
    pub manifest: Manifest,
    pub tables: BTreeMap<String, Table>,
    pub reports: BTreeMap<String, serde_json::Value>,
    /// Timing and warnings; not hashed.
    pub run_log: Vec<String>,
}

impl ReportBundle {
    pub fn is_success(&self) -> bool {
        self.manifest.failures.is_empty()
    }

    /// 0 on success, otherwise the exit code of the first failure.
    pub fn exit_code(&self) -> i32 {
        self.manifest.failures.first().map_or(0, |f| f.exit_code)
    }

    pub fn table(&self, name: &str) -> Option<&Table> {
        self.tables.get(name)
    }

    fn file_bytes(&self) -> Result<Vec<(String, Vec<u8>)>> {
        let mut out = Vec::new();
        for (name, t) in &self.tables {
            out.push((format!("{name}.csv"), t.to_csv_string()?.into_bytes()));
        }
        for (name, v) in &self.reports {
            let mut bytes = serde_json::to_vec_pretty(v)?;
            bytes.push(b'\n');
            out.push((format!("{name}.json"), bytes));
        }
        Ok(out)
    }

    fn seal(&mut self) -> Result<()> {
        self.manifest.files = self
            .file_bytes()?
            .into_iter()
            .map(|(name, bytes)| (name, hex(&Sha256::digest(&bytes))))
            .collect();
        Ok(())
    }

    /// Writes every table and report, the run log, and the manifest last.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (name, bytes) in self.file_bytes()? {
            fs::write(dir.join(name), bytes)?;
        }
        let mut log = self.run_log.join("\n");
        log.push('\n');
        fs::write(dir.join(RUN_LOG_FILE), log)?;
        let mut manifest = serde_json::to_vec_pretty(&self.manifest)?;
        manifest.push(b'\n');
        fs::write(dir.join(MANIFEST_FILE), manifest)?;
        Ok(())
    }

    /// Reads a bundle written by [`ReportBundle::write`].
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?;
        let mut tables = BTreeMap::new();
        let mut reports = BTreeMap::new();
        for file in manifest.files.keys() {
            let path = dir.join(file);
            if let Some(name) = file.strip_suffix(".csv") {
                tables.insert(name.to_string(), Table::read_file(&path)?);
            } else if let Some(name) = file.strip_suffix(".json") {
                reports.insert(name.to_string(), serde_json::from_slice(&fs::read(&path)?)?);
            }
        }
        let run_log = fs::read_to_string(dir.join(RUN_LOG_FILE))
            .map(|s| s.lines().map(str::to_string).collect())
            .unwrap_or_default();
        Ok(Self {
            manifest,
            tables,
            reports,
            run_log,
        })
    }
}

#[derive(Default)]
struct Output {
    tables: Vec<(String, Table)>,
    reports: Vec<(String, serde_json::Value)>,
    log: Vec<String>,
}

impl Output {
    fn table(&mut self, name: &str, t: Table) {
        self.tables.push((name.to_string(), t));
    }

    fn report<T: Serialize>(&mut self, name: &str, v: &T) -> Result<()> {
        self.reports.push((name.to_string(), serde_json::to_value(v)?));
        Ok(())
    }
}

struct Loaded {
    records: Vec<LineageRecord>,
    out: Output,
}

/// Lineages rebuilt from panel person ids: region, child gender and birth
/// year come from whichever relative is present; outcomes start empty.
pub fn records_from_panel(rows: &[EarningsPanelRow]) -> Vec<LineageRecord> {
    let mut by_child: BTreeMap<u64, LineageRecord> = BTreeMap::new();
    let mut child_seen: BTreeSet<u64> = BTreeSet::new();
    for r in rows {
        let Some((child_id, who)) = split_person_id(r.person_id) else {
            continue;
        };
        let rec = by_child.entry(child_id).or_insert_with(|| LineageRecord {
            child_id,
            region_id: r.region_id,
            child_birth_year: r.birth_year + who.age_gap(),
            child_gender: Gender::M,
            outcomes: [Outcomes::default(); 7],
        });
        if who == Relative::Child && child_seen.insert(child_id) {
            rec.child_gender = r.gender;
            rec.child_birth_year = r.birth_year;
        }
    }
    by_child.into_values().collect()
}

fn persons_from_panel(rows: &[EarningsPanelRow]) -> Vec<PersonInfo> {
    let mut seen = BTreeMap::new();
    for r in rows {
        if let Some((_, who)) = split_person_id(r.person_id) {
            seen.entry(r.person_id).or_insert(PersonInfo {
                person_id: r.person_id,
                gender: r.gender,
                edu_group: r.edu_group,
                birth_year: r.birth_year,
                relative: who,
                child_birth_year: r.birth_year + who.age_gap(),
            });
        }
    }
    seen.into_values().collect()
}

/// Fits the earnings model, predicts age-40 earnings and ranks, and writes
/// them into the records.
fn earnings_from_panel(
    records: &mut [LineageRecord],
    panel: &[EarningsPanelRow],
    persons: &[PersonInfo],
    cfg: &PipelineConfig,
    out: &mut Output,
) -> Result<()> {
    let model = fit_fe_model(panel)?;
    let mut preds = predict_at_40(&model, persons, cfg.options.eval_rule, false);
    rank_within_cells(&mut preds.predictions);
    attach_predictions(records, &preds.predictions);
    out.log.extend(preds.warnings.iter().map(|w| format!("earnings: {w}")));
    out.log
        .extend(model.diagnostics.notes.iter().map(|n| format!("earnings: {n}")));
    out.table("predictions", predictions_table(&preds.predictions));
    let groups: Vec<(String, &crate::earnings::GroupFit)> =
        model.groups.iter().map(|(k, g)| (k.to_string(), g)).collect();
    out.report(
        "earnings_model",
        &serde_json::json!({
            "diagnostics": model.diagnostics,
            "year_range": model.year_range,
            "groups": groups,
        }),
    )?;
    if cfg.options.write_panel {
        out.table("panel", panel_table(panel));
    }
    Ok(())
}

/// The generator behind a synthetic input, with the master seed applied.
pub fn generator_config(cfg: &PipelineConfig) -> Result<GeneratorConfig> {
    match &cfg.input {
        InputSource::Preset(p) => {
            let mut p = p.clone();
            p.seed = cfg.seed;
            Ok(sweden_preset(&p))
        }
        InputSource::Generator(g) => {
            let mut g = GeneratorConfig::clone(g);
            g.seed = cfg.seed;
            Ok(g)
        }
        _ => Err(MobilabError::Config("input is not a synthetic population".into())),
    }
}

/// Panel settings with a seed derived from the master seed.
pub fn panel_config(cfg: &PipelineConfig) -> PanelConfig {
    let mut p = cfg.options.panel.clone().unwrap_or_default();
    p.seed = derive_seed(cfg.seed, 1);
    p
}

fn load_input(cfg: &PipelineConfig) -> Result<Loaded> {
    let mut out = Output::default();
    let mut records = match &cfg.input {
        InputSource::Preset(_) | InputSource::Generator(_) => {
            let mut records = generate_population(&generator_config(cfg)?)?;
            if cfg.options.earnings_panel {
                let panel = generate_earnings_panel(&records, &panel_config(cfg))?;
                let persons = persons_from_records(&records);
                earnings_from_panel(&mut records, &panel, &persons, cfg, &mut out)?;
            }
            records
        }
        InputSource::LineageCsv {
            path,
            categorical_schooling,
            skip_invalid,
        } => {
            let opts = IngestOptions {
                mode: if *skip_invalid {
                    ErrorMode::SkipAndLog
                } else {
                    ErrorMode::FailFast
                },
                categorical_schooling: *categorical_schooling,
            };
            let report = ingest_lineage_csv(path, &opts)?;
            for e in &report.errors {
                out.log
                    .push(format!("ingest: skipped line {} ({}): {}", e.line, e.column, e.message));
            }
            report.records
        }
        InputSource::PanelCsv { path, lineage } => {
            let panel = read_panel_csv(fs::File::open(path)?)?;
            let mut records = match lineage {
                Some(l) => ingest_lineage_csv(l, &IngestOptions::default())?.records,
                None => records_from_panel(&panel),
            };
            earnings_from_panel(&mut records, &panel, &persons_from_panel(&panel), cfg, &mut out)?;
            records
        }
    };
    records.sort_by_key(|r| r.child_id);
    Ok(Loaded { records, out })
}

fn has_earnings(records: &[LineageRecord]) -> bool {
    records
        .iter()
        .any(|r| r.outcome(Relative::Child, OutcomeKind::EarningsRank).is_some())
}

struct Ctx<'a> {
    records: &'a [LineageRecord],
    cfg: &'a PipelineConfig,
    earnings: bool,
}

fn regression_header() -> Table {
    Table::new(&[
        "outcome",
        "sample",
        "regressors",
        "dependent",
        "term",
        "estimate",
        "se",
        "t",
        "p_value",
        "n",
        "r2",
        "adj_r2",
        "condition_number",
    ])
}

fn push_regression(t: &mut Table, outcome: &str, sample: &str, regressors: &str, r: &RegressionReport) {
    for c in &r.coefficients {
        t.push(vec![
            outcome.into(),
            sample.into(),
            regressors.into(),
            r.dependent.clone(),
            c.name.clone(),
            num(c.estimate),
            num(c.se),
            num(c.t),
            num(c.p_value),
            r.n.to_string(),
            num(r.r2),
            num(r.adj_r2),
            num(r.condition_number),
        ]);
    }
}

/// `keys` prepended to every row of `t`.
fn prefixed(keys: &[(&str, &str)], t: Table) -> Table {
    let mut header: Vec<String> = keys.iter().map(|(k, _)| k.to_string()).collect();
    header.extend(t.header);
    let rows = t
        .rows
        .into_iter()
        .map(|r| {
            let mut row: Vec<String> = keys.iter().map(|(_, v)| v.to_string()).collect();
            row.extend(r);
            row
        })
        .collect();
    Table { header, rows }
}

fn append(into: &mut Option<Table>, t: Table) {
    match into {
        Some(acc) => acc.rows.extend(t.rows),
        None => *into = Some(t),
    }
}

fn with_p25(mut est: RegionEstimates) -> Result<RegionEstimates> {
    for e in &mut est.estimates {
        e.beta = p25_upward_mobility(e)?;
    }
    Ok(est)
}

impl Ctx<'_> {
    fn opts(&self) -> &AnalysisOptions {
        &self.cfg.options
    }

    fn spec(&self, outcome: Outcome, statistic: Statistic, pair: PairType) -> EstimatorSpec {
        EstimatorSpec {
            outcome,
            statistic,
            pair,
            weighting: if self.opts().weighted {
                Weighting::PairCount
            } else {
                Weighting::Unweighted
            },
            gender_filter: self.opts().gender,
            balanced: self.opts().balanced,
        }
    }

    fn outcomes(&self) -> Vec<Outcome> {
        let mut v = vec![Outcome::SchoolingYears];
        if self.earnings {
            v.push(Outcome::EarningsRank);
        }
        v
    }

    fn regions(&self, spec: &EstimatorSpec, out: &mut Output) -> RegionEstimates {
        let mut est = estimate_all_regions(self.records, spec);
        let min = self.opts().min_pairs;
        let (keep, drop): (Vec<_>, Vec<_>) = est.estimates.into_iter().partition(|e| e.n_pairs >= min);
        est.estimates = keep;
        est.flagged.extend(
            drop.into_iter()
                .map(|e| (e.region_id, format!("{} pairs below minimum {min}", e.n_pairs))),
        );
        if !est.flagged.is_empty() {
            out.log
                .push(format!("{}: {} regions flagged", spec.label(), est.flagged.len()));
        }
        est
    }

    fn latent(
        &self,
        records: &[LineageRecord],
        outcome: Outcome,
        balanced: bool,
        out: &mut Output,
    ) -> Vec<LatentEstimate<f64>> {
        let mut spec = self.spec(outcome, Statistic::PearsonCorrelation, PairType::Father);
        spec.balanced = balanced;
        let le = recover_all_regions(records, &spec);
        let min = self.opts().min_pairs as f64;
        if !le.flagged.is_empty() {
            out.log
                .push(format!("latent {}: {} regions flagged", spec.label(), le.flagged.len()));
        }
        le.estimates.into_iter().filter(|e| e.weight >= min).collect()
    }

    fn run(&self, analysis: Analysis) -> Result<Output> {
        if analysis.needs_earnings() && !self.earnings {
            return Err(MobilabError::Config(format!(
                "{} requires earnings ranks in the input",
                analysis.name()
            )));
        }
        match analysis {
            Analysis::Estimates => self.estimates(),
            Analysis::Delta => self.delta(),
            Analysis::Latent => self.latent_analysis(),
            Analysis::Gatsby => self.gatsby(),
            Analysis::Placebo => self.placebo(),
            Analysis::Subsamples => self.subsamples(),
            Analysis::Recovery => self.recovery(),
            Analysis::Cef => self.cef(),
            Analysis::CrossMatrix => self.cross_matrix(),
        }
    }

    fn estimates(&self) -> Result<Output> {
        let mut out = Output::default();
        let mut regional = Vec::new();
        let mut national = Vec::new();
        for outcome in self.outcomes() {
            for &statistic in &self.opts().statistics {
                for pair in PairType::ALL {
                    let spec = self.spec(outcome, statistic, pair);
                    regional.extend(self.regions(&spec, &mut out).estimates);
                    match estimate_national(self.records, &spec) {
                        Ok(e) => national.push(e),
                        Err(e) => out.log.push(format!("{}: national estimate failed: {e}", spec.label())),
                    }
                }
            }
        }
        out.table("estimates", estimates_table(&regional));
        out.table("estimates_national", estimates_table(&national));
        Ok(out)
    }

    fn delta(&self) -> Result<Output> {
        let mut out = Output::default();
        let mut tests = None;
        let mut summary = Table::new(&[
            "outcome",
            "share_delta_pos",
            "share_t_gt_196",
            "weighted_share_delta_pos",
            "weighted_share_t_gt_196",
            "n_regions",
        ]);
        for outcome in self.outcomes() {
            let spec = self.spec(outcome, Statistic::PearsonCorrelation, PairType::PaternalGrandfather);
            let mut d = delta_test_all(self.records, &spec, self.opts().sur_sample);
            d.tests.retain(|t| t.n_grandparent >= self.opts().min_pairs);
            if !d.flagged.is_empty() {
                out.log
                    .push(format!("delta {}: {} regions flagged", outcome.name(), d.flagged.len()));
            }
            let s = reject_shares(&d.tests)?;
            summary.push(vec![
                outcome.name().into(),
                num(s.share_delta_pos),
                num(s.share_t_gt_196),
                num(s.weighted_share_delta_pos),
                num(s.weighted_share_t_gt_196),
                s.n_regions.to_string(),
            ]);
            append(
                &mut tests,
                prefixed(&[("outcome", outcome.name())], delta_table(&d.tests)),
            );
        }
        out.table("delta", tests.unwrap_or_default());
        out.table("delta_summary", summary);
        Ok(out)
    }

    fn latent_analysis(&self) -> Result<Output> {
        let mut out = Output::default();
        let mut table = None;
        let mut regs = regression_header();
        let mut log_regs = regression_header();
        let weighted = self.opts().weighted;
        for outcome in self.outcomes() {
            for (sample, balanced) in [("baseline", self.opts().balanced), ("balanced", true)] {
                let est = self.latent(self.records, outcome, balanced, &mut out);
                append(
                    &mut table,
                    prefixed(&[("outcome", outcome.name()), ("sample", sample)], latent_table(&est)),
                );
                if sample != "baseline" {
                    continue;
                }
                for r in LatentRegressors::ALL {
                    match latent_regression(&est, r, false, weighted) {
                        Ok(rep) => push_regression(&mut regs, outcome.name(), sample, r.name(), &rep),
                        Err(e) => out
                            .log
                            .push(format!("latent regression {} {}: {e}", outcome.name(), r.name())),
                    }
                }
                match latent_regression(&est, LatentRegressors::Both, true, weighted) {
                    Ok(rep) => push_regression(&mut log_regs, outcome.name(), sample, "both", &rep),
                    Err(e) => out.log.push(format!("log latent regression {}: {e}", outcome.name())),
                }
            }
        }
        out.table("latent", table.unwrap_or_default());
        out.table("latent_regressions", regs);
        out.table("latent_log_regressions", log_regs);
        Ok(out)
    }

    fn gatsby(&self) -> Result<Output> {
        let mut out = Output::default();
        let weighted = self.opts().weighted;
        let fathers = regional_inequality(self.records, GiniGeneration::Father);
        let grandfathers = regional_inequality(self.records, GiniGeneration::Grandfather);
        let mut ineq = fathers.clone();
        ineq.extend(grandfathers.iter().cloned());
        out.table("inequality", inequality_table(&ineq));

        let panels: [(&str, PairType, &[InequalityMeasure]); 2] = [
            ("intergenerational", PairType::Father, &fathers),
            ("multigenerational", PairType::PaternalGrandfather, &grandfathers),
        ];
        let stats = [
            ("rank_slope", Outcome::EarningsRank, Statistic::RegressionSlope, false),
            ("ige", Outcome::LogEarnings, Statistic::RegressionSlope, false),
            (
                "p25_upward_mobility",
                Outcome::EarningsRank,
                Statistic::RegressionSlope,
                true,
            ),
            (
                "schooling_correlation",
                Outcome::SchoolingYears,
                Statistic::PearsonCorrelation,
                false,
            ),
        ];
        let columns = [
            ("sons", GenderFilter::Sons, false),
            ("daughters", GenderFilter::Daughters, false),
            ("pooled", GenderFilter::All, false),
            ("pooled_size_controlled", GenderFilter::All, true),
        ];
        let mut results = Vec::new();
        for (panel, pair, inequality) in panels {
            for (stat, outcome, statistic, p25) in stats {
                for (column, gender, size) in columns {
                    let mut spec = self.spec(outcome, statistic, pair);
                    spec.gender_filter = gender;
                    let mut est = self.regions(&spec, &mut out);
                    if p25 {
                        est = with_p25(est)?;
                    }
                    match gatsby_correlation(&est, inequality, weighted, size) {
                        Ok(r) => results.push((panel.to_string(), stat.to_string(), column.to_string(), r)),
                        Err(e) => out.log.push(format!("gatsby {panel} {stat} {column}: {e}")),
                    }
                }
            }
        }
        out.table("gatsby", gatsby_table(&results));

        let latent = self.latent(self.records, Outcome::SchoolingYears, self.opts().balanced, &mut out);
        let mut regs = regression_header();
        for r in LatentRegressors::ALL {
            match latent_inequality_regression(&fathers, &latent, r, weighted) {
                Ok(rep) => push_regression(&mut regs, Outcome::SchoolingYears.name(), "baseline", r.name(), &rep),
                Err(e) => out.log.push(format!("gini regression {}: {e}", r.name())),
            }
        }
        out.table("gini_regressions", regs);
        Ok(out)
    }

    fn placebo(&self) -> Result<Output> {
        let mut out = Output::default();
        let config = PlaceboConfig {
            seed: derive_seed(self.cfg.seed, 2),
            n_permutations: self.opts().placebo_permutations,
            split_threshold: self.opts().split_threshold,
        };
        let mut rows = Vec::new();
        for outcome in self.outcomes() {
            let spec = self.spec(outcome, Statistic::PearsonCorrelation, PairType::Father);
            for r in placebo_reshuffle(self.records, &config, &spec)? {
                rows.push((spec.label(), r));
            }
        }
        out.table("placebo", dispersion_table(&rows));
        Ok(out)
    }

    fn subsamples(&self) -> Result<Output> {
        let mut out = Output::default();
        let config = SubsampleConfig {
            seed: derive_seed(self.cfg.seed, 3),
            replicates: self.opts().subsample_replicates,
            fraction: self.opts().subsample_fraction,
        };
        let weighted = self.opts().weighted;
        let outcomes = self.outcomes();
        let averaged = subsample_replicates(self.records, &config, |sub| {
            let mut scratch = Output::default();
            let mut reports = Vec::new();
            for &outcome in &outcomes {
                let est = self.latent(sub, outcome, self.opts().balanced, &mut scratch);
                for r in LatentRegressors::ALL {
                    reports.push(latent_regression(&est, r, false, weighted)?);
                }
            }
            Ok(reports)
        })?;
        let mut regs = regression_header();
        let labels = outcomes
            .iter()
            .flat_map(|o| LatentRegressors::ALL.map(|r| (o.name(), r.name())));
        for ((outcome, r), rep) in labels.zip(&averaged) {
            push_regression(&mut regs, outcome, "subsample_mean", r, rep);
        }
        out.table("subsample_regressions", regs);
        Ok(out)
    }

    fn recovery(&self) -> Result<Output> {
        let mut out = Output::default();
        let mut grid = self.opts().recovery.clone();
        grid.seed = derive_seed(self.cfg.seed, 4);
        out.table("recovery", recovery_table(&recovery_experiment(&grid)?));
        Ok(out)
    }

    fn cef(&self) -> Result<Output> {
        let mut out = Output::default();
        let bins = self.opts().cef_bins;
        let mut profiles = vec![
            cef_bins(self.records, bins, CefLevel::National, PairType::Father)?,
            cef_bins(self.records, bins, CefLevel::National, PairType::PaternalGrandfather)?,
        ];
        let mut sizes: Vec<_> = group_by_region(self.records)
            .into_iter()
            .map(|(id, r)| (r.len(), id))
            .collect();
        sizes.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
        for (_, id) in sizes.into_iter().take(self.opts().cef_regions) {
            profiles.push(cef_bins(self.records, bins, CefLevel::Region(id), PairType::Father)?);
        }
        out.table("cef", cef_table(&profiles));
        Ok(out)
    }

    fn cross_matrix(&self) -> Result<Output> {
        let mut out = Output::default();
        let defs = [
            (
                "schooling_corr_father",
                Outcome::SchoolingYears,
                Statistic::PearsonCorrelation,
                PairType::Father,
                false,
            ),
            (
                "rank_corr_father",
                Outcome::EarningsRank,
                Statistic::PearsonCorrelation,
                PairType::Father,
                false,
            ),
            (
                "rank_slope_father",
                Outcome::EarningsRank,
                Statistic::RegressionSlope,
                PairType::Father,
                false,
            ),
            (
                "ige_father",
                Outcome::LogEarnings,
                Statistic::RegressionSlope,
                PairType::Father,
                false,
            ),
            (
                "p25_father",
                Outcome::EarningsRank,
                Statistic::RegressionSlope,
                PairType::Father,
                true,
            ),
            (
                "schooling_corr_grandfather",
                Outcome::SchoolingYears,
                Statistic::PearsonCorrelation,
                PairType::PaternalGrandfather,
                false,
            ),
            (
                "rank_slope_grandfather",
                Outcome::EarningsRank,
                Statistic::RegressionSlope,
                PairType::PaternalGrandfather,
                false,
            ),
        ];
        let mut series = Vec::new();
        for (name, outcome, statistic, pair, p25) in defs {
            let est = self.regions(&self.spec(outcome, statistic, pair), &mut out);
            series.push((name.to_string(), if p25 { with_p25(est)? } else { est }));
        }
        let m = cross_measure_matrix(&series, self.opts().min_pairs)?;
        out.log.push(format!("cross matrix over {} regions", m.n_regions));
        out.table("cross_matrix", cross_matrix_table(&m));
        Ok(out)
    }
}

/// Runs every requested analysis in memory. Configuration and input
/// errors abort; a failing analysis is recorded in the manifest while the
/// others still run.
pub fn build_bundle(cfg: &PipelineConfig) -> Result<ReportBundle> {
    cfg.validate()?;
    let start = Instant::now();
    let Loaded {
        records,
        out: input_out,
    } = load_input(cfg)?;
    let earnings = has_earnings(&records);
    if matches!(cfg.input, InputSource::LineageCsv { .. }) && !earnings {
        check_earnings(&cfg.analyses)?;
    }
    let mut run_log = vec![format!(
        "loaded {} records in {:.3}s",
        records.len(),
        start.elapsed().as_secs_f64()
    )];
    run_log.extend(input_out.log);
    let mut tables: BTreeMap<String, Table> = input_out.tables.into_iter().collect();
    let mut reports: BTreeMap<String, serde_json::Value> = input_out.reports.into_iter().collect();

    let ctx = Ctx {
        records: &records,
        cfg,
        earnings,
    };
    let analyses: Vec<Analysis> = cfg.analyses.iter().copied().collect();
    let results: Vec<(Analysis, Result<Output>, f64)> = analyses
        .par_iter()
        .map(|&a| {
            let t = Instant::now();
            let r = ctx.run(a);
            (a, r, t.elapsed().as_secs_f64())
        })
        .collect();

    let mut done = Vec::new();
    let mut failures = Vec::new();
    for (a, r, secs) in results {
        match r {
            Ok(out) => {
                run_log.push(format!("{} finished in {secs:.3}s", a.name()));
                run_log.extend(out.log);
                tables.extend(out.tables);
                reports.extend(out.reports);
                done.push(a.name().to_string());
            }
            Err(e) => {
                run_log.push(format!("{} failed after {secs:.3}s: {e}", a.name()));
                failures.push(AnalysisFailure {
                    analysis: a.name().into(),
                    error: e.to_string(),
                    exit_code: e.exit_code(),
                });
            }
        }
    }
    let mut bundle = ReportBundle {
        manifest: Manifest {
            config_hash: cfg.hash(),
            seed: cfg.seed,
            versions: BTreeMap::from([("mobilab".to_string(), env!("CARGO_PKG_VERSION").to_string())]),
            weighted: cfg.options.weighted,
            kde_bandwidth: cfg.options.kde_bandwidth,
            n_records: records.len(),
            analyses: done,
            failures,
            files: BTreeMap::new(),
        },
        tables,
        reports,
        run_log,
    };
    bundle.seal()?;
    Ok(bundle)
}

/// [`build_bundle`], then writes the bundle to the configured output
/// directory.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<ReportBundle> {
    let bundle = build_bundle(cfg)?;
    bundle.write(&cfg.output_dir)?;
    Ok(bundle)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TablePreset {
    Table2,
    Table3,
    Table4,
    Table5,
    Table6,
    Figure1Density,
    Figure3Cef,
    Figure6Placebo,
}

impl TablePreset {
    pub const ALL: [TablePreset; 8] = [
        TablePreset::Table2,
        TablePreset::Table3,
        TablePreset::Table4,
        TablePreset::Table5,
        TablePreset::Table6,
        TablePreset::Figure1Density,
        TablePreset::Figure3Cef,
        TablePreset::Figure6Placebo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TablePreset::Table2 => "table2",
            TablePreset::Table3 => "table3",
            TablePreset::Table4 => "table4",
            TablePreset::Table5 => "table5",
            TablePreset::Table6 => "table6",
            TablePreset::Figure1Density => "figure1_density",
            TablePreset::Figure3Cef => "figure3_cef",
            TablePreset::Figure6Placebo => "figure6_placebo",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == s)
    }

    /// Bundle tables the preset reads, with the analysis producing each.
    pub fn requires(self) -> &'static [(&'static str, Analysis)] {
        match self {
            TablePreset::Table2 | TablePreset::Figure1Density => &[("estimates", Analysis::Estimates)],
            TablePreset::Table3 | TablePreset::Table5 => {
                &[("latent", Analysis::Latent), ("latent_regressions", Analysis::Latent)]
            }
            TablePreset::Table4 => &[("gatsby", Analysis::Gatsby)],
            TablePreset::Table6 => &[("gini_regressions", Analysis::Gatsby)],
            TablePreset::Figure3Cef => &[("cef", Analysis::Cef)],
            TablePreset::Figure6Placebo => &[("placebo", Analysis::Placebo)],
        }
    }
}

/// Gaussian kernel density on `points` equally spaced values spanning the
/// data range padded by three bandwidths.
pub fn kernel_density(values: &[f64], bandwidth: f64, points: usize) -> Vec<(f64, f64)> {
    if values.is_empty() || points == 0 {
        return Vec::new();
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min) - 3.0 * bandwidth;
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 3.0 * bandwidth;
    let step = if points > 1 {
        (hi - lo) / (points - 1) as f64
    } else {
        0.0
    };
    let norm = 1.0 / (values.len() as f64 * bandwidth * (2.0 * std::f64::consts::PI).sqrt());
    (0..points)
        .map(|i| {
            let x = lo + step * i as f64;
            let d = values
                .iter()
                .map(|v| (-0.5 * ((x - v) / bandwidth).powi(2)).exp())
                .sum::<f64>()
                * norm;
            (x, d)
        })
        .collect()
}

pub const KDE_POINTS: usize = 512;

struct Rows<'a> {
    t: &'a Table,
}

impl<'a> Rows<'a> {
    fn col(&self, name: &str) -> Result<usize> {
        self.t.column(name).ok_or_else(|| MobilabError::Validation {
            line: 1,
            column: name.into(),
            message: "column missing from bundle table".into(),
        })
    }

    fn iter(&self) -> impl Iterator<Item = &'a Vec<String>> {
        self.t.rows.iter()
    }
}

fn parse_num(s: &str) -> Option<f64> {
    s.parse().ok().filter(|v: &f64| v.is_finite())
}

fn mean_sd(values: &[(f64, f64)], weighted: bool) -> (Option<f64>, Option<f64>) {
    let v: Vec<f64> = values.iter().map(|x| x.0).collect();
    let w: Vec<f64> = values.iter().map(|x| if weighted { x.1 } else { 1.0 }).collect();
    (weighted_mean(&v, &w), weighted_sd(&v, &w))
}

fn opt_num(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

fn regression_layout(t: &Table, column_keys: &[(&str, &str)]) -> Result<Table> {
    let r = Rows { t };
    let (co, cr, ct, ce, cs, cn, ca) = (
        r.col("outcome")?,
        r.col("regressors")?,
        r.col("term")?,
        r.col("estimate")?,
        r.col("se")?,
        r.col("n")?,
        r.col("adj_r2")?,
    );
    let mut header = vec!["row".to_string()];
    header.extend(column_keys.iter().map(|(o, g)| format!("{o}:{g}")));
    let mut out = Table::new(&header);
    let lookup = |o: &str, g: &str, term: &str, col: usize| -> String {
        r.iter()
            .find(|row| row[co] == o && row[cr] == g && (term.is_empty() || row[ct] == term))
            .map(|row| row[col].clone())
            .unwrap_or_default()
    };
    for (label, term, col) in [
        ("rho_hat", "rho_hat", ce),
        ("rho_hat_se", "rho_hat", cs),
        ("lambda_hat", "lambda_hat", ce),
        ("lambda_hat_se", "lambda_hat", cs),
        ("n_regions", "", cn),
        ("adj_r2", "", ca),
    ] {
        let mut row = vec![label.to_string()];
        row.extend(column_keys.iter().map(|(o, g)| lookup(o, g, term, col)));
        out.push(row);
    }
    Ok(out)
}

/// Reshapes bundle tables into a preset layout. Missing inputs raise a
/// dependency error naming the analyses to run; nothing is recomputed.
pub fn emit_table_preset(bundle: &ReportBundle, preset: TablePreset) -> Result<Table> {
    let missing: BTreeSet<&str> = preset
        .requires()
        .iter()
        .filter(|(t, _)| !bundle.tables.contains_key(*t))
        .map(|(_, a)| a.name())
        .collect();
    if !missing.is_empty() {
        return Err(MobilabError::Dependency(
            missing.into_iter().map(String::from).collect(),
        ));
    }
    let weighted = bundle.manifest.weighted;
    let outcomes = [Outcome::SchoolingYears.name(), Outcome::EarningsRank.name()];
    match preset {
        TablePreset::Table2 => {
            let r = Rows {
                t: &bundle.tables["estimates"],
            };
            let (co, cs, cp, cb, cn) = (
                r.col("outcome")?,
                r.col("statistic")?,
                r.col("pair")?,
                r.col("beta")?,
                r.col("n")?,
            );
            let mut groups: BTreeMap<(String, String), Vec<(f64, f64)>> = BTreeMap::new();
            for row in r.iter().filter(|row| row[cs] == Statistic::PearsonCorrelation.name()) {
                if let (Some(b), Some(n)) = (parse_num(&row[cb]), parse_num(&row[cn])) {
                    groups
                        .entry((row[cp].clone(), row[co].clone()))
                        .or_default()
                        .push((b, n));
                }
            }
            let mut header = vec!["lineage".to_string()];
            for w in ["unweighted", "weighted"] {
                for o in outcomes {
                    header.push(format!("{w}:{o}:mean"));
                    header.push(format!("{w}:{o}:sd"));
                }
            }
            let mut t = Table::new(&header);
            for pair in PairType::ALL {
                let mut row = vec![pair.name().to_string()];
                for w in [false, true] {
                    for o in outcomes {
                        let (m, s) = groups
                            .get(&(pair.name().to_string(), o.to_string()))
                            .map_or((None, None), |v| mean_sd(v, w));
                        row.push(opt_num(m));
                        row.push(opt_num(s));
                    }
                }
                t.push(row);
            }
            Ok(t)
        }
        TablePreset::Table3 => {
            let r = Rows {
                t: &bundle.tables["latent"],
            };
            let (co, cs, crho, clam, cv, cw) = (
                r.col("outcome")?,
                r.col("sample")?,
                r.col("rho_hat")?,
                r.col("lambda_hat")?,
                r.col("valid")?,
                r.col("weight")?,
            );
            let mut header = vec!["panel".to_string(), "statistic".to_string()];
            for o in outcomes {
                header.push(format!("{o}:rho_hat"));
                header.push(format!("{o}:lambda_hat"));
            }
            let mut t = Table::new(&header);
            for sample in ["baseline", "balanced"] {
                let mut cells: Vec<(Option<f64>, Option<f64>)> = Vec::new();
                for o in outcomes {
                    for c in [crho, clam] {
                        let v: Vec<(f64, f64)> = r
                            .iter()
                            .filter(|row| row[co] == o && row[cs] == sample && row[cv] == "1")
                            .filter_map(|row| Some((parse_num(&row[c])?, parse_num(&row[cw])?)))
                            .collect();
                        cells.push(if v.is_empty() {
                            (None, None)
                        } else {
                            mean_sd(&v, weighted)
                        });
                    }
                }
                for (stat, pick) in [("mean", 0usize), ("sd", 1)] {
                    let mut row = vec![sample.to_string(), stat.to_string()];
                    row.extend(cells.iter().map(|c| opt_num(if pick == 0 { c.0 } else { c.1 })));
                    t.push(row);
                }
            }
            Ok(t)
        }
        TablePreset::Table4 => {
            let r = Rows {
                t: &bundle.tables["gatsby"],
            };
            let (cp, cs, cc, cr, cpv) = (
                r.col("panel")?,
                r.col("statistic")?,
                r.col("column")?,
                r.col("correlation")?,
                r.col("p_value")?,
            );
            let columns = ["sons", "daughters", "pooled", "pooled_size_controlled"];
            let mut header = vec!["panel".to_string(), "statistic".to_string(), "quantity".to_string()];
            header.extend(columns.iter().map(|c| c.to_string()));
            let mut t = Table::new(&header);
            let mut keys: Vec<(String, String)> = Vec::new();
            for row in r.iter() {
                let k = (row[cp].clone(), row[cs].clone());
                if !keys.contains(&k) {
                    keys.push(k);
                }
            }
            for (panel, stat) in keys {
                for (quantity, col) in [("correlation", cr), ("p_value", cpv)] {
                    let mut row = vec![panel.clone(), stat.clone(), quantity.to_string()];
                    for c in columns {
                        row.push(
                            r.iter()
                                .find(|x| x[cp] == panel && x[cs] == stat && x[cc] == c)
                                .map(|x| x[col].clone())
                                .unwrap_or_default(),
                        );
                    }
                    t.push(row);
                }
            }
            Ok(t)
        }
        TablePreset::Table5 => {
            let keys: Vec<(&str, &str)> = outcomes
                .iter()
                .flat_map(|o| LatentRegressors::ALL.map(|g| (*o, g.name())))
                .collect();
            regression_layout(&bundle.tables["latent_regressions"], &keys)
        }
        TablePreset::Table6 => {
            let keys: Vec<(&str, &str)> = LatentRegressors::ALL
                .iter()
                .map(|g| (Outcome::SchoolingYears.name(), g.name()))
                .collect();
            regression_layout(&bundle.tables["gini_regressions"], &keys)
        }
        TablePreset::Figure1Density => {
            let r = Rows {
                t: &bundle.tables["estimates"],
            };
            let (co, cs, cp, cb) = (r.col("outcome")?, r.col("statistic")?, r.col("pair")?, r.col("beta")?);
            let mut t = Table::new(&["outcome", "pair", "x", "density"]);
            for o in outcomes {
                for pair in [PairType::Father, PairType::PaternalGrandfather] {
                    let v: Vec<f64> = r
                        .iter()
                        .filter(|row| {
                            row[co] == o && row[cp] == pair.name() && row[cs] == Statistic::PearsonCorrelation.name()
                        })
                        .filter_map(|row| parse_num(&row[cb]))
                        .collect();
                    for (x, d) in kernel_density(&v, bundle.manifest.kde_bandwidth, KDE_POINTS) {
                        t.push(vec![o.into(), pair.name().into(), num(x), num(d)]);
                    }
                }
            }
            Ok(t)
        }
        TablePreset::Figure3Cef => select(
            &bundle.tables["cef"],
            &["level", "region_id", "pair", "bin_center", "mean_child_rank", "n"],
        ),
        TablePreset::Figure6Placebo => select(
            &bundle.tables["placebo"],
            &[
                "statistic",
                "group",
                "n_regions",
                "mean_pairs",
                "actual_sd",
                "placebo_sd",
                "ratio",
            ],
        ),
    }
}

fn select(t: &Table, columns: &[&str]) -> Result<Table> {
    let r = Rows { t };
    let idx: Vec<usize> = columns.iter().map(|c| r.col(c)).collect::<Result<_>>()?;
    let mut out = Table::new(columns);
    for row in r.iter() {
        out.push(idx.iter().map(|&i| row[i].clone()).collect());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthkit::RegionParams;

    fn two_region(analyses: &[Analysis]) -> PipelineConfig {
        let g = GeneratorConfig::new(
            0,
            vec![
                RegionParams::standardized(101, 0.9, 0.4, 400),
                RegionParams::standardized(102, 0.8, 0.5, 300),
            ],
        );
        PipelineConfig::new(7, InputSource::Generator(Box::new(g)), analyses.iter().copied())
    }

    #[test]
    fn estimates_two_rows_per_spec() {
        let b = build_bundle(&two_region(&[Analysis::Estimates])).unwrap();
        assert!(b.is_success());
        let t = &b.tables["estimates"];
        assert_eq!(t.rows.len(), 2 * PairType::ALL.len());
        assert_eq!(b.tables["estimates_national"].rows.len(), PairType::ALL.len());
    }

    #[test]
    fn earnings_analyses_rejected_without_earnings() {
        let err = build_bundle(&two_region(&[Analysis::Gatsby])).unwrap_err();
        assert!(matches!(err, MobilabError::Config(_)));
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn empty_analyses_is_config_error() {
        assert!(matches!(two_region(&[]).validate(), Err(MobilabError::EmptyConfig)));
    }

    #[test]
    fn rerun_is_identical_and_hash_ignores_output_dir() {
        let cfg = two_region(&[
            Analysis::Estimates,
            Analysis::Delta,
            Analysis::Latent,
            Analysis::Placebo,
        ]);
        let a = build_bundle(&cfg).unwrap();
        let mut other = cfg.clone();
        other.output_dir = PathBuf::from("elsewhere");
        let b = build_bundle(&other).unwrap();
        assert_eq!(a.manifest, b.manifest);
        assert_eq!(a.tables, b.tables);
        let mut changed = cfg.clone();
        changed.seed = 8;
        assert_ne!(changed.hash(), cfg.hash());
    }

    #[test]
    fn failing_analysis_is_recorded_and_others_run() {
        let mut cfg = two_region(&[Analysis::Estimates, Analysis::Placebo]);
        cfg.input = InputSource::Generator(Box::new(GeneratorConfig::new(
            0,
            vec![RegionParams::standardized(101, 0.9, 0.4, 300)],
        )));
        let b = build_bundle(&cfg).unwrap();
        assert!(!b.is_success());
        assert_eq!(b.manifest.failures[0].analysis, "placebo");
        assert_ne!(b.exit_code(), 0);
        assert!(b.tables.contains_key("estimates"));
    }

    #[test]
    fn empty_bundle_preset_lists_missing_analyses() {
        let b = ReportBundle {
            manifest: Manifest {
                config_hash: String::new(),
                seed: 0,
                versions: BTreeMap::new(),
                weighted: true,
                kde_bandwidth: 0.01,
                n_records: 0,
                analyses: vec![],
                failures: vec![],
                files: BTreeMap::new(),
            },
            tables: BTreeMap::new(),
            reports: BTreeMap::new(),
            run_log: vec![],
        };
        match emit_table_preset(&b, TablePreset::Table3) {
            Err(MobilabError::Dependency(names)) => assert_eq!(names, vec!["latent".to_string()]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn kde_integrates_to_one() {
        let v = [0.1, 0.2, 0.25, 0.3];
        let pts = kernel_density(&v, 0.01, KDE_POINTS);
        assert_eq!(pts.len(), KDE_POINTS);
        let step = pts[1].0 - pts[0].0;
        let area: f64 = pts.iter().map(|p| p.1).sum::<f64>() * step;
        assert!((area - 1.0).abs() < 1e-3, "{area}");
    }

    #[test]
    fn config_toml_round_trip() {
        let mut cfg = two_region(&[Analysis::Estimates, Analysis::Recovery]);
        cfg.options.min_pairs = 50;
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(PipelineConfig::from_toml_str(&text).unwrap(), cfg);
        let preset = PipelineConfig::from_toml_str(
            "seed = 3\nanalyses = [\"latent\"]\n[input]\nkind = \"preset\"\nscale = 0.1\n",
        )
        .unwrap();
        assert!(matches!(preset.input, InputSource::Preset(ref p) if p.scale == 0.1));
    }

    #[test]
    fn panel_person_ids_rebuild_lineages() {
        let rows = vec![
            EarningsPanelRow {
                person_id: 5 * 8 + 1,
                region_id: crate::record::RegionId(101),
                gender: Gender::M,
                edu_group: crate::synthkit::EduGroup(2),
                birth_year: 1950,
                year: 1990,
                age: 40,
                log_earnings: 12.0,
                below_floor: false,
            },
            EarningsPanelRow {
                person_id: 5 * 8,
                region_id: crate::record::RegionId(101),
                gender: Gender::F,
                edu_group: crate::synthkit::EduGroup(2),
                birth_year: 1982,
                year: 2018,
                age: 36,
                log_earnings: 12.0,
                below_floor: false,
            },
        ];
        let recs = records_from_panel(&rows);
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].child_id, 5);
        assert_eq!(recs[0].child_gender, Gender::F);
        assert_eq!(recs[0].child_birth_year, 1982);
    }
}
