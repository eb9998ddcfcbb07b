//! CSV interchange: the lineage and person-year schemas with validated
//! ingestion, and flat tables for every analysis output.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::Serialize;

use crate::earnings::PredictedEarnings;
use crate::error::{MobilabError, Result};
use crate::gatsby::{GatsbyResult, InequalityMeasure};
use crate::harness::{DispersionReport, RecoveryCell};
use crate::latent::{DeltaTest, LatentEstimate};
use crate::mobility::{CefLevel, CefProfile, CrossMatrix, MobilityEstimate};
use crate::record::{Gender, LineageRecord, OutcomeKind, Outcomes, RegionId, Relative};
use crate::synthkit::{EarningsPanelRow, EduGroup, SCHOOLING_CODES};

const LINEAGE_FIXED: [&str; 4] = ["child_id", "region_id", "child_birth_year", "child_gender"];
const OUTCOME_SUFFIXES: [(&str, OutcomeKind); 3] = [
    ("schooling", OutcomeKind::Schooling),
    ("log_earnings", OutcomeKind::LogEarnings),
    ("earnings_rank", OutcomeKind::EarningsRank),
];

pub const PANEL_HEADER: [&str; 9] = [
    "person_id",
    "region_id",
    "gender",
    "edu_group",
    "birth_year",
    "year",
    "age",
    "log_earnings",
    "below_floor",
];

/// Column names of the lineage CSV, in order.
pub fn lineage_header() -> Vec<String> {
    let mut h: Vec<String> = LINEAGE_FIXED.iter().map(|s| s.to_string()).collect();
    for who in Relative::ALL {
        for (suffix, _) in OUTCOME_SUFFIXES {
            h.push(format!("{}_{suffix}", who.key()));
        }
    }
    h
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_lineage_csv<W: Write>(writer: W, records: &[LineageRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(lineage_header())?;
    for rec in records {
        let mut row = vec![
            rec.child_id.to_string(),
            rec.region_id.0.to_string(),
            rec.child_birth_year.to_string(),
            rec.child_gender.as_str().to_string(),
        ];
        for who in Relative::ALL {
            for (_, kind) in OUTCOME_SUFFIXES {
                row.push(opt(rec.outcome(who, kind)));
            }
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_lineage_file(path: &Path, records: &[LineageRecord]) -> Result<()> {
    write_lineage_csv(BufWriter::new(File::create(path)?), records)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ErrorMode {
    #[default]
    FailFast,
    SkipAndLog,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct IngestOptions {
    pub mode: ErrorMode,
    /// Require schooling values to be one of the categorical codes.
    pub categorical_schooling: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RowError {
    pub line: u64,
    pub column: String,
    pub message: String,
}

impl From<RowError> for MobilabError {
    fn from(e: RowError) -> Self {
        MobilabError::Validation {
            line: e.line,
            column: e.column,
            message: e.message,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct IngestReport {
    pub records: Vec<LineageRecord>,
    /// Rejected rows, populated only in skip-and-log mode.
    pub errors: Vec<RowError>,
    pub rows_read: usize,
}

fn row_error(line: u64, column: &str, message: impl Into<String>) -> RowError {
    RowError {
        line,
        column: column.to_string(),
        message: message.into(),
    }
}

fn parse_field<T: std::str::FromStr>(line: u64, column: &str, raw: &str) -> std::result::Result<T, RowError> {
    raw.trim()
        .parse()
        .map_err(|_| row_error(line, column, format!("cannot parse {raw:?}")))
}

fn parse_outcome(
    line: u64,
    column: &str,
    raw: &str,
    kind: OutcomeKind,
    categorical: bool,
) -> std::result::Result<Option<f64>, RowError> {
    if raw.trim().is_empty() {
        return Ok(None);
    }
    let v: f64 = parse_field(line, column, raw)?;
    if !v.is_finite() {
        return Err(row_error(line, column, "value is not finite"));
    }
    match kind {
        OutcomeKind::EarningsRank if !(0.0..=1.0).contains(&v) => {
            Err(row_error(line, column, format!("rank {v} outside [0, 1]")))
        }
        OutcomeKind::Schooling if categorical && !SCHOOLING_CODES.contains(&v) => {
            Err(row_error(line, column, format!("schooling {v} is not a valid code")))
        }
        _ => Ok(Some(v)),
    }
}

fn parse_lineage_row(
    line: u64,
    row: &csv::StringRecord,
    opts: &IngestOptions,
) -> std::result::Result<LineageRecord, RowError> {
    let width = lineage_header().len();
    if row.len() != width {
        return Err(row_error(
            line,
            "row",
            format!("expected {width} fields, found {}", row.len()),
        ));
    }
    let gender_raw = row[3].trim();
    let mut rec = LineageRecord {
        child_id: parse_field(line, "child_id", &row[0])?,
        region_id: RegionId(parse_field(line, "region_id", &row[1])?),
        child_birth_year: parse_field(line, "child_birth_year", &row[2])?,
        child_gender: Gender::parse(gender_raw)
            .ok_or_else(|| row_error(line, "child_gender", format!("expected M or F, found {gender_raw:?}")))?,
        outcomes: [Outcomes::default(); 7],
    };
    let mut col = LINEAGE_FIXED.len();
    for who in Relative::ALL {
        for (suffix, kind) in OUTCOME_SUFFIXES {
            let name = format!("{}_{suffix}", who.key());
            *rec.of_mut(who).slot(kind) = parse_outcome(line, &name, &row[col], kind, opts.categorical_schooling)?;
            col += 1;
        }
    }
    Ok(rec)
}

/// Reads and validates a lineage CSV. Line numbers count the header as
/// line 1.
pub fn ingest_lineage_reader<R: Read>(reader: R, opts: &IngestOptions) -> Result<IngestReport> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(|s| s.trim().to_string()).collect();
    let expected = lineage_header();
    if header != expected {
        let column = header
            .iter()
            .zip(&expected)
            .find(|(a, b)| a != b)
            .map(|(a, _)| a.clone())
            .unwrap_or_else(|| "header".into());
        return Err(MobilabError::Validation {
            line: 1,
            column,
            message: format!(
                "header does not match the lineage schema ({} columns expected)",
                expected.len()
            ),
        });
    }
    let mut report = IngestReport::default();
    for (i, row) in rdr.records().enumerate() {
        let row = row?;
        let line = row.position().map(|p| p.line()).unwrap_or(i as u64 + 2);
        report.rows_read += 1;
        match parse_lineage_row(line, &row, opts) {
            Ok(rec) => report.records.push(rec),
            Err(e) => match opts.mode {
                ErrorMode::FailFast => return Err(e.into()),
                ErrorMode::SkipAndLog => {
                    log::warn!("skipping line {}: {}: {}", e.line, e.column, e.message);
                    report.errors.push(e);
                }
            },
        }
    }
    Ok(report)
}

pub fn ingest_lineage_csv(path: &Path, opts: &IngestOptions) -> Result<IngestReport> {
    ingest_lineage_reader(File::open(path)?, opts)
}

pub fn panel_table(rows: &[EarningsPanelRow]) -> Table {
    let mut t = Table::new(&PANEL_HEADER);
    for r in rows {
        t.push(vec![
            r.person_id.to_string(),
            r.region_id.0.to_string(),
            r.gender.as_str().to_string(),
            r.edu_group.0.to_string(),
            r.birth_year.to_string(),
            r.year.to_string(),
            r.age.to_string(),
            r.log_earnings.to_string(),
            u8::from(r.below_floor).to_string(),
        ]);
    }
    t
}

pub fn write_panel_csv<W: Write>(writer: W, rows: &[EarningsPanelRow]) -> Result<()> {
    panel_table(rows).write(writer)
}

pub fn read_panel_csv<R: Read>(reader: R) -> Result<Vec<EarningsPanelRow>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(|s| s.trim().to_string()).collect();
    if header != PANEL_HEADER {
        return Err(MobilabError::Validation {
            line: 1,
            column: "header".into(),
            message: "header does not match the person-year schema".into(),
        });
    }
    let mut rows = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row?;
        let line = row.position().map(|p| p.line()).unwrap_or(i as u64 + 2);
        let parse = |row: &csv::StringRecord| -> std::result::Result<EarningsPanelRow, RowError> {
            if row.len() != PANEL_HEADER.len() {
                return Err(row_error(
                    line,
                    "row",
                    format!("expected {} fields, found {}", PANEL_HEADER.len(), row.len()),
                ));
            }
            let log_earnings: f64 = parse_field(line, "log_earnings", &row[7])?;
            if !log_earnings.is_finite() {
                return Err(row_error(line, "log_earnings", "value is not finite"));
            }
            Ok(EarningsPanelRow {
                person_id: parse_field(line, "person_id", &row[0])?,
                region_id: RegionId(parse_field(line, "region_id", &row[1])?),
                gender: Gender::parse(row[2].trim()).ok_or_else(|| row_error(line, "gender", "expected M or F"))?,
                edu_group: EduGroup(parse_field(line, "edu_group", &row[3])?),
                birth_year: parse_field(line, "birth_year", &row[4])?,
                year: parse_field(line, "year", &row[5])?,
                age: parse_field(line, "age", &row[6])?,
                log_earnings,
                below_floor: match row[8].trim() {
                    "1" | "true" => true,
                    "0" | "false" => false,
                    other => {
                        return Err(row_error(
                            line,
                            "below_floor",
                            format!("expected 0 or 1, found {other:?}"),
                        ))
                    }
                },
            })
        };
        rows.push(parse(&row)?);
    }
    Ok(rows)
}

/// A header plus string rows, written as one CSV file.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: AsRef<str>>(header: &[S]) -> Self {
        Self {
            header: header.iter().map(|s| s.as_ref().to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn write<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        self.write(BufWriter::new(File::create(path)?))
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is utf-8"))
    }

    pub fn read<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let header = rdr.headers()?.iter().map(str::to_string).collect();
        let rows = rdr
            .records()
            .map(|r| r.map(|r| r.iter().map(str::to_string).collect()))
            .collect::<std::result::Result<_, _>>()?;
        Ok(Self { header, rows })
    }

    pub fn read_file(path: &Path) -> Result<Self> {
        Self::read(File::open(path)?)
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }
}

/// Cell formatting shared by every table: shortest round-trip decimal,
/// empty for missing or non-finite values.
pub fn num(v: f64) -> String {
    if v.is_finite() {
        v.to_string()
    } else {
        String::new()
    }
}

pub fn num_opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

pub fn estimates_table(estimates: &[MobilityEstimate]) -> Table {
    let mut t = Table::new(&[
        "region_id",
        "outcome",
        "statistic",
        "pair",
        "gender",
        "balanced",
        "alpha",
        "beta",
        "se",
        "n",
        "r2",
        "weight",
    ]);
    for e in estimates {
        t.push(vec![
            e.region_id.to_string(),
            e.spec.outcome.name().into(),
            e.spec.statistic.name().into(),
            e.spec.pair.name().into(),
            e.spec.gender_filter.name().into(),
            u8::from(e.spec.balanced).to_string(),
            num(e.alpha),
            num(e.beta),
            num(e.se_beta),
            e.n_pairs.to_string(),
            num(e.r2),
            num(e.weight),
        ]);
    }
    t
}

pub fn cef_table(profiles: &[CefProfile]) -> Table {
    let mut t = Table::new(&[
        "level",
        "region_id",
        "pair",
        "bin_center",
        "mean_child_rank",
        "n",
        "r2_linear",
        "r2_quadratic",
        "linearity_index",
    ]);
    for p in profiles {
        let (level, region) = match p.level {
            CefLevel::National => ("national", String::new()),
            CefLevel::Region(id) => ("region", id.to_string()),
        };
        for b in &p.bins {
            t.push(vec![
                level.into(),
                region.clone(),
                p.pair.name().into(),
                num(b.center),
                num_opt(b.mean),
                b.n.to_string(),
                num(p.r2_linear),
                num(p.r2_quadratic),
                num(p.linearity_index),
            ]);
        }
    }
    t
}

pub fn cross_matrix_table(m: &CrossMatrix) -> Table {
    let mut header = vec!["statistic".to_string()];
    header.extend(m.names.iter().cloned());
    let mut t = Table::new(&header);
    for (name, row) in m.names.iter().zip(&m.matrix) {
        let mut r = vec![name.clone()];
        r.extend(row.iter().map(|&v| num(v)));
        t.push(r);
    }
    t
}

pub fn delta_table(tests: &[DeltaTest]) -> Table {
    let mut t = Table::new(&[
        "region_id",
        "beta1",
        "beta2",
        "delta",
        "var_beta1",
        "var_beta2",
        "cov_b1b2",
        "var_delta",
        "t",
        "p_two_sided",
        "p_one_sided",
        "n_parent",
        "n_grandparent",
        "n_common",
    ]);
    for d in tests {
        t.push(vec![
            d.region_id.to_string(),
            num(d.beta1),
            num(d.beta2),
            num(d.delta),
            num(d.var_beta1),
            num(d.var_beta2),
            num(d.cov_b1b2),
            num(d.var_delta),
            num_opt(d.t_stat),
            num_opt(d.p_two_sided),
            num_opt(d.p_one_sided),
            d.n_parent.to_string(),
            d.n_grandparent.to_string(),
            d.n_common.to_string(),
        ]);
    }
    t
}

pub fn latent_table(estimates: &[LatentEstimate<f64>]) -> Table {
    let mut t = Table::new(&[
        "region_id",
        "beta1_child_parent",
        "beta1_parent_grandparent",
        "beta1_adj",
        "beta2",
        "lambda_hat",
        "rho_hat",
        "valid",
        "reason",
        "weight",
    ]);
    for e in estimates {
        t.push(vec![
            e.region_id.to_string(),
            num(e.beta1_child_parent),
            num_opt(e.beta1_parent_grandparent),
            num(e.beta1_adj),
            num(e.beta2),
            num(e.lambda_hat),
            num(e.rho_hat),
            u8::from(e.valid).to_string(),
            e.reason.clone().unwrap_or_default(),
            num(e.weight),
        ]);
    }
    t
}

pub fn inequality_table(measures: &[InequalityMeasure]) -> Table {
    let mut t = Table::new(&["region_id", "generation", "gini", "sd_log", "n"]);
    for m in measures {
        t.push(vec![
            m.region_id.to_string(),
            m.generation.name().into(),
            num(m.gini),
            num(m.sd_log),
            m.n.to_string(),
        ]);
    }
    t
}

/// Gatsby correlations keyed by (panel, statistic, column).
pub fn gatsby_table(results: &[(String, String, String, GatsbyResult)]) -> Table {
    let mut t = Table::new(&[
        "panel",
        "statistic",
        "column",
        "spec",
        "correlation",
        "p_value",
        "n_regions",
        "weighted",
        "size_controlled",
    ]);
    for (panel, stat, column, r) in results {
        t.push(vec![
            panel.clone(),
            stat.clone(),
            column.clone(),
            r.statistic.clone(),
            num(r.correlation),
            num(r.p_value),
            r.n_regions.to_string(),
            u8::from(r.weighted).to_string(),
            u8::from(r.size_controlled).to_string(),
        ]);
    }
    t
}

pub fn dispersion_table(reports: &[(String, DispersionReport)]) -> Table {
    let mut t = Table::new(&[
        "statistic",
        "group",
        "n_regions",
        "mean_pairs",
        "actual_sd",
        "placebo_sd",
        "ratio",
    ]);
    for (stat, r) in reports {
        t.push(vec![
            stat.clone(),
            r.group.name().into(),
            r.n_regions.to_string(),
            num(r.mean_pairs),
            num(r.actual_sd),
            num(r.placebo_sd),
            num_opt(r.ratio),
        ]);
    }
    t
}

pub fn recovery_table(cells: &[RecoveryCell]) -> Table {
    let mut t = Table::new(&[
        "rho",
        "lambda",
        "n",
        "replicates",
        "quantity",
        "truth",
        "mean",
        "bias",
        "sd",
        "mc_se",
        "delta_coverage",
        "delta_rejection_rate",
        "mean_var_delta",
        "empirical_var_delta",
        "invalid_share",
    ]);
    for c in cells {
        for q in &c.quantities {
            t.push(vec![
                num(c.rho),
                num(c.lambda),
                c.n.to_string(),
                c.replicates.to_string(),
                q.name.into(),
                num(q.truth),
                num(q.mean),
                num(q.bias),
                num(q.sd),
                num(q.mc_se),
                num(c.delta_coverage),
                num(c.delta_rejection_rate),
                num(c.mean_var_delta),
                num(c.empirical_var_delta),
                num(c.invalid_share),
            ]);
        }
    }
    t
}

pub fn predictions_table(predictions: &[PredictedEarnings]) -> Table {
    let mut t = Table::new(&["person_id", "log_earnings_at_40", "rank", "cell_key"]);
    for p in predictions {
        t.push(vec![
            p.person_id.to_string(),
            num(p.log_earnings_at_40),
            num_opt(p.rank),
            p.cell_key(),
        ]);
    }
    t
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthkit::{generate_population, GeneratorConfig, RegionParams};

    fn ingest(text: &str, opts: IngestOptions) -> Result<IngestReport> {
        ingest_lineage_reader(text.as_bytes(), &opts)
    }

    fn header_line() -> String {
        lineage_header().join(",")
    }

    fn row_with(col: &str, value: &str) -> String {
        let h = lineage_header();
        h.iter()
            .map(|c| match c.as_str() {
                c if c == col => value.to_string(),
                "child_id" => "1".into(),
                "region_id" => "101".into(),
                "child_birth_year" => "1960".into(),
                "child_gender" => "M".into(),
                _ => String::new(),
            })
            .collect::<Vec<_>>()
            .join(",")
    }

    #[test]
    fn empty_file_with_header() {
        let r = ingest(&format!("{}\n", header_line()), IngestOptions::default()).unwrap();
        assert!(r.records.is_empty() && r.errors.is_empty());
        assert_eq!(r.rows_read, 0);
    }

    #[test]
    fn out_of_range_rank_names_column_and_line() {
        let text = format!(
            "{}\n{}\n{}\n",
            header_line(),
            row_with("child_earnings_rank", "0.5"),
            row_with("father_earnings_rank", "1.2")
        );
        match ingest(&text, IngestOptions::default()) {
            Err(MobilabError::Validation { line, column, .. }) => {
                assert_eq!(line, 3);
                assert_eq!(column, "father_earnings_rank");
            }
            other => panic!("unexpected {other:?}"),
        }
        let skipped = ingest(
            &text,
            IngestOptions {
                mode: ErrorMode::SkipAndLog,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(skipped.records.len(), 1);
        assert_eq!(skipped.errors.len(), 1);
    }

    #[test]
    fn categorical_schooling_check() {
        let text = format!("{}\n{}\n", header_line(), row_with("child_schooling", "11"));
        assert!(ingest(&text, IngestOptions::default()).is_ok());
        let strict = IngestOptions {
            categorical_schooling: true,
            ..Default::default()
        };
        assert!(matches!(ingest(&text, strict), Err(MobilabError::Validation { .. })));
    }

    #[test]
    fn bad_header_and_width() {
        assert!(matches!(
            ingest("a,b\n", IngestOptions::default()),
            Err(MobilabError::Validation { line: 1, .. })
        ));
        let text = format!("{}\n1,101\n", header_line());
        assert!(matches!(
            ingest(&text, IngestOptions::default()),
            Err(MobilabError::Validation { line: 2, .. })
        ));
    }

    #[test]
    fn lineage_round_trip() {
        let params = vec![
            RegionParams::standardized(101, 0.9, 0.4, 200),
            RegionParams::standardized(102, 0.8, 0.5, 150),
        ];
        let recs = generate_population(&GeneratorConfig::new(3, params)).unwrap();
        let mut buf = Vec::new();
        write_lineage_csv(&mut buf, &recs).unwrap();
        let back = ingest_lineage_reader(buf.as_slice(), &IngestOptions::default()).unwrap();
        assert_eq!(back.records, recs);
    }

    #[test]
    fn panel_round_trip() {
        let rows = vec![EarningsPanelRow {
            person_id: 17,
            region_id: RegionId(101),
            gender: Gender::F,
            edu_group: EduGroup(3),
            birth_year: 1950,
            year: 1990,
            age: 40,
            log_earnings: 12.345678901234,
            below_floor: true,
        }];
        let mut buf = Vec::new();
        write_panel_csv(&mut buf, &rows).unwrap();
        assert_eq!(read_panel_csv(buf.as_slice()).unwrap(), rows);
    }

    #[test]
    fn non_finite_cells_are_empty() {
        assert_eq!(num(f64::NAN), "");
        assert_eq!(num(0.1), "0.1");
        assert_eq!(num_opt(None), "");
    }
}
