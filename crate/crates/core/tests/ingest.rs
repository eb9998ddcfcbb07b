//! Lineage CSV schema stability and validation.

use mobilab::io::{ingest_lineage_reader, lineage_header, write_lineage_csv, ErrorMode, IngestOptions};
use mobilab::synthkit::{generate_population, sweden_preset, SwedenPreset};
use mobilab::{Gender, LineageRecord, MobilabError, Outcomes, RegionId};
use proptest::prelude::*;

fn outcome() -> impl Strategy<Value = Option<f64>> {
    prop_oneof![Just(None), (-30.0f64..30.0).prop_map(Some)]
}

fn rank() -> impl Strategy<Value = Option<f64>> {
    prop_oneof![Just(None), (0.0f64..=1.0).prop_map(Some)]
}

fn record() -> impl Strategy<Value = LineageRecord> {
    let outcomes = prop::array::uniform7((outcome(), outcome(), rank()).prop_map(|(s, e, r)| Outcomes {
        schooling: s,
        log_earnings: e,
        earnings_rank: r,
    }));
    (any::<u32>(), 100u32..3000, 1950i32..2000, any::<bool>(), outcomes).prop_map(|(id, region, year, male, mut o)| {
        o[0].schooling = o[0].schooling.or(Some(12.0));
        LineageRecord {
            child_id: u64::from(id),
            region_id: RegionId(region),
            child_birth_year: year,
            child_gender: if male { Gender::M } else { Gender::F },
            outcomes: o,
        }
    })
}

fn round_trip(records: &[LineageRecord]) -> Vec<LineageRecord> {
    let mut buf = Vec::new();
    write_lineage_csv(&mut buf, records).unwrap();
    ingest_lineage_reader(&buf[..], &IngestOptions::default())
        .unwrap()
        .records
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn write_then_ingest_is_identity(records in prop::collection::vec(record(), 0..25)) {
        prop_assert_eq!(round_trip(&records), records);
    }
}

#[test]
fn calibrated_population_round_trips() {
    let records = generate_population(&sweden_preset(&SwedenPreset {
        scale: 0.003,
        ..SwedenPreset::default()
    }))
    .unwrap();
    assert_eq!(round_trip(&records), records);
}

fn csv_with(row: &str) -> String {
    format!("{}\n{row}\n", lineage_header().join(","))
}

fn blank_row(child_schooling: &str) -> String {
    let mut cells = vec!["1".to_string(), "101".into(), "1985".into(), "M".into()];
    cells.extend(std::iter::repeat_n(String::new(), 21));
    cells[4] = child_schooling.into();
    cells.join(",")
}

#[test]
fn invalid_row_reports_line_and_column() {
    let text = csv_with(&blank_row("twelve"));
    let err = ingest_lineage_reader(text.as_bytes(), &IngestOptions::default()).unwrap_err();
    match err {
        MobilabError::Validation { line, ref column, .. } => {
            assert_eq!(line, 2);
            assert_eq!(column, "child_schooling");
        }
        other => panic!("unexpected {other}"),
    }
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn skip_mode_keeps_valid_rows() {
    let text = format!(
        "{}\n{}\n{}\n",
        lineage_header().join(","),
        blank_row("12"),
        blank_row("x")
    );
    let opts = IngestOptions {
        mode: ErrorMode::SkipAndLog,
        ..IngestOptions::default()
    };
    let report = ingest_lineage_reader(text.as_bytes(), &opts).unwrap();
    assert_eq!(report.records.len(), 1);
    assert_eq!(report.errors.len(), 1);
    assert_eq!(report.errors[0].line, 3);
}

#[test]
fn categorical_mode_rejects_off_code_schooling() {
    let text = csv_with(&blank_row("11"));
    let opts = IngestOptions {
        categorical_schooling: true,
        ..IngestOptions::default()
    };
    assert!(ingest_lineage_reader(text.as_bytes(), &opts).is_err());
    assert!(ingest_lineage_reader(text.as_bytes(), &IngestOptions::default()).is_ok());
}

#[test]
fn wrong_header_is_rejected() {
    let err = ingest_lineage_reader("a,b,c\n1,2,3\n".as_bytes(), &IngestOptions::default()).unwrap_err();
    assert!(matches!(err, MobilabError::Validation { line: 1, .. }));
}
