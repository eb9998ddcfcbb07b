use serde::{Deserialize, Serialize};

use crate::error::{MobilabError, Result};
use crate::moments::quantile_sorted;
use crate::record::{Generation, LineageRecord, OutcomeKind};

/// Years of schooling attached to the seven attainment levels.
pub const SCHOOLING_CODES: [f64; 7] = [7.0, 9.0, 10.5, 12.0, 14.0, 16.0, 20.0];

/// Cumulative population shares at which each generation's continuous
/// outcome is cut into the seven schooling codes (six interior cuts).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EducationThresholds {
    /// Indexed grandparent, parent, child.
    pub cumulative_shares: [[f64; 6]; 3],
}

impl Default for EducationThresholds {
    /// Shares chosen so generation means land near 9.3, 11.8 and 13.5 years.
    fn default() -> Self {
        Self {
            cumulative_shares: [
                [0.45, 0.70, 0.80, 0.88, 0.93, 0.98],
                [0.12, 0.32, 0.44, 0.69, 0.81, 0.95],
                [0.02, 0.10, 0.15, 0.50, 0.70, 0.92],
            ],
        }
    }
}

impl EducationThresholds {
    pub fn uniform(shares: [f64; 6]) -> Self {
        Self {
            cumulative_shares: [shares; 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for shares in &self.cumulative_shares {
            let inside = shares.iter().all(|&p| p > 0.0 && p < 1.0);
            let increasing = shares.windows(2).all(|w| w[0] < w[1]);
            if !inside || !increasing {
                return Err(MobilabError::Config(format!(
                    "education thresholds must be strictly increasing within (0, 1), got {shares:?}"
                )));
            }
        }
        Ok(())
    }
}

/// Index of the schooling code for `value` given ascending cut points:
/// the number of cuts strictly below the value.
#[inline]
fn code_index(value: f64, cuts: &[f64; 6]) -> usize {
    cuts.iter().filter(|&&c| value > c).count()
}

/// Replaces continuous schooling with schooling codes, cutting each
/// generation at the empirical quantiles of its pooled (national) values.
pub fn apply_categorical_education(records: &mut [LineageRecord], thresholds: &EducationThresholds) -> Result<()> {
    thresholds.validate()?;
    for generation in Generation::ALL {
        let mut values: Vec<f64> = records
            .iter()
            .flat_map(|r| {
                generation
                    .members()
                    .iter()
                    .filter_map(move |&who| r.outcome(who, OutcomeKind::Schooling))
            })
            .collect();
        if values.is_empty() {
            continue;
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(MobilabError::Spec("schooling values must be finite".into()));
        }
        values.sort_by(|a, b| a.total_cmp(b));
        let shares = &thresholds.cumulative_shares[generation.index()];
        let mut cuts = [0.0; 6];
        for (c, &p) in cuts.iter_mut().zip(shares) {
            *c = quantile_sorted(&values, p);
        }
        for r in records.iter_mut() {
            for &who in generation.members() {
                let slot = &mut r.of_mut(who).schooling;
                if let Some(v) = *slot {
                    *slot = Some(SCHOOLING_CODES[code_index(v, &cuts)]);
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::record::{Gender, Outcomes, RegionId, Relative};
    use crate::synthkit::{generate_population, GeneratorConfig, RegionParams};

    fn with_child_values(vals: &[f64]) -> Vec<LineageRecord> {
        vals.iter()
            .enumerate()
            .map(|(i, &v)| {
                let mut o = [Outcomes::default(); 7];
                o[0].schooling = Some(v);
                LineageRecord {
                    child_id: i as u64,
                    region_id: RegionId(1),
                    child_birth_year: 1985,
                    child_gender: Gender::M,
                    outcomes: o,
                }
            })
            .collect()
    }

    #[test]
    fn equal_latent_values_share_a_code() {
        let mut recs = with_child_values(&[3.3; 50]);
        apply_categorical_education(&mut recs, &EducationThresholds::default()).unwrap();
        let first = recs[0].outcome(Relative::Child, OutcomeKind::Schooling);
        assert!(recs
            .iter()
            .all(|r| r.outcome(Relative::Child, OutcomeKind::Schooling) == first));
    }

    #[test]
    fn rejects_non_increasing_thresholds() {
        let mut recs = with_child_values(&[1.0, 2.0]);
        let bad = EducationThresholds::uniform([0.1, 0.3, 0.3, 0.8, 0.9, 0.95]);
        assert!(matches!(
            apply_categorical_education(&mut recs, &bad),
            Err(MobilabError::Config(_))
        ));
        let bad = EducationThresholds::uniform([0.0, 0.3, 0.4, 0.8, 0.9, 0.95]);
        assert!(apply_categorical_education(&mut recs, &bad).is_err());
    }

    #[test]
    fn marginal_shares_follow_thresholds() {
        let n = 100_000;
        let cfg = GeneratorConfig::new(21, vec![RegionParams::standardized(1, 0.9, 0.4, n)]);
        let mut recs = generate_population(&cfg).unwrap();
        let shares = [0.1, 0.3, 0.55, 0.8, 0.93, 0.995];
        apply_categorical_education(&mut recs, &EducationThresholds::uniform(shares)).unwrap();
        // empirical CDF at each code boundary
        let codes: Vec<f64> = recs
            .iter()
            .map(|r| r.outcome(Relative::Child, OutcomeKind::Schooling).unwrap())
            .collect();
        for (k, &p) in shares.iter().enumerate() {
            let below = codes.iter().filter(|&&c| c <= SCHOOLING_CODES[k]).count() as f64 / n as f64;
            assert!((below - p).abs() <= 1.0 / (n as f64).sqrt(), "cut {k}: {below} vs {p}");
        }
    }

    #[test]
    fn coding_is_monotone_within_generation() {
        let n = 5_000;
        let cfg = GeneratorConfig::new(4, vec![RegionParams::standardized(1, 0.8, 0.5, n)]);
        let raw = generate_population(&cfg).unwrap();
        let mut coded = raw.clone();
        apply_categorical_education(&mut coded, &EducationThresholds::default()).unwrap();
        let mut pairs: Vec<(f64, f64)> = raw
            .iter()
            .zip(&coded)
            .flat_map(|(a, b)| {
                [Relative::Father, Relative::Mother].map(|w| {
                    (
                        a.outcome(w, OutcomeKind::Schooling).unwrap(),
                        b.outcome(w, OutcomeKind::Schooling).unwrap(),
                    )
                })
            })
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        assert!(pairs.windows(2).all(|w| w[0].1 <= w[1].1));
        assert!(pairs.iter().all(|p| SCHOOLING_CODES.contains(&p.1)));
    }
}
