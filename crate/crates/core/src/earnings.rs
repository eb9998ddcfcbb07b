//! Prime-age earnings prediction from a person-year panel.
//!
//! Log earnings are regressed on person fixed effects plus gender-by-education
//! quadratics in age and calendar year (centred at 40 and 2000). Every person
//! sits in exactly one gender-by-education cell, so the slopes of each cell
//! come from a within-person OLS on that cell's rows. Linear age and linear
//! year are collinear inside a person (their difference is the birth year),
//! so the later of the two is dropped and recorded; its effect is carried by
//! the age slope and the person effects, which leaves predictions at age 40
//! unchanged.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{MobilabError, Result};
use crate::linalg::Square;
use crate::moments::midranks;
use crate::record::{Gender, LineageRecord, Relative};
use crate::synthkit::{EarningsPanelRow, EduGroup, GroupProfile, ProfileTerm, AGE_CENTER};

/// `ln(1000)`: predictions are bottom-coded at 1,000 in levels.
pub const LOG_FLOOR: f64 = 6.907_755_278_982_137;

/// Ages kept for estimation.
pub const ESTIMATION_AGES: (i32, i32) = (25, 63);

const COLLINEAR_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GroupKey {
    pub gender: Gender,
    pub edu: EduGroup,
}

impl std::fmt::Display for GroupKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}-{}", self.gender.as_str(), self.edu.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupFit {
    /// Slopes on the centred terms; dropped terms are zero.
    pub coeffs: GroupProfile,
    pub se: GroupProfile,
    /// Row-weighted mean of the cell's raw person effects.
    pub intercept: f64,
    pub dropped: Vec<ProfileTerm>,
    pub n_rows: usize,
    pub n_persons: usize,
}

impl GroupFit {
    /// True when some term beyond the structurally collinear linear year
    /// could not be estimated.
    pub fn is_deficient(&self) -> bool {
        self.dropped.iter().any(|&t| t != ProfileTerm::Year)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitDiagnostics {
    pub r2: f64,
    pub n_rows: usize,
    pub n_persons: usize,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FeModel {
    /// Mean zero over estimation rows.
    pub person_effects: BTreeMap<u64, f64>,
    pub groups: BTreeMap<GroupKey, GroupFit>,
    pub diagnostics: FitDiagnostics,
    /// Observed calendar-year range of the estimation sample.
    pub year_range: (i32, i32),
}

fn usable(row: &EarningsPanelRow) -> bool {
    !row.below_floor && row.age >= ESTIMATION_AGES.0 && row.age <= ESTIMATION_AGES.1 && row.log_earnings.is_finite()
}

#[inline]
fn terms(age: f64, year: f64) -> [f64; 4] {
    ProfileTerm::ALL.map(|t| t.value(age, year))
}

fn profile_from(values: &[f64; 4]) -> GroupProfile {
    GroupProfile {
        age: values[0],
        age2: values[1],
        year: values[2],
        year2: values[3],
    }
}

struct PersonRows<'a> {
    id: u64,
    rows: Vec<&'a EarningsPanelRow>,
}

struct CellResult {
    key: GroupKey,
    fit: GroupFit,
    /// (person, raw effect, rows)
    effects: Vec<(u64, f64, usize)>,
    ssr: f64,
}

fn fit_cell(key: GroupKey, persons: &[PersonRows<'_>]) -> CellResult {
    let mut xtx = Square::zeros(4);
    let mut xty = [0.0; 4];
    let mut n_rows = 0;
    for p in persons {
        let m = p.rows.len() as f64;
        let mut xbar = [0.0; 4];
        let mut ybar = 0.0;
        for r in &p.rows {
            let x = terms(f64::from(r.age), f64::from(r.year));
            for j in 0..4 {
                xbar[j] += x[j] / m;
            }
            ybar += r.log_earnings / m;
        }
        for r in &p.rows {
            let x = terms(f64::from(r.age), f64::from(r.year));
            let xd: Vec<f64> = (0..4).map(|j| x[j] - xbar[j]).collect();
            xtx.add_outer(&xd, 1.0);
            for j in 0..4 {
                xty[j] += xd[j] * (r.log_earnings - ybar);
            }
        }
        n_rows += p.rows.len();
    }

    let kept = xtx.independent_columns(COLLINEAR_TOL);
    let mut beta = [0.0; 4];
    let mut se = [0.0; 4];
    let mut inverse = None;
    if !kept.is_empty() {
        let sub = xtx.submatrix(&kept);
        let rhs: Vec<f64> = kept.iter().map(|&j| xty[j]).collect();
        if let (Some(b), Some(inv)) = (sub.solve_spd(&rhs), sub.inverse_spd()) {
            for (a, &j) in kept.iter().enumerate() {
                beta[j] = b[a];
            }
            inverse = Some(inv);
        }
    }
    let kept = if inverse.is_some() { kept } else { Vec::new() };
    let dropped: Vec<ProfileTerm> = (0..4)
        .filter(|j| !kept.contains(j))
        .map(|j| ProfileTerm::ALL[j])
        .collect();

    let mut effects = Vec::with_capacity(persons.len());
    let mut ssr = 0.0;
    for p in persons {
        let resid: Vec<f64> = p
            .rows
            .iter()
            .map(|r| {
                let x = terms(f64::from(r.age), f64::from(r.year));
                r.log_earnings - (0..4).map(|j| beta[j] * x[j]).sum::<f64>()
            })
            .collect();
        let alpha = resid.iter().sum::<f64>() / resid.len() as f64;
        ssr += resid.iter().map(|e| (e - alpha) * (e - alpha)).sum::<f64>();
        effects.push((p.id, alpha, p.rows.len()));
    }

    if let Some(inv) = inverse {
        let dof = n_rows as f64 - persons.len() as f64 - kept.len() as f64;
        if dof > 0.0 {
            let sigma2 = ssr / dof;
            for (a, &j) in kept.iter().enumerate() {
                se[j] = (sigma2 * inv[(a, a)]).max(0.0).sqrt();
            }
        }
    }

    let weight: usize = effects.iter().map(|e| e.2).sum();
    let intercept = effects.iter().map(|&(_, a, m)| a * m as f64).sum::<f64>() / weight as f64;
    CellResult {
        key,
        fit: GroupFit {
            coeffs: profile_from(&beta),
            se: profile_from(&se),
            intercept,
            dropped,
            n_rows,
            n_persons: persons.len(),
        },
        effects,
        ssr,
    }
}

/// Fits the fixed-effects earnings model. Rows flagged below the earnings
/// floor and rows outside ages 25 to 63 are ignored.
pub fn fit_fe_model(panel: &[EarningsPanelRow]) -> Result<FeModel> {
    let mut by_person: BTreeMap<u64, Vec<&EarningsPanelRow>> = BTreeMap::new();
    for r in panel.iter().filter(|r| usable(r)) {
        by_person.entry(r.person_id).or_default().push(r);
    }
    if by_person.is_empty() {
        return Err(MobilabError::insufficient("usable panel rows", 1, 0));
    }
    let mut cells: BTreeMap<GroupKey, Vec<PersonRows<'_>>> = BTreeMap::new();
    for (id, rows) in by_person {
        let key = GroupKey {
            gender: rows[0].gender,
            edu: rows[0].edu_group,
        };
        cells.entry(key).or_default().push(PersonRows { id, rows });
    }

    let results: Vec<CellResult> = cells.into_par_iter().map(|(k, p)| fit_cell(k, &p)).collect();

    let mut notes = Vec::new();
    let mut person_effects = BTreeMap::new();
    let mut groups = BTreeMap::new();
    let mut ssr = 0.0;
    let (mut n_rows, mut n_persons) = (0, 0);
    for cell in results {
        ssr += cell.ssr;
        n_rows += cell.fit.n_rows;
        n_persons += cell.fit.n_persons;
        if !cell.fit.dropped.is_empty() {
            let names: Vec<&str> = cell.fit.dropped.iter().map(|t| t.name()).collect();
            notes.push(format!(
                "cell {}: dropped collinear terms [{}]",
                cell.key,
                names.join(", ")
            ));
        }
        for (id, alpha, _) in cell.effects {
            person_effects.insert(id, alpha - cell.fit.intercept);
        }
        groups.insert(cell.key, cell.fit);
    }

    let rows: Vec<&EarningsPanelRow> = panel.iter().filter(|r| usable(r)).collect();
    let ybar = rows.iter().map(|r| r.log_earnings).sum::<f64>() / rows.len() as f64;
    let sst: f64 = rows.iter().map(|r| (r.log_earnings - ybar).powi(2)).sum();
    let r2 = if sst > 0.0 { 1.0 - ssr / sst } else { 0.0 };
    let year_range = rows
        .iter()
        .fold((i32::MAX, i32::MIN), |(lo, hi), r| (lo.min(r.year), hi.max(r.year)));

    Ok(FeModel {
        person_effects,
        groups,
        diagnostics: FitDiagnostics {
            r2,
            n_rows,
            n_persons,
            notes,
        },
        year_range,
    })
}

/// Calendar year at which the year polynomial is evaluated for the age-40
/// prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "rule", content = "year")]
pub enum EvalRule {
    /// Birth year + 40, clamped to the panel's observed years.
    #[default]
    ClampedBirthPlus40,
    BirthPlus40,
    Fixed(i32),
}

impl EvalRule {
    pub fn year(self, birth_year: i32, observed: (i32, i32)) -> i32 {
        match self {
            EvalRule::ClampedBirthPlus40 => (birth_year + 40).clamp(observed.0, observed.1),
            EvalRule::BirthPlus40 => birth_year + 40,
            EvalRule::Fixed(y) => y,
        }
    }
}

/// Who a prediction is for.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PersonInfo {
    pub person_id: u64,
    pub gender: Gender,
    pub edu_group: EduGroup,
    pub birth_year: i32,
    pub relative: Relative,
    pub child_birth_year: i32,
}

/// Every relative of every record, with the education group implied by
/// their schooling.
pub fn persons_from_records(records: &[LineageRecord]) -> Vec<PersonInfo> {
    records
        .iter()
        .flat_map(|rec| {
            Relative::ALL.into_iter().map(move |who| PersonInfo {
                person_id: rec.person_id(who),
                gender: who.gender().unwrap_or(rec.child_gender),
                edu_group: EduGroup::from_schooling(rec.of(who).schooling),
                birth_year: rec.birth_year(who),
                relative: who,
                child_birth_year: rec.child_birth_year,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictedEarnings {
    pub person_id: u64,
    pub relative: Relative,
    pub child_birth_year: i32,
    pub log_earnings_at_40: f64,
    pub gender_demeaned: bool,
    pub rank: Option<f64>,
}

impl PredictedEarnings {
    pub fn cell_key(&self) -> String {
        format!("{}:{}", self.relative.key(), self.child_birth_year)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub predictions: Vec<PredictedEarnings>,
    pub warnings: Vec<String>,
}

/// Predicts log earnings at age 40 for every person with an estimated
/// effect, bottom-coded at [`LOG_FLOOR`]. Persons whose cell was never
/// estimated use the missing-education cell of their gender. With
/// `demean_children`, child predictions are demeaned by gender after bottom
/// coding.
pub fn predict_at_40(model: &FeModel, persons: &[PersonInfo], rule: EvalRule, demean_children: bool) -> Predictions {
    let mut warnings = Vec::new();
    let mut predictions = Vec::with_capacity(persons.len());
    let mut skipped = 0usize;
    for p in persons {
        let Some(&effect) = model.person_effects.get(&p.person_id) else {
            skipped += 1;
            continue;
        };
        let key = GroupKey {
            gender: p.gender,
            edu: p.edu_group,
        };
        let group = match model.groups.get(&key) {
            Some(g) => g,
            None => {
                let fallback = GroupKey {
                    gender: p.gender,
                    edu: EduGroup::MISSING,
                };
                match model.groups.get(&fallback) {
                    Some(g) => {
                        warnings.push(format!("person {}: cell {key} unknown, using {fallback}", p.person_id));
                        g
                    }
                    None => {
                        warnings.push(format!("person {}: no cell for {key} or {fallback}", p.person_id));
                        continue;
                    }
                }
            }
        };
        let year = rule.year(p.birth_year, model.year_range);
        let value = effect + group.intercept + group.coeffs.eval(AGE_CENTER, f64::from(year));
        predictions.push(PredictedEarnings {
            person_id: p.person_id,
            relative: p.relative,
            child_birth_year: p.child_birth_year,
            log_earnings_at_40: value.max(LOG_FLOOR),
            gender_demeaned: false,
            rank: None,
        });
    }
    if skipped > 0 {
        warnings.push(format!("{skipped} persons without panel rows were not predicted"));
    }
    if demean_children {
        let gender_of: BTreeMap<u64, Gender> = persons.iter().map(|p| (p.person_id, p.gender)).collect();
        for g in [Gender::M, Gender::F] {
            let idx: Vec<usize> = predictions
                .iter()
                .enumerate()
                .filter(|(_, p)| p.relative == Relative::Child && gender_of.get(&p.person_id) == Some(&g))
                .map(|(i, _)| i)
                .collect();
            if idx.is_empty() {
                continue;
            }
            let m = idx.iter().map(|&i| predictions[i].log_earnings_at_40).sum::<f64>() / idx.len() as f64;
            for i in idx {
                predictions[i].log_earnings_at_40 -= m;
                predictions[i].gender_demeaned = true;
            }
        }
    }
    Predictions { predictions, warnings }
}

/// Midrank percentile ranks within each relationship type by child birth
/// year cell.
pub fn rank_within_cells(predictions: &mut [PredictedEarnings]) {
    let mut cells: BTreeMap<(Relative, i32), Vec<usize>> = BTreeMap::new();
    for (i, p) in predictions.iter().enumerate() {
        cells.entry((p.relative, p.child_birth_year)).or_default().push(i);
    }
    for idx in cells.values() {
        let values: Vec<f64> = idx.iter().map(|&i| predictions[i].log_earnings_at_40).collect();
        for (&i, r) in idx.iter().zip(midranks(&values)) {
            predictions[i].rank = Some(r);
        }
    }
}

/// Writes predictions and ranks into the matching lineage records; relatives
/// without a prediction lose their earnings outcomes.
pub fn attach_predictions(records: &mut [LineageRecord], predictions: &[PredictedEarnings]) {
    let by_id: BTreeMap<u64, &PredictedEarnings> = predictions.iter().map(|p| (p.person_id, p)).collect();
    for rec in records.iter_mut() {
        for who in Relative::ALL {
            let id = rec.person_id(who);
            let slot = rec.of_mut(who);
            match by_id.get(&id) {
                Some(p) => {
                    slot.log_earnings = Some(p.log_earnings_at_40);
                    slot.earnings_rank = p.rank;
                }
                None => {
                    slot.log_earnings = None;
                    slot.earnings_rank = None;
                }
            }
        }
    }
}

/// Mean log earnings per person over the `k` usable years closest to age
/// 40 (earlier years first on ties).
pub fn short_run_mean(panel: &[EarningsPanelRow], k: usize) -> BTreeMap<u64, f64> {
    let mut by_person: BTreeMap<u64, Vec<&EarningsPanelRow>> = BTreeMap::new();
    for r in panel.iter().filter(|r| usable(r)) {
        by_person.entry(r.person_id).or_default().push(r);
    }
    by_person
        .into_iter()
        .filter_map(|(id, mut rows)| {
            rows.sort_by_key(|r| ((r.age - 40).abs(), r.age));
            let take = &rows[..k.min(rows.len())];
            (!take.is_empty()).then(|| (id, take.iter().map(|r| r.log_earnings).sum::<f64>() / take.len() as f64))
        })
        .collect()
}
