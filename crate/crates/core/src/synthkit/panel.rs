use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::education::SCHOOLING_CODES;
use crate::error::{MobilabError, Result};
use crate::moments::median;
use crate::record::{Gender, LineageRecord, RegionId, Relative};

/// One of the seven attainment levels (0..=6) or 7 for missing education.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EduGroup(pub u8);

impl EduGroup {
    pub const MISSING: EduGroup = EduGroup(7);

    /// Nearest schooling code, or the missing group.
    pub fn from_schooling(years: Option<f64>) -> Self {
        match years {
            None => Self::MISSING,
            Some(y) => {
                let (idx, _) = SCHOOLING_CODES
                    .iter()
                    .enumerate()
                    .map(|(i, &c)| (i, (c - y).abs()))
                    .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best });
                EduGroup(idx as u8)
            }
        }
    }

    pub fn is_valid(self) -> bool {
        self.0 <= 7
    }
}

/// Reference point of the centred age and year polynomials.
pub const AGE_CENTER: f64 = 40.0;
pub const YEAR_CENTER: f64 = 2000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ProfileTerm {
    Age,
    Age2,
    Year,
    Year2,
}

impl ProfileTerm {
    pub const ALL: [ProfileTerm; 4] = [
        ProfileTerm::Age,
        ProfileTerm::Age2,
        ProfileTerm::Year,
        ProfileTerm::Year2,
    ];

    /// Regressor value for a person-year, centred at age 40 and year 2000.
    #[inline]
    pub fn value(self, age: f64, year: f64) -> f64 {
        let a = age - AGE_CENTER;
        let t = year - YEAR_CENTER;
        match self {
            ProfileTerm::Age => a,
            ProfileTerm::Age2 => a * a,
            ProfileTerm::Year => t,
            ProfileTerm::Year2 => t * t,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ProfileTerm::Age => "age",
            ProfileTerm::Age2 => "age2",
            ProfileTerm::Year => "year",
            ProfileTerm::Year2 => "year2",
        }
    }
}

/// Quadratic age and year profile on centred terms.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GroupProfile {
    pub age: f64,
    pub age2: f64,
    pub year: f64,
    pub year2: f64,
}

impl GroupProfile {
    pub fn coeff(&self, term: ProfileTerm) -> f64 {
        match term {
            ProfileTerm::Age => self.age,
            ProfileTerm::Age2 => self.age2,
            ProfileTerm::Year => self.year,
            ProfileTerm::Year2 => self.year2,
        }
    }

    pub fn eval(&self, age: f64, year: f64) -> f64 {
        ProfileTerm::ALL
            .iter()
            .map(|&t| self.coeff(t) * t.value(age, year))
            .sum()
    }
}

/// Group profiles as a base profile with an education gradient in the age
/// slope and a shift for women.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileTable {
    pub base: GroupProfile,
    pub age_slope_per_edu: f64,
    pub female_age_shift: f64,
}

impl Default for ProfileTable {
    fn default() -> Self {
        Self {
            base: GroupProfile {
                age: 0.01,
                age2: -0.0008,
                year: 0.01,
                year2: -0.0001,
            },
            age_slope_per_edu: 0.004,
            female_age_shift: -0.002,
        }
    }
}

impl ProfileTable {
    pub fn flat() -> Self {
        Self {
            base: GroupProfile::default(),
            age_slope_per_edu: 0.0,
            female_age_shift: 0.0,
        }
    }

    pub fn profile(&self, gender: Gender, edu: EduGroup) -> GroupProfile {
        let mut p = self.base;
        if edu != EduGroup::MISSING {
            p.age += self.age_slope_per_edu * f64::from(edu.0);
        }
        if gender == Gender::F {
            p.age += self.female_age_shift;
        }
        p
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelConfig {
    pub seed: u64,
    /// Inclusive calendar-year window.
    pub years: (i32, i32),
    /// Inclusive working-age window.
    pub ages: (i32, i32),
    pub transitory_sd: f64,
    pub profiles: ProfileTable,
    /// Rows below this share of the male median earnings in their year are
    /// flagged.
    pub floor_share: f64,
}

impl Default for PanelConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            years: (1968, 2020),
            ages: (25, 63),
            transitory_sd: 0.3,
            profiles: ProfileTable::default(),
            floor_share: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EarningsPanelRow {
    pub person_id: u64,
    pub region_id: RegionId,
    pub gender: Gender,
    pub edu_group: EduGroup,
    pub birth_year: i32,
    pub year: i32,
    pub age: i32,
    pub log_earnings: f64,
    pub below_floor: bool,
}

/// Emits person-year log earnings for every relative with observed log
/// earnings. The person effect is set so the person's noiseless value at
/// age 40 (in calendar year birth year + 40) equals their lineage-record
/// log earnings.
pub fn generate_earnings_panel(records: &[LineageRecord], cfg: &PanelConfig) -> Result<Vec<EarningsPanelRow>> {
    if cfg.years.0 > cfg.years.1 {
        return Err(MobilabError::Config("panel year window is empty".into()));
    }
    if cfg.ages.0 > cfg.ages.1 {
        return Err(MobilabError::Config("panel age window is empty".into()));
    }
    if !(cfg.transitory_sd >= 0.0) || !(cfg.floor_share > 0.0) {
        return Err(MobilabError::Config(
            "transitory sd must be >= 0 and floor share > 0".into(),
        ));
    }
    let mut rows = Vec::new();
    for rec in records {
        for who in Relative::ALL {
            let Some(target) = rec.of(who).log_earnings else {
                continue;
            };
            let gender = who.gender().unwrap_or(rec.child_gender);
            let edu_group = EduGroup::from_schooling(rec.of(who).schooling);
            let birth_year = rec.birth_year(who);
            let profile = cfg.profiles.profile(gender, edu_group);
            let effect = target - profile.eval(AGE_CENTER, f64::from(birth_year) + AGE_CENTER);
            let person_id = rec.person_id(who);
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(person_id);
            for year in cfg.years.0..=cfg.years.1 {
                let age = year - birth_year;
                if age < cfg.ages.0 || age > cfg.ages.1 {
                    continue;
                }
                let noise: f64 = StandardNormal.sample(&mut rng);
                rows.push(EarningsPanelRow {
                    person_id,
                    region_id: rec.region_id,
                    gender,
                    edu_group,
                    birth_year,
                    year,
                    age,
                    log_earnings: effect + profile.eval(f64::from(age), f64::from(year)) + cfg.transitory_sd * noise,
                    below_floor: false,
                });
            }
        }
    }
    flag_below_floor(&mut rows, cfg.floor_share);
    Ok(rows)
}

/// Marks rows whose earnings fall below `share` times the male median
/// earnings (in levels) of their calendar year.
pub fn flag_below_floor(rows: &mut [EarningsPanelRow], share: f64) {
    let mut male: BTreeMap<i32, Vec<f64>> = BTreeMap::new();
    for r in rows.iter() {
        if r.gender == Gender::M {
            male.entry(r.year).or_default().push(r.log_earnings.exp());
        }
    }
    let floors: BTreeMap<i32, f64> = male
        .into_iter()
        .filter_map(|(y, v)| median(&v).map(|m| (y, (share * m).ln())))
        .collect();
    for r in rows.iter_mut() {
        r.below_floor = floors.get(&r.year).is_some_and(|&f| r.log_earnings < f);
    }
}
