//! Lineage records: one child linked to its parents and grandparents.

use serde::{Deserialize, Serialize};

/// Opaque region identifier. Four-digit municipality-style codes map onto
/// aggregate regions through their two leading digits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RegionId(pub u32);

impl RegionId {
    /// Aggregate region used for clustered standard errors.
    pub fn aggregate(self) -> u32 {
        self.0 / 100
    }
}

impl std::fmt::Display for RegionId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Gender {
    M,
    F,
}

impl Gender {
    pub fn as_str(self) -> &'static str {
        match self {
            Gender::M => "M",
            Gender::F => "F",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "M" | "m" => Some(Gender::M),
            "F" | "f" => Some(Gender::F),
            _ => None,
        }
    }
}

/// Generation index: 0 = grandparents, 1 = parents, 2 = child.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generation {
    Grandparent = 0,
    Parent = 1,
    Child = 2,
}

impl Generation {
    pub const ALL: [Generation; 3] = [Generation::Grandparent, Generation::Parent, Generation::Child];

    #[inline]
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn members(self) -> &'static [Relative] {
        match self {
            Generation::Child => &[Relative::Child],
            Generation::Parent => &[Relative::Father, Relative::Mother],
            Generation::Grandparent => &[
                Relative::PaternalGrandfather,
                Relative::PaternalGrandmother,
                Relative::MaternalGrandfather,
                Relative::MaternalGrandmother,
            ],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relative {
    Child = 0,
    Father = 1,
    Mother = 2,
    PaternalGrandfather = 3,
    PaternalGrandmother = 4,
    MaternalGrandfather = 5,
    MaternalGrandmother = 6,
}

impl Relative {
    pub const ALL: [Relative; 7] = [
        Relative::Child,
        Relative::Father,
        Relative::Mother,
        Relative::PaternalGrandfather,
        Relative::PaternalGrandmother,
        Relative::MaternalGrandfather,
        Relative::MaternalGrandmother,
    ];

    #[inline]
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn generation(self) -> Generation {
        match self {
            Relative::Child => Generation::Child,
            Relative::Father | Relative::Mother => Generation::Parent,
            _ => Generation::Grandparent,
        }
    }

    /// Fixed gender of every non-child relative.
    pub fn gender(self) -> Option<Gender> {
        match self {
            Relative::Child => None,
            Relative::Father | Relative::PaternalGrandfather | Relative::MaternalGrandfather => Some(Gender::M),
            _ => Some(Gender::F),
        }
    }

    /// Column prefix used in the lineage CSV.
    pub fn key(self) -> &'static str {
        match self {
            Relative::Child => "child",
            Relative::Father => "father",
            Relative::Mother => "mother",
            Relative::PaternalGrandfather => "pat_grandfather",
            Relative::PaternalGrandmother => "pat_grandmother",
            Relative::MaternalGrandfather => "mat_grandfather",
            Relative::MaternalGrandmother => "mat_grandmother",
        }
    }

    pub fn from_key(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.key() == s)
    }

    /// Mean age at the child's birth.
    pub fn age_gap(self) -> i32 {
        match self {
            Relative::Child => 0,
            Relative::Father => 31,
            Relative::Mother => 28,
            Relative::PaternalGrandfather | Relative::MaternalGrandfather => 62,
            Relative::PaternalGrandmother | Relative::MaternalGrandmother => 59,
        }
    }
}

/// Which measured outcome of a person.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeKind {
    Schooling,
    LogEarnings,
    EarningsRank,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Outcomes {
    pub schooling: Option<f64>,
    pub log_earnings: Option<f64>,
    pub earnings_rank: Option<f64>,
}

impl Outcomes {
    #[inline]
    pub fn get(&self, kind: OutcomeKind) -> Option<f64> {
        match kind {
            OutcomeKind::Schooling => self.schooling,
            OutcomeKind::LogEarnings => self.log_earnings,
            OutcomeKind::EarningsRank => self.earnings_rank,
        }
    }

    #[inline]
    pub fn slot(&mut self, kind: OutcomeKind) -> &mut Option<f64> {
        match kind {
            OutcomeKind::Schooling => &mut self.schooling,
            OutcomeKind::LogEarnings => &mut self.log_earnings,
            OutcomeKind::EarningsRank => &mut self.earnings_rank,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineageRecord {
    pub child_id: u64,
    pub region_id: RegionId,
    pub child_birth_year: i32,
    pub child_gender: Gender,
    /// Indexed by [`Relative::index`].
    pub outcomes: [Outcomes; 7],
}

impl LineageRecord {
    #[inline]
    pub fn outcome(&self, who: Relative, kind: OutcomeKind) -> Option<f64> {
        self.outcomes[who.index()].get(kind)
    }

    #[inline]
    pub fn of(&self, who: Relative) -> &Outcomes {
        &self.outcomes[who.index()]
    }

    #[inline]
    pub fn of_mut(&mut self, who: Relative) -> &mut Outcomes {
        &mut self.outcomes[who.index()]
    }

    /// Mean over the observed members of a generation and the number of
    /// contributors, or `None` when nobody in that generation is observed.
    pub fn generation_average(&self, generation: Generation, kind: OutcomeKind) -> Option<(f64, usize)> {
        let mut sum = 0.0;
        let mut count = 0;
        for &r in generation.members() {
            if let Some(v) = self.outcome(r, kind) {
                sum += v;
                count += 1;
            }
        }
        (count > 0).then(|| (sum / count as f64, count))
    }

    /// Panel person identifier of a relative: `child_id * 8 + relative`.
    pub fn person_id(&self, who: Relative) -> u64 {
        self.child_id * 8 + who.index() as u64
    }

    pub fn birth_year(&self, who: Relative) -> i32 {
        self.child_birth_year - who.age_gap()
    }
}

/// Splits a panel person identifier into (child_id, relative).
pub fn split_person_id(person_id: u64) -> Option<(u64, Relative)> {
    Relative::from_index((person_id % 8) as usize).map(|r| (person_id / 8, r))
}
