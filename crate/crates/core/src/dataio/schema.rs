use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_PARTS: usize = 7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Response {
    A,
    B,
    C,
    D,
}

impl Response {
    pub const ALL: [Response; 4] = [Response::A, Response::B, Response::C, Response::D];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Response::ALL.get(i).copied().ok_or(Error::Index {
            what: "response option".into(),
            index: i,
            limit: 4,
        })
    }
}

/// One student-exercise event. Time features are seconds when read from
/// disk and `[0, 1]` after [`cap_and_normalize`](super::cap_and_normalize).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Interaction {
    pub eid: usize,
    pub part: usize,
    pub response: Response,
    pub correctness: bool,
    pub elapsed_time: f64,
    pub timeliness: bool,
    pub exp_time: f64,
    pub inactive_time: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InteractionSequence {
    pub student_id: u64,
    pub interactions: Vec<Interaction>,
}

impl InteractionSequence {
    pub fn len(&self) -> usize {
        self.interactions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.interactions.is_empty()
    }

    /// Keeps only the most recent `max_len` interactions.
    pub fn truncate_front(&mut self, max_len: usize) {
        let n = self.interactions.len();
        if n > max_len {
            self.interactions.drain(..n - max_len);
        }
    }
}

/// A sequence with the test score that followed it.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredSequence {
    pub sequence: InteractionSequence,
    pub score: u32,
}

pub const SCORE_MIN: f64 = 10.0;
pub const SCORE_MAX: f64 = 990.0;

impl ScoredSequence {
    /// Score mapped to `[0, 1]`.
    pub fn scaled_score(&self) -> f64 {
        scale_score(self.score as f64)
    }
}

pub fn scale_score(score: f64) -> f64 {
    (score - SCORE_MIN) / (SCORE_MAX - SCORE_MIN)
}

pub fn unscale_score(scaled: f64) -> f64 {
    scaled * (SCORE_MAX - SCORE_MIN) + SCORE_MIN
}

/// Per-exercise metadata kept next to a corpus so that correctness and
/// timeliness stay recomputable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExerciseMeta {
    pub eid: usize,
    pub part: usize,
    pub answer: Response,
    pub time_limit: f64,
    pub difficulty: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Feature {
    Eid,
    Part,
    Response,
    Correctness,
    Timeliness,
    ElapsedTime,
    ExpTime,
    InactiveTime,
}

impl Feature {
    pub const ALL: [Feature; 8] = [
        Feature::Eid,
        Feature::Part,
        Feature::Response,
        Feature::Correctness,
        Feature::Timeliness,
        Feature::ElapsedTime,
        Feature::ExpTime,
        Feature::InactiveTime,
    ];

    pub const CATEGORICAL: [Feature; 5] = [
        Feature::Eid,
        Feature::Part,
        Feature::Response,
        Feature::Correctness,
        Feature::Timeliness,
    ];

    pub const CONTINUOUS: [Feature; 3] =
        [Feature::ElapsedTime, Feature::ExpTime, Feature::InactiveTime];

    pub fn is_categorical(self) -> bool {
        (self as usize) < 5
    }

    pub fn name(self) -> &'static str {
        match self {
            Feature::Eid => "eid",
            Feature::Part => "part",
            Feature::Response => "response",
            Feature::Correctness => "correctness",
            Feature::Timeliness => "timeliness",
            Feature::ElapsedTime => "elapsed_time",
            Feature::ExpTime => "exp_time",
            Feature::InactiveTime => "inactive_time",
        }
    }

    /// The coarse/fine partner feature carrying overlapping information.
    pub fn overlapping(self) -> Option<Feature> {
        match self {
            Feature::Response => Some(Feature::Correctness),
            Feature::Correctness => Some(Feature::Response),
            Feature::ElapsedTime => Some(Feature::Timeliness),
            Feature::Timeliness => Some(Feature::ElapsedTime),
            _ => None,
        }
    }
}

impl fmt::Display for Feature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Feature {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Feature::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown feature `{s}`")))
    }
}

/// Small bitset over [`Feature`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct FeatureSet(u8);

impl FeatureSet {
    pub fn empty() -> Self {
        FeatureSet(0)
    }

    pub fn all() -> Self {
        FeatureSet(0xff)
    }

    pub fn of(features: &[Feature]) -> Self {
        let mut s = FeatureSet::empty();
        for &f in features {
            s.insert(f);
        }
        s
    }

    pub fn insert(&mut self, f: Feature) {
        self.0 |= 1 << f as u8;
    }

    pub fn remove(&mut self, f: Feature) {
        self.0 &= !(1 << f as u8);
    }

    pub fn contains(self, f: Feature) -> bool {
        self.0 & (1 << f as u8) != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn iter(self) -> impl Iterator<Item = Feature> {
        Feature::ALL.into_iter().filter(move |&f| self.contains(f))
    }

    /// Input features when `masked` is the masked set: every feature except
    /// the overlapping partners of masked ones.
    pub fn inputs_for(masked: FeatureSet) -> FeatureSet {
        let mut s = FeatureSet::all();
        for f in masked.iter() {
            if let Some(p) = f.overlapping() {
                if !masked.contains(p) {
                    s.remove(p);
                }
            }
        }
        s
    }
}

impl Serialize for FeatureSet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_seq(self.iter())
    }
}

impl<'de> Deserialize<'de> for FeatureSet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v: Vec<Feature> = Vec::deserialize(d)?;
        Ok(FeatureSet::of(&v))
    }
}

/// A single feature value: a category index or a real number.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FeatureValue {
    Cat(usize),
    Cont(f64),
}

impl Interaction {
    pub fn feature(&self, f: Feature) -> FeatureValue {
        match f {
            Feature::Eid => FeatureValue::Cat(self.eid),
            Feature::Part => FeatureValue::Cat(self.part),
            Feature::Response => FeatureValue::Cat(self.response.index()),
            Feature::Correctness => FeatureValue::Cat(self.correctness as usize),
            Feature::Timeliness => FeatureValue::Cat(self.timeliness as usize),
            Feature::ElapsedTime => FeatureValue::Cont(self.elapsed_time),
            Feature::ExpTime => FeatureValue::Cont(self.exp_time),
            Feature::InactiveTime => FeatureValue::Cont(self.inactive_time),
        }
    }

    pub fn set_feature(&mut self, f: Feature, v: FeatureValue) -> Result<()> {
        match (f, v) {
            (Feature::Eid, FeatureValue::Cat(i)) => self.eid = i,
            (Feature::Part, FeatureValue::Cat(i)) => self.part = i,
            (Feature::Response, FeatureValue::Cat(i)) => self.response = Response::from_index(i)?,
            (Feature::Correctness, FeatureValue::Cat(i)) => self.correctness = i != 0,
            (Feature::Timeliness, FeatureValue::Cat(i)) => self.timeliness = i != 0,
            (Feature::ElapsedTime, FeatureValue::Cont(x)) => self.elapsed_time = x,
            (Feature::ExpTime, FeatureValue::Cont(x)) => self.exp_time = x,
            (Feature::InactiveTime, FeatureValue::Cont(x)) => self.inactive_time = x,
            (f, v) => {
                return Err(Error::invalid(format!("value {v:?} does not fit feature {f}")))
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exclusion_rule_drops_partners() {
        let inputs = FeatureSet::inputs_for(FeatureSet::of(&[Feature::Response]));
        assert!(!inputs.contains(Feature::Correctness));
        assert!(inputs.contains(Feature::Response));
        assert_eq!(inputs.len(), 7);

        let inputs = FeatureSet::inputs_for(FeatureSet::of(&[Feature::Timeliness]));
        assert!(!inputs.contains(Feature::ElapsedTime));

        let both = FeatureSet::of(&[Feature::Response, Feature::Correctness]);
        assert_eq!(FeatureSet::inputs_for(both).len(), 8);
    }

    #[test]
    fn feature_names_round_trip() {
        for f in Feature::ALL {
            assert_eq!(f.name().parse::<Feature>().unwrap(), f);
        }
        assert!("score".parse::<Feature>().is_err());
    }
}
