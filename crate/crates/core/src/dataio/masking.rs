use rand::seq::index::sample;
use rand::Rng;

use super::schema::{Feature, FeatureSet, FeatureValue, Interaction, InteractionSequence};
use crate::error::{Error, Result};

/// Number of masked positions: `max(1, min(T - 1, floor(ratio * T)))`.
pub fn mask_count(len: usize, ratio: f64) -> Result<usize> {
    if len < 2 {
        return Err(Error::invalid(format!(
            "cannot mask a sequence of length {len}: need 0 < m < T"
        )));
    }
    if !(ratio > 0.0) || !ratio.is_finite() {
        return Err(Error::invalid(format!("mask ratio must be positive, got {ratio}")));
    }
    let m = (ratio * len as f64).floor() as usize;
    Ok(m.min(len - 1).max(1))
}

/// A sequence with a fixed feature subset hidden at a set of positions.
#[derive(Clone, Debug)]
pub struct MaskedSequence<'a> {
    pub base: &'a InteractionSequence,
    /// Sorted, distinct, each `< base.len()`.
    pub positions: Vec<usize>,
    pub features: FeatureSet,
}

impl<'a> MaskedSequence<'a> {
    pub fn is_masked(&self, t: usize) -> bool {
        self.positions.binary_search(&t).is_ok()
    }

    /// Per-position mask flags.
    pub fn mask_flags(&self) -> Vec<bool> {
        let mut flags = vec![false; self.base.len()];
        for &t in &self.positions {
            flags[t] = true;
        }
        flags
    }
}

/// Draws `mask_count(T, ratio)` positions uniformly without replacement.
pub fn make_masked_sequence<'a>(
    seq: &'a InteractionSequence,
    ratio: f64,
    features: FeatureSet,
    rng: &mut impl Rng,
) -> Result<MaskedSequence<'a>> {
    if features.is_empty() {
        return Err(Error::invalid("masked feature set is empty"));
    }
    let m = mask_count(seq.len(), ratio)?;
    let mut positions = sample(rng, seq.len(), m).into_vec();
    positions.sort_unstable();
    Ok(MaskedSequence {
        base: seq,
        positions,
        features,
    })
}

/// A masked sequence with generator outputs written into the masked slots.
#[derive(Clone, Debug)]
pub struct ReplacedSequence<'a> {
    pub base: &'a InteractionSequence,
    pub interactions: Vec<Interaction>,
    /// `true` where the replaced interaction equals the original.
    pub originality: Vec<bool>,
}

/// One generator output destined for `(position, feature)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Replacement {
    pub position: usize,
    pub feature: Feature,
    pub value: FeatureValue,
}

impl<'a> ReplacedSequence<'a> {
    pub fn build(masked: &MaskedSequence<'a>, replacements: &[Replacement]) -> Result<Self> {
        let mut interactions = masked.base.interactions.clone();
        for r in replacements {
            if !masked.is_masked(r.position) || !masked.features.contains(r.feature) {
                return Err(Error::invalid(format!(
                    "replacement of {} at {} is outside the mask",
                    r.feature, r.position
                )));
            }
            interactions[r.position].set_feature(r.feature, r.value)?;
        }
        let originality = originality_labels(&masked.base.interactions, &interactions);
        Ok(ReplacedSequence {
            base: masked.base,
            interactions,
            originality,
        })
    }

    pub fn replaced_count(&self) -> usize {
        self.originality.iter().filter(|&&o| !o).count()
    }
}

/// `1(I^R_t = I_t)` per position.
pub fn originality_labels(original: &[Interaction], replaced: &[Interaction]) -> Vec<bool> {
    original.iter().zip(replaced).map(|(a, b)| a == b).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::schema::Response;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn seq(len: usize) -> InteractionSequence {
        InteractionSequence {
            student_id: 1,
            interactions: (0..len)
                .map(|i| Interaction {
                    eid: i,
                    part: i % 7,
                    response: Response::ALL[i % 4],
                    correctness: i % 2 == 0,
                    elapsed_time: 0.1,
                    timeliness: true,
                    exp_time: 0.2,
                    inactive_time: 0.3,
                })
                .collect(),
        }
    }

    fn response_only() -> FeatureSet {
        FeatureSet::of(&[Feature::Response])
    }

    #[test]
    fn mask_counts() {
        assert_eq!(mask_count(10, 0.6).unwrap(), 6);
        assert_eq!(mask_count(2, 0.6).unwrap(), 1);
        assert_eq!(mask_count(3, 0.1).unwrap(), 1);
        assert_eq!(mask_count(4, 1.0).unwrap(), 3);
        assert!(mask_count(1, 0.6).is_err());
        assert!(mask_count(5, 0.0).is_err());
    }

    #[test]
    fn masking_is_seed_deterministic() {
        let s = seq(20);
        let a = make_masked_sequence(&s, 0.6, response_only(), &mut ChaCha8Rng::seed_from_u64(3));
        let b = make_masked_sequence(&s, 0.6, response_only(), &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a.unwrap().positions, b.unwrap().positions);
    }

    #[test]
    fn positions_are_uniform() {
        let s = seq(10);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut counts = [0usize; 10];
        let draws = 10_000;
        for _ in 0..draws {
            for t in make_masked_sequence(&s, 0.6, response_only(), &mut rng)
                .unwrap()
                .positions
            {
                counts[t] += 1;
            }
        }
        for c in counts {
            let f = c as f64 / draws as f64;
            assert!((f - 0.6).abs() <= 0.02, "frequency {f}");
        }
    }

    #[test]
    fn figure_two_replacement() {
        // Masked positions 1 and 2 held c and a; the generator produced b and a.
        let mut s = seq(4);
        s.interactions[1].response = Response::C;
        s.interactions[2].response = Response::A;
        let masked = MaskedSequence {
            base: &s,
            positions: vec![1, 2],
            features: response_only(),
        };
        let reps = [
            Replacement {
                position: 1,
                feature: Feature::Response,
                value: FeatureValue::Cat(Response::B.index()),
            },
            Replacement {
                position: 2,
                feature: Feature::Response,
                value: FeatureValue::Cat(Response::A.index()),
            },
        ];
        let r = ReplacedSequence::build(&masked, &reps).unwrap();
        assert_eq!(r.originality, vec![true, false, true, true]);
        assert_eq!(r.interactions[1].response, Response::B);
    }

    #[test]
    fn replacement_outside_mask_is_rejected() {
        let s = seq(4);
        let masked = MaskedSequence {
            base: &s,
            positions: vec![1],
            features: response_only(),
        };
        let rep = Replacement {
            position: 0,
            feature: Feature::Response,
            value: FeatureValue::Cat(0),
        };
        assert!(ReplacedSequence::build(&masked, &[rep]).is_err());
    }

    proptest! {
        #[test]
        fn masked_positions_are_valid(len in 2usize..80, ratio in 0.01f64..1.0, seed in 0u64..1000) {
            let s = seq(len);
            let m = make_masked_sequence(&s, ratio, response_only(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            prop_assert_eq!(m.positions.len(), mask_count(len, ratio).unwrap());
            prop_assert!(m.positions.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(m.positions.iter().all(|&t| t < len));
        }

        #[test]
        fn labels_match_recomputation(len in 2usize..40, seed in 0u64..1000) {
            let s = seq(len);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = make_masked_sequence(&s, 0.6, response_only(), &mut rng).unwrap();
            let reps: Vec<_> = m.positions.iter().map(|&t| Replacement {
                position: t,
                feature: Feature::Response,
                value: FeatureValue::Cat(rng.random_range(0..4)),
            }).collect();
            let r = ReplacedSequence::build(&m, &reps).unwrap();
            for t in 0..len {
                let same = s.interactions[t].response == r.interactions[t].response;
                prop_assert_eq!(r.originality[t], same);
                if !m.is_masked(t) {
                    prop_assert!(r.originality[t]);
                }
            }
        }
    }
}
