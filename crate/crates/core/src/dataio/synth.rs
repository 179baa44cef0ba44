//! Item-response simulator producing pre-training and fine-tuning corpora.
//!
//! Each student has an ability `theta ~ N(0, 1)`; each exercise a difficulty
//! `b`, a part, a correct option and a time limit. The correct option is
//! chosen with probability `sigmoid(theta - b)`, otherwise one of the three
//! wrong options uniformly. Times are right-skewed. Scores are
//! `clamp(round5(500 + 200 theta + N(0, 25)), 10, 990)`.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, LogNormal, Normal};
use serde::{Deserialize, Serialize};

use super::schema::{
    ExerciseMeta, Interaction, InteractionSequence, Response, ScoredSequence, NUM_PARTS,
};
use crate::error::{Error, Result};
use crate::numcore::kernels::sigmoid;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_exercises: usize,
    pub num_pretrain_students: usize,
    pub num_finetune_students: usize,
    pub pretrain_min_len: usize,
    pub finetune_min_len: usize,
    /// Mean of the exponential extra length added on top of the minimum.
    pub mean_extra_len: f64,
    pub max_len: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_exercises: 200,
            num_pretrain_students: 1000,
            num_finetune_students: 400,
            pretrain_min_len: 15,
            finetune_min_len: 10,
            mean_extra_len: 25.0,
            max_len: 120,
        }
    }
}

/// A complete synthetic dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub exercises: Vec<ExerciseMeta>,
    pub pretrain: Vec<InteractionSequence>,
    pub finetune: Vec<ScoredSequence>,
}

fn round3(x: f64) -> f64 {
    (x * 1000.0).round() / 1000.0
}

pub fn round_to_5(x: f64) -> f64 {
    (x / 5.0).round() * 5.0
}

pub fn generate_exercises(n: usize, rng: &mut impl Rng) -> Vec<ExerciseMeta> {
    let normal = Normal::new(0.0, 1.0).expect("valid normal");
    (0..n)
        .map(|eid| ExerciseMeta {
            eid,
            part: rng.random_range(0..NUM_PARTS),
            answer: *Response::ALL.choose(rng).expect("non-empty"),
            time_limit: round3(rng.random_range(20.0..90.0)),
            difficulty: round3(normal.sample(rng)),
        })
        .collect()
}

/// Draws a response: the correct option with probability
/// `sigmoid(theta - difficulty)`, else a uniformly chosen wrong one.
pub fn simulate_response(theta: f64, ex: &ExerciseMeta, rng: &mut impl Rng) -> Response {
    if rng.random::<f64>() < sigmoid(theta - ex.difficulty) {
        ex.answer
    } else {
        let k = rng.random_range(0..3);
        Response::ALL
            .into_iter()
            .filter(|&r| r != ex.answer)
            .nth(k)
            .expect("three wrong options")
    }
}

/// One raw (seconds) interaction of a student with ability `theta`.
pub fn simulate_interaction(theta: f64, ex: &ExerciseMeta, rng: &mut impl Rng) -> Interaction {
    let response = simulate_response(theta, ex, rng);
    let correct = response == ex.answer;
    // Stronger students answer faster; about a third of answers run over.
    let pace = LogNormal::new(-0.15 - 0.15 * theta, 0.5).expect("valid lognormal");
    let elapsed = round3(ex.time_limit * pace.sample(rng));
    let exp_mean = if correct { 15.0 } else { 45.0 };
    let exp_time = round3(Exp::new(1.0 / exp_mean).expect("valid exp").sample(rng));
    let inactive = LogNormal::new(120f64.ln(), 1.8).expect("valid lognormal");
    Interaction {
        eid: ex.eid,
        part: ex.part,
        response,
        correctness: correct,
        elapsed_time: elapsed,
        timeliness: elapsed <= ex.time_limit,
        exp_time,
        inactive_time: round3(inactive.sample(rng)),
    }
}

fn draw_len(min: usize, cfg: &SynthConfig, rng: &mut impl Rng) -> usize {
    let extra = if cfg.mean_extra_len > 0.0 {
        Exp::new(1.0 / cfg.mean_extra_len)
            .expect("valid exp")
            .sample(rng)
            .floor() as usize
    } else {
        0
    };
    (min + extra).min(cfg.max_len)
}

fn simulate_sequence(
    student_id: u64,
    theta: f64,
    len: usize,
    exercises: &[ExerciseMeta],
    rng: &mut impl Rng,
) -> InteractionSequence {
    let interactions = (0..len)
        .map(|_| {
            let ex = exercises.choose(rng).expect("non-empty exercise bank");
            simulate_interaction(theta, ex, rng)
        })
        .collect();
    InteractionSequence {
        student_id,
        interactions,
    }
}

pub fn simulate_score(theta: f64, rng: &mut impl Rng) -> u32 {
    let noise = Normal::new(0.0, 25.0).expect("valid normal").sample(rng);
    round_to_5(500.0 + 200.0 * theta + noise).clamp(10.0, 990.0) as u32
}

/// Generates both corpora from one seed.
pub fn synth_generate(cfg: &SynthConfig, seed: u64) -> Result<Corpus> {
    if cfg.num_exercises == 0 {
        return Err(Error::invalid("num_exercises must be >= 1"));
    }
    if cfg.pretrain_min_len < 2 || cfg.finetune_min_len < 1 {
        return Err(Error::invalid("minimum sequence lengths too small"));
    }
    if cfg.max_len < cfg.pretrain_min_len.max(cfg.finetune_min_len) {
        return Err(Error::invalid("max_len below a minimum length"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let exercises = generate_exercises(cfg.num_exercises, &mut rng);
    let ability = Normal::new(0.0, 1.0).expect("valid normal");

    let pretrain = (0..cfg.num_pretrain_students)
        .map(|s| {
            let theta = ability.sample(&mut rng);
            let len = draw_len(cfg.pretrain_min_len, cfg, &mut rng);
            simulate_sequence(s as u64, theta, len, &exercises, &mut rng)
        })
        .collect();

    let offset = cfg.num_pretrain_students as u64;
    let finetune = (0..cfg.num_finetune_students)
        .map(|s| {
            let theta = ability.sample(&mut rng);
            let len = draw_len(cfg.finetune_min_len, cfg, &mut rng);
            let sequence = simulate_sequence(offset + s as u64, theta, len, &exercises, &mut rng);
            ScoredSequence {
                sequence,
                score: simulate_score(theta, &mut rng),
            }
        })
        .collect();

    Ok(Corpus {
        exercises,
        pretrain,
        finetune,
    })
}

/// Summary statistics of a corpus, in the layout of a dataset table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CorpusStats {
    pub students: usize,
    pub interactions: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub mean_len: f64,
    pub median_len: f64,
    pub correct_ratio: f64,
    pub timely_ratio: f64,
}

pub fn corpus_stats<'a>(seqs: impl IntoIterator<Item = &'a InteractionSequence>) -> CorpusStats {
    let mut lens = Vec::new();
    let (mut correct, mut timely) = (0usize, 0usize);
    for s in seqs {
        lens.push(s.len());
        correct += s.interactions.iter().filter(|i| i.correctness).count();
        timely += s.interactions.iter().filter(|i| i.timeliness).count();
    }
    lens.sort_unstable();
    let total: usize = lens.iter().sum();
    let median = match lens.len() {
        0 => 0.0,
        n if n % 2 == 1 => lens[n / 2] as f64,
        n => (lens[n / 2 - 1] + lens[n / 2]) as f64 / 2.0,
    };
    let denom = total.max(1) as f64;
    CorpusStats {
        students: lens.len(),
        interactions: total,
        min_len: lens.first().copied().unwrap_or(0),
        max_len: lens.last().copied().unwrap_or(0),
        mean_len: total as f64 / lens.len().max(1) as f64,
        median_len: median,
        correct_ratio: correct as f64 / denom,
        timely_ratio: timely as f64 / denom,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn exercise(difficulty: f64) -> ExerciseMeta {
        ExerciseMeta {
            eid: 0,
            part: 2,
            answer: Response::C,
            time_limit: 40.0,
            difficulty,
        }
    }

    fn correct_ratio(theta: f64, difficulty: f64, seed: u64) -> f64 {
        let ex = exercise(difficulty);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 10_000;
        let hits = (0..n)
            .filter(|_| simulate_response(theta, &ex, &mut rng) == ex.answer)
            .count();
        hits as f64 / n as f64
    }

    #[test]
    fn high_ability_nearly_always_correct() {
        assert!(correct_ratio(6.0, 0.0, 1) > 0.99);
    }

    #[test]
    fn ability_equal_to_difficulty_is_a_coin_flip() {
        let r = correct_ratio(0.7, 0.7, 2);
        assert!((r - 0.5).abs() <= 0.02, "ratio {r}");
    }

    #[test]
    fn wrong_answers_are_uniform_over_three_options() {
        let ex = exercise(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut counts = [0usize; 4];
        for _ in 0..30_000 {
            counts[simulate_response(-8.0, &ex, &mut rng).index()] += 1;
        }
        assert!(counts[Response::C.index()] < 30);
        for r in [Response::A, Response::B, Response::D] {
            let f = counts[r.index()] as f64 / 30_000.0;
            assert!((f - 1.0 / 3.0).abs() < 0.02);
        }
    }

    #[test]
    fn generated_corpus_respects_invariants() {
        let cfg = SynthConfig {
            num_pretrain_students: 60,
            num_finetune_students: 40,
            ..SynthConfig::default()
        };
        let corpus = synth_generate(&cfg, 17).unwrap();
        for s in &corpus.pretrain {
            assert!(s.len() >= 15 && s.len() <= cfg.max_len);
        }
        for s in &corpus.finetune {
            assert!(s.sequence.len() >= 10);
            assert!(s.score % 5 == 0 && (10..=990).contains(&s.score));
        }
        let all = corpus
            .pretrain
            .iter()
            .chain(corpus.finetune.iter().map(|s| &s.sequence));
        for s in all {
            for i in &s.interactions {
                let ex = &corpus.exercises[i.eid];
                assert_eq!(i.correctness, i.response == ex.answer);
                assert_eq!(i.timeliness, i.elapsed_time <= ex.time_limit);
                assert_eq!(i.part, ex.part);
                assert!(i.elapsed_time >= 0.0 && i.exp_time >= 0.0 && i.inactive_time >= 0.0);
            }
        }
        assert_eq!(corpus, synth_generate(&cfg, 17).unwrap());
    }

    #[test]
    fn scores_are_multiples_of_five_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for k in 0..2000 {
            let theta = (k as f64 - 1000.0) / 150.0;
            let s = simulate_score(theta, &mut rng);
            assert!(s % 5 == 0 && (10..=990).contains(&s));
        }
    }
}
