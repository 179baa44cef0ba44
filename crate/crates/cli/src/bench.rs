//! Wall time and intermediate workspace of FAVOR+ versus exact attention.

use std::time::Instant;

use anyhow::Result;
use dpa_core::favor::{exact_attention_graph, favor_attention_graph, Kernel, RandomFeatureState};
use dpa_core::numcore::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::BenchConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Mechanism {
    Favor,
    Exact,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    #[serde(rename = "L")]
    pub len: usize,
    pub mechanism: Mechanism,
    pub median_ms: Option<f64>,
    pub peak_elements: Option<usize>,
    pub skipped: bool,
}

/// Ratio of a measurement at `len` to the one at `base_len`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RatioRow {
    pub mechanism: Mechanism,
    pub base_len: usize,
    pub len: usize,
    pub time_ratio: f64,
    pub elements_ratio: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn random_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(&[rows, cols], |_| rng.random_range(-0.5..0.5))
}

/// Median forward time and workspace of one mechanism at length `len`.
pub fn measure(mechanism: Mechanism, len: usize, cfg: &BenchConfig, seed: u64) -> Result<BenchRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q = random_matrix(len, cfg.dim, &mut rng);
    let k = random_matrix(len, cfg.dim, &mut rng);
    let v = random_matrix(len, cfg.dim, &mut rng);
    let state = RandomFeatureState::new(cfg.num_features, cfg.dim, Kernel::Softmax, 0, &mut rng)?;
    let mut times = Vec::with_capacity(cfg.repeats);
    let mut peak = 0;
    for _ in 0..cfg.repeats.max(1) {
        let mut g = Graph::new();
        let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
        let start = Instant::now();
        match mechanism {
            Mechanism::Favor => favor_attention_graph(&mut g, qv, kv, vv, &state)?,
            Mechanism::Exact => exact_attention_graph(&mut g, qv, kv, vv)?,
        };
        times.push(start.elapsed().as_secs_f64() * 1e3);
        peak = peak.max(g.workspace_elements());
    }
    Ok(BenchRow {
        len,
        mechanism,
        median_ms: Some(median(times)),
        peak_elements: Some(peak),
        skipped: false,
    })
}

pub fn run(cfg: &BenchConfig, seed: u64) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    for &len in &cfg.lengths {
        for mechanism in [Mechanism::Favor, Mechanism::Exact] {
            if mechanism == Mechanism::Exact && len > cfg.exact_max_len {
                rows.push(BenchRow {
                    len,
                    mechanism,
                    median_ms: None,
                    peak_elements: None,
                    skipped: true,
                });
                continue;
            }
            rows.push(measure(mechanism, len, cfg, seed)?);
        }
    }
    Ok(rows)
}

/// Ratios between consecutive measured lengths of each mechanism.
pub fn ratios(rows: &[BenchRow]) -> Vec<RatioRow> {
    let mut out = Vec::new();
    for mechanism in [Mechanism::Favor, Mechanism::Exact] {
        let measured: Vec<&BenchRow> = rows
            .iter()
            .filter(|r| r.mechanism == mechanism && !r.skipped)
            .collect();
        for pair in measured.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            if let (Some(ta), Some(tb), Some(ea), Some(eb)) = (a.median_ms, b.median_ms, a.peak_elements, b.peak_elements) {
                out.push(RatioRow {
                    mechanism,
                    base_len: a.len,
                    len: b.len,
                    time_ratio: tb / ta,
                    elements_ratio: eb as f64 / ea as f64,
                });
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_workspace_grows_quadratically() {
        let cfg = BenchConfig {
            lengths: vec![32, 64],
            dim: 8,
            num_features: 16,
            repeats: 1,
            exact_max_len: 64,
        };
        let rows = run(&cfg, 1).unwrap();
        let r = ratios(&rows);
        let exact = r.iter().find(|r| r.mechanism == Mechanism::Exact).unwrap();
        let favor = r.iter().find(|r| r.mechanism == Mechanism::Favor).unwrap();
        assert!(exact.elements_ratio > 3.5, "{exact:?}");
        assert!(favor.elements_ratio <= 2.2, "{favor:?}");
    }

    #[test]
    fn long_exact_rows_are_skipped() {
        let cfg = BenchConfig {
            lengths: vec![16, 32],
            dim: 4,
            num_features: 8,
            repeats: 1,
            exact_max_len: 16,
        };
        let rows = run(&cfg, 2).unwrap();
        assert_eq!(rows.len(), 4);
        assert!(rows[3].skipped && rows[3].median_ms.is_none());
        assert!(!rows[1].skipped);
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
