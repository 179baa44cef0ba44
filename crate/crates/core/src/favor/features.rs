use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::kernels::matmul_nt;
use crate::numcore::Tensor;

/// Which attention kernel the random features approximate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kernel {
    Softmax,
    #[default]
    Relu,
}

fn gaussian_row(d: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `r × d` matrix of i.i.d. standard Gaussian entries.
pub fn iid_gaussian(r: usize, d: usize, rng: &mut impl Rng) -> Tensor {
    let data = (0..r).flat_map(|_| gaussian_row(d, rng)).collect();
    Tensor::from_parts(vec![r, d], data)
}

/// Gaussian rows orthogonalized by Gram-Schmidt in blocks of at most `d`
/// rows, each row then rescaled to the length of an independent chi(d) draw.
pub fn orthogonal_gaussian(r: usize, d: usize, rng: &mut impl Rng) -> Result<Tensor> {
    if r == 0 || d == 0 {
        return Err(Error::invalid("orthogonal_gaussian needs r, d >= 1"));
    }
    let mut data = Vec::with_capacity(r * d);
    let mut block: Vec<Vec<f64>> = Vec::with_capacity(d);
    while data.len() < r * d {
        if block.len() == d {
            block.clear();
        }
        let mut v = gaussian_row(d, rng);
        let original = norm(&v);
        for b in &block {
            let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let n = norm(&v);
        if n <= 1e-9 * original {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= n);
        let length = norm(&gaussian_row(d, rng));
        data.extend(v.iter().map(|x| x * length));
        block.push(v);
    }
    Ok(Tensor::from_parts(vec![r, d], data))
}

/// `c · exp(W x − ‖x‖²/2)` row-wise for `x: [L, d]`, with `c = r^{-1/2}`.
pub fn softmax_features(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (l, d, r) = check(x, w)?;
    let c = (r as f64).powf(-0.5);
    let mut p = matmul_nt(x.data(), w.data(), l, d, r);
    for (row, xr) in p.chunks_mut(r).zip(x.data().chunks(d)) {
        let half_sq = 0.5 * xr.iter().map(|v| v * v).sum::<f64>();
        row.iter_mut().for_each(|v| *v = c * (*v - half_sq).exp());
    }
    Ok(Tensor::from_parts(vec![l, r], p))
}

/// `c · ReLU(W x)` row-wise, `c = r^{-1/2}`.
pub fn relu_features(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (l, d, r) = check(x, w)?;
    let c = (r as f64).powf(-0.5);
    let p = matmul_nt(x.data(), w.data(), l, d, r);
    Ok(Tensor::from_parts(vec![l, r], p.into_iter().map(|v| c * v.max(0.0)).collect()))
}

pub fn softmax_feature_map(x: &[f64], w: &Tensor) -> Result<Vec<f64>> {
    Ok(softmax_features(&Tensor::matrix(1, x.len(), x.to_vec())?, w)?.into_data())
}

pub fn relu_feature_map(x: &[f64], w: &Tensor) -> Result<Vec<f64>> {
    Ok(relu_features(&Tensor::matrix(1, x.len(), x.to_vec())?, w)?.into_data())
}

fn check(x: &Tensor, w: &Tensor) -> Result<(usize, usize, usize)> {
    if x.ndim() != 2 || w.ndim() != 2 || x.cols() != w.cols() {
        return Err(Error::shape("feature_map", x.shape(), w.shape()));
    }
    Ok((x.rows(), x.cols(), w.rows()))
}

/// Random projection plus its redraw schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomFeatureState {
    pub projection: Tensor,
    pub kernel: Kernel,
    /// Steps between redraws; 0 disables redrawing.
    pub redraw_interval: u64,
    pub steps_since_redraw: u64,
    pub redraws: u64,
}

impl RandomFeatureState {
    pub fn new(
        num_features: usize,
        dim: usize,
        kernel: Kernel,
        redraw_interval: u64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(RandomFeatureState {
            projection: orthogonal_gaussian(num_features, dim, rng)?,
            kernel,
            redraw_interval,
            steps_since_redraw: 0,
            redraws: 0,
        })
    }

    pub fn num_features(&self) -> usize {
        self.projection.rows()
    }

    pub fn dim(&self) -> usize {
        self.projection.cols()
    }

    /// Advances the step counter; redraws and returns `true` when the
    /// counter reaches the interval.
    pub fn tick(&mut self, rng: &mut impl Rng) -> Result<bool> {
        self.steps_since_redraw += 1;
        if self.redraw_interval == 0 || self.steps_since_redraw < self.redraw_interval {
            return Ok(false);
        }
        self.projection = orthogonal_gaussian(self.num_features(), self.dim(), rng)?;
        self.steps_since_redraw = 0;
        self.redraws += 1;
        Ok(true)
    }

    /// Feature map of the configured kernel, applied to rows of `x`.
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        match self.kernel {
            Kernel::Softmax => softmax_features(x, &self.projection),
            Kernel::Relu => relu_features(x, &self.projection),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gram_offdiag_max(w: &Tensor, rows: std::ops::Range<usize>) -> f64 {
        let mut worst: f64 = 0.0;
        for i in rows.clone() {
            for j in rows.clone() {
                if i < j {
                    let dot: f64 = w.row(i).iter().zip(w.row(j)).map(|(a, b)| a * b).sum();
                    worst = worst.max(dot.abs());
                }
            }
        }
        worst
    }

    #[test]
    fn square_block_is_orthogonal() {
        let w = orthogonal_gaussian(4, 4, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(gram_offdiag_max(&w, 0..4) < 1e-6);
    }

    #[test]
    fn blocks_are_orthogonal_within() {
        let d = 6;
        let w = orthogonal_gaussian(2 * d, d, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert!(gram_offdiag_max(&w, 0..d) < 1e-6);
        assert!(gram_offdiag_max(&w, d..2 * d) < 1e-6);
    }

    #[test]
    fn row_norms_follow_chi() {
        let d = 16;
        let w = orthogonal_gaussian(10_000, d, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let mean_sq: f64 = (0..10_000).map(|i| w.row(i).iter().map(|x| x * x).sum::<f64>()).sum::<f64>() / 10_000.0;
        assert!((mean_sq / d as f64 - 1.0).abs() < 0.05, "{mean_sq}");
    }

    #[test]
    fn feature_maps_at_zero() {
        let w = iid_gaussian(8, 3, &mut ChaCha8Rng::seed_from_u64(4));
        let c = 8f64.powf(-0.5);
        assert!(softmax_feature_map(&[0.0; 3], &w).unwrap().iter().all(|&v| (v - c).abs() < 1e-15));
        assert!(relu_feature_map(&[0.0; 3], &w).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn relu_map_identities() {
        let w = iid_gaussian(32, 5, &mut ChaCha8Rng::seed_from_u64(5));
        let x = [0.3, -1.2, 0.5, 2.0, -0.1];
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        let dbl: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let p = relu_feature_map(&x, &w).unwrap();
        let n = relu_feature_map(&neg, &w).unwrap();
        let d = relu_feature_map(&dbl, &w).unwrap();
        let c = 32f64.powf(-0.5);
        for i in 0..32 {
            let proj: f64 = w.row(i).iter().zip(&x).map(|(a, b)| a * b).sum();
            assert!((p[i] + n[i] - c * proj.abs()).abs() < 1e-12);
            assert!((d[i] - 2.0 * p[i]).abs() < 1e-12);
            assert!(p[i] >= 0.0);
        }
    }

    #[test]
    fn orthogonal_rows_reduce_estimator_variance() {
        let d = 16;
        let q = Tensor::from_fn(&[1, d], |i| 0.1 * ((i as f64) * 1.3).sin());
        let k = Tensor::from_fn(&[1, d], |i| 0.1 * ((i as f64) * 0.7).cos());
        let variance = |orthogonal: bool, seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let est: Vec<f64> = (0..2000)
                .map(|_| {
                    let w = if orthogonal {
                        orthogonal_gaussian(d, d, &mut rng).unwrap()
                    } else {
                        iid_gaussian(d, d, &mut rng)
                    };
                    let a = softmax_features(&q, &w).unwrap();
                    let b = softmax_features(&k, &w).unwrap();
                    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
                })
                .collect();
            let mean = est.iter().sum::<f64>() / est.len() as f64;
            est.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / est.len() as f64
        };
        for seed in 21..24 {
            let (o, i) = (variance(true, seed), variance(false, seed));
            assert!(o <= i, "{o} vs {i}");
        }
    }

    #[test]
    fn redraw_happens_on_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut s = RandomFeatureState::new(4, 4, Kernel::Relu, 1000, &mut rng).unwrap();
        let first = s.projection.clone();
        let mut fired = 0;
        for step in 1..=2500u64 {
            if s.tick(&mut rng).unwrap() {
                fired += 1;
                assert_eq!(step % 1000, 0);
            }
        }
        assert_eq!((fired, s.redraws, s.steps_since_redraw), (2, 2, 500));
        assert_ne!(s.projection, first);
    }
}
