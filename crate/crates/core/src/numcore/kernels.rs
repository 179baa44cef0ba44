//! Raw numeric kernels on row-major slices. The autodiff graph and the
//! attention benchmark both call into these.

use crate::parallel::for_each_chunk_mut;

/// Below this many multiply-adds the row-parallel path is not worth the
/// scheduling overhead.
const PAR_THRESHOLD: usize = 1 << 18;

/// `c[m×n] = a[m×k] · b[k×n]`
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    let par = m * k * n >= PAR_THRESHOLD && m > 1;
    for_each_chunk_mut(par, &mut c, n, |i, crow| {
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    });
    c
}

/// `c[m×n] = a[m×k] · b[n×k]ᵀ`
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    let par = m * k * n >= PAR_THRESHOLD && m > 1;
    for_each_chunk_mut(par, &mut c, n, |i, crow| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, cv) in crow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            *cv = dot(arow, brow);
        }
    });
    c
}

/// `c[m×n] = a[k×m]ᵀ · b[k×n]`
pub fn matmul_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    // Accumulate outer products row by row of the shared dimension.
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

pub fn transpose(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut t = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            t[j * m + i] = a[i * n + j];
        }
    }
    t
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Splits a shape around `axis` into (outer, len, inner) extents.
pub fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Max-shifted softmax along `axis`.
pub fn softmax(x: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, len, inner) = axis_extents(shape, axis);
    let mut y = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |t: usize| (o * len + t) * inner + i;
            let max = (0..len).map(|t| x[idx(t)]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for t in 0..len {
                let e = (x[idx(t)] - max).exp();
                y[idx(t)] = e;
                sum += e;
            }
            for t in 0..len {
                y[idx(t)] /= sum;
            }
        }
    }
    y
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}
