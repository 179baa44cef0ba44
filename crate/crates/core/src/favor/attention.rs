use super::features::{Kernel, RandomFeatureState};
use crate::error::{Error, Result};
use crate::numcore::kernels::{matmul, matmul_nt, matmul_tn, softmax};
use crate::numcore::{Graph, Tensor, Var};

/// Added to every normalizer entry; ReLU features can zero a whole row.
pub const NORMALIZER_EPS: f64 = 1e-8;

fn check_qkv(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(usize, usize, usize)> {
    if q.ndim() != 2 || k.ndim() != 2 || v.ndim() != 2 {
        return Err(Error::shape("attention", q.shape(), k.shape()));
    }
    if q.shape() != k.shape() {
        return Err(Error::shape("attention q/k", q.shape(), k.shape()));
    }
    if v.rows() != k.rows() {
        return Err(Error::shape("attention k/v", k.shape(), v.shape()));
    }
    Ok((q.rows(), q.cols(), v.cols()))
}

/// Input scale that gives the softmax kernel the `1/√d` temperature.
fn prescale(kernel: Kernel, d: usize) -> f64 {
    match kernel {
        Kernel::Softmax => (d as f64).powf(-0.25),
        Kernel::Relu => 1.0,
    }
}

/// Quadratic reference: `softmax(Q Kᵀ / √d) V`.
pub fn exact_softmax_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    let (l, d, dv) = check_qkv(q, k, v)?;
    let s = 1.0 / (d as f64).sqrt();
    let scores: Vec<f64> = matmul_nt(q.data(), k.data(), l, d, l).into_iter().map(|x| x * s).collect();
    let weights = softmax(&scores, &[l, l], 1);
    Ok(Tensor::from_parts(vec![l, dv], matmul(&weights, v.data(), l, l, dv)))
}

fn mapped(q: &Tensor, k: &Tensor, state: &RandomFeatureState) -> Result<(Tensor, Tensor)> {
    let s = prescale(state.kernel, q.cols());
    Ok((state.features(&q.map(|x| x * s))?, state.features(&k.map(|x| x * s))?))
}

/// `D⁻¹ (Q' ((K')ᵀ V))` with `D = Q' ((K')ᵀ 1) + eps`, never forming the
/// `L × L` matrix.
pub fn favor_attention(q: &Tensor, k: &Tensor, v: &Tensor, state: &RandomFeatureState) -> Result<Tensor> {
    let (l, _, dv) = check_qkv(q, k, v)?;
    let (qp, kp) = mapped(q, k, state)?;
    let r = qp.cols();
    let ktv = matmul_tn(kp.data(), v.data(), l, r, dv);
    let mut out = matmul(qp.data(), &ktv, l, r, dv);
    let mut ksum = vec![0.0; r];
    for row in kp.data().chunks(r) {
        ksum.iter_mut().zip(row).for_each(|(s, x)| *s += x);
    }
    for (i, row) in out.chunks_mut(dv).enumerate() {
        let d: f64 = qp.row(i).iter().zip(&ksum).map(|(a, b)| a * b).sum::<f64>() + NORMALIZER_EPS;
        row.iter_mut().for_each(|x| *x /= d);
    }
    Ok(Tensor::from_parts(vec![l, dv], out))
}

/// The implied `L × L` attention weights `D⁻¹ Q' K'ᵀ`, for small-L checks.
pub fn favor_attention_matrix(q: &Tensor, k: &Tensor, state: &RandomFeatureState) -> Result<Tensor> {
    let (qp, kp) = mapped(q, k, state)?;
    let (l, r) = (qp.rows(), qp.cols());
    let mut a = matmul_nt(qp.data(), kp.data(), l, r, l);
    for row in a.chunks_mut(l) {
        let d = row.iter().sum::<f64>() + NORMALIZER_EPS;
        row.iter_mut().for_each(|x| *x /= d);
    }
    Ok(Tensor::from_parts(vec![l, l], a))
}

/// Feature map of `x` inside a graph; the projection is a constant.
pub fn feature_map_graph(g: &mut Graph, x: Var, state: &RandomFeatureState) -> Result<Var> {
    let d = g.shape(x)[1];
    let c = (state.num_features() as f64).powf(-0.5);
    let w = g.constant(state.projection.clone());
    match state.kernel {
        Kernel::Relu => {
            let p = g.matmul_nt(x, w)?;
            let r = g.relu(p);
            Ok(g.scale(r, c))
        }
        Kernel::Softmax => {
            let xs = g.scale(x, prescale(Kernel::Softmax, d));
            let p = g.matmul_nt(xs, w)?;
            let sq = g.row_sum_sq(xs);
            let half = g.scale(sq, 0.5);
            let shifted = g.sub_col(p, half)?;
            let e = g.exp(shifted);
            Ok(g.scale(e, c))
        }
    }
}

/// Differentiable [`favor_attention`].
pub fn favor_attention_graph(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    state: &RandomFeatureState,
) -> Result<Var> {
    if g.shape(q) != g.shape(k) || g.shape(k)[0] != g.shape(v)[0] {
        return Err(Error::shape("favor_attention", g.shape(q), g.shape(v)));
    }
    let qp = feature_map_graph(g, q, state)?;
    let kp = feature_map_graph(g, k, state)?;
    let ktv = g.matmul_tn(kp, v)?;
    let num = g.matmul(qp, ktv)?;
    let ksum = g.sum_rows(kp);
    let r = g.shape(ksum)[0];
    let ksum = g.reshape(ksum, &[r, 1])?;
    let d = g.matmul(qp, ksum)?;
    let d = g.add_scalar(d, NORMALIZER_EPS);
    g.div_col(num, d)
}

/// Differentiable [`exact_softmax_attention`].
pub fn exact_attention_graph(g: &mut Graph, q: Var, k: Var, v: Var) -> Result<Var> {
    let d = g.shape(q)[1];
    let s = g.matmul_nt(q, k)?;
    let s = g.scale(s, 1.0 / (d as f64).sqrt());
    let w = g.softmax(s, 1)?;
    g.matmul(w, v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::favor::features::iid_gaussian;
    use crate::numcore::{Mode, ParamStore, Reduction};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uniform(l: usize, d: usize, lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor {
        Tensor::from_fn(&[l, d], |_| rng.random_range(lo..hi))
    }

    fn state(r: usize, d: usize, kernel: Kernel, seed: u64) -> RandomFeatureState {
        RandomFeatureState::new(r, d, kernel, 0, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn exact_single_key_returns_value() {
        let q = Tensor::matrix(1, 2, vec![0.3, -0.7]).unwrap();
        let v = Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(exact_softmax_attention(&q, &q, &v).unwrap(), v);
    }

    #[test]
    fn exact_zero_query_averages_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let k = uniform(5, 3, -1.0, 1.0, &mut rng);
        let v = uniform(5, 2, -1.0, 1.0, &mut rng);
        let out = exact_softmax_attention(&Tensor::zeros(&[5, 3]), &k, &v).unwrap();
        for j in 0..2 {
            let mean = (0..5).map(|i| v.at(i, j)).sum::<f64>() / 5.0;
            for i in 0..5 {
                assert!((out.at(i, j) - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn exact_two_by_two_hand_case() {
        let i2 = Tensor::identity(2);
        let v = Tensor::matrix(2, 1, vec![1.0, 3.0]).unwrap();
        let out = exact_softmax_attention(&i2, &i2, &v).unwrap();
        let s = 1.0 / 2f64.sqrt();
        let w0 = s.exp() / (s.exp() + 1.0);
        assert!((out.at(0, 0) - (w0 * 1.0 + (1.0 - w0) * 3.0)).abs() < 1e-12);
        assert!((out.at(1, 0) - ((1.0 - w0) * 1.0 + w0 * 3.0)).abs() < 1e-12);
    }

    #[test]
    fn constant_values_pass_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = uniform(6, 4, -1.0, 1.0, &mut rng);
        let k = uniform(6, 4, -1.0, 1.0, &mut rng);
        let v = Tensor::from_fn(&[6, 3], |i| [0.5, -2.0, 7.0][i % 3]);
        for kernel in [Kernel::Softmax, Kernel::Relu] {
            let out = favor_attention(&q, &k, &v, &state(64, 4, kernel, 3)).unwrap();
            for i in 0..6 {
                for (j, want) in [0.5, -2.0, 7.0].iter().enumerate() {
                    assert!((out.at(i, j) - want).abs() < 1e-6 * want.abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn softmax_kernel_tracks_exact_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (l, d) = (64, 16);
        let q = uniform(l, d, -0.5, 0.5, &mut rng);
        let k = uniform(l, d, -0.5, 0.5, &mut rng);
        let v = uniform(l, d, -0.5, 0.5, &mut rng);
        let approx = favor_attention(&q, &k, &v, &state(4096, d, Kernel::Softmax, 5)).unwrap();
        let exact = exact_softmax_attention(&q, &k, &v).unwrap();
        assert!(approx.max_abs_diff(&exact) < 0.05);
    }

    #[test]
    fn estimator_error_shrinks_with_more_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let q = uniform(1, 8, -0.3, 0.3, &mut rng);
        let k = uniform(1, 8, -0.3, 0.3, &mut rng);
        let truth: f64 = q.data().iter().zip(k.data()).map(|(a, b)| a * b).sum::<f64>().exp();
        let err = |r: usize| {
            (0..20)
                .map(|s| {
                    let w = iid_gaussian(r, 8, &mut ChaCha8Rng::seed_from_u64(100 + s));
                    let a = super::super::features::softmax_features(&q, &w).unwrap();
                    let b = super::super::features::softmax_features(&k, &w).unwrap();
                    let est: f64 = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
                    (est - truth).abs() / truth
                })
                .sum::<f64>()
        };
        assert!(err(4096) < err(64));
    }

    #[test]
    fn materialized_matrix_matches_linear_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let q = uniform(7, 4, -1.0, 1.0, &mut rng);
        let k = uniform(7, 4, -1.0, 1.0, &mut rng);
        let v = uniform(7, 3, -1.0, 1.0, &mut rng);
        for kernel in [Kernel::Softmax, Kernel::Relu] {
            let st = state(32, 4, kernel, 8);
            let a = favor_attention_matrix(&q, &k, &st).unwrap();
            for i in 0..7 {
                let row = a.row(i);
                assert!(row.iter().all(|&x| x >= 0.0));
                let s: f64 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-6, "{s}");
            }
            let via_matrix = Tensor::from_parts(vec![7, 3], matmul(a.data(), v.data(), 7, 7, 3));
            let linear = favor_attention(&q, &k, &v, &st).unwrap();
            assert!(via_matrix.max_abs_diff(&linear) < 1e-10);
        }
    }

    #[test]
    fn graph_matches_tensor_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let q = uniform(5, 4, -1.0, 1.0, &mut rng);
        let k = uniform(5, 4, -1.0, 1.0, &mut rng);
        let v = uniform(5, 2, -1.0, 1.0, &mut rng);
        for kernel in [Kernel::Softmax, Kernel::Relu] {
            let st = state(16, 4, kernel, 10);
            let mut g = Graph::new();
            let (qv, kv, vv) = (g.input(q.clone()), g.input(k.clone()), g.input(v.clone()));
            let out = favor_attention_graph(&mut g, qv, kv, vv, &st).unwrap();
            assert!(g.value(out).max_abs_diff(&favor_attention(&q, &k, &v, &st).unwrap()) < 1e-12);
            let mut g = Graph::new();
            let (qv, kv, vv) = (g.input(q.clone()), g.input(k.clone()), g.input(v.clone()));
            let out = exact_attention_graph(&mut g, qv, kv, vv).unwrap();
            assert!(g.value(out).max_abs_diff(&exact_softmax_attention(&q, &k, &v).unwrap()) < 1e-12);
        }
    }

    #[test]
    fn graph_gradients_match_finite_differences() {
        use crate::numcore::gradcheck::check_params;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let ids = ["q", "k", "v"].map(|n| store.insert(n, uniform(4, 3, -1.0, 1.0, &mut rng)).unwrap());
        for kernel in [Kernel::Softmax, Kernel::Relu] {
            let st = state(8, 3, kernel, 12);
            let loss = |s: &ParamStore| -> Result<(f64, crate::numcore::ParamGrads)> {
                let mut ctx = crate::numcore::Ctx::new(s, Mode::Eval, 0);
                let [q, k, v] = ids.map(|id| ctx.p(id));
                let out = favor_attention_graph(&mut ctx.g, q, k, v, &st)?;
                let l = ctx.g.mse(out, vec![0.1; 12], Reduction::Sum)?;
                let val = ctx.g.value(l).item();
                Ok((val, ctx.g.backward(l)?.params))
            };
            let (_, grads) = loss(&store).unwrap();
            let report = check_params(&store, &grads, 1e-5, |_| true, |s| Ok(loss(s)?.0)).unwrap();
            assert!(report.worst_rel_err <= 1e-3, "{kernel:?}: {report:?}");
        }
    }

    proptest! {
        #[test]
        fn feature_maps_are_nonnegative(seed in 0u64..500, scale in 0.1f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = uniform(6, 5, -scale, scale, &mut rng);
            for kernel in [Kernel::Softmax, Kernel::Relu] {
                let st = state(12, 5, kernel, seed);
                prop_assert!(st.features(&x).unwrap().data().iter().all(|&v| v >= 0.0));
            }
        }
    }
}
