use serde::{Deserialize, Serialize};

use super::params::{ParamGrads, ParamStore};
use crate::error::{Error, Result};

/// Adam moments and step counter. Moment vectors are aligned with the
/// parameter store and allocated lazily on first update.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub step_count: u64,
    pub first_moment: Vec<Option<Vec<f64>>>,
    pub second_moment: Vec<Option<Vec<f64>>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub state: OptimizerState,
}

impl Default for Adam {
    fn default() -> Self {
        Adam::new(0.9, 0.98, 1e-9)
    }
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            beta1,
            beta2,
            eps,
            state: OptimizerState::default(),
        }
    }

    /// One bias-corrected Adam update of every parameter that has a gradient.
    /// Gradients are validated before anything is written, so a rejected
    /// step leaves both parameters and state untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads, lr: f64) -> Result<()> {
        for (id, g) in grads.iter() {
            if id.index() >= store.len() {
                return Err(Error::invalid(format!(
                    "gradient for unknown parameter #{}",
                    id.index()
                )));
            }
            if g.len() != store.get(id).numel() {
                return Err(Error::shape(
                    "adam_step",
                    store.get(id).shape(),
                    &[g.len()],
                ));
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of `{}`", store.name(id))));
            }
        }

        let st = &mut self.state;
        st.step_count += 1;
        st.first_moment.resize(store.len(), None);
        st.second_moment.resize(store.len(), None);
        let t = st.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);

        for (id, g) in grads.iter() {
            let n = g.len();
            let m = st.first_moment[id.index()].get_or_insert_with(|| vec![0.0; n]);
            let v = st.second_moment[id.index()].get_or_insert_with(|| vec![0.0; n]);
            let p = store.get_mut(id).data_mut();
            for i in 0..n {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Inverse-square-root schedule with linear warm-up:
/// `d_model^-0.5 · min(step^-0.5, step · warmup^-1.5)`.
pub fn noam_lr(step: u64, d_model: usize, warmup: u64) -> Result<f64> {
    if step == 0 {
        return Err(Error::invalid("noam_lr is defined for step >= 1"));
    }
    if d_model == 0 || warmup == 0 {
        return Err(Error::invalid("noam_lr needs positive d_model and warmup"));
    }
    let s = step as f64;
    let w = warmup as f64;
    Ok((d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5)))
}

/// [`noam_lr`] with a constant multiplier.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoamSchedule {
    pub d_model: usize,
    pub warmup: u64,
    pub factor: f64,
}

impl NoamSchedule {
    pub fn lr(&self, step: u64) -> Result<f64> {
        Ok(self.factor * noam_lr(step, self.d_model, self.warmup)?)
    }
}
