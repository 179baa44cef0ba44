use super::schema::Interaction;
use crate::error::{Error, Result};

pub const MAX_ELAPSED_TIME: f64 = 300.0;
pub const MAX_EXP_TIME: f64 = 300.0;
pub const MAX_INACTIVE_TIME: f64 = 86_400.0;

fn cap(value: f64, max: f64, name: &str) -> Result<f64> {
    if !(value >= 0.0) || !value.is_finite() {
        return Err(Error::invalid(format!("{name} must be a finite value >= 0, got {value}")));
    }
    Ok(value.min(max) / max)
}

/// Caps raw time features (seconds) at 300/300/86400 and divides by the cap.
pub fn cap_and_normalize(raw: &Interaction) -> Result<Interaction> {
    Ok(Interaction {
        elapsed_time: cap(raw.elapsed_time, MAX_ELAPSED_TIME, "elapsed_time")?,
        exp_time: cap(raw.exp_time, MAX_EXP_TIME, "exp_time")?,
        inactive_time: cap(raw.inactive_time, MAX_INACTIVE_TIME, "inactive_time")?,
        ..raw.clone()
    })
}

/// Maps normalized times back to (capped) seconds.
pub fn denormalize(norm: &Interaction) -> Interaction {
    Interaction {
        elapsed_time: norm.elapsed_time * MAX_ELAPSED_TIME,
        exp_time: norm.exp_time * MAX_EXP_TIME,
        inactive_time: norm.inactive_time * MAX_INACTIVE_TIME,
        ..norm.clone()
    }
}
