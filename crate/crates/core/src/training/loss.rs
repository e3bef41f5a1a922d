use crate::error::{Error, Result};

/// The multi-task objective and its parts.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBundle {
    pub l_dec: f64,
    pub l_ctc: f64,
    pub l_lid: f64,
    pub alpha: f64,
    pub beta: f64,
    pub l_all: f64,
}

pub fn validate_weights(alpha: f64, beta: f64) -> Result<()> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::Config(alloc::format!("alpha {alpha} outside [0, 1)")));
    }
    if !(beta >= 0.0) || !beta.is_finite() {
        return Err(Error::Config(alloc::format!("beta {beta} must be finite and >= 0")));
    }
    Ok(())
}

/// `L_all = (1-α) L_dec + α L_CTC + β L_LID`. A non-finite component is
/// reported as [`Error::NonFinite`] so the caller can skip the step.
pub fn combine_losses(l_dec: f64, l_ctc: f64, l_lid: f64, alpha: f64, beta: f64) -> Result<LossBundle> {
    validate_weights(alpha, beta)?;
    for (v, what) in [(l_dec, "decoder loss"), (l_ctc, "CTC loss"), (l_lid, "LID loss")] {
        if !v.is_finite() {
            return Err(Error::NonFinite(what));
        }
    }
    let l_all = (1.0 - alpha) * l_dec + alpha * l_ctc + beta * l_lid;
    Ok(LossBundle { l_dec, l_ctc, l_lid, alpha, beta, l_all })
}

/// Partial derivatives of `L_all` with respect to its three components.
pub fn loss_weights(alpha: f64, beta: f64) -> [f64; 3] {
    [1.0 - alpha, alpha, beta]
}
