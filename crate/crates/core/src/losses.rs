//! Supervised, clean-alignment and noisy-alignment objectives.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Scalar values of one iteration's loss terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_gaze: f64,
    pub l_align_clean: f64,
    pub l_align_noisy: f64,
    pub l_total: f64,
    pub lambda: f64,
}

impl LossBreakdown {
    pub fn new(l_gaze: f64, l_align_clean: f64, l_align_noisy: f64, lambda: f64) -> Self {
        Self {
            l_gaze,
            l_align_clean,
            l_align_noisy,
            l_total: l_gaze + l_align_clean + lambda * l_align_noisy,
            lambda,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.l_gaze.is_finite()
            && self.l_align_clean.is_finite()
            && self.l_align_noisy.is_finite()
            && self.l_total.is_finite()
    }
}

/// Mean absolute error over every (sample, pitch/yaw) entry.
pub fn gaze_loss(g: &mut Graph, pred: Var, labels: Var) -> Result<Var> {
    if g.value(pred).shape() != g.value(labels).shape() {
        return Err(Error::InvalidShape(format!(
            "predictions {:?} vs labels {:?}",
            g.value(pred).shape(),
            g.value(labels).shape()
        )));
    }
    let d = g.sub(pred, labels)?;
    let a = g.abs(d)?;
    g.mean_all(a)
}

/// Mean absolute difference of the off-diagonal entries of two square
/// affinity matrices.
pub fn clean_align_loss(g: &mut Graph, a_g: Var, a_m: Var) -> Result<Var> {
    let (b, c) = g.value(a_m).dims2()?;
    if b != c || g.value(a_g).shape() != g.value(a_m).shape() {
        return Err(Error::InvalidShape(format!(
            "clean alignment needs equal square matrices, got {:?} and {:?}",
            g.value(a_g).shape(),
            g.value(a_m).shape()
        )));
    }
    if b < 2 {
        return Err(Error::InvalidArgument(format!("clean alignment needs B_C >= 2, got {b}")));
    }
    let mut mask = Tensor::filled(&[b, b], 1.0);
    for i in 0..b {
        mask.values_mut()[i * b + i] = 0.0;
    }
    let mask = g.constant(mask);
    let d = g.sub(a_g, a_m)?;
    let a = g.abs(d)?;
    let off = g.mul(a, mask)?;
    let m = g.mean_all(off)?;
    g.scale(m, b as f64 / (b as f64 - 1.0))
}

/// Negative mean row-wise cosine between the feature cross-affinity and the
/// manifold cross-affinity. With `detach_target` the manifold rows act as a
/// fixed teacher.
pub fn noisy_align_loss(g: &mut Graph, a_f: Var, a_m_cross: Var, detach_target: bool) -> Result<Var> {
    let (bn, bc) = g.value(a_f).dims2()?;
    if g.value(a_m_cross).shape() != g.value(a_f).shape() {
        return Err(Error::InvalidShape(format!(
            "noisy alignment: {:?} vs {:?}",
            g.value(a_f).shape(),
            g.value(a_m_cross).shape()
        )));
    }
    let target = if detach_target { g.detach(a_m_cross)? } else { a_m_cross };
    let f_hat = g.row_l2_normalize(a_f)?;
    let m_hat = g.row_l2_normalize(target)?;
    let prod = g.mul(f_hat, m_hat)?;
    let mean = g.mean_all(prod)?;
    debug_assert!(bn > 0);
    g.scale(mean, -(bc as f64))
}

/// `L_gaze + L_align^C + lambda * L_align^N`.
pub fn total_loss(g: &mut Graph, l_gaze: Var, l_clean: Var, l_noisy: Option<Var>, lambda: f64) -> Result<Var> {
    let base = g.add(l_gaze, l_clean)?;
    match l_noisy {
        Some(n) => {
            let w = g.scale(n, lambda)?;
            g.add(base, w)
        }
        None => Ok(base),
    }
}
