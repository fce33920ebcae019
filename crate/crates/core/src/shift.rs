//! Per-token logit shifts, robust z-scores and the weight schedule.
//!
//! For caption token `t`, `delta_t = |l(t | I', x) - l(t | I, x)|`. The
//! shifts are scaled by a MAD-based robust sigma, `z_t = delta_t /
//! (1.4826 * MAD + eps)`, and mapped to weights in `[w_min, 1]` by a
//! monotone piecewise power ramp between the knots `z0` and `z1`.

use serde::{Deserialize, Serialize};

use crate::error::{Result, VceError};
use crate::toy_lvlm::ResponseTrace;

/// Consistency constant turning a MAD into a Gaussian sigma estimate.
pub const MAD_TO_SIGMA: f64 = 1.4826;

/// Knots, exponent, floor and scale guard of the weight schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleParams {
    pub z0: f64,
    pub z1: f64,
    pub gamma: f64,
    pub w_min: f64,
    pub eps: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            z0: 1.5,
            z1: 3.5,
            gamma: 2.0,
            w_min: 0.05,
            eps: 1e-6,
        }
    }
}

impl ScheduleParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.z0 < self.z1
            && self.gamma > 0.0
            && self.w_min > 0.0
            && self.w_min < 1.0
            && self.eps > 0.0
            && [self.z0, self.z1, self.gamma, self.w_min, self.eps]
                .iter()
                .all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(VceError::Config(format!(
                "invalid schedule parameters {self:?}: need z0 < z1, gamma > 0, 0 < w_min < 1, eps > 0"
            )))
        }
    }

    pub fn weight(&self, z: f64) -> f64 {
        if z <= self.z0 {
            self.w_min
        } else if z >= self.z1 {
            1.0
        } else {
            let ramp = ((z - self.z0) / (self.z1 - self.z0)).powf(self.gamma);
            (self.w_min + (1.0 - self.w_min) * ramp).clamp(self.w_min, 1.0)
        }
    }
}

/// `|l_pert(t_i) - l_orig(t_i)|` for every response token.
pub fn logit_shift(
    orig: &ResponseTrace,
    pert: &ResponseTrace,
    response: &[u32],
) -> Result<Vec<f64>> {
    if orig.response != response || pert.response != response {
        return Err(VceError::LengthMismatch(format!(
            "traces cover responses of length {} and {}, expected the same {} tokens",
            orig.len(),
            pert.len(),
            response.len()
        )));
    }
    Ok(shift_from_logits(&orig.token_logits(), &pert.token_logits()))
}

pub fn shift_from_logits(orig: &[f32], pert: &[f32]) -> Vec<f64> {
    orig.iter()
        .zip(pert)
        .map(|(&a, &b)| (b as f64 - a as f64).abs())
        .collect()
}

/// Median; even-length inputs average the two central order statistics.
pub fn median(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut sorted = xs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    Some(if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    })
}

/// Which denominator produced the z-scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleSource {
    Mad,
    /// MAD collapsed; the standard deviation stood in.
    StdDev,
    /// Every shift equal; all z set to 0.
    Degenerate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobustZ {
    pub z: Vec<f64>,
    pub median: f64,
    pub mad: f64,
    /// `1.4826 * mad`, as reported; see `scale` for the denominator used.
    pub sigma: f64,
    pub scale: f64,
    pub source: ScaleSource,
}

/// Robust z-scores of the shifts.
///
/// When `sigma < 1e-12 * max(max_delta, 1)` the population standard
/// deviation replaces it; if that is also below `1e-12` every z is 0.
pub fn robust_z(delta: &[f64], eps: f64) -> Result<RobustZ> {
    if delta.is_empty() {
        return Err(VceError::Empty("logit shifts".into()));
    }
    if delta.iter().any(|d| !d.is_finite()) {
        return Err(VceError::NonFinite("logit shifts".into()));
    }
    let m = median(delta).expect("non-empty");
    let deviations: Vec<f64> = delta.iter().map(|d| (d - m).abs()).collect();
    let mad = median(&deviations).expect("non-empty");
    let sigma = MAD_TO_SIGMA * mad;

    let max_delta = delta.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    let (scale, source) = if sigma >= 1e-12 * max_delta.max(1.0) {
        (sigma, ScaleSource::Mad)
    } else {
        let n = delta.len() as f64;
        let mean = delta.iter().sum::<f64>() / n;
        let sd = (delta.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n).sqrt();
        if sd >= 1e-12 {
            (sd, ScaleSource::StdDev)
        } else {
            (0.0, ScaleSource::Degenerate)
        }
    };
    let z = match source {
        ScaleSource::Degenerate => vec![0.0; delta.len()],
        _ => delta.iter().map(|d| d / (scale + eps)).collect(),
    };
    Ok(RobustZ {
        z,
        median: m,
        mad,
        sigma,
        scale,
        source,
    })
}

pub fn weight_schedule(z: &[f64], params: &ScheduleParams) -> Vec<f64> {
    z.iter().map(|&v| params.weight(v)).collect()
}

/// Shifts, scores and weights for one contrastive pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftRecord {
    pub delta: Vec<f64>,
    pub median: f64,
    pub mad: f64,
    pub sigma: f64,
    pub z: Vec<f64>,
    pub weights: Vec<f64>,
    pub source: ScaleSource,
}

pub fn weigh_shifts(delta: Vec<f64>, params: &ScheduleParams) -> Result<ShiftRecord> {
    params.validate()?;
    let rz = robust_z(&delta, params.eps)?;
    let weights = weight_schedule(&rz.z, params);
    Ok(ShiftRecord {
        delta,
        median: rz.median,
        mad: rz.mad,
        sigma: rz.sigma,
        z: rz.z,
        weights,
        source: rz.source,
    })
}
