//! Interacting multiple model filter over the per-model EKFs.

use super::kalman::{
    kf_predict, kf_update_with_info, wrap_angle, KalmanState, MeasurementNoise, ProcessNoise, StateMatrix,
    StateVector,
};
use super::BaselineError;
use crate::geometry::Anchor;
use crate::motion::MotionModelKind;

/// Default probability of staying in the same mode between frames.
pub const DEFAULT_SELF_TRANSITION: f64 = 0.95;

#[derive(Debug, Clone, PartialEq)]
pub struct ImmState {
    pub filters: Vec<KalmanState>,
    /// Mode probabilities μ.
    pub probabilities: Vec<f64>,
    /// Row-stochastic Π, `transition[i][j] = P(mode j | mode i)`.
    pub transition: Vec<Vec<f64>>,
}

/// Flags raised during one IMM cycle.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ImmStepInfo {
    /// Every model likelihood was non-finite; μ was reset to uniform.
    pub uniform_fallback: bool,
}

/// `self_prob` on the diagonal, the remainder spread uniformly.
pub fn default_transition(m: usize, self_prob: f64) -> Vec<Vec<f64>> {
    if m == 1 {
        return vec![vec![1.0]];
    }
    let off = (1.0 - self_prob) / (m - 1) as f64;
    (0..m).map(|i| (0..m).map(|j| if i == j { self_prob } else { off }).collect()).collect()
}

/// Mean of states under `weights`, averaging headings as offsets from
/// `reference` so the ±π seam does not bias the result.
fn weighted_mean(states: &[&StateVector], weights: &[f64], reference: f64) -> StateVector {
    let mut out = StateVector::zeros();
    let mut dth = 0.0;
    for (s, &w) in states.iter().zip(weights) {
        out += *s * w;
        dth += w * wrap_angle(s[2] - reference);
    }
    out[2] = if dth == 0.0 { reference } else { wrap_angle(reference + dth) };
    out
}

fn spread(s: &StateVector, mean: &StateVector) -> StateVector {
    let mut d = s - mean;
    d[2] = wrap_angle(d[2]);
    d
}

impl ImmState {
    pub fn new(filters: Vec<KalmanState>, probabilities: Vec<f64>, transition: Vec<Vec<f64>>) -> Result<Self, BaselineError> {
        let s = Self { filters, probabilities, transition };
        s.validate()?;
        Ok(s)
    }

    /// One filter per model started from the same observation, uniform μ.
    pub fn from_anchor(
        models: &[MotionModelKind],
        obs: &Anchor,
        initial_std: [f64; 6],
        self_prob: f64,
    ) -> Result<Self, BaselineError> {
        let m = models.len();
        let filters = models.iter().map(|&k| KalmanState::from_anchor(k, obs, initial_std)).collect();
        Self::new(filters, vec![1.0 / m as f64; m], default_transition(m, self_prob))
    }

    pub fn validate(&self) -> Result<(), BaselineError> {
        let m = self.filters.len();
        if m == 0 || self.probabilities.len() != m || self.transition.len() != m {
            return Err(BaselineError::Contract("IMM sizes disagree".into()));
        }
        for row in &self.transition {
            if row.len() != m || row.iter().any(|p| !(*p >= 0.0)) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
                return Err(BaselineError::Contract(format!("transition row {row:?} is not stochastic")));
            }
        }
        if self.probabilities.iter().any(|p| !(*p >= 0.0)) || (self.probabilities.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(BaselineError::Contract(format!("mode probabilities {:?}", self.probabilities)));
        }
        Ok(())
    }

    /// Moment-matched combined state.
    pub fn estimate(&self) -> KalmanState {
        let best = self.most_likely();
        let means: Vec<&StateVector> = self.filters.iter().map(|f| &f.mean).collect();
        let mean = weighted_mean(&means, &self.probabilities, self.filters[best].mean[2]);
        let mut cov = StateMatrix::zeros();
        for (f, &w) in self.filters.iter().zip(&self.probabilities) {
            let d = spread(&f.mean, &mean);
            cov += (f.covariance + d * d.transpose()) * w;
        }
        KalmanState { mean, covariance: (cov + cov.transpose()) * 0.5, kind: self.filters[best].kind }
    }

    pub fn most_likely(&self) -> usize {
        let p = &self.probabilities;
        (0..p.len()).fold(0, |b, i| if p[i] > p[b] { i } else { b })
    }
}

/// Mixed initial conditions per model and the predicted mode probabilities.
fn mix(s: &ImmState) -> Result<(Vec<f64>, Vec<KalmanState>), BaselineError> {
    s.validate()?;
    let m = s.filters.len();
    let pi = &s.transition;
    let mu = &s.probabilities;

    let mut predicted_mode = vec![0.0; m];
    let mut mixed = Vec::with_capacity(m);
    for j in 0..m {
        let c: f64 = (0..m).map(|i| pi[i][j] * mu[i]).sum();
        predicted_mode[j] = c;
        if !(c > 0.0) {
            mixed.push(s.filters[j].clone());
            continue;
        }
        let w: Vec<f64> = (0..m).map(|i| pi[i][j] * mu[i] / c).collect();
        let means: Vec<&StateVector> = s.filters.iter().map(|f| &f.mean).collect();
        let mean = weighted_mean(&means, &w, s.filters[j].mean[2]);
        let mut cov = StateMatrix::zeros();
        for (f, &wi) in s.filters.iter().zip(&w) {
            let d = spread(&f.mean, &mean);
            cov += (f.covariance + d * d.transpose()) * wi;
        }
        mixed.push(KalmanState { mean, covariance: (cov + cov.transpose()) * 0.5, kind: s.filters[j].kind });
    }

    Ok((predicted_mode, mixed))
}

/// Moment-matched one-step prediction without a measurement.
pub fn imm_predict(s: &ImmState, dt: f64, process: &ProcessNoise) -> Result<KalmanState, BaselineError> {
    let (predicted_mode, mixed) = mix(s)?;
    let filters = mixed.iter().map(|f| kf_predict(f, dt, process)).collect::<Result<Vec<_>, _>>()?;
    let predicted = ImmState { filters, probabilities: predicted_mode, transition: s.transition.clone() };
    Ok(predicted.estimate())
}

/// Mixing, per-model predict/update, mode-probability update.
pub fn imm_step(
    s: &ImmState,
    dt: f64,
    obs: &Anchor,
    process: &ProcessNoise,
    measurement: &MeasurementNoise,
) -> Result<(ImmState, ImmStepInfo), BaselineError> {
    let (predicted_mode, mixed) = mix(s)?;
    let m = s.filters.len();
    let mut filters = Vec::with_capacity(m);
    let mut log_post = vec![f64::NEG_INFINITY; m];
    for j in 0..m {
        let pred = kf_predict(&mixed[j], dt, process)?;
        let (upd, info) = kf_update_with_info(&pred, obs, measurement)?;
        log_post[j] = predicted_mode[j].ln() + info.log_likelihood;
        filters.push(upd);
    }

    let top = log_post.iter().copied().filter(|v| v.is_finite()).fold(f64::NEG_INFINITY, f64::max);
    let mut info = ImmStepInfo::default();
    let probabilities = if top.is_finite() {
        let e: Vec<f64> = log_post.iter().map(|&l| if l.is_finite() { (l - top).exp() } else { 0.0 }).collect();
        let z: f64 = e.iter().sum();
        e.iter().map(|v| v / z).collect()
    } else {
        info.uniform_fallback = true;
        vec![1.0 / m as f64; m]
    };
    let next = ImmState { filters, probabilities, transition: s.transition.clone() };
    Ok((next, info))
}
