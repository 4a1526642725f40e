use serde::{Deserialize, Serialize};

pub const MU_MIN: f64 = 0.05;
pub const MU_MAX: f64 = 1.2;

/// Sample weight for a prediction-target pair with IoU `x`:
///
/// ```text
/// f(x) = 1            if x <= mu - 0.1
///        e^(1 - mu)   if mu - 0.1 < x < mu
///        e^(1 - x)    if x >= mu
/// ```
pub fn slide_weight(x: f64, mu: f64) -> f64 {
    if x <= mu - 0.1 {
        1.0
    } else if x < mu {
        (1.0 - mu).exp()
    } else {
        (1.0 - x).exp()
    }
}

/// The adaptive threshold `mu`, tracked as an exponential moving average of
/// matched-pair IoUs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlideState {
    pub mu: f64,
    pub ema_momentum: f64,
    /// Number of IoUs folded into `mu` so far.
    pub sample_count: u64,
}

impl Default for SlideState {
    fn default() -> Self {
        SlideState::new(0.5, 0.05)
    }
}

impl SlideState {
    pub fn new(mu: f64, ema_momentum: f64) -> Self {
        SlideState {
            mu: mu.clamp(MU_MIN, MU_MAX),
            ema_momentum,
            sample_count: 0,
        }
    }

    /// `mu <- (1 - m) * mu + m * mean(ious)`, clamped to `[0.05, 1.2]`.
    /// An empty batch leaves the state unchanged.
    pub fn update(&mut self, ious: &[f64]) {
        if ious.is_empty() {
            return;
        }
        let mean = ious.iter().sum::<f64>() / ious.len() as f64;
        let m = self.ema_momentum;
        self.mu = ((1.0 - m) * self.mu + m * mean).clamp(MU_MIN, MU_MAX);
        self.sample_count += ious.len() as u64;
    }
}

/// Functional form of [`SlideState::update`].
pub fn update_mu(state: &SlideState, matched_ious: &[f64]) -> SlideState {
    let mut next = state.clone();
    next.update(matched_ious);
    next
}
