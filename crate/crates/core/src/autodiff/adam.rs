use super::tensor::Tensor;
use crate::error::{Error, Result};

/// How weight decay enters the update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightDecayMode {
    /// `wd·θ` is added to the gradient before the moment updates (classic Adam + L2).
    L2,
    /// `θ ← θ − lr·wd·θ` applied outside the adaptive step (AdamW).
    Decoupled,
}

impl WeightDecayMode {
    pub fn as_str(self) -> &'static str {
        match self {
            WeightDecayMode::L2 => "l2",
            WeightDecayMode::Decoupled => "decoupled",
        }
    }
}

impl std::str::FromStr for WeightDecayMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "l2" => Ok(Self::L2),
            "decoupled" => Ok(Self::Decoupled),
            other => Err(format!("expected `l2` or `decoupled`, got `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub decay_mode: WeightDecayMode,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            decay_mode: WeightDecayMode::L2,
        }
    }
}

/// First and second moment estimates, one buffer pair per parameter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn reset(&mut self) {
        *self = Self::default();
    }
}

/// One Adam update over `params`, consuming their gradients.
pub fn adam_step(params: &mut [&mut Tensor], cfg: &AdamConfig, state: &mut AdamState) -> Result<()> {
    if state.first.is_empty() {
        state.first = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        state.second = state.first.clone();
    }
    if state.first.len() != params.len()
        || state.first.iter().zip(params.iter()).any(|(m, p)| m.len() != p.numel())
    {
        return Err(Error::Usage(
            "optimizer state does not match the parameter list".into(),
        ));
    }
    if let Some(i) = params.iter().position(|p| p.grad().is_none()) {
        return Err(Error::Usage(format!("parameter {i} has no gradient")));
    }

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let grad = p.grad().expect("checked above").to_vec();
        let (m, v) = (&mut state.first[i], &mut state.second[i]);
        let values = p.data_mut();
        for j in 0..values.len() {
            let mut g = grad[j];
            if cfg.decay_mode == WeightDecayMode::L2 {
                g += cfg.weight_decay * values[j];
            }
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            if cfg.decay_mode == WeightDecayMode::Decoupled {
                values[j] -= cfg.lr * cfg.weight_decay * values[j];
            }
            values[j] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
