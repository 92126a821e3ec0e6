//! Task loss, the thresholded routing-balance penalty, and their combination.
//!
//! The balance penalty for one layer is `KL(P_l ‖ uniform)` where `P_l` is the
//! batch-mean dense softmax of that layer's routing logits. It only switches
//! on when the most-used expert's share `θ = max P_l` reaches `theta_th`;
//! otherwise it is exactly zero.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerReduction {
    Mean,
    Sum,
}

impl LayerReduction {
    pub fn as_str(self) -> &'static str {
        match self {
            LayerReduction::Mean => "mean",
            LayerReduction::Sum => "sum",
        }
    }
}

impl std::str::FromStr for LayerReduction {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "mean" => Ok(Self::Mean),
            "sum" => Ok(Self::Sum),
            other => Err(format!("expected `mean` or `sum`, got `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AuxLossConfig {
    pub lambda: f64,
    pub theta_th: f64,
    pub layer_reduction: LayerReduction,
}

impl Default for AuxLossConfig {
    fn default() -> Self {
        Self {
            lambda: 1e-4,
            theta_th: 0.3,
            layer_reduction: LayerReduction::Mean,
        }
    }
}

impl AuxLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("aux.lambda", "must be finite and >= 0"));
        }
        if !(self.theta_th > 0.0 && self.theta_th <= 1.0) {
            return Err(Error::config("aux.theta_th", "must lie in (0, 1]"));
        }
        Ok(())
    }
}

/// The global target: every expert equally likely.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetDistribution {
    probs: Vec<f64>,
}

impl TargetDistribution {
    pub fn uniform(experts: usize) -> Self {
        Self {
            probs: vec![1.0 / experts as f64; experts],
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }
}

fn check_distribution(p: &[f64], name: &str) -> Result<()> {
    if let Some(v) = p.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(Error::Input(format!("{name} has invalid entry {v}")));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::Input(format!("{name} sums to {total}, not 1")));
    }
    Ok(())
}

fn kl_terms(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Dimension {
            op: "kl_divergence",
            left: vec![p.len()],
            right: vec![q.len()],
        });
    }
    check_distribution(p, "P_l")?;
    check_distribution(q, "target")?;
    if q.iter().any(|&v| v <= 0.0) {
        return Err(Error::Input("target distribution needs full support".into()));
    }
    Ok(p.iter()
        .zip(q)
        .filter(|(pv, _)| **pv > 0.0)
        .map(|(pv, qv)| pv * (pv / qv).ln())
        .sum())
}

/// `KL(p ‖ q)`. Clamped at zero so rounding never yields a negative divergence.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    kl_terms(p, q).map(|v| v.max(0.0))
}

/// Penalty for one layer's routing distribution; exactly `0.0` below threshold.
pub fn aux_loss_layer(p_l: &[f64], cfg: &AuxLossConfig) -> Result<f64> {
    let target = TargetDistribution::uniform(p_l.len());
    let kl = kl_divergence(p_l, target.probs())?;
    let theta = p_l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(if theta >= cfg.theta_th { kl } else { 0.0 })
}

/// Recorded variant of [`aux_loss_layer`]: `None` when the threshold gate is
/// closed, otherwise the differentiable KL node.
pub fn aux_loss_layer_var(tape: &mut Tape, p_l: Var, cfg: &AuxLossConfig) -> Result<Option<Var>> {
    let probs = tape.value(p_l).data().to_vec();
    let theta = probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if theta < cfg.theta_th {
        return Ok(None);
    }
    let target = TargetDistribution::uniform(probs.len());
    tape.kl_divergence(p_l, target.probs()).map(Some)
}

fn reduce(values: &[f64], reduction: LayerReduction) -> f64 {
    let s: f64 = values.iter().sum();
    match reduction {
        LayerReduction::Sum => s,
        LayerReduction::Mean if values.is_empty() => 0.0,
        LayerReduction::Mean => s / values.len() as f64,
    }
}

/// `task + λ · reduce(per_layer_aux)` on plain numbers.
pub fn total_loss_value(task: f64, per_layer_aux: &[f64], cfg: &AuxLossConfig) -> Result<f64> {
    cfg.validate()?;
    if per_layer_aux.iter().any(|v| *v < 0.0) {
        return Err(Error::Input("auxiliary terms must be non-negative".into()));
    }
    if cfg.lambda == 0.0 {
        return Ok(task);
    }
    Ok(task + cfg.lambda * reduce(per_layer_aux, cfg.layer_reduction))
}

/// Recorded total loss. `per_layer_aux[l]` is `None` for layers whose gate
/// is closed; they still count in the mean.
pub fn total_loss(
    tape: &mut Tape,
    task: Var,
    per_layer_aux: &[Option<Var>],
    cfg: &AuxLossConfig,
) -> Result<Var> {
    cfg.validate()?;
    let active: Vec<Var> = per_layer_aux.iter().flatten().copied().collect();
    if cfg.lambda == 0.0 || active.is_empty() {
        return Ok(task);
    }
    let weight = match cfg.layer_reduction {
        LayerReduction::Sum => cfg.lambda,
        LayerReduction::Mean => cfg.lambda / per_layer_aux.len() as f64,
    };
    let mut acc = task;
    for v in active {
        let scaled = tape.scale(v, weight);
        acc = tape.add(acc, scaled)?;
    }
    Ok(acc)
}
