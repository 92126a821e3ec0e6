//! Sparse mixture-of-experts adapter.
//!
//! Each expert is a two-layer bottleneck `E2 · act(E1 · x)` mapping `d → d`.
//! A linear router scores the experts per token, the top `k` scores are
//! renormalized with a softmax, and the adapter adds the gated sum of expert
//! outputs to the frozen layer's output.
//!
//! [`MoEAdapter::from_lora`] splits a low-rank pair `(A, B)` into experts so
//! that, with every gate fixed at one, the adapter reproduces `B·A·x`.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{softmax, top_k_indices, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Linear,
    Gelu,
}

impl Activation {
    pub fn as_str(self) -> &'static str {
        match self {
            Activation::Linear => "linear",
            Activation::Gelu => "gelu",
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "linear" => Ok(Self::Linear),
            "gelu" => Ok(Self::Gelu),
            other => Err(format!("expected `linear` or `gelu`, got `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GatingMode {
    /// Softmax over the `k` highest router logits, zero elsewhere.
    TopKSoftmax,
    /// Every expert active with weight exactly one (the low-rank special case).
    UniformOne,
}

impl GatingMode {
    pub fn as_str(self) -> &'static str {
        match self {
            GatingMode::TopKSoftmax => "topk_softmax",
            GatingMode::UniformOne => "uniform_one",
        }
    }
}

impl std::str::FromStr for GatingMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "topk_softmax" => Ok(Self::TopKSoftmax),
            "uniform_one" => Ok(Self::UniformOne),
            other => Err(format!("expected `topk_softmax` or `uniform_one`, got `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertNetwork {
    /// Down-projection, `r × d`.
    pub e1: Tensor,
    /// Up-projection, `d × r`.
    pub e2: Tensor,
    pub activation: Activation,
}

impl ExpertNetwork {
    pub fn rank(&self) -> usize {
        self.e1.shape()[0]
    }

    /// `E2 · act(E1 · x)` for a single vector.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let (r, d) = self.e1.dims2();
        let mut h: Vec<f64> = (0..r)
            .map(|i| self.e1.row(i).iter().zip(x).map(|(a, b)| a * b).sum())
            .collect();
        if self.activation == Activation::Gelu {
            let mut tape = Tape::new();
            let v = tape.constant(Tensor::new(vec![r], h).expect("rank > 0"));
            let g = tape.gelu(v);
            h = tape.value(g).data().to_vec();
        }
        (0..d)
            .map(|i| self.e2.row(i).iter().zip(&h).map(|(a, b)| a * b).sum())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Router {
    /// Routing matrix, `M × d`.
    pub weight: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterConfig {
    pub dim: usize,
    /// Intermediate rank of each expert; its length is the expert count.
    pub ranks: Vec<usize>,
    pub k: usize,
    pub gating: GatingMode,
    pub activation: Activation,
    pub init_std: f64,
}

impl AdapterConfig {
    pub fn experts(&self) -> usize {
        self.ranks.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::config("backbone.width", "must be positive"));
        }
        if self.ranks.is_empty() {
            return Err(Error::config("adapter.experts", "must be positive"));
        }
        if self.ranks.contains(&0) {
            return Err(Error::config("adapter.expert_rank", "ranks must be positive"));
        }
        if self.k == 0 || self.k > self.ranks.len() {
            return Err(Error::config(
                "sparsity.k",
                format!("k = {} outside [1, {}]", self.k, self.ranks.len()),
            ));
        }
        if !(self.init_std >= 0.0 && self.init_std.is_finite()) {
            return Err(Error::config("adapter.init_std", "must be finite and >= 0"));
        }
        Ok(())
    }

    /// Trainable scalars in the expert networks: `Σ_m r_m · 2d`.
    pub fn expert_parameter_count(&self) -> usize {
        self.ranks.iter().map(|r| r * 2 * self.dim).sum()
    }

    /// Expert parameters plus the `M × d` router.
    pub fn parameter_count(&self) -> usize {
        self.expert_parameter_count() + self.experts() * self.dim
    }
}

/// Per-expert routing accounting for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingStats {
    /// Times each expert was in a token's active set.
    pub counts: Vec<u64>,
    prob_sums: Vec<f64>,
    pub tokens_seen: u64,
}

impl RoutingStats {
    pub fn new(experts: usize) -> Self {
        Self {
            counts: vec![0; experts],
            prob_sums: vec![0.0; experts],
            tokens_seen: 0,
        }
    }

    pub fn experts(&self) -> usize {
        self.counts.len()
    }

    /// Token-averaged dense routing distribution; zeros before any token.
    pub fn mean_probs(&self) -> Vec<f64> {
        if self.tokens_seen == 0 {
            return vec![0.0; self.counts.len()];
        }
        self.prob_sums
            .iter()
            .map(|s| s / self.tokens_seen as f64)
            .collect()
    }

    pub fn merge(&mut self, other: &RoutingStats) {
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        self.prob_sums
            .iter_mut()
            .zip(&other.prob_sums)
            .for_each(|(a, b)| *a += b);
        self.tokens_seen += other.tokens_seen;
    }
}

/// Routing weights for one token.
#[derive(Debug, Clone, PartialEq)]
pub struct Routing {
    pub weights: Vec<f64>,
    pub selected: Vec<usize>,
}

/// Tape handles for one adapter's parameters, in [`MoEAdapter::parameters`] order.
#[derive(Debug, Clone)]
pub struct AdapterVars {
    pub e1: Vec<Var>,
    pub e2: Vec<Var>,
    pub router: Var,
}

impl AdapterVars {
    pub fn ordered(&self) -> Vec<Var> {
        let mut out: Vec<Var> = self
            .e1
            .iter()
            .zip(&self.e2)
            .flat_map(|(a, b)| [*a, *b])
            .collect();
        out.push(self.router);
        out
    }
}

/// Result of a recorded adapter pass.
#[derive(Debug, Clone, Copy)]
pub struct AdapterOutput {
    /// `backbone_out + Σ_m R(x)_m · E_m(x)`.
    pub output: Var,
    /// Batch-mean dense routing distribution (`1 × M`), present in top-k mode.
    pub mean_probs: Option<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoEAdapter {
    pub experts: Vec<ExpertNetwork>,
    pub router: Router,
    k: usize,
    pub gating: GatingMode,
}

impl MoEAdapter {
    /// Fresh adapter: `E1 ~ N(0, init_std²)`, `E2 = 0`, router `= 0`, so the
    /// adapter initially contributes nothing.
    pub fn new<R: Rng + ?Sized>(cfg: &AdapterConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let normal = Normal::new(0.0, cfg.init_std).map_err(|e| Error::config("adapter.init_std", e.to_string()))?;
        let experts = cfg
            .ranks
            .iter()
            .map(|&r| {
                let e1 = (0..r * d).map(|_| normal.sample(rng)).collect();
                ExpertNetwork {
                    e1: Tensor::new(vec![r, d], e1).expect("shape").into_param(),
                    e2: Tensor::zeros(vec![d, r]).into_param(),
                    activation: cfg.activation,
                }
            })
            .collect();
        Ok(Self {
            experts,
            router: Router {
                weight: Tensor::zeros(vec![cfg.experts(), d]).into_param(),
            },
            k: cfg.k,
            gating: cfg.gating,
        })
    }

    /// Splits `A (r×d)` by rows and `B (d×r)` by columns into linear experts
    /// with the given ranks, gated uniformly with weight one.
    pub fn from_lora(a: &Tensor, b: &Tensor, ranks: &[usize]) -> Result<Self> {
        let (r, d) = a.dims2();
        if b.dims2() != (d, r) {
            return Err(Error::Dimension {
                op: "from_lora",
                left: a.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        if ranks.is_empty() || ranks.contains(&0) || ranks.iter().sum::<usize>() != r {
            return Err(Error::config(
                "adapter.expert_rank",
                format!("ranks {ranks:?} must be positive and sum to {r}"),
            ));
        }
        if r > d {
            return Err(Error::config("adapter.expert_rank", format!("rank {r} exceeds width {d}")));
        }
        let mut offset = 0;
        let experts = ranks
            .iter()
            .map(|&rm| {
                let e1 = a.data()[offset * d..(offset + rm) * d].to_vec();
                let e2 = (0..d)
                    .flat_map(|i| b.row(i)[offset..offset + rm].to_vec())
                    .collect();
                offset += rm;
                ExpertNetwork {
                    e1: Tensor::new(vec![rm, d], e1).expect("shape").into_param(),
                    e2: Tensor::new(vec![d, rm], e2).expect("shape").into_param(),
                    activation: Activation::Linear,
                }
            })
            .collect();
        Ok(Self {
            experts,
            router: Router {
                weight: Tensor::zeros(vec![ranks.len(), d]).into_param(),
            },
            k: ranks.len(),
            gating: GatingMode::UniformOne,
        })
    }

    pub fn dim(&self) -> usize {
        self.router.weight.dims2().1
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn set_k(&mut self, k: usize) -> Result<()> {
        if k == 0 || k > self.experts.len() {
            return Err(Error::config(
                "sparsity.k",
                format!("k = {k} outside [1, {}]", self.experts.len()),
            ));
        }
        self.k = k;
        Ok(())
    }

    pub fn ranks(&self) -> Vec<usize> {
        self.experts.iter().map(ExpertNetwork::rank).collect()
    }

    /// Router logits `W^R · x`.
    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        let (m, d) = self.router.weight.dims2();
        if x.len() != d {
            return Err(Error::Dimension {
                op: "route",
                left: vec![m, d],
                right: vec![x.len()],
            });
        }
        Ok((0..m)
            .map(|i| self.router.weight.row(i).iter().zip(x).map(|(a, b)| a * b).sum())
            .collect())
    }

    /// Top-k softmax routing of a single token.
    pub fn route(&self, x: &[f64]) -> Result<Routing> {
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("token has non-finite entries".into()));
        }
        let logits = self.logits(x)?;
        let m = logits.len();
        match self.gating {
            GatingMode::UniformOne => Ok(Routing {
                weights: vec![1.0; m],
                selected: (0..m).collect(),
            }),
            GatingMode::TopKSoftmax => {
                let selected = top_k_indices(&logits, self.k);
                let picked: Vec<f64> = selected.iter().map(|&j| logits[j]).collect();
                let mut weights = vec![0.0; m];
                for (&j, w) in selected.iter().zip(softmax(&picked)) {
                    weights[j] = w;
                }
                Ok(Routing { weights, selected })
            }
        }
    }

    /// `backbone_out + Σ_m R(x)_m · E_m(x)` for a single token.
    pub fn forward_vec(&self, backbone_out: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        let d = self.dim();
        if backbone_out.len() != d || x.len() != d {
            return Err(Error::Dimension {
                op: "adapter_forward",
                left: vec![backbone_out.len()],
                right: vec![x.len()],
            });
        }
        let routing = self.route(x)?;
        let mut out = backbone_out.to_vec();
        for &m in &routing.selected {
            let w = routing.weights[m];
            for (o, y) in out.iter_mut().zip(self.experts[m].apply(x)) {
                *o += w * y;
            }
        }
        Ok(out)
    }

    pub fn bind(&self, tape: &mut Tape) -> AdapterVars {
        let mut e1 = Vec::with_capacity(self.experts.len());
        let mut e2 = Vec::with_capacity(self.experts.len());
        for ex in &self.experts {
            e1.push(tape.leaf(&ex.e1));
            e2.push(tape.leaf(&ex.e2));
        }
        AdapterVars {
            e1,
            e2,
            router: tape.leaf(&self.router.weight),
        }
    }

    /// Recorded adapter pass over a batch of tokens `x (N×d)`, added to
    /// `backbone_out (N×d)`. Updates `stats` when given.
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        vars: &AdapterVars,
        x: Var,
        backbone_out: Var,
        stats: Option<&mut RoutingStats>,
    ) -> Result<AdapterOutput> {
        let xs = tape.value(x);
        let (n, d) = xs.dims2();
        if d != self.dim() || tape.value(backbone_out).dims2() != (n, d) {
            return Err(Error::Dimension {
                op: "adapter_forward",
                left: xs.shape().to_vec(),
                right: tape.value(backbone_out).shape().to_vec(),
            });
        }
        let m = self.experts.len();
        let router_t = tape.transpose(vars.router);
        let logits = tape.matmul(x, router_t)?;
        let dense = tape.softmax(logits)?;
        let mean_probs = tape.mean_groups(dense, n)?;

        if let Some(stats) = stats {
            let lv = tape.value(logits);
            let dv = tape.value(dense);
            for t in 0..n {
                match self.gating {
                    GatingMode::TopKSoftmax => {
                        for j in top_k_indices(lv.row(t), self.k) {
                            stats.counts[j] += 1;
                        }
                    }
                    GatingMode::UniformOne => stats.counts.iter_mut().for_each(|c| *c += 1),
                }
                stats.prob_sums.iter_mut().zip(dv.row(t)).for_each(|(a, b)| *a += b);
            }
            stats.tokens_seen += n as u64;
        }

        let gates = match self.gating {
            GatingMode::TopKSoftmax => Some(tape.top_k_softmax(logits, self.k)?),
            GatingMode::UniformOne => None,
        };
        let mut acc = backbone_out;
        for e in 0..m {
            let gate = match gates {
                Some(g) => {
                    let col = tape.column(g, e)?;
                    if tape.value(col).data().iter().all(|v| *v == 0.0) {
                        // No token routed here: contributes nothing, receives no gradient.
                        continue;
                    }
                    Some(col)
                }
                None => None,
            };
            let e1t = tape.transpose(vars.e1[e]);
            let mut h = tape.matmul(x, e1t)?;
            if self.experts[e].activation == Activation::Gelu {
                h = tape.gelu(h);
            }
            let e2t = tape.transpose(vars.e2[e]);
            let mut y = tape.matmul(h, e2t)?;
            if let Some(g) = gate {
                y = tape.scale_rows(y, g)?;
            }
            acc = tape.add(acc, y)?;
        }
        Ok(AdapterOutput {
            output: acc,
            mean_probs: match self.gating {
                GatingMode::TopKSoftmax => Some(mean_probs),
                GatingMode::UniformOne => None,
            },
        })
    }

    /// Parameters in exchange order: per expert `E1` then `E2`, router last.
    pub fn parameters(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = self.experts.iter().flat_map(|e| [&e.e1, &e.e2]).collect();
        out.push(&self.router.weight);
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self
            .experts
            .iter_mut()
            .flat_map(|e| [&mut e.e1, &mut e.e2])
            .collect();
        out.push(&mut self.router.weight);
        out
    }

    pub fn parameter_names(&self) -> Vec<String> {
        let mut out: Vec<String> = (0..self.experts.len())
            .flat_map(|m| [format!("expert{m}.e1"), format!("expert{m}.e2")])
            .collect();
        out.push("router".into());
        out
    }

    /// Value copies of every parameter, gradients dropped.
    pub fn export_parameters(&self) -> Vec<Tensor> {
        self.parameters()
            .into_iter()
            .map(|t| {
                let mut t = t.clone();
                t.zero_grad();
                t
            })
            .collect()
    }

    /// Overwrites parameter values; every shape must match exactly.
    pub fn load_parameters(&mut self, params: &[Tensor]) -> Result<()> {
        let names = self.parameter_names();
        check_compatible(&self.parameters(), params, &names)?;
        for (dst, src) in self.parameters_mut().into_iter().zip(params) {
            dst.data_mut().copy_from_slice(src.data());
            dst.zero_grad();
        }
        Ok(())
    }
}

pub(crate) fn check_compatible(expected: &[&Tensor], got: &[Tensor], names: &[String]) -> Result<()> {
    if expected.len() != got.len() {
        return Err(Error::Compatibility {
            location: "parameter list".into(),
            message: format!("expected {} tensors, got {}", expected.len(), got.len()),
        });
    }
    for (i, (e, g)) in expected.iter().zip(got).enumerate() {
        if e.shape() != g.shape() {
            return Err(Error::Compatibility {
                location: format!("position {i} ({})", names[i]),
                message: format!("expected shape {:?}, got {:?}", e.shape(), g.shape()),
            });
        }
    }
    Ok(())
}
