//! Small frozen transformer encoder with one MoE adapter per block.
//!
//! Every block is post-norm: attention, residual, layer norm, then the FFN
//! whose output gets the adapter's contribution added before the second
//! residual and norm. Token states are mean-pooled into a linear head.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::autodiff::{Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::moe::{check_compatible, AdapterConfig, AdapterVars, MoEAdapter, RoutingStats};
use crate::rng::derive_seed;

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub seq_len: usize,
    pub classes: usize,
    pub input_dim: usize,
    pub ffn_width: usize,
    pub frozen_seed: u64,
    /// When set, the classification head is trained and exchanged with the adapters.
    pub train_head: bool,
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("backbone.layers", self.layers),
            ("backbone.width", self.width),
            ("backbone.heads", self.heads),
            ("backbone.seq_len", self.seq_len),
            ("backbone.ffn_width", self.ffn_width),
            ("data.input_dim", self.input_dim),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        if self.classes < 2 {
            return Err(Error::config("backbone.classes", "need at least two classes"));
        }
        if !self.width.is_multiple_of(self.heads) {
            return Err(Error::config(
                "backbone.heads",
                format!("width {} is not divisible by {} heads", self.width, self.heads),
            ));
        }
        Ok(())
    }
}

/// Weights shared read-only by every client.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenBlock {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
}

impl FrozenBlock {
    fn tensors(&self) -> [&Tensor; 16] {
        [
            &self.wq,
            &self.bq,
            &self.wk,
            &self.bk,
            &self.wv,
            &self.bv,
            &self.wo,
            &self.bo,
            &self.ln1_gamma,
            &self.ln1_beta,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
            &self.ln2_gamma,
            &self.ln2_beta,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrozenWeights {
    pub embed: Tensor,
    pub embed_bias: Tensor,
    pub blocks: Vec<FrozenBlock>,
}

/// Backbone plus the per-block adapter slots.
#[derive(Debug, Clone)]
pub struct Backbone {
    cfg: BackboneConfig,
    frozen: Arc<FrozenWeights>,
    pub adapters: Vec<MoEAdapter>,
    head_weight: Tensor,
    head_bias: Tensor,
}

/// Tape handles of every trainable parameter for one forward pass.
#[derive(Debug, Clone)]
pub struct Bindings {
    pub adapters: Vec<AdapterVars>,
    pub head: Option<(Var, Var)>,
}

impl Bindings {
    /// Handles in [`Backbone::parameters`] order.
    pub fn ordered(&self) -> Vec<Var> {
        let mut out: Vec<Var> = self.adapters.iter().flat_map(AdapterVars::ordered).collect();
        if let Some((w, b)) = self.head {
            out.extend([w, b]);
        }
        out
    }
}

#[derive(Debug)]
pub struct ForwardPass {
    /// `batch × classes`.
    pub logits: Var,
    /// Per-layer batch-mean dense routing distribution (`None` in uniform gating).
    pub layer_probs: Vec<Option<Var>>,
    /// Per-layer routing accounting, filled when requested.
    pub stats: Vec<RoutingStats>,
    pub bindings: Bindings,
}

fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let normal = Normal::new(0.0, 1.0 / (rows as f64).sqrt()).expect("valid std");
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| normal.sample(rng)).collect())
        .expect("shape")
}

fn small_bias(n: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let normal = Normal::new(0.0, 0.02).expect("valid std");
    Tensor::new(vec![n], (0..n).map(|_| normal.sample(rng)).collect()).expect("shape")
}

/// Draws the frozen weights and fresh adapters. Both depend only on
/// `cfg.frozen_seed`, so every client building from the same config agrees.
pub fn build_backbone(cfg: &BackboneConfig, adapter: &AdapterConfig) -> Result<Backbone> {
    cfg.validate()?;
    if adapter.dim != cfg.width {
        return Err(Error::config(
            "adapter.dim",
            format!("adapter width {} differs from backbone width {}", adapter.dim, cfg.width),
        ));
    }
    adapter.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.frozen_seed, &[0xF0]));
    let (d, f) = (cfg.width, cfg.ffn_width);
    let embed = random_matrix(cfg.input_dim, d, &mut rng);
    let embed_bias = small_bias(d, &mut rng);
    let blocks = (0..cfg.layers)
        .map(|_| FrozenBlock {
            wq: random_matrix(d, d, &mut rng),
            bq: small_bias(d, &mut rng),
            wk: random_matrix(d, d, &mut rng),
            bk: small_bias(d, &mut rng),
            wv: random_matrix(d, d, &mut rng),
            bv: small_bias(d, &mut rng),
            wo: random_matrix(d, d, &mut rng),
            bo: small_bias(d, &mut rng),
            ln1_gamma: Tensor::new(vec![d], vec![1.0; d]).expect("shape"),
            ln1_beta: Tensor::zeros(vec![d]),
            w1: random_matrix(d, f, &mut rng),
            b1: small_bias(f, &mut rng),
            w2: random_matrix(f, d, &mut rng),
            b2: small_bias(d, &mut rng),
            ln2_gamma: Tensor::new(vec![d], vec![1.0; d]).expect("shape"),
            ln2_beta: Tensor::zeros(vec![d]),
        })
        .collect();
    let mut head_weight = random_matrix(d, cfg.classes, &mut rng);
    let mut head_bias = Tensor::zeros(vec![cfg.classes]);
    head_weight.set_requires_grad(cfg.train_head);
    head_bias.set_requires_grad(cfg.train_head);

    let mut adapter_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.frozen_seed, &[0xADA]));
    let adapters = (0..cfg.layers)
        .map(|_| MoEAdapter::new(adapter, &mut adapter_rng))
        .collect::<Result<Vec<_>>>()?;

    Ok(Backbone {
        cfg: cfg.clone(),
        frozen: Arc::new(FrozenWeights {
            embed,
            embed_bias,
            blocks,
        }),
        adapters,
        head_weight,
        head_bias,
    })
}

impl Backbone {
    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn frozen(&self) -> &FrozenWeights {
        &self.frozen
    }

    pub fn set_k(&mut self, k: usize) -> Result<()> {
        self.adapters.iter_mut().try_for_each(|a| a.set_k(k))
    }

    pub fn num_experts(&self) -> usize {
        self.adapters.first().map_or(0, MoEAdapter::num_experts)
    }

    /// SHA-256 over every frozen tensor (and the head when it is frozen).
    pub fn frozen_fingerprint(&self) -> String {
        let mut h = Sha256::new();
        let mut feed = |t: &Tensor| {
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        };
        feed(&self.frozen.embed);
        feed(&self.frozen.embed_bias);
        for b in &self.frozen.blocks {
            b.tensors().into_iter().for_each(&mut feed);
        }
        if !self.cfg.train_head {
            feed(&self.head_weight);
            feed(&self.head_bias);
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn parameters(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = self.adapters.iter().flat_map(|a| a.parameters()).collect();
        if self.cfg.train_head {
            out.extend([&self.head_weight, &self.head_bias]);
        }
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self
            .adapters
            .iter_mut()
            .flat_map(|a| a.parameters_mut())
            .collect();
        if self.cfg.train_head {
            out.push(&mut self.head_weight);
            out.push(&mut self.head_bias);
        }
        out
    }

    pub fn parameter_names(&self) -> Vec<String> {
        let mut out: Vec<String> = self
            .adapters
            .iter()
            .enumerate()
            .flat_map(|(l, a)| {
                a.parameter_names()
                    .into_iter()
                    .map(move |n| format!("layer{l}.{n}"))
            })
            .collect();
        if self.cfg.train_head {
            out.extend(["head.weight".to_string(), "head.bias".to_string()]);
        }
        out
    }

    pub fn trainable_parameter_count(&self) -> usize {
        self.parameters().iter().map(|t| t.numel()).sum()
    }

    /// Value copies of the exchanged parameters.
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

    pub fn load_parameters(&mut self, params: &[Tensor]) -> Result<()> {
        let names = self.parameter_names();
        check_compatible(&self.parameters(), params, &names)?;
        for (dst, src) in self.parameters_mut().into_iter().zip(params) {
            dst.data_mut().copy_from_slice(src.data());
            dst.zero_grad();
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.parameters_mut().into_iter().for_each(Tensor::zero_grad);
    }

    /// Adds the gradients of one backward pass into the parameters. Parameters
    /// that no gradient reached get an explicit zero gradient.
    pub fn accumulate_gradients(&mut self, bindings: &Bindings, grads: &Gradients) -> Result<()> {
        let vars = bindings.ordered();
        for (p, v) in self.parameters_mut().into_iter().zip(vars) {
            match grads.get(v) {
                Some(g) => p.accumulate_grad(g)?,
                None => {
                    let zeros = vec![0.0; p.numel()];
                    p.accumulate_grad(&zeros)?;
                }
            }
        }
        Ok(())
    }

    fn check_batch(&self, batch: &Tensor) -> Result<(usize, Tensor)> {
        let (seq, din) = (self.cfg.seq_len, self.cfg.input_dim);
        let shape = batch.shape();
        let ok = match shape {
            [b, s, f] => *s == seq && *f == din && *b > 0,
            _ => false,
        };
        if !ok {
            return Err(Error::Dimension {
                op: "backbone_forward",
                left: shape.to_vec(),
                right: vec![0, seq, din],
            });
        }
        if !batch.is_finite() {
            return Err(Error::Input("batch contains non-finite values".into()));
        }
        let b = shape[0];
        Ok((b, batch.clone().reshape(vec![b * seq, din])?))
    }

    /// Records a full forward pass. With `use_adapters = false` the adapters
    /// are skipped entirely, giving the bare frozen model.
    pub fn forward_with(
        &self,
        tape: &mut Tape,
        batch: &Tensor,
        collect_stats: bool,
        use_adapters: bool,
    ) -> Result<ForwardPass> {
        let (_, tokens) = self.check_batch(batch)?;
        let seq = self.cfg.seq_len;
        let adapter_vars: Vec<AdapterVars> = self.adapters.iter().map(|a| a.bind(tape)).collect();
        let head = if self.cfg.train_head {
            Some((tape.leaf(&self.head_weight), tape.leaf(&self.head_bias)))
        } else {
            None
        };

        let x = tape.constant(tokens);
        let we = tape.leaf(&self.frozen.embed);
        let be = tape.leaf(&self.frozen.embed_bias);
        let e = tape.matmul(x, we)?;
        let mut h = tape.add_row(e, be)?;

        let mut layer_probs = Vec::with_capacity(self.cfg.layers);
        let mut stats = Vec::new();
        for (l, blk) in self.frozen.blocks.iter().enumerate() {
            let linear = |tape: &mut Tape, input: Var, w: &Tensor, b: &Tensor| -> Result<Var> {
                let wv = tape.leaf(w);
                let bv = tape.leaf(b);
                let y = tape.matmul(input, wv)?;
                tape.add_row(y, bv)
            };
            let q = linear(tape, h, &blk.wq, &blk.bq)?;
            let k = linear(tape, h, &blk.wk, &blk.bk)?;
            let v = linear(tape, h, &blk.wv, &blk.bv)?;
            let att = tape.attention(q, k, v, seq, self.cfg.heads)?;
            let att = linear(tape, att, &blk.wo, &blk.bo)?;
            let res = tape.add(h, att)?;
            let g1 = tape.leaf(&blk.ln1_gamma);
            let b1 = tape.leaf(&blk.ln1_beta);
            let h1 = tape.layer_norm(res, g1, b1)?;

            let inner = linear(tape, h1, &blk.w1, &blk.b1)?;
            let inner = tape.gelu(inner);
            let ffn = linear(tape, inner, &blk.w2, &blk.b2)?;

            let ffn = if use_adapters {
                let mut layer_stats = RoutingStats::new(self.adapters[l].num_experts());
                let out = self.adapters[l].forward_tape(
                    tape,
                    &adapter_vars[l],
                    h1,
                    ffn,
                    collect_stats.then_some(&mut layer_stats),
                )?;
                if collect_stats {
                    stats.push(layer_stats);
                }
                layer_probs.push(out.mean_probs);
                out.output
            } else {
                ffn
            };
            let res = tape.add(h1, ffn)?;
            let g2 = tape.leaf(&blk.ln2_gamma);
            let b2 = tape.leaf(&blk.ln2_beta);
            h = tape.layer_norm(res, g2, b2)?;
        }
        let pooled = tape.mean_groups(h, seq)?;
        let (hw, hb) = match head {
            Some(pair) => pair,
            None => (tape.leaf(&self.head_weight), tape.leaf(&self.head_bias)),
        };
        let logits = tape.matmul(pooled, hw)?;
        let logits = tape.add_row(logits, hb)?;
        Ok(ForwardPass {
            logits,
            layer_probs,
            stats,
            bindings: Bindings {
                adapters: adapter_vars,
                head,
            },
        })
    }

    /// `batch` is `b × seq × input_dim`.
    pub fn forward(&self, tape: &mut Tape, batch: &Tensor, collect_stats: bool) -> Result<ForwardPass> {
        self.forward_with(tape, batch, collect_stats, true)
    }

    /// Logits only, no gradient bookkeeping kept.
    pub fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let pass = self.forward(&mut tape, batch, false)?;
        Ok(tape.value(pass.logits).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moe::{Activation, GatingMode};
    use rand::Rng;

    fn small() -> (BackboneConfig, AdapterConfig) {
        (
            BackboneConfig {
                layers: 2,
                width: 16,
                heads: 2,
                seq_len: 8,
                classes: 4,
                input_dim: 6,
                ffn_width: 32,
                frozen_seed: 11,
                train_head: false,
            },
            AdapterConfig {
                dim: 16,
                ranks: vec![2; 4],
                k: 2,
                gating: GatingMode::TopKSoftmax,
                activation: Activation::Gelu,
                init_std: 0.02,
            },
        )
    }

    fn batch(b: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![b, 8, 6], (0..b * 48).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn same_seed_builds_identical_frozen_weights() {
        let (c, a) = small();
        let x = build_backbone(&c, &a).unwrap();
        let y = build_backbone(&c, &a).unwrap();
        assert_eq!(x.frozen(), y.frozen());
        assert_eq!(x.frozen_fingerprint(), y.frozen_fingerprint());
        assert_eq!(x.export_parameters(), y.export_parameters());
        let other = build_backbone(&BackboneConfig { frozen_seed: 12, ..c }, &a).unwrap();
        assert_ne!(other.frozen_fingerprint(), x.frozen_fingerprint());
    }

    #[test]
    fn smoke_forward_shape() {
        let (c, a) = small();
        let bb = build_backbone(&c, &a).unwrap();
        let logits = bb.logits(&batch(3, 1)).unwrap();
        assert_eq!(logits.shape(), &[3, 4]);
        assert!(logits.is_finite());
    }

    #[test]
    fn indivisible_heads_rejected() {
        let (c, a) = small();
        let err = build_backbone(&BackboneConfig { heads: 3, ..c }, &a).unwrap_err();
        assert!(matches!(err, Error::Config { ref key, .. } if key == "backbone.heads"));
    }

    #[test]
    fn zero_adapters_match_bare_backbone() {
        let (c, a) = small();
        let bb = build_backbone(&c, &a).unwrap();
        let x = batch(2, 2);
        let mut t1 = Tape::new();
        let with = bb.forward_with(&mut t1, &x, false, true).unwrap();
        let mut t2 = Tape::new();
        let without = bb.forward_with(&mut t2, &x, false, false).unwrap();
        assert!(t1.value(with.logits).max_abs_diff(t2.value(without.logits)) <= 1e-12);
    }

    #[test]
    fn stats_conserve_counts() {
        let (c, a) = small();
        let bb = build_backbone(&c, &a).unwrap();
        let mut tape = Tape::new();
        let pass = bb.forward(&mut tape, &batch(1, 3), true).unwrap();
        assert_eq!(pass.stats.len(), 2);
        for s in &pass.stats {
            assert_eq!(s.counts.iter().sum::<u64>(), 16);
            assert_eq!(s.tokens_seen, 8);
        }
    }

    #[test]
    fn trainable_count_matches_adapter_budget() {
        let (c, a) = small();
        let bb = build_backbone(&c, &a).unwrap();
        let per_layer: usize = a.ranks.iter().map(|r| r * 2 * 16).sum::<usize>() + 4 * 16;
        assert_eq!(bb.trainable_parameter_count(), 2 * per_layer);
        let with_head = build_backbone(&BackboneConfig { train_head: true, ..c }, &a).unwrap();
        assert_eq!(with_head.trainable_parameter_count(), 2 * per_layer + 16 * 4 + 4);
    }

    #[test]
    fn wrong_batch_shape_is_dimension_error() {
        let (c, a) = small();
        let bb = build_backbone(&c, &a).unwrap();
        let bad = Tensor::zeros(vec![2, 7, 6]);
        assert!(matches!(bb.logits(&bad), Err(Error::Dimension { .. })));
    }
}
