//! Toy decoder-only MoE: embedding, blocks of (residual dense MLP, residual
//! routed MoE with an optional shared expert), final norm and output head.
//!
//! There is no attention, so each position's logits depend only on its own
//! token id.

use super::config::MoEConfig;
use super::routing::{LayerRouting, SlotMasker, SlotWeights};
use crate::error::{Error, Result};
use crate::tensor::{topk, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Gated FFN: `(silu(x·w_gate) ⊙ (x·w_up)) · w_down`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertWeights {
    pub w_gate: Tensor,
    pub w_up: Tensor,
    pub w_down: Tensor,
}

impl ExpertWeights {
    pub fn random(hidden: usize, inner: usize, rng: &mut ChaCha8Rng) -> Self {
        let s_in = 1.0 / (hidden as f64).sqrt();
        let s_out = 1.0 / (inner as f64).sqrt();
        ExpertWeights {
            w_gate: Tensor::randn(&[hidden, inner], s_in, rng),
            w_up: Tensor::randn(&[hidden, inner], s_in, rng),
            w_down: Tensor::randn(&[inner, hidden], s_out, rng),
        }
    }

    pub fn zeros(hidden: usize, inner: usize) -> Self {
        ExpertWeights {
            w_gate: Tensor::zeros(&[hidden, inner]),
            w_up: Tensor::zeros(&[hidden, inner]),
            w_down: Tensor::zeros(&[inner, hidden]),
        }
    }

    pub fn matrices(&self) -> [&Tensor; 3] {
        [&self.w_gate, &self.w_up, &self.w_down]
    }

    pub fn matrices_mut(&mut self) -> [&mut Tensor; 3] {
        [&mut self.w_gate, &mut self.w_up, &mut self.w_down]
    }

    pub fn num_params(&self) -> usize {
        self.matrices().iter().map(|m| m.len()).sum()
    }

    /// Evaluates the FFN on the rows of `x` without a tape.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let act = self.inner_activation(x)?;
        act.matmul(&self.w_down)
    }

    /// Input to `w_down` for each row of `x`.
    pub fn inner_activation(&self, x: &Tensor) -> Result<Tensor> {
        let g = x.matmul(&self.w_gate)?;
        let u = x.matmul(&self.w_up)?;
        let data = g
            .data()
            .iter()
            .zip(u.data())
            .map(|(a, b)| a * crate::tensor::sigmoid(*a) * b)
            .collect();
        Tensor::new(g.shape().to_vec(), data)
    }
}

pub const FFN_NAMES: [&str; 3] = ["w_gate", "w_up", "w_down"];

#[derive(Clone, Debug, PartialEq)]
pub struct MoELayer {
    /// Gating matrix, hidden × num_experts.
    pub gate: Tensor,
    pub experts: Vec<ExpertWeights>,
    pub shared: Option<ExpertWeights>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    /// Dense residual MLP standing in for attention.
    pub dense: ExpertWeights,
    pub moe: MoELayer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MoEModel {
    pub config: MoEConfig,
    /// vocab × hidden.
    pub embed: Tensor,
    pub blocks: Vec<Block>,
    /// hidden × vocab.
    pub head: Tensor,
}

/// Identifies one weight matrix of the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamId {
    Embed,
    Head,
    Dense {
        layer: usize,
        w: usize,
    },
    Gate {
        layer: usize,
    },
    Expert {
        layer: usize,
        expert: usize,
        w: usize,
    },
    Shared {
        layer: usize,
        w: usize,
    },
}

impl ParamId {
    pub fn name(&self) -> String {
        match *self {
            ParamId::Embed => "embed".into(),
            ParamId::Head => "head".into(),
            ParamId::Dense { layer, w } => format!("blocks.{layer}.dense.{}", FFN_NAMES[w]),
            ParamId::Gate { layer } => format!("blocks.{layer}.gate"),
            ParamId::Expert { layer, expert, w } => {
                format!("blocks.{layer}.experts.{expert}.{}", FFN_NAMES[w])
            }
            ParamId::Shared { layer, w } => format!("blocks.{layer}.shared.{}", FFN_NAMES[w]),
        }
    }

    pub fn is_routed_expert(&self) -> bool {
        matches!(self, ParamId::Expert { .. })
    }
}

/// Tape handles for every model weight.
pub struct BoundModel {
    pub embed: Var,
    pub head: Var,
    pub blocks: Vec<BoundBlock>,
}

pub struct BoundBlock {
    pub dense: [Var; 3],
    pub gate: Var,
    pub experts: Vec<[Var; 3]>,
    pub shared: Option<[Var; 3]>,
}

impl BoundModel {
    /// Handles in `MoEModel::param_ids` order.
    pub fn vars(&self) -> Vec<Var> {
        let mut v = vec![self.embed];
        for b in &self.blocks {
            v.extend(b.dense);
            v.push(b.gate);
            for e in &b.experts {
                v.extend(e);
            }
            if let Some(s) = b.shared {
                v.extend(s);
            }
        }
        v.push(self.head);
        v
    }
}

/// Result of a batched forward pass.
pub struct ForwardOutput {
    /// tokens × vocab.
    pub logits: Var,
    pub layers: Vec<LayerRouting>,
}

impl MoEModel {
    /// Seeded random initialisation (no training).
    pub fn random(config: &MoEConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (h, f, e) = (config.hidden, config.ffn_inner, config.num_experts);
        let embed = Tensor::randn(&[config.vocab, h], 1.0, &mut rng);
        let blocks = (0..config.num_layers)
            .map(|_| {
                let dense = ExpertWeights::random(h, f, &mut rng);
                let gate = Tensor::randn(&[h, e], 1.0 / (h as f64).sqrt(), &mut rng);
                let experts = (0..e)
                    .map(|_| ExpertWeights::random(h, f, &mut rng))
                    .collect();
                let shared =
                    (config.num_shared_experts == 1).then(|| ExpertWeights::random(h, f, &mut rng));
                Block {
                    dense,
                    moe: MoELayer {
                        gate,
                        experts,
                        shared,
                    },
                }
            })
            .collect();
        let head = Tensor::randn(&[h, config.vocab], 1.0 / (h as f64).sqrt(), &mut rng);
        Ok(MoEModel {
            config: config.clone(),
            embed,
            blocks,
            head,
        })
    }

    /// All-zero weights with the right shapes, for loading.
    pub fn zeros(config: &MoEConfig) -> Result<Self> {
        config.validate()?;
        let (h, f, e) = (config.hidden, config.ffn_inner, config.num_experts);
        let blocks = (0..config.num_layers)
            .map(|_| Block {
                dense: ExpertWeights::zeros(h, f),
                moe: MoELayer {
                    gate: Tensor::zeros(&[h, e]),
                    experts: (0..e).map(|_| ExpertWeights::zeros(h, f)).collect(),
                    shared: (config.num_shared_experts == 1).then(|| ExpertWeights::zeros(h, f)),
                },
            })
            .collect();
        Ok(MoEModel {
            config: config.clone(),
            embed: Tensor::zeros(&[config.vocab, h]),
            blocks,
            head: Tensor::zeros(&[h, config.vocab]),
        })
    }

    /// Every parameter id in a fixed canonical order.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![ParamId::Embed];
        for (layer, b) in self.blocks.iter().enumerate() {
            ids.extend((0..3).map(|w| ParamId::Dense { layer, w }));
            ids.push(ParamId::Gate { layer });
            for expert in 0..b.moe.experts.len() {
                ids.extend((0..3).map(|w| ParamId::Expert { layer, expert, w }));
            }
            if b.moe.shared.is_some() {
                ids.extend((0..3).map(|w| ParamId::Shared { layer, w }));
            }
        }
        ids.push(ParamId::Head);
        ids
    }

    pub fn param(&self, id: ParamId) -> &Tensor {
        match id {
            ParamId::Embed => &self.embed,
            ParamId::Head => &self.head,
            ParamId::Dense { layer, w } => self.blocks[layer].dense.matrices()[w],
            ParamId::Gate { layer } => &self.blocks[layer].moe.gate,
            ParamId::Expert { layer, expert, w } => {
                self.blocks[layer].moe.experts[expert].matrices()[w]
            }
            ParamId::Shared { layer, w } => self.blocks[layer]
                .moe
                .shared
                .as_ref()
                .expect("shared expert")
                .matrices()[w],
        }
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Tensor {
        match id {
            ParamId::Embed => &mut self.embed,
            ParamId::Head => &mut self.head,
            ParamId::Dense { layer, w } => {
                let [a, b, c] = self.blocks[layer].dense.matrices_mut();
                [a, b, c].into_iter().nth(w).unwrap()
            }
            ParamId::Gate { layer } => &mut self.blocks[layer].moe.gate,
            ParamId::Expert { layer, expert, w } => self.blocks[layer].moe.experts[expert]
                .matrices_mut()
                .into_iter()
                .nth(w)
                .unwrap(),
            ParamId::Shared { layer, w } => self.blocks[layer]
                .moe
                .shared
                .as_mut()
                .expect("shared expert")
                .matrices_mut()
                .into_iter()
                .nth(w)
                .unwrap(),
        }
    }

    /// Mutable weights in `param_ids` order.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Tensor> = vec![&mut self.embed];
        for b in &mut self.blocks {
            v.extend(b.dense.matrices_mut());
            v.push(&mut b.moe.gate);
            for e in &mut b.moe.experts {
                v.extend(e.matrices_mut());
            }
            if let Some(s) = b.moe.shared.as_mut() {
                v.extend(s.matrices_mut());
            }
        }
        v.push(&mut self.head);
        v
    }

    pub fn num_params(&self) -> usize {
        self.param_ids()
            .iter()
            .map(|id| self.param(*id).len())
            .sum()
    }

    /// Registers every weight on `tape`, trainable or frozen.
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>, trainable: bool) -> BoundModel {
        let mut leaf = |t: &'a Tensor| {
            if trainable {
                tape.param_ref(t)
            } else {
                tape.constant_ref(t)
            }
        };
        let ffn = |e: &'a ExpertWeights, leaf: &mut dyn FnMut(&'a Tensor) -> Var| {
            [leaf(&e.w_gate), leaf(&e.w_up), leaf(&e.w_down)]
        };
        let embed = leaf(&self.embed);
        let blocks = self
            .blocks
            .iter()
            .map(|b| BoundBlock {
                dense: ffn(&b.dense, &mut leaf),
                gate: leaf(&b.moe.gate),
                experts: b.moe.experts.iter().map(|e| ffn(e, &mut leaf)).collect(),
                shared: b.moe.shared.as_ref().map(|e| ffn(e, &mut leaf)),
            })
            .collect();
        let head = leaf(&self.head);
        BoundModel {
            embed,
            head,
            blocks,
        }
    }

    pub fn check_ids(&self, ids: &[usize]) -> Result<()> {
        if let Some(bad) = ids.iter().find(|&&t| t >= self.config.vocab) {
            return Err(Error::InvalidArgument(format!(
                "token id {bad} out of range for vocab {}",
                self.config.vocab
            )));
        }
        Ok(())
    }

    /// Embedding lookup for a batch of token ids.
    pub fn embed_tokens(
        &self,
        tape: &mut Tape<'_>,
        bound: &BoundModel,
        ids: &[usize],
    ) -> Result<Var> {
        self.check_ids(ids)?;
        tape.gather_rows(bound.embed, ids)
    }

    /// Runs blocks `from..` on hidden states `x`, then the head.
    pub fn forward_from(
        &self,
        tape: &mut Tape<'_>,
        bound: &BoundModel,
        from: usize,
        mut x: Var,
        mut masker: Option<&mut dyn SlotMasker>,
    ) -> Result<ForwardOutput> {
        let mut layers = Vec::with_capacity(self.blocks.len().saturating_sub(from));
        for layer in from..self.blocks.len() {
            let (next, routing) = self.block_forward(
                tape,
                bound,
                layer,
                x,
                masker.as_mut().map(|m| &mut **m as &mut dyn SlotMasker),
            )?;
            x = next;
            layers.push(routing);
        }
        let logits = self.head_forward(tape, bound, x)?;
        Ok(ForwardOutput { logits, layers })
    }

    /// Full forward pass over a batch of independent positions.
    pub fn forward(
        &self,
        tape: &mut Tape<'_>,
        bound: &BoundModel,
        ids: &[usize],
        masker: Option<&mut dyn SlotMasker>,
    ) -> Result<ForwardOutput> {
        let x = self.embed_tokens(tape, bound, ids)?;
        self.forward_from(tape, bound, 0, x, masker)
    }

    pub fn head_forward(&self, tape: &mut Tape<'_>, bound: &BoundModel, x: Var) -> Result<Var> {
        let n = tape.rms_norm_rows(x)?;
        tape.matmul(n, bound.head)
    }

    /// Logits without a caller-managed tape or masks.
    pub fn logits(&self, ids: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let out = self.forward(&mut tape, &bound, ids, None)?;
        Ok(tape.value(out.logits).clone())
    }

    pub fn block_forward(
        &self,
        tape: &mut Tape<'_>,
        bound: &BoundModel,
        layer: usize,
        x: Var,
        masker: Option<&mut dyn SlotMasker>,
    ) -> Result<(Var, LayerRouting)> {
        let bb = &bound.blocks[layer];
        let xn = tape.rms_norm_rows(x)?;
        let dense = ffn_forward(tape, bb.dense, xn)?;
        let h = tape.add(x, dense)?;
        let u = tape.rms_norm_rows(h)?;
        let (moe_out, routing) = self.moe_forward(tape, bound, layer, u, masker)?;
        let y = tape.add(h, moe_out)?;
        Ok((y, routing))
    }

    /// Routed experts plus shared expert on normalised input `u`, without the
    /// residual.
    pub fn moe_forward(
        &self,
        tape: &mut Tape<'_>,
        bound: &BoundModel,
        layer: usize,
        u: Var,
        masker: Option<&mut dyn SlotMasker>,
    ) -> Result<(Var, LayerRouting)> {
        let bb = &bound.blocks[layer];
        let k = self.config.top_k;
        let e = self.config.num_experts;
        let n = tape.value(u).rows();

        let gate_logits = tape.matmul(u, bb.gate)?;
        let scores = tape.softmax_rows(gate_logits)?;
        let score_vals = tape.value(scores).clone();
        let mut indices = Vec::with_capacity(n * k);
        let mut flat = Vec::with_capacity(n * k);
        for r in 0..n {
            let (idx, _) = topk(score_vals.row(r), k)?;
            for &i in &idx {
                flat.push(r * e + i);
            }
            indices.extend(idx);
        }
        let picked = tape.gather_elems(scores, &flat, vec![n, k])?;
        let weights = tape.normalize_rows(picked)?;

        let mut routing = LayerRouting {
            layer,
            top_k: k,
            indices,
            weights: tape.value(weights).data().to_vec(),
            scores: score_vals,
            moe_input: u,
            slot_weights: None,
        };

        let combined = match masker {
            Some(m) => match m.slot_weights(tape, layer, u, weights, &routing)? {
                SlotWeights::Unchanged => weights,
                SlotWeights::Multiply(mask) => tape.mul(weights, mask)?,
                SlotWeights::Replace(w) => w,
            },
            None => weights,
        };
        let combined_frozen = !tape.requires_grad(combined);
        let combined_vals = tape.value(combined).data().to_vec();
        routing.slot_weights = Some(combined_vals.clone());

        let mut out: Option<Var> = None;
        for (expert, ev) in bb.experts.iter().enumerate() {
            let mut rows = Vec::new();
            let mut coef_at = Vec::new();
            for r in 0..n {
                for s in 0..k {
                    let at = r * k + s;
                    if routing.indices[at] != expert {
                        continue;
                    }
                    // a frozen zero multiplier means the expert is pruned
                    if combined_frozen && combined_vals[at] == 0.0 {
                        continue;
                    }
                    rows.push(r);
                    coef_at.push(at);
                }
            }
            if rows.is_empty() {
                continue;
            }
            let xe = tape.gather_rows(u, &rows)?;
            let ye = ffn_forward(tape, *ev, xe)?;
            let coefs = tape.gather_elems(combined, &coef_at, vec![rows.len(), 1])?;
            let scaled = tape.row_scale(ye, coefs)?;
            let spread = tape.scatter_add_rows(scaled, &rows, n)?;
            out = Some(match out {
                Some(acc) => tape.add(acc, spread)?,
                None => spread,
            });
        }
        let routed = match out {
            Some(v) => v,
            None => tape.constant(Tensor::zeros(&[n, self.config.hidden])),
        };
        let total = match bb.shared {
            Some(sh) => {
                let s = ffn_forward(tape, sh, u)?;
                tape.add(routed, s)?
            }
            None => routed,
        };
        Ok((total, routing))
    }
}

pub fn ffn_forward(tape: &mut Tape<'_>, w: [Var; 3], x: Var) -> Result<Var> {
    let g = tape.matmul(x, w[0])?;
    let g = tape.silu(g)?;
    let up = tape.matmul(x, w[1])?;
    let act = tape.mul(g, up)?;
    tape.matmul(act, w[2])
}
