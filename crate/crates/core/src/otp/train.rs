//! Masked forward pass and end-to-end router training by distillation from
//! the unmasked model plus a penalty on the summed soft masks.

use super::{
    apply_mask, build_candidate_set, gumbel_sample, one_hot_rows, router_forward, GumbelMode,
    GumbelSampler, RouterSet,
};
use crate::error::{Error, Result};
use crate::moe::{LayerRouting, MoEModel, SlotMasker, SlotWeights};
use crate::optim::Adam;
use crate::tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleMode {
    /// Gumbel-Softmax relaxation.
    Soft,
    /// Straight-through one-hot samples.
    Hard,
    /// Noise-free argmax, used at inference.
    Argmax,
}

/// Masker that asks each layer's router for a prefix mask.
pub struct OtpMasker<'r> {
    routers: &'r RouterSet,
    bound: Option<Vec<[Var; 2]>>,
    mode: SampleMode,
    sampler: Option<&'r mut GumbelSampler>,
    /// Per-layer n × k slot multipliers from the last forward pass.
    pub masks: Vec<Var>,
    /// Slots dropped by the hard decision (argmax of the sample).
    pub pruned_slots: usize,
    pub total_slots: usize,
}

impl<'r> OtpMasker<'r> {
    /// Noise-free hard masks with the routers as constants.
    pub fn inference(routers: &'r RouterSet) -> Self {
        OtpMasker {
            routers,
            bound: None,
            mode: SampleMode::Argmax,
            sampler: None,
            masks: Vec::new(),
            pruned_slots: 0,
            total_slots: 0,
        }
    }

    /// Sampled masks whose router weights are the tape leaves `bound`.
    pub fn training(
        routers: &'r RouterSet,
        bound: Vec<[Var; 2]>,
        mode: SampleMode,
        sampler: &'r mut GumbelSampler,
    ) -> Self {
        OtpMasker {
            routers,
            bound: Some(bound),
            mode,
            sampler: Some(sampler),
            masks: Vec::new(),
            pruned_slots: 0,
            total_slots: 0,
        }
    }

    pub fn mask_ratio(&self) -> f64 {
        if self.total_slots == 0 {
            0.0
        } else {
            self.pruned_slots as f64 / self.total_slots as f64
        }
    }
}

impl SlotMasker for OtpMasker<'_> {
    fn slot_weights(
        &mut self,
        tape: &mut Tape<'_>,
        layer: usize,
        hidden: Var,
        gate_weights: Var,
        routing: &LayerRouting,
    ) -> Result<SlotWeights> {
        let k = routing.top_k;
        let n = routing.tokens();
        let router = &self.routers.layers[layer];
        let [fc1, fc2] = match &self.bound {
            Some(b) => b[layer],
            None => [
                tape.constant(router.fc1.clone()),
                tape.constant(router.fc2.clone()),
            ],
        };
        let logits = router_forward(tape, fc1, fc2, hidden, gate_weights)?;
        let y = match self.mode {
            SampleMode::Argmax => {
                let hard = one_hot_rows(tape.value(logits));
                tape.constant(hard)
            }
            SampleMode::Soft | SampleMode::Hard => {
                let sampler = self.sampler.as_deref_mut().ok_or_else(|| {
                    Error::InvalidArgument("sampling mode needs a Gumbel sampler".into())
                })?;
                let gm = if self.mode == SampleMode::Soft {
                    GumbelMode::Soft
                } else {
                    GumbelMode::Hard
                };
                gumbel_sample(tape, logits, sampler, gm)?
            }
        };
        let yv = tape.value(y);
        // candidate r drops the r lowest-ranked slots
        self.pruned_slots += (0..n)
            .map(|t| crate::tensor::argmax(yv.row(t)))
            .sum::<usize>();
        self.total_slots += n * k;
        let c = tape.constant(build_candidate_set(k)?.matrix());
        let m = apply_mask(tape, y, c)?;
        self.masks.push(m);
        Ok(SlotWeights::Multiply(m))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistillLoss {
    /// `KL(softmax(teacher) ‖ softmax(student))`, mean over positions.
    #[default]
    Kl,
    /// Mean squared logit difference.
    Mse,
}

pub struct LossParts {
    pub total: Var,
    pub distill: Var,
    pub sparsity: Var,
}

/// `L = L_D + λ · mean over (layer, token) of Σ mask`. `teacher` holds
/// probabilities for KL and logits for MSE.
pub fn otp_loss(
    tape: &mut Tape<'_>,
    student: Var,
    teacher: &Tensor,
    masks: &[Var],
    lambda: f64,
    kind: DistillLoss,
) -> Result<LossParts> {
    let distill = match kind {
        DistillLoss::Kl => tape.kl_rows(student, teacher.clone())?,
        DistillLoss::Mse => {
            let t = tape.constant(teacher.clone());
            let d = tape.sub(student, t)?;
            let sq = tape.mul(d, d)?;
            tape.mean(sq)?
        }
    };
    let sparsity = if masks.is_empty() {
        tape.constant(Tensor::from_parts(vec![1], vec![0.0]))
    } else {
        let mut acc = tape.sum(masks[0])?;
        for &m in &masks[1..] {
            let s = tape.sum(m)?;
            acc = tape.add(acc, s)?;
        }
        let per = (masks.len() * tape.value(masks[0]).rows()) as f64;
        tape.scale(acc, 1.0 / per)?
    };
    let penalty = tape.scale(sparsity, lambda)?;
    let total = tape.add(distill, penalty)?;
    Ok(LossParts {
        total,
        distill,
        sparsity,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OtpTrainConfig {
    pub lambda: f64,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub tau_start: f64,
    pub tau_end: f64,
    /// Switch to straight-through hard samples after this fraction of steps.
    pub hard_after: Option<f64>,
    /// Router initialisation scale.
    pub init_std: f64,
    /// Weight on the distillation term during training; sets which KL
    /// increase a pruned slot may cost for a given λ.
    pub distill_weight: f64,
    pub loss: DistillLoss,
    pub seed: u64,
}

impl Default for OtpTrainConfig {
    fn default() -> Self {
        OtpTrainConfig {
            lambda: 1.0,
            steps: 1000,
            batch: 32,
            lr: 1e-3,
            tau_start: 1.0,
            tau_end: 0.1,
            hard_after: None,
            init_std: 0.1,
            distill_weight: 100.0,
            loss: DistillLoss::Kl,
            seed: 0,
        }
    }
}

impl OtpTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        if self.steps == 0 || self.batch == 0 || !(self.lr > 0.0) {
            return Err(Error::Config("steps, batch and lr must be positive".into()));
        }
        if !(self.distill_weight > 0.0) {
            return Err(Error::Config("distill_weight must be positive".into()));
        }
        if !(self.tau_start > 0.0 && self.tau_end > 0.0) {
            return Err(Error::Config("temperatures must be positive".into()));
        }
        Ok(())
    }

    /// Exponential anneal from `tau_start` to `tau_end`.
    pub fn tau_at(&self, step: usize) -> f64 {
        if self.steps <= 1 {
            return self.tau_end;
        }
        let frac = step as f64 / (self.steps - 1) as f64;
        self.tau_start * (self.tau_end / self.tau_start).powf(frac)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub distill: f64,
    pub sparsity: f64,
    pub mask_ratio: f64,
    pub tau: f64,
}

pub struct TrainOutcome {
    /// Routers after the last finite step.
    pub routers: RouterSet,
    pub curve: Vec<CurvePoint>,
    /// Step at which the loss stopped being finite.
    pub diverged_at: Option<usize>,
}

impl TrainOutcome {
    pub fn curve_csv(&self) -> String {
        let mut s = String::from("step,distill,sparsity,mask_ratio,tau\n");
        for p in &self.curve {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                p.step, p.distill, p.sparsity, p.mask_ratio, p.tau
            ));
        }
        s
    }

    /// Mean hard mask ratio over the last `n` recorded steps.
    pub fn final_mask_ratio(&self, n: usize) -> f64 {
        let tail = &self.curve[self.curve.len().saturating_sub(n)..];
        tail.iter().map(|p| p.mask_ratio).sum::<f64>() / tail.len().max(1) as f64
    }
}

/// Trains one router per layer on positions drawn from `tokens`, with the
/// student `model` frozen. `teacher_logits` is vocab × vocab: row t holds
/// the teacher's logits for token id t.
pub fn train_router(
    model: &MoEModel,
    teacher_logits: &Tensor,
    tokens: &[usize],
    cfg: &OtpTrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if tokens.is_empty() {
        return Err(Error::InvalidArgument(
            "router training needs calibration tokens".into(),
        ));
    }
    model.check_ids(tokens)?;
    let mc = &model.config;
    let teacher = match cfg.loss {
        DistillLoss::Kl => teacher_logits.softmax(1)?,
        DistillLoss::Mse => teacher_logits.clone(),
    };
    let mut routers = RouterSet::random(
        mc.num_layers,
        mc.hidden,
        mc.top_k,
        cfg.init_std,
        cfg.seed ^ 0x726f_7574,
    );
    let sizes: Vec<usize> = routers
        .layers
        .iter()
        .flat_map(|r| [r.fc1.len(), r.fc2.len()])
        .collect();
    let mut adam = Adam::new(cfg.lr, &sizes);
    let mut sampler = GumbelSampler::new(cfg.tau_start, cfg.seed ^ 0x6775_6d62)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6261_7463);
    let mut curve = Vec::with_capacity(cfg.steps);
    let mut diverged_at = None;

    for step in 0..cfg.steps {
        sampler.tau = cfg.tau_at(step);
        let hard = cfg
            .hard_after
            .is_some_and(|f| step as f64 >= f * cfg.steps as f64);
        let mode = if hard {
            SampleMode::Hard
        } else {
            SampleMode::Soft
        };
        let ids: Vec<usize> = (0..cfg.batch)
            .map(|_| tokens[rng.random_range(0..tokens.len())])
            .collect();
        let target = gather_rows(&teacher, &ids);

        let result = (|| -> Result<(Vec<Tensor>, CurvePoint)> {
            let mut tape = Tape::new();
            let bound_model = model.bind(&mut tape, false);
            let bound: Vec<[Var; 2]> = routers
                .layers
                .iter()
                .map(|r| [tape.param_ref(&r.fc1), tape.param_ref(&r.fc2)])
                .collect();
            let mut masker = OtpMasker::training(&routers, bound.clone(), mode, &mut sampler);
            let out = model.forward(&mut tape, &bound_model, &ids, Some(&mut masker))?;
            let parts = otp_loss(
                &mut tape,
                out.logits,
                &target,
                &masker.masks,
                cfg.lambda,
                cfg.loss,
            )?;
            let weighted = tape.scale(parts.distill, cfg.distill_weight)?;
            let penalty = tape.scale(parts.sparsity, cfg.lambda)?;
            let objective = tape.add(weighted, penalty)?;
            let loss = tape.value(objective).data()[0];
            if !loss.is_finite() {
                return Err(Error::NonFinite("router loss"));
            }
            let point = CurvePoint {
                step,
                distill: tape.value(parts.distill).data()[0],
                sparsity: tape.value(parts.sparsity).data()[0],
                mask_ratio: masker.mask_ratio(),
                tau: cfg.tau_at(step),
            };
            let mut g = tape.backward(objective)?;
            let grads = bound
                .iter()
                .flat_map(|[a, b]| [g.take(*a), g.take(*b)])
                .collect();
            Ok((grads, point))
        })();

        match result {
            Ok((grads, point)) => {
                if grads.iter().any(|g: &Tensor| !g.is_finite()) {
                    diverged_at = Some(step);
                    break;
                }
                let mut params: Vec<&mut Tensor> = routers
                    .layers
                    .iter_mut()
                    .flat_map(|r| [&mut r.fc1, &mut r.fc2])
                    .collect();
                adam.step(&mut params, &grads);
                curve.push(point);
            }
            Err(Error::NonFinite(_)) => {
                log::warn!("router training diverged at step {step}; keeping last finite routers");
                diverged_at = Some(step);
                break;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(TrainOutcome {
        routers,
        curve,
        diverged_at,
    })
}

fn gather_rows(t: &Tensor, ids: &[usize]) -> Tensor {
    let c = t.cols();
    let mut data = Vec::with_capacity(ids.len() * c);
    for &i in ids {
        data.extend_from_slice(t.row(i));
    }
    Tensor::from_parts(vec![ids.len(), c], data)
}
