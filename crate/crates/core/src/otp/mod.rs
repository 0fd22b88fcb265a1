//! Learnable per-token expert pruning. For each MoE layer a small router
//! looks at the token and its top-k routing weights and picks one of the k
//! prefix masks (keep the r highest-weighted experts); a Gumbel-Softmax
//! relaxation makes the choice differentiable during training.

mod prune;
mod train;

pub use prune::{
    inference_with_otp, median_ratio_thresholds, rule_based_prune, run_with_masker,
    run_with_masker_weighted, PruneLedger, RandomPruner, RulePruner,
};
pub use train::{
    otp_loss, train_router, CurvePoint, DistillLoss, OtpMasker, OtpTrainConfig, SampleMode,
    TrainOutcome,
};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

const DELTA_CLIP: f64 = 1e-12;

/// The k prefix masks; row r keeps the first `k − r` ranked experts.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskCandidateSet {
    pub k: usize,
    pub masks: Vec<Vec<f64>>,
}

impl MaskCandidateSet {
    /// `k × k` matrix with the masks as rows.
    pub fn matrix(&self) -> Tensor {
        Tensor::from_parts(vec![self.k, self.k], self.masks.concat())
    }
}

pub fn build_candidate_set(k: usize) -> Result<MaskCandidateSet> {
    if k < 1 {
        return Err(Error::InvalidArgument("candidate set needs k >= 1".into()));
    }
    let masks = (0..k)
        .map(|r| (0..k).map(|s| if s < k - r { 1.0 } else { 0.0 }).collect())
        .collect();
    Ok(MaskCandidateSet { k, masks })
}

/// Two-layer router: `logits = [silu(t·fc1), w] · fc2`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskRouter {
    /// hidden × k.
    pub fc1: Tensor,
    /// 2k × k.
    pub fc2: Tensor,
}

impl MaskRouter {
    pub fn zeros(hidden: usize, k: usize) -> Self {
        MaskRouter {
            fc1: Tensor::zeros(&[hidden, k]),
            fc2: Tensor::zeros(&[2 * k, k]),
        }
    }

    pub fn random(hidden: usize, k: usize, std: f64, rng: &mut ChaCha8Rng) -> Self {
        MaskRouter {
            fc1: Tensor::randn(&[hidden, k], std / (hidden as f64).sqrt(), rng),
            fc2: Tensor::randn(&[2 * k, k], std / ((2 * k) as f64).sqrt(), rng),
        }
    }

    pub fn num_params(&self) -> usize {
        self.fc1.len() + self.fc2.len()
    }

    /// Router logits for a single token without a tape.
    pub fn logits(&self, token: &[f64], weights: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let t = tape.constant(Tensor::new(vec![1, token.len()], token.to_vec())?);
        let w = tape.constant(Tensor::new(vec![1, weights.len()], weights.to_vec())?);
        let (f1, f2) = (tape.constant_ref(&self.fc1), tape.constant_ref(&self.fc2));
        let out = router_forward(&mut tape, f1, f2, t, w)?;
        Ok(tape.value(out).data().to_vec())
    }
}

/// Batched router on the tape: `t` is n × H, `w` is n × k.
pub fn router_forward(tape: &mut Tape<'_>, fc1: Var, fc2: Var, t: Var, w: Var) -> Result<Var> {
    let h = tape.matmul(t, fc1)?;
    let h = tape.silu(h)?;
    let z = tape.concat_cols(&[h, w])?;
    tape.matmul(z, fc2)
}

/// One router per MoE layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RouterSet {
    pub layers: Vec<MaskRouter>,
}

#[derive(Serialize, Deserialize)]
struct RouterJson {
    hidden: usize,
    k: usize,
    fc1: Vec<Vec<f64>>,
    fc2: Vec<Vec<f64>>,
}

impl RouterSet {
    pub fn random(layers: usize, hidden: usize, k: usize, std: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RouterSet {
            layers: (0..layers)
                .map(|_| MaskRouter::random(hidden, k, std, &mut rng))
                .collect(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|r| r.num_params()).sum()
    }

    pub fn to_json(&self) -> Result<String> {
        let (hidden, k) = self
            .layers
            .first()
            .map(|r| (r.fc1.rows(), r.fc1.cols()))
            .unwrap_or((0, 0));
        let j = RouterJson {
            hidden,
            k,
            fc1: self.layers.iter().map(|r| r.fc1.data().to_vec()).collect(),
            fc2: self.layers.iter().map(|r| r.fc2.data().to_vec()).collect(),
        };
        Ok(serde_json::to_string(&j)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let j: RouterJson = serde_json::from_str(s)?;
        if j.fc1.len() != j.fc2.len() {
            return Err(Error::Format("router layer count mismatch".into()));
        }
        let layers = j
            .fc1
            .into_iter()
            .zip(j.fc2)
            .map(|(a, b)| {
                Ok(MaskRouter {
                    fc1: Tensor::new(vec![j.hidden, j.k], a)?,
                    fc2: Tensor::new(vec![2 * j.k, j.k], b)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(RouterSet { layers })
    }
}

/// Temperature plus the RNG behind the Gumbel noise.
pub struct GumbelSampler {
    pub tau: f64,
    rng: ChaCha8Rng,
}

impl GumbelSampler {
    pub fn new(tau: f64, seed: u64) -> Result<Self> {
        if !(tau > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "temperature must be positive, got {tau}"
            )));
        }
        Ok(GumbelSampler {
            tau,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// `g = −log(−log δ)`, `δ ~ U(0, 1)` clipped away from 0 and 1.
    pub fn noise(&mut self, n: usize) -> Vec<f64> {
        (0..n)
            .map(|_| {
                let d: f64 = self.rng.random::<f64>().clamp(DELTA_CLIP, 1.0 - DELTA_CLIP);
                -(-d.ln()).ln()
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GumbelMode {
    Soft,
    /// One-hot forward value, gradient of the soft sample.
    Hard,
}

/// `softmax((logits + g) / τ)` for one row.
pub fn gumbel_softmax(logits: &[f64], noise: &[f64], tau: f64) -> Vec<f64> {
    let z: Vec<f64> = logits
        .iter()
        .zip(noise)
        .map(|(l, g)| (l + g) / tau)
        .collect();
    let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Samples for an n × k logit matrix on the tape.
pub fn gumbel_sample(
    tape: &mut Tape<'_>,
    logits: Var,
    sampler: &mut GumbelSampler,
    mode: GumbelMode,
) -> Result<Var> {
    let shape = tape.value(logits).shape().to_vec();
    let noise = Tensor::new(shape.clone(), sampler.noise(shape.iter().product()))?;
    let g = tape.constant(noise);
    let z = tape.add(logits, g)?;
    let z = tape.scale(z, 1.0 / sampler.tau)?;
    let soft = tape.softmax_rows(z)?;
    match mode {
        GumbelMode::Soft => Ok(soft),
        GumbelMode::Hard => {
            let sv = tape.value(soft).clone();
            let hard = one_hot_rows(&sv);
            // soft − stop_grad(soft) is exactly zero, so the value is one-hot
            let frozen = tape.constant(sv);
            let zero = tape.sub(soft, frozen)?;
            let h = tape.constant(hard);
            tape.add(zero, h)
        }
    }
}

/// Row-wise one-hot of the argmax (lowest index on ties).
pub fn one_hot_rows(x: &Tensor) -> Tensor {
    let (n, k) = (x.rows(), x.cols());
    let mut out = vec![0.0; n * k];
    for r in 0..n {
        out[r * k + crate::tensor::argmax(x.row(r))] = 1.0;
    }
    Tensor::from_parts(vec![n, k], out)
}

/// Soft slot multipliers `M = ŷ · C` (n × k) for experts ranked by weight.
pub fn apply_mask(tape: &mut Tape<'_>, y: Var, candidates: Var) -> Result<Var> {
    tape.matmul(y, candidates)
}
