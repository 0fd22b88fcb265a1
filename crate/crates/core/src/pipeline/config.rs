//! Run configuration shared by every CLI stage.

use super::Quantizer;
use crate::allocator::CostKind;
use crate::error::{Error, Result};
use crate::moe::{MoEConfig, TeacherConfig};
use crate::otp::OtpTrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

/// Named seeds for every random source.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub calibration: u64,
    pub eval: u64,
    /// Router initialisation and Gumbel noise.
    pub router: u64,
    /// Random baselines (random cost, random pruning).
    pub baseline: u64,
}

impl Seeds {
    pub fn from_base(base: u64) -> Self {
        Seeds {
            calibration: base ^ 0x0b,
            eval: base ^ 0x63,
            router: base,
            baseline: base ^ 0x5eed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: MoEConfig,
    pub teacher: TeacherConfig,
    pub calibration_tokens: usize,
    pub calibration_seq_len: usize,
    pub eval_sequences: usize,
    pub eval_seq_len: usize,
    pub b_avg: f64,
    pub cost_kind: CostKind,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Require a 3-bit and a 2-bit expert in every layer.
    pub coverage: bool,
    /// One budget across all layers instead of one per layer.
    pub global_budget: bool,
    pub quantizer: Quantizer,
    pub group_size: usize,
    /// Width of the non-expert matrices; `None` keeps them at float64.
    pub backbone_bits: Option<u8>,
    pub otp: OtpTrainConfig,
    /// Apply trained routers at evaluation.
    pub otp_enabled: bool,
    pub seeds: Seeds,
    pub sweep_b_avgs: Vec<f64>,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: MoEConfig {
                num_shared_experts: 0,
                ..MoEConfig::default()
            },
            teacher: TeacherConfig::default(),
            calibration_tokens: 2048,
            calibration_seq_len: 64,
            eval_sequences: 1024,
            eval_seq_len: 64,
            b_avg: 2.0,
            cost_kind: CostKind::Pmq,
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
            coverage: true,
            global_budget: false,
            quantizer: Quantizer::Gptq,
            group_size: crate::quant::DEFAULT_GROUP_SIZE,
            backbone_bits: Some(super::BACKBONE_BITS),
            otp: OtpTrainConfig::default(),
            otp_enabled: false,
            seeds: Seeds::from_base(0),
            sweep_b_avgs: vec![1.5, 1.75, 2.0, 2.25, 2.5],
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

/// Pipeline stages in dependency order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Gen,
    Calibrate,
    Allocate,
    Quantize,
    TrainRouter,
    Eval,
}

impl RunConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(s).map_err(|e| Error::Config(format!("bad run config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Sets the model seed and derives every other seed from it.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.model.seed = seed;
        self.seeds = Seeds::from_base(seed);
        self.otp.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let positive = [
            ("teacher.steps", self.teacher.steps),
            ("teacher.batch", self.teacher.batch),
            ("calibration_tokens", self.calibration_tokens),
            ("calibration_seq_len", self.calibration_seq_len),
            ("eval_sequences", self.eval_sequences),
            ("group_size", self.group_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.eval_seq_len < 2 || self.teacher.seq_len < 2 {
            return Err(Error::Config("sequence lengths must be at least 2".into()));
        }
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        for &b in std::iter::once(&self.b_avg).chain(&self.sweep_b_avgs) {
            if !(1.0..=3.0).contains(&b) {
                return Err(Error::Config(format!("b_avg {b} outside [1, 3]")));
            }
        }
        if let Some(b) = self.backbone_bits {
            if !(2..=8).contains(&b) {
                return Err(Error::Config(format!("backbone_bits {b} outside 2..=8")));
            }
        }
        self.otp.validate()?;
        Ok(())
    }

    /// Hash of every setting that `stage` depends on, directly or through
    /// earlier stages.
    pub fn stage_hash(&self, stage: Stage) -> String {
        let mut h = Sha256::new();
        let mut put = |tag: &str, v: serde_json::Value| {
            h.update(tag.as_bytes());
            h.update(v.to_string().as_bytes());
        };
        put("model", serde_json::json!([self.model, self.teacher]));
        if stage >= Stage::Calibrate {
            put(
                "calibration",
                serde_json::json!([
                    self.calibration_tokens,
                    self.calibration_seq_len,
                    self.seeds.calibration
                ]),
            );
        }
        if stage >= Stage::Allocate {
            put(
                "allocate",
                serde_json::json!([
                    self.b_avg,
                    self.cost_kind,
                    self.alpha,
                    self.beta,
                    self.gamma,
                    self.coverage,
                    self.global_budget,
                    self.group_size,
                    self.seeds.baseline
                ]),
            );
        }
        if stage >= Stage::Quantize {
            put(
                "quantize",
                serde_json::json!([self.quantizer, self.backbone_bits]),
            );
        }
        if stage >= Stage::TrainRouter {
            put("router", serde_json::json!([self.otp, self.seeds.router]));
        }
        if stage >= Stage::Eval {
            put(
                "eval",
                serde_json::json!([
                    self.eval_sequences,
                    self.eval_seq_len,
                    self.seeds.eval,
                    self.otp_enabled
                ]),
            );
        }
        format!("{:x}", h.finalize())
    }
}
