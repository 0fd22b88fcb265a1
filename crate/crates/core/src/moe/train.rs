//! Teacher pre-training: next-token prediction on the synthetic corpus so the
//! gates develop non-uniform expert usage.

use super::config::MoEConfig;
use super::corpus::MarkovCorpus;
use super::model::MoEModel;
use crate::error::Result;
use crate::optim::Adam;
use crate::tensor::Tape;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TeacherConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub corpus_sequences: usize,
    pub seq_len: usize,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig {
            steps: 800,
            batch: 128,
            lr: 3e-3,
            corpus_sequences: 2048,
            seq_len: 64,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TeacherLog {
    /// Held-out next-token loss before training.
    pub initial_loss: f64,
    pub final_loss: f64,
    pub step_losses: Vec<f64>,
}

/// Cosine decay from `lr` to 5% of `lr`.
pub fn cosine_lr(lr: f64, step: usize, steps: usize) -> f64 {
    let frac = step as f64 / steps.max(1) as f64;
    lr * (0.05 + 0.95 * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()))
}

/// (current, next) pairs of every sequence.
pub fn bigram_pairs(seqs: &[Vec<usize>]) -> Vec<(usize, usize)> {
    seqs.iter()
        .flat_map(|s| s.windows(2).map(|w| (w[0], w[1])))
        .collect()
}

/// Mean next-token NLL over `pairs` without pruning or masks.
pub fn pair_loss(model: &MoEModel, pairs: &[(usize, usize)]) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false);
    let ids: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let targets: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    let out = model.forward(&mut tape, &bound, &ids, None)?;
    let loss = tape.nll_rows(out.logits, &targets)?;
    Ok(tape.value(loss).data()[0])
}

/// Random initialisation followed by a short teacher-training run.
pub fn gen_synthetic_model(
    config: &MoEConfig,
    teacher: &TeacherConfig,
) -> Result<(MoEModel, TeacherLog)> {
    let mut model = MoEModel::random(config)?;
    let corpus = MarkovCorpus::new(config.vocab, config.seed);
    let train = bigram_pairs(&corpus.sample(
        teacher.corpus_sequences,
        teacher.seq_len,
        config.seed ^ 0x7472_6169_6e,
    ));
    let held_out = bigram_pairs(&corpus.sample(16, teacher.seq_len, config.seed ^ 0x6865_6c64));
    let initial_loss = pair_loss(&model, &held_out)?;

    let ids = model.param_ids();
    let sizes: Vec<usize> = ids.iter().map(|id| model.param(*id).len()).collect();
    let mut adam = Adam::new(teacher.lr, &sizes);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x6261_7463_68);
    let mut step_losses = Vec::with_capacity(teacher.steps);
    for step in 0..teacher.steps {
        adam.set_lr(cosine_lr(teacher.lr, step, teacher.steps));
        let batch: Vec<(usize, usize)> = (0..teacher.batch)
            .map(|_| train[rng.random_range(0..train.len())])
            .collect();
        let grads = {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, true);
            let xs: Vec<usize> = batch.iter().map(|p| p.0).collect();
            let ys: Vec<usize> = batch.iter().map(|p| p.1).collect();
            let out = model.forward(&mut tape, &bound, &xs, None)?;
            let loss = tape.nll_rows(out.logits, &ys)?;
            step_losses.push(tape.value(loss).data()[0]);
            let mut g = tape.backward(loss)?;
            bound
                .vars()
                .into_iter()
                .map(|v| g.take(v))
                .collect::<Vec<_>>()
        };
        adam.step(&mut model.params_mut(), &grads);
    }
    let final_loss = pair_loss(&model, &held_out)?;
    log::info!("teacher training: held-out loss {initial_loss:.4} -> {final_loss:.4}");
    Ok((
        model,
        TeacherLog {
            initial_loss,
            final_loss,
            step_losses,
        },
    ))
}
