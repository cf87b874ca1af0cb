use serde::{Deserialize, Serialize};

use super::{forward, DenseModel, LanguageModel, Pass};
use crate::corpus::CorpusSet;
use crate::error::{DiveError, Result};
use crate::rng::DetRng;
use crate::scalar::Scalar;
use crate::tensor::{AdamWConfig, Graph, LrSchedule, OptimizerState};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub schedule: LrSchedule,
    pub adamw: AdamWConfig,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.seq_len < 2 {
            return Err(DiveError::Parameter(format!(
                "training needs batch_size >= 1 and seq_len >= 2, got {} and {}",
                self.batch_size, self.seq_len
            )));
        }
        self.schedule.validate()
    }
}

/// Next-token inputs and targets, `[batch x seq]` each.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LmBatch {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub batch: usize,
    pub seq: usize,
}

impl LmBatch {
    pub fn tokens(&self) -> usize {
        self.batch * self.seq
    }
}

/// Each row picks a stream uniformly, then a window of `seq + 1` bytes at
/// a uniform offset.
pub fn sample_lm_batch(streams: &[&[u8]], batch: usize, seq: usize, rng: &mut DetRng) -> Result<LmBatch> {
    if streams.is_empty() || streams.iter().any(|s| s.len() < seq + 1) {
        return Err(DiveError::Capacity(format!(
            "every training stream must hold at least {} bytes",
            seq + 1
        )));
    }
    let mut inputs = Vec::with_capacity(batch * seq);
    let mut targets = Vec::with_capacity(batch * seq);
    for _ in 0..batch {
        let s = streams[rng.below(streams.len())];
        let off = rng.below(s.len() - seq);
        inputs.extend(s[off..off + seq].iter().map(|&b| b as usize));
        targets.extend(s[off + 1..off + seq + 1].iter().map(|&b| b as usize));
    }
    Ok(LmBatch {
        inputs,
        targets,
        batch,
        seq,
    })
}

/// One forward/backward/AdamW step over the model's trainable parameters.
/// On error the parameters keep their pre-step values.
pub fn train_step<T: Scalar, M: LanguageModel<T> + ?Sized>(
    model: &mut M,
    opt: &mut OptimizerState<T>,
    batch: &LmBatch,
    lr: f64,
    pass: &mut Pass,
) -> Result<f64> {
    let mut g = Graph::new();
    let logits = forward(&*model, &mut g, &batch.inputs, batch.batch, batch.seq, pass)?;
    let loss = g.cross_entropy(logits, &batch.targets)?;
    let value = g.scalar(loss).as_f64();
    g.backward(loss)?;
    let params = model.params_mut();
    params.zero_grad();
    params.absorb_grads(&g)?;
    opt.step(params, lr)?;
    Ok(value)
}

/// Training and held-out losses per step; `val` is sparse.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub train: Vec<f64>,
    pub val: Vec<(usize, f64)>,
}

/// Trains every parameter on a uniform mixture of the corpus train streams.
pub fn train_dense<T: Scalar>(model: &mut DenseModel<T>, corpus: &CorpusSet, cfg: &TrainConfig) -> Result<TrainTrace> {
    cfg.validate()?;
    let mut trace = TrainTrace::default();
    if cfg.steps == 0 {
        return Ok(trace);
    }
    let streams: Vec<&[u8]> = corpus.domains.iter().map(|d| d.train.as_slice()).collect();
    model.params.set_trainable(|_| true);
    let mut opt = OptimizerState::new(cfg.adamw);
    let mut rng = DetRng::new(DetRng::derive_seed(cfg.seed, "batches"));
    for step in 0..cfg.steps {
        let batch = sample_lm_batch(&streams, cfg.batch_size, cfg.seq_len, &mut rng)?;
        let mut pass = Pass::train(DetRng::derive_seed(cfg.seed, &format!("step{step}")));
        let loss = train_step(model, &mut opt, &batch, cfg.schedule.lr_at(step), &mut pass)
            .map_err(|e| e.with_context(format!("dense training step {step}")))?;
        trace.train.push(loss);
    }
    model.params.freeze_all();
    Ok(trace)
}
