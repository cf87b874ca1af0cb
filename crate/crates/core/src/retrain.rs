//! Two-stage retraining of a reconstructed MoE.
//!
//! Stage one trains only the routers with every expert active under a
//! temperature softmax. Stage two switches to top-k routing and trains
//! low-rank adapters on the expert projections, the norm gains and
//! (by default) the routers. Each stage runs under a [`FreezeLedger`] that is
//! checked bitwise against the parameters afterwards.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::CorpusSet;
use crate::error::{DiveError, Result};
use crate::model::{forward, is_attention_param, is_norm_param, sample_lm_batch, train_step, LanguageModel, LmBatch, LoraSpec, Pass};
use crate::moe::{MoeModel, Routing};
use crate::params::ParamStore;
use crate::rng::DetRng;
use crate::scalar::Scalar;
use crate::tensor::{AdamWConfig, Graph, LrSchedule, OptimizerState, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    DenseRouter,
    SparseExpert,
}

impl Stage {
    pub fn tag(&self) -> &'static str {
        match self {
            Stage::DenseRouter => "routers",
            Stage::SparseExpert => "sparse",
        }
    }
}

/// The parameters a stage may change; everything else is frozen.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FreezeLedger {
    pub stage: Stage,
    pub trainable: BTreeSet<String>,
}

pub fn is_lora_param(name: &str) -> bool {
    name.ends_with(".lora_a") || name.ends_with(".lora_b")
}

impl FreezeLedger {
    pub fn stage1<T: Scalar>(params: &ParamStore<T>) -> Self {
        Self {
            stage: Stage::DenseRouter,
            trainable: params.names().filter(|n| MoeModel::<T>::is_router(n)).map(String::from).collect(),
        }
    }

    pub fn stage2<T: Scalar>(params: &ParamStore<T>, include_routers: bool, include_mha: bool) -> Self {
        let trainable = params
            .names()
            .filter(|n| {
                is_lora_param(n)
                    || is_norm_param(n)
                    || (include_routers && MoeModel::<T>::is_router(n))
                    || (include_mha && is_attention_param(n))
            })
            .map(String::from)
            .collect();
        Self {
            stage: Stage::SparseExpert,
            trainable,
        }
    }

    pub fn frozen<T: Scalar>(&self, params: &ParamStore<T>) -> Vec<String> {
        params
            .names()
            .filter(|n| !self.trainable.contains(*n))
            .map(String::from)
            .collect()
    }

    pub fn apply<T: Scalar>(&self, params: &mut ParamStore<T>) {
        params.set_trainable(|n| self.trainable.contains(n));
    }

    /// Fails unless every frozen parameter is bitwise unchanged.
    pub fn verify<T: Scalar>(&self, before: &ParamStore<T>, after: &ParamStore<T>) -> Result<()> {
        let violations: Vec<String> = before
            .changed_names(after)
            .into_iter()
            .filter(|n| !self.trainable.contains(n))
            .collect();
        if violations.is_empty() {
            Ok(())
        } else {
            Err(DiveError::Consistency(format!(
                "{} stage changed frozen parameters: {}",
                self.stage.tag(),
                violations.join(", ")
            )))
        }
    }

    pub fn trainable_values<T: Scalar>(&self, params: &ParamStore<T>) -> usize {
        params
            .iter()
            .filter(|(n, _)| self.trainable.contains(*n))
            .map(|(_, t)| t.numel())
            .sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainPlan {
    pub stage: Stage,
    pub tokens: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub schedule: LrSchedule,
    pub adamw: AdamWConfig,
    /// Dense-stage router temperature.
    pub temperature: f64,
    /// Sparse-stage number of active experts.
    pub top_k: usize,
    pub include_mha: bool,
    pub include_routers: bool,
    /// Validate every this many steps (and after the last one); 0 disables.
    pub val_every: usize,
    pub val_batches: usize,
    pub seed: u64,
}

impl TrainPlan {
    pub fn steps(&self) -> usize {
        self.tokens / (self.batch_size * self.seq_len).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.seq_len < 2 {
            return Err(DiveError::Parameter("plan needs batch_size >= 1 and seq_len >= 2".into()));
        }
        if self.stage == Stage::DenseRouter && !(self.temperature > 0.0) {
            return Err(DiveError::Parameter(format!("temperature must be > 0, got {}", self.temperature)));
        }
        self.schedule.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub stage: Stage,
    pub step: usize,
    pub tokens: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

/// Attaches zero-initialized adapters to the gate, up and down projections
/// of every expert. Returns the number of added values.
pub fn attach_lora<T: Scalar>(model: &mut MoeModel<T>, spec: LoraSpec, seed: u64) -> Result<usize> {
    if spec.rank == 0 {
        return Err(DiveError::Parameter("LoRA rank must be at least 1".into()));
    }
    if !(spec.alpha > 0.0) || !(0.0..1.0).contains(&spec.dropout) {
        return Err(DiveError::Parameter(format!("invalid LoRA settings {spec:?}")));
    }
    if model.lora.is_some() || model.params.names().any(is_lora_param) {
        return Err(DiveError::State("adapters are already attached".into()));
    }
    let mut added = 0;
    for name in lora_targets(model) {
        let w = model.params.get(&name)?;
        let (out_dim, in_dim) = (w.shape()[0], w.shape()[1]);
        let bound = 1.0 / (in_dim as f64).sqrt();
        let a_name = format!("{name}.lora_a");
        let mut rng = DetRng::new(DetRng::derive_seed(seed, &a_name));
        let a: Vec<T> = (0..spec.rank * in_dim)
            .map(|_| T::of((2.0 * rng.uniform() - 1.0) * bound))
            .collect();
        model.params.insert(a_name, Tensor::new(&[spec.rank, in_dim], a)?);
        model.params.insert(format!("{name}.lora_b"), Tensor::zeros(&[out_dim, spec.rank]));
        added += spec.rank * (in_dim + out_dim);
    }
    model.lora = Some(spec);
    Ok(added)
}

fn lora_targets<T: Scalar>(model: &MoeModel<T>) -> Vec<String> {
    let mut out = Vec::new();
    for l in 0..model.config.n_layers {
        for e in 0..model.n_experts {
            for p in ["gate", "up", "down"] {
                out.push(format!("{}.{p}", MoeModel::<T>::expert_prefix(l, e)));
            }
        }
    }
    out
}

/// Folds `scale * B A` into each adapted weight and removes the adapters.
pub fn merge_lora<T: Scalar>(model: &mut MoeModel<T>) -> Result<()> {
    let spec = model
        .lora
        .ok_or_else(|| DiveError::State("no adapters to merge".into()))?;
    let scale = spec.scale();
    for name in lora_targets(model) {
        let a = model.params.remove(&format!("{name}.lora_a"));
        let b = model.params.remove(&format!("{name}.lora_b"));
        let (Some(a), Some(b)) = (a, b) else {
            return Err(DiveError::State(format!("`{name}` has no adapter")));
        };
        let r = spec.rank;
        let w = model.params.get_mut(&name)?;
        let (out_dim, in_dim) = (w.shape()[0], w.shape()[1]);
        let data = w.data_mut();
        for o in 0..out_dim {
            for i in 0..in_dim {
                let delta: f64 = (0..r)
                    .map(|k| b.data()[o * r + k].as_f64() * a.data()[k * in_dim + i].as_f64())
                    .sum();
                let cell = &mut data[o * in_dim + i];
                *cell = T::of(cell.as_f64() + scale * delta);
            }
        }
    }
    model.lora = None;
    Ok(())
}

/// Fixed validation batches drawn from the first half of each eval stream;
/// the second half is left for final scoring.
pub fn validation_batches(corpus: &CorpusSet, n: usize, batch: usize, seq: usize, seed: u64) -> Result<Vec<LmBatch>> {
    let streams: Vec<&[u8]> = corpus.domains.iter().map(|d| &d.eval[..d.eval.len() / 2]).collect();
    let mut rng = DetRng::new(DetRng::derive_seed(seed, "validation"));
    (0..n).map(|_| sample_lm_batch(&streams, batch, seq, &mut rng)).collect()
}

/// Mean next-token loss over `batches`, evaluation mode.
pub fn batch_loss<T: Scalar, M: LanguageModel<T> + ?Sized>(model: &M, batches: &[LmBatch]) -> Result<f64> {
    let mut total = 0.0;
    for b in batches {
        let mut g = Graph::new();
        let logits = forward(model, &mut g, &b.inputs, b.batch, b.seq, &mut Pass::eval())?;
        let loss = g.cross_entropy(logits, &b.targets)?;
        total += g.scalar(loss).as_f64();
    }
    Ok(total / batches.len().max(1) as f64)
}

fn run_stage<T: Scalar>(model: &mut MoeModel<T>, corpus: &CorpusSet, plan: &TrainPlan, ledger: &FreezeLedger) -> Result<Vec<TraceRow>> {
    plan.validate()?;
    let steps = plan.steps();
    let mut trace = Vec::new();
    if steps == 0 {
        return Ok(trace);
    }
    let before = model.params.clone();
    ledger.apply(&mut model.params);
    let streams: Vec<&[u8]> = corpus.domains.iter().map(|d| d.train.as_slice()).collect();
    let val = if plan.val_every > 0 {
        validation_batches(corpus, plan.val_batches, plan.batch_size, plan.seq_len, plan.seed)?
    } else {
        Vec::new()
    };
    let mut opt = OptimizerState::new(plan.adamw);
    let mut rng = DetRng::new(DetRng::derive_seed(plan.seed, &format!("{}-batches", plan.stage.tag())));
    let result: Result<()> = (|| {
        for step in 0..steps {
            let batch = sample_lm_batch(&streams, plan.batch_size, plan.seq_len, &mut rng)?;
            let mut pass = Pass::train(DetRng::derive_seed(plan.seed, &format!("{}-{step}", plan.stage.tag())));
            let loss = train_step(model, &mut opt, &batch, plan.schedule.lr_at(step), &mut pass)
                .map_err(|e| e.with_context(format!("{} stage step {step}", plan.stage.tag())))?;
            let last = step + 1 == steps;
            let val_loss = if !val.is_empty() && ((step + 1) % plan.val_every == 0 || last) {
                Some(batch_loss(model, &val)?)
            } else {
                None
            };
            trace.push(TraceRow {
                stage: plan.stage,
                step,
                tokens: (step + 1) * batch.tokens(),
                train_loss: loss,
                val_loss,
            });
        }
        Ok(())
    })();
    model.params.freeze_all();
    result?;
    ledger.verify(&before, &model.params)?;
    Ok(trace)
}

/// Dense-gated router training; every non-router parameter stays frozen.
pub fn stage1_train_routers<T: Scalar>(model: &mut MoeModel<T>, corpus: &CorpusSet, plan: &TrainPlan) -> Result<Vec<TraceRow>> {
    if plan.stage != Stage::DenseRouter {
        return Err(DiveError::Parameter("stage-1 training needs a dense-router plan".into()));
    }
    model.routing = Routing::Dense {
        temperature: plan.temperature,
    };
    model.routing.validate(model.n_experts)?;
    let ledger = FreezeLedger::stage1(&model.params);
    run_stage(model, corpus, plan, &ledger)
}

/// Top-k training of adapters, norms and optionally routers and attention.
pub fn stage2_train_sparse<T: Scalar>(model: &mut MoeModel<T>, corpus: &CorpusSet, plan: &TrainPlan) -> Result<Vec<TraceRow>> {
    if plan.stage != Stage::SparseExpert {
        return Err(DiveError::Parameter("stage-2 training needs a sparse-expert plan".into()));
    }
    if model.lora.is_none() {
        return Err(DiveError::State("stage-2 training needs adapters attached".into()));
    }
    let routing = Routing::Sparse { top_k: plan.top_k };
    routing.validate(model.n_experts)?;
    model.routing = routing;
    let ledger = FreezeLedger::stage2(&model.params, plan.include_routers, plan.include_mha);
    run_stage(model, corpus, plan, &ledger)
}

/// `stage,step,tokens,train_loss,val_loss` rows; empty `val_loss` when the
/// step was not validated.
pub fn write_trace_csv(path: &Path, rows: &[TraceRow]) -> Result<()> {
    let mut out = String::from("stage,step,tokens,train_loss,val_loss\n");
    for r in rows {
        let val = r.val_loss.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{},{},{val}\n", r.stage.tag(), r.step, r.tokens, r.train_loss));
    }
    std::fs::write(path, out).map_err(|e| DiveError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::CorpusSpec;
    use crate::model::{DenseModel, ModelConfig};
    use crate::moe::random_split_baseline;

    fn tiny_moe() -> MoeModel<f64> {
        let dense = DenseModel::<f64>::init(ModelConfig::tiny(), 3).unwrap();
        random_split_baseline(&dense, 4, 0.5, 9, Routing::Sparse { top_k: 2 }).unwrap()
    }

    fn tiny_corpus() -> CorpusSet {
        let specs: Vec<CorpusSpec> = ["prose", "arith"]
            .iter()
            .map(|d| CorpusSpec::new(d, 1, 4000, 1000).unwrap())
            .collect();
        CorpusSet::generate(&specs).unwrap()
    }

    fn plan(stage: Stage) -> TrainPlan {
        TrainPlan {
            stage,
            tokens: 3 * 2 * 16,
            batch_size: 2,
            seq_len: 16,
            schedule: LrSchedule::Constant { lr: 1e-2 },
            adamw: AdamWConfig::default(),
            temperature: 0.5,
            top_k: 2,
            include_mha: false,
            include_routers: true,
            val_every: 2,
            val_batches: 1,
            seed: 4,
        }
    }

    #[test]
    fn zero_adapters_leave_logits_unchanged() {
        let mut m = tiny_moe();
        let tokens: Vec<usize> = (0..16).map(|i| i * 7 % 256).collect();
        let before = m.logits(&tokens, 1, 16).unwrap();
        let added = attach_lora(&mut m, LoraSpec::default(), 1).unwrap();
        let cfg = m.config;
        assert_eq!(added, cfg.n_layers * 4 * 3 * 8 * (cfg.d_model + m.expert_width));
        let after = m.logits(&tokens, 1, 16).unwrap();
        assert!(before.bit_eq(&after));
        assert!(matches!(attach_lora(&mut m, LoraSpec::default(), 1), Err(DiveError::State(_))));
    }

    #[test]
    fn merge_matches_adapted_forward() {
        let mut m = tiny_moe();
        attach_lora(&mut m, LoraSpec::default(), 1).unwrap();
        let names: Vec<String> = m.params.names().filter(|n| n.ends_with(".lora_b")).map(String::from).collect();
        for (i, n) in names.iter().enumerate() {
            let t = m.params.get_mut(n).unwrap();
            for (j, v) in t.data_mut().iter_mut().enumerate() {
                *v = (((i * 31 + j * 17) % 13) as f64 - 6.0) * 0.01;
            }
        }
        let tokens: Vec<usize> = (0..16).map(|i| i * 11 % 256).collect();
        let adapted = m.logits(&tokens, 1, 16).unwrap();
        merge_lora(&mut m).unwrap();
        assert!(m.params.names().all(|n| !is_lora_param(n)));
        let merged = m.logits(&tokens, 1, 16).unwrap();
        assert!(adapted.max_abs_diff(&merged) < 1e-9);
        assert!(matches!(merge_lora(&mut m), Err(DiveError::State(_))));
    }

    #[test]
    fn rank_zero_rejected() {
        let mut m = tiny_moe();
        let spec = LoraSpec { rank: 0, ..LoraSpec::default() };
        assert!(matches!(attach_lora(&mut m, spec, 1), Err(DiveError::Parameter(_))));
    }

    #[test]
    fn stages_touch_only_their_parameters() {
        let corpus = tiny_corpus();
        let mut m = tiny_moe();
        let before = m.params.clone();
        let trace = stage1_train_routers(&mut m, &corpus, &plan(Stage::DenseRouter)).unwrap();
        assert_eq!(trace.len(), 3);
        assert!(trace[1].val_loss.is_some() && trace[2].val_loss.is_some() && trace[0].val_loss.is_none());
        let changed = before.changed_names(&m.params);
        assert!(!changed.is_empty() && changed.iter().all(|n| MoeModel::<f64>::is_router(n)));

        let p2 = plan(Stage::SparseExpert);
        assert!(matches!(stage2_train_sparse(&mut m, &corpus, &p2), Err(DiveError::State(_))));
        attach_lora(&mut m, LoraSpec::default(), 2).unwrap();
        let before = m.params.clone();
        stage2_train_sparse(&mut m, &corpus, &p2).unwrap();
        assert_eq!(m.routing, Routing::Sparse { top_k: 2 });
        let ledger = FreezeLedger::stage2(&m.params, true, false);
        for n in before.changed_names(&m.params) {
            assert!(ledger.trainable.contains(&n), "{n}");
        }
        assert!(ledger.trainable.iter().all(|n| !is_attention_param(n)));
        assert_eq!(m.params.num_trainable(), 0);
    }

    #[test]
    fn ledger_flags_frozen_changes() {
        let m = tiny_moe();
        let ledger = FreezeLedger::stage1(&m.params);
        let mut after = m.params.clone();
        after.get_mut("tok_embed").unwrap().data_mut()[0] += 1.0;
        assert!(matches!(ledger.verify(&m.params, &after), Err(DiveError::Consistency(_))));
    }
}
