//! End-to-end runs: dense training, affinity mining, clustering,
//! reconstruction and two-stage retraining, plus the two baselines.

use serde::{Deserialize, Serialize};

use crate::affinity::{build_ppl_matrix, hierarchical_cluster, AffinityConfig, AffinityMatrix, ClusterAssignment};
use crate::config::RunConfig;
use crate::corpus::{mix_cluster_calibration, CorpusSet, TokenBatch};
use crate::error::{DiveError, Result};
use crate::model::{eval_tokens, DenseModel, LanguageModel, TrainTrace};
use crate::moe::{random_split_baseline, reconstruct_moe, MoeModel, Routing};
use crate::prune::prune_model;
use crate::retrain::{attach_lora, merge_lora, stage1_train_routers, stage2_train_sparse, TraceRow, TrainPlan};
use crate::rng::DetRng;
use crate::scalar::Scalar;

pub fn generate_corpus_set(cfg: &RunConfig) -> Result<CorpusSet> {
    CorpusSet::generate(&cfg.corpus_specs()?)
}

pub fn train_dense_model<T: Scalar>(cfg: &RunConfig, corpus: &CorpusSet) -> Result<(DenseModel<T>, TrainTrace)> {
    let mut model = DenseModel::init(cfg.model, DetRng::derive_seed(cfg.seed, "dense-init"))?;
    let trace = crate::model::train_dense(&mut model, corpus, &cfg.dense_train())?;
    Ok((model, trace))
}

/// Bytes of an eval stream used for affinity mining and validation.
pub fn dev_split(eval: &[u8]) -> &[u8] {
    &eval[..eval.len() / 2]
}

/// Bytes of an eval stream kept for final scoring.
pub fn heldout_split(eval: &[u8]) -> &[u8] {
    &eval[eval.len() / 2..]
}

fn capped(bytes: &[u8], cap: Option<usize>) -> &[u8] {
    &bytes[..cap.unwrap_or(usize::MAX).min(bytes.len())]
}

pub fn affinity_config(cfg: &RunConfig) -> AffinityConfig {
    let half = cfg.corpus.eval_bytes / 2;
    AffinityConfig {
        ratio: cfg.ratio,
        calibration_samples: cfg.calibration_samples,
        sample_len: cfg.sample_len,
        eval_seq_len: cfg.eval_seq_len,
        eval_bytes: Some(cfg.eval_cap.map_or(half, |c| c.min(half))),
        seed: cfg.seed,
    }
}

pub fn mine_affinity<T: Scalar>(cfg: &RunConfig, dense: &DenseModel<T>, corpus: &CorpusSet) -> Result<AffinityMatrix> {
    build_ppl_matrix(dense, corpus, &affinity_config(cfg))
}

pub fn cluster_tasks(cfg: &RunConfig, matrix: &AffinityMatrix) -> Result<ClusterAssignment> {
    hierarchical_cluster(&matrix.norm, cfg.n_experts)
}

/// Where each expert's pruning calibration comes from.
#[derive(Clone, Copy, Debug)]
pub enum CalibrationSource<'a> {
    /// One uniform mixture per affinity cluster.
    Clusters(&'a ClusterAssignment),
    /// Every expert samples a uniform mixture of all domains with its own seed.
    Random,
}

/// Calibration batch and member domain names for each expert.
pub fn expert_calibrations(cfg: &RunConfig, corpus: &CorpusSet, source: CalibrationSource<'_>) -> Result<Vec<(Vec<String>, TokenBatch)>> {
    let specs = corpus.specs();
    let names: Vec<String> = corpus.names().iter().map(|s| s.to_string()).collect();
    match source {
        CalibrationSource::Clusters(a) => {
            if a.labels.len() != specs.len() || a.n_clusters != cfg.n_experts {
                return Err(DiveError::Dimension(format!(
                    "assignment has {} tasks in {} clusters, run expects {} tasks in {}",
                    a.labels.len(),
                    a.n_clusters,
                    specs.len(),
                    cfg.n_experts
                )));
            }
            (0..a.n_clusters)
                .map(|c| {
                    let members = a.members(c);
                    let member_specs: Vec<_> = members.iter().map(|&i| specs[i].clone()).collect();
                    let seed = DetRng::derive_seed(cfg.seed, &format!("cluster{c}"));
                    let batch = mix_cluster_calibration(&member_specs, cfg.calibration_samples, cfg.sample_len, seed)?;
                    Ok((members.iter().map(|&i| names[i].clone()).collect(), batch))
                })
                .collect()
        }
        CalibrationSource::Random => (0..cfg.n_experts)
            .map(|e| {
                let seed = DetRng::derive_seed(cfg.seed, &format!("random-calibration{e}"));
                let batch = mix_cluster_calibration(&specs, cfg.calibration_samples, cfg.sample_len, seed)?;
                Ok((names.clone(), batch))
            })
            .collect(),
    }
}

/// Prunes one copy of `dense` per expert calibration and assembles the MoE,
/// ready for dense router training.
pub fn reconstruct<T: Scalar>(cfg: &RunConfig, dense: &DenseModel<T>, corpus: &CorpusSet, source: CalibrationSource<'_>) -> Result<MoeModel<T>> {
    let calibs = expert_calibrations(cfg, corpus, source)?;
    let mut pruned = Vec::with_capacity(calibs.len());
    let mut clusters = Vec::with_capacity(calibs.len());
    for (e, (members, batch)) in calibs.into_iter().enumerate() {
        let (m, _) = prune_model(dense, &batch, cfg.ratio).map_err(|err| err.with_context(format!("pruning expert {e}")))?;
        pruned.push(m);
        clusters.push(members);
    }
    reconstruct_moe(
        &pruned,
        clusters,
        DetRng::derive_seed(cfg.seed, "routers"),
        Routing::Dense {
            temperature: cfg.temperature,
        },
    )
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RetrainTraces {
    pub stage1: Vec<TraceRow>,
    pub stage2: Vec<TraceRow>,
}

impl RetrainTraces {
    pub fn rows(&self) -> Vec<TraceRow> {
        self.stage1.iter().chain(&self.stage2).cloned().collect()
    }
}

pub fn run_stage1<T: Scalar>(moe: &mut MoeModel<T>, corpus: &CorpusSet, plan: &TrainPlan) -> Result<Vec<TraceRow>> {
    stage1_train_routers(moe, corpus, plan).map_err(|e| e.with_context("router training"))
}

/// Attaches adapters, trains sparsely and folds the adapters back in.
pub fn run_stage2<T: Scalar>(cfg: &RunConfig, moe: &mut MoeModel<T>, corpus: &CorpusSet) -> Result<Vec<TraceRow>> {
    attach_lora(moe, cfg.lora, DetRng::derive_seed(cfg.seed, "lora"))?;
    let trace = stage2_train_sparse(moe, corpus, &cfg.stage2_plan()).map_err(|e| e.with_context("sparse training"))?;
    merge_lora(moe)?;
    Ok(trace)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeldOut {
    pub domains: Vec<String>,
    pub perplexity: Vec<f64>,
    /// Perplexity over every held-out token of every domain.
    pub mixed: f64,
}

pub fn heldout_eval<T: Scalar, M: LanguageModel<T> + Sync + ?Sized>(model: &M, corpus: &CorpusSet, cfg: &RunConfig) -> Result<HeldOut> {
    let mut nll = 0.0;
    let mut tokens = 0;
    let mut perplexity = Vec::with_capacity(corpus.domains.len());
    for d in &corpus.domains {
        let bytes = capped(heldout_split(&d.eval), cfg.eval_cap);
        let ids = crate::corpus::tokenize(bytes);
        let r = eval_tokens(model, &ids, cfg.eval_seq_len).map_err(|e| e.with_context(format!("held-out {}", d.spec.domain)))?;
        nll += r.mean_nll * r.tokens as f64;
        tokens += r.tokens;
        perplexity.push(r.perplexity);
    }
    Ok(HeldOut {
        domains: corpus.names().iter().map(|s| s.to_string()).collect(),
        perplexity,
        mixed: (nll / tokens as f64).exp(),
    })
}

#[derive(Clone, Debug)]
pub struct MoeRun<T> {
    pub moe: MoeModel<T>,
    /// Router-trained model before sparse training.
    pub after_stage1: MoeModel<T>,
    pub traces: RetrainTraces,
    pub heldout: HeldOut,
}

fn finish<T: Scalar>(cfg: &RunConfig, mut moe: MoeModel<T>, corpus: &CorpusSet, stage1: &TrainPlan) -> Result<MoeRun<T>> {
    let s1 = run_stage1(&mut moe, corpus, stage1)?;
    let after_stage1 = moe.clone();
    let s2 = run_stage2(cfg, &mut moe, corpus)?;
    let heldout = heldout_eval(&moe, corpus, cfg)?;
    Ok(MoeRun {
        moe,
        after_stage1,
        traces: RetrainTraces { stage1: s1, stage2: s2 },
        heldout,
    })
}

#[derive(Clone, Debug)]
pub struct DiveRun<T> {
    pub matrix: AffinityMatrix,
    pub assignment: ClusterAssignment,
    pub run: MoeRun<T>,
}

/// Affinity-mined experts from a trained dense model.
pub fn run_dive<T: Scalar>(cfg: &RunConfig, dense: &DenseModel<T>, corpus: &CorpusSet) -> Result<DiveRun<T>> {
    let matrix = mine_affinity(cfg, dense, corpus)?;
    run_dive_with(cfg, dense, corpus, matrix)
}

/// As [`run_dive`] with an already mined affinity matrix.
pub fn run_dive_with<T: Scalar>(cfg: &RunConfig, dense: &DenseModel<T>, corpus: &CorpusSet, matrix: AffinityMatrix) -> Result<DiveRun<T>> {
    cfg.validate()?;
    let assignment = cluster_tasks(cfg, &matrix)?;
    let moe = reconstruct(cfg, dense, corpus, CalibrationSource::Clusters(&assignment))?;
    let run = finish(cfg, moe, corpus, &cfg.stage1_plan())?;
    Ok(DiveRun { matrix, assignment, run })
}

/// Experts pruned on independent random mixtures of all domains.
pub fn run_no_dam<T: Scalar>(cfg: &RunConfig, dense: &DenseModel<T>, corpus: &CorpusSet) -> Result<MoeRun<T>> {
    cfg.validate()?;
    let moe = reconstruct(cfg, dense, corpus, CalibrationSource::Random)?;
    finish(cfg, moe, corpus, &cfg.stage1_plan())
}

/// Experts cut from random overlapping channel subsets of the dense FFN,
/// each `1 - ratio` of its width, retrained under the same budgets.
pub fn random_split_model<T: Scalar>(cfg: &RunConfig, dense: &DenseModel<T>) -> Result<MoeModel<T>> {
    random_split_baseline(
        dense,
        cfg.n_experts,
        1.0 - cfg.ratio,
        DetRng::derive_seed(cfg.seed, "random-split"),
        Routing::Dense {
            temperature: cfg.baseline_temperature,
        },
    )
}

pub fn run_random_split<T: Scalar>(cfg: &RunConfig, dense: &DenseModel<T>, corpus: &CorpusSet) -> Result<MoeRun<T>> {
    cfg.validate()?;
    let moe = random_split_model(cfg, dense)?;
    let plan = TrainPlan {
        temperature: cfg.baseline_temperature,
        ..cfg.stage1_plan()
    };
    finish(cfg, moe, corpus, &plan)
}
