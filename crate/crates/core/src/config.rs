//! Run configuration and named presets.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusSpec, DomainId, DOMAINS};
use crate::error::{DiveError, Result};
use crate::model::{LoraSpec, ModelConfig, TrainConfig};
use crate::retrain::{Stage, TrainPlan};
use crate::tensor::{AdamWConfig, LrSchedule};

pub const PRESETS: [&str; 3] = ["dive-1of8", "dive-2of8", "smoke"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub domains: Vec<String>,
    pub seed: u64,
    pub train_bytes: usize,
    pub eval_bytes: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenseTrainSettings {
    pub steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub lr: f64,
    pub warmup_ratio: f64,
    pub min_lr_ratio: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSettings {
    pub tokens: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub lr: f64,
    /// Cosine floor as a fraction of `lr`; ignored by the constant-rate stage.
    pub min_lr_ratio: f64,
    pub warmup_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: String,
    pub model: ModelConfig,
    pub corpus: CorpusConfig,
    pub dense: DenseTrainSettings,
    pub calibration_samples: usize,
    pub sample_len: usize,
    pub ratio: f64,
    pub n_experts: usize,
    pub top_k: usize,
    pub temperature: f64,
    /// Stage-1 temperature for the random-split baseline.
    pub baseline_temperature: f64,
    pub stage1: StageSettings,
    pub stage2: StageSettings,
    pub lora: LoraSpec,
    pub include_routers: bool,
    pub include_mha: bool,
    pub eval_seq_len: usize,
    /// Cap on bytes per eval stream used for affinity and held-out scoring.
    pub eval_cap: Option<usize>,
    pub val_every: usize,
    pub val_batches: usize,
    pub out_dir: String,
    pub seed: u64,
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let base = Self::toy();
        match name {
            "dive-1of8" => Ok(Self {
                preset: name.into(),
                ratio: 0.5,
                top_k: 1,
                temperature: 0.05,
                baseline_temperature: 0.01,
                ..base
            }),
            "dive-2of8" => Ok(Self {
                preset: name.into(),
                ratio: 0.75,
                top_k: 2,
                temperature: 0.5,
                baseline_temperature: 0.1,
                ..base
            }),
            "smoke" => Ok(Self::smoke()),
            other => Err(DiveError::Registry(format!(
                "unknown preset `{other}`; known presets: {}",
                PRESETS.join(", ")
            ))),
        }
    }

    fn toy() -> Self {
        Self {
            preset: String::new(),
            model: ModelConfig::toy(),
            corpus: CorpusConfig {
                domains: DOMAINS.iter().map(|s| s.to_string()).collect(),
                seed: 0,
                train_bytes: 1 << 19,
                eval_bytes: 1 << 15,
            },
            dense: DenseTrainSettings {
                steps: 1500,
                batch_size: 16,
                seq_len: 64,
                lr: 3e-3,
                warmup_ratio: 0.03,
                min_lr_ratio: 0.1,
            },
            calibration_samples: 1024,
            sample_len: 256,
            ratio: 0.5,
            n_experts: 4,
            top_k: 1,
            temperature: 0.05,
            baseline_temperature: 0.01,
            stage1: StageSettings {
                tokens: 1 << 16,
                batch_size: 16,
                seq_len: 64,
                lr: 1e-2,
                min_lr_ratio: 1.0,
                warmup_ratio: 0.0,
            },
            stage2: StageSettings {
                tokens: 1 << 19,
                batch_size: 16,
                seq_len: 64,
                lr: 2e-3,
                min_lr_ratio: 0.1,
                warmup_ratio: 0.03,
            },
            lora: LoraSpec {
                rank: 4,
                alpha: 8.0,
                dropout: 0.1,
            },
            include_routers: true,
            include_mha: false,
            eval_seq_len: 128,
            eval_cap: None,
            val_every: 50,
            val_batches: 4,
            out_dir: "runs".into(),
            seed: 0,
        }
    }

    /// A seconds-scale run on the tiny model, for tests and dry runs.
    fn smoke() -> Self {
        let t = Self::toy();
        Self {
            preset: "smoke".into(),
            model: ModelConfig::tiny(),
            corpus: CorpusConfig {
                domains: vec!["prose".into(), "arith".into(), "code".into()],
                train_bytes: 1 << 13,
                eval_bytes: 1 << 10,
                ..t.corpus
            },
            dense: DenseTrainSettings {
                steps: 8,
                batch_size: 4,
                seq_len: 16,
                ..t.dense
            },
            calibration_samples: 16,
            sample_len: 16,
            ratio: 0.5,
            n_experts: 2,
            top_k: 1,
            stage1: StageSettings {
                tokens: 4 * 4 * 16,
                batch_size: 4,
                seq_len: 16,
                ..t.stage1
            },
            stage2: StageSettings {
                tokens: 8 * 4 * 16,
                batch_size: 4,
                seq_len: 16,
                ..t.stage2
            },
            eval_seq_len: 16,
            val_every: 4,
            val_batches: 1,
            ..t
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let c = &self.corpus;
        if c.domains.len() < 2 {
            return Err(DiveError::Parameter("a run needs at least two domains".into()));
        }
        for (i, d) in c.domains.iter().enumerate() {
            DomainId::from_name(d)?;
            if c.domains[..i].contains(d) {
                return Err(DiveError::Parameter(format!("domain `{d}` listed twice")));
            }
        }
        if !(self.ratio > 0.0 && self.ratio < 1.0) {
            return Err(DiveError::Parameter(format!("pruning ratio must lie in (0, 1), got {}", self.ratio)));
        }
        if self.n_experts == 0 || self.n_experts > c.domains.len() {
            return Err(DiveError::Parameter(format!(
                "{} experts cannot be formed from {} domains",
                self.n_experts,
                c.domains.len()
            )));
        }
        if self.top_k == 0 || self.top_k > self.n_experts {
            return Err(DiveError::Parameter(format!(
                "top_k must lie in 1..={}, got {}",
                self.n_experts, self.top_k
            )));
        }
        for t in [self.temperature, self.baseline_temperature] {
            if !(t > 0.0 && t.is_finite()) {
                return Err(DiveError::Parameter(format!("temperature must be > 0, got {t}")));
            }
        }
        if self.lora.rank == 0 {
            return Err(DiveError::Parameter("LoRA rank must be at least 1".into()));
        }
        for (what, seq) in [
            ("dense", self.dense.seq_len),
            ("stage1", self.stage1.seq_len),
            ("stage2", self.stage2.seq_len),
            ("eval", self.eval_seq_len),
            ("calibration", self.sample_len),
        ] {
            if seq < 2 || seq > self.model.max_seq_len {
                return Err(DiveError::Parameter(format!(
                    "{what} sequence length {seq} must lie in 2..={}",
                    self.model.max_seq_len
                )));
            }
        }
        for (what, s) in [("stage1", &self.stage1), ("stage2", &self.stage2)] {
            if s.tokens == 0 || s.batch_size == 0 {
                return Err(DiveError::Parameter(format!("{what} budget and batch size must be positive")));
            }
        }
        if self.corpus.eval_bytes < 2 * self.eval_seq_len {
            return Err(DiveError::Parameter(format!(
                "eval streams of {} bytes are too short for two {}-token halves",
                self.corpus.eval_bytes, self.eval_seq_len
            )));
        }
        self.dense_train().validate()?;
        self.stage1_plan().validate()?;
        self.stage2_plan().validate()?;
        for spec in self.corpus_specs()? {
            spec.validate()?;
        }
        Ok(())
    }

    pub fn corpus_specs(&self) -> Result<Vec<CorpusSpec>> {
        self.corpus
            .domains
            .iter()
            .map(|d| {
                Ok(CorpusSpec::new(d, self.corpus.seed, self.corpus.train_bytes, self.corpus.eval_bytes)?
                    .with_calibration(self.calibration_samples, self.sample_len))
            })
            .collect()
    }

    pub fn dense_train(&self) -> TrainConfig {
        let d = &self.dense;
        TrainConfig {
            steps: d.steps,
            batch_size: d.batch_size,
            seq_len: d.seq_len,
            schedule: LrSchedule::Cosine {
                peak: d.lr,
                min_ratio: d.min_lr_ratio,
                warmup_ratio: d.warmup_ratio,
                total_steps: d.steps,
            },
            adamw: AdamWConfig::default(),
            seed: self.seed,
        }
    }

    fn plan(&self, stage: Stage, s: &StageSettings, schedule: LrSchedule) -> TrainPlan {
        TrainPlan {
            stage,
            tokens: s.tokens,
            batch_size: s.batch_size,
            seq_len: s.seq_len,
            schedule,
            adamw: AdamWConfig::default(),
            temperature: self.temperature,
            top_k: self.top_k,
            include_mha: self.include_mha,
            include_routers: self.include_routers,
            val_every: self.val_every,
            val_batches: self.val_batches,
            seed: self.seed,
        }
    }

    pub fn stage1_plan(&self) -> TrainPlan {
        self.plan(Stage::DenseRouter, &self.stage1, LrSchedule::Constant { lr: self.stage1.lr })
    }

    pub fn stage2_plan(&self) -> TrainPlan {
        let s = &self.stage2;
        let steps = s.tokens / (s.batch_size * s.seq_len).max(1);
        self.plan(
            Stage::SparseExpert,
            s,
            LrSchedule::Cosine {
                peak: s.lr,
                min_ratio: s.min_lr_ratio,
                warmup_ratio: s.warmup_ratio,
                total_steps: steps,
            },
        )
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| DiveError::io(path, e))?;
        Self::from_json(&text).map_err(|e| e.with_context(format!("reading {}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| DiveError::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for p in PRESETS {
            let c = RunConfig::preset(p).unwrap();
            c.validate().unwrap();
            assert_eq!(RunConfig::from_json(&c.to_json().unwrap()).unwrap(), c);
        }
        let one = RunConfig::preset("dive-1of8").unwrap();
        assert_eq!((one.top_k, one.temperature, one.ratio), (1, 0.05, 0.5));
        let two = RunConfig::preset("dive-2of8").unwrap();
        assert_eq!((two.top_k, two.temperature, two.ratio), (2, 0.5, 0.75));
        assert!(matches!(RunConfig::preset("nope"), Err(DiveError::Registry(_))));
    }

    #[test]
    fn invalid_settings_are_rejected() {
        let base = RunConfig::preset("smoke").unwrap();
        let bad = [
            RunConfig { top_k: 3, ..base.clone() },
            RunConfig { temperature: 0.0, ..base.clone() },
            RunConfig { ratio: 1.0, ..base.clone() },
            RunConfig { n_experts: 4, ..base.clone() },
            RunConfig { eval_seq_len: 1000, ..base.clone() },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
        assert!(RunConfig::from_json(r#"{"preset": "x"}"#).is_err());
    }
}
