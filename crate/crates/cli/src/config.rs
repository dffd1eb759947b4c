//! The TOML run configuration and its conversion into library settings.

use std::path::{Path, PathBuf};

use mmsc_core::behavior::MetaPathSet;
use mmsc_core::experiment::ExperimentConfig;
use mmsc_core::graph::Fanout;
use mmsc_core::model::ModelConfig;
use mmsc_core::synth::SynthConfig;
use mmsc_core::trainer::TrainConfig;
use mmsc_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, Deserialize, Serialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    pub data: DataSection,
    pub synth: SynthSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub judge: JudgeSection,
    pub eval: EvalSection,
}

/// Input files; when `edges` is unset the `[synth]` section generates data in memory.
#[derive(Clone, Debug, Default, Deserialize, Serialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub edges: Option<PathBuf>,
    pub content: Option<PathBuf>,
    pub truth: Option<PathBuf>,
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub clusters: usize,
    pub items_per_cluster: usize,
    pub intra_prob: f64,
    pub pairing_degree: usize,
    pub noise: f64,
    pub embed_dim: usize,
    pub embed_noise: f64,
    pub seq_len: usize,
    pub zipf_exponent: f64,
}

impl Default for SynthSection {
    fn default() -> Self {
        let d = SynthConfig::default();
        Self {
            clusters: d.n_clusters,
            items_per_cluster: d.items_per_cluster,
            intra_prob: d.intra_sub_prob,
            pairing_degree: d.cluster_pairing_degree,
            noise: d.noise_ratio,
            embed_dim: d.embed_dim,
            embed_noise: d.embed_noise_std,
            seq_len: d.seq_len,
            zipf_exponent: d.zipf_exponent,
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// `d`; must match the content file.
    pub dim: usize,
    /// `L`
    pub content_heads: usize,
    /// `T`
    pub behavior_heads: usize,
    /// `S`
    pub seq_len: usize,
    pub paths_s: Vec<String>,
    pub paths_c: Vec<String>,
    /// Neighbor cap per meta-path; 0 keeps every neighbor.
    pub fanout: usize,
    pub content: bool,
    pub behavior: bool,
    pub task_gate: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        let names = |v: &[mmsc_core::graph::MetaPath]| v.iter().map(|p| p.to_string()).collect();
        Self {
            dim: m.dim,
            content_heads: m.content_heads,
            behavior_heads: m.behavior_heads,
            seq_len: m.seq_len,
            paths_s: names(&m.meta_paths.substitutable),
            paths_c: names(&m.meta_paths.complementary),
            fanout: 10,
            content: true,
            behavior: true,
            task_gate: true,
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub dropout: f64,
    pub negatives: usize,
    pub margin: f64,
    pub tau: f64,
    pub lambda: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub val_fraction: f64,
    pub strict_infonce: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            learning_rate: t.learning_rate,
            dropout: t.drop_rate,
            negatives: t.negatives,
            margin: t.margin,
            tau: t.tau,
            lambda: t.lambda,
            batch_size: t.batch_size,
            max_epochs: t.max_epochs,
            patience: t.patience,
            val_fraction: t.val_fraction,
            strict_infonce: t.strict_infonce,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, Deserialize, Serialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum JudgeKind {
    /// Answers from the ground-truth file.
    #[default]
    Oracle,
    /// A child process speaking line-delimited JSON.
    External,
    /// Accepts every pair.
    None,
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct JudgeSection {
    pub kind: JudgeKind,
    pub budget: usize,
    pub program: Option<String>,
    pub args: Vec<String>,
    /// One description per item, line `i` describing item `i`.
    pub texts: Option<PathBuf>,
}

impl Default for JudgeSection {
    fn default() -> Self {
        Self {
            kind: JudgeKind::Oracle,
            budget: TrainConfig::default().judge_budget,
            program: None,
            args: Vec::new(),
            texts: None,
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub negatives: usize,
    pub degree_groups: usize,
    pub coldstart_k: usize,
    pub holdout: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            negatives: TrainConfig::default().eval_negatives,
            degree_groups: 10,
            coldstart_k: mmsc_core::coldstart::DEFAULT_K,
            holdout: 0.1,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(e.to_string()))
    }

    /// The whole configuration as TOML, each line prefixed with `# `.
    pub fn as_comment(&self) -> String {
        let body = toml::to_string(self).expect("config serializes");
        body.lines().map(|l| format!("# {l}\n")).collect()
    }

    pub fn uses_synthetic_data(&self) -> bool {
        self.data.edges.is_none()
    }

    /// Library settings; fails on any invalid value.
    pub fn experiment(&self) -> Result<ExperimentConfig> {
        let s = &self.synth;
        let synth = SynthConfig {
            n_clusters: s.clusters,
            items_per_cluster: s.items_per_cluster,
            intra_sub_prob: s.intra_prob,
            cluster_pairing_degree: s.pairing_degree,
            noise_ratio: s.noise,
            embed_dim: s.embed_dim,
            embed_noise_std: s.embed_noise,
            seq_len: s.seq_len,
            zipf_exponent: s.zipf_exponent,
            seed: self.seed,
        };
        let m = &self.model;
        let model = ModelConfig {
            dim: m.dim,
            content_heads: m.content_heads,
            behavior_heads: m.behavior_heads,
            seq_len: m.seq_len,
            meta_paths: MetaPathSet::parse(&m.paths_s, &m.paths_c)?,
            fanout: Fanout::cap(m.fanout),
            use_content: m.content,
            use_behavior: m.behavior,
            use_task_gate: m.task_gate,
        };
        let t = &self.train;
        let train = TrainConfig {
            learning_rate: t.learning_rate,
            drop_rate: t.dropout,
            negatives: t.negatives,
            margin: t.margin,
            tau: t.tau,
            lambda: t.lambda,
            batch_size: t.batch_size,
            max_epochs: t.max_epochs,
            patience: t.patience,
            val_fraction: t.val_fraction,
            strict_infonce: t.strict_infonce,
            judge_budget: self.judge.budget,
            eval_negatives: self.eval.negatives,
            seed: self.seed,
        };
        let cfg = ExperimentConfig {
            synth,
            model,
            train,
            use_judge: self.judge.kind != JudgeKind::None,
        };
        cfg.model.validate()?;
        cfg.train.validate()?;
        if self.uses_synthetic_data() {
            cfg.validate()?;
        }
        if self.eval.degree_groups == 0 {
            return Err(Error::config("eval.degree_groups must be at least 1"));
        }
        Ok(cfg)
    }

    /// Writes library-level changes (ablations) back so outputs record them.
    pub fn absorb(&mut self, cfg: &ExperimentConfig) {
        self.model.content = cfg.model.use_content;
        self.model.behavior = cfg.model.use_behavior;
        self.model.task_gate = cfg.model.use_task_gate;
        self.model.paths_s = cfg.model.meta_paths.substitutable.iter().map(|p| p.to_string()).collect();
        self.model.paths_c = cfg.model.meta_paths.complementary.iter().map(|p| p.to_string()).collect();
        self.train.lambda = cfg.train.lambda;
        if !cfg.use_judge {
            self.judge.kind = JudgeKind::None;
        }
    }
}
