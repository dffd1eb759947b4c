//! End-to-end pipelines on synthetic data: generate, hold out, filter, train
//! and evaluate, plus ablation, noise and sensitivity sweeps built on them.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use mmsc_tensor::ParamStore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::eval::{build_test_set, evaluate, EvalReport, TestSet, TestSetStats};
use crate::graph::{RelGraph, RelationType};
use crate::content::ContentProvider;
use crate::judge::{Judge, OracleJudge};
use crate::model::{embed_all, ModelConfig};
use crate::synth::{SynthConfig, SynthData};
use crate::trainer::{augment_edges, fit, training_positives, AugmentedEdgeSet, EpochLog, TrainConfig, TrainOutcome};
use crate::EmbeddingTable;

/// One-switch model or pipeline variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Ablation {
    NoSsl,
    NoTaskGate,
    NoContent,
    NoBehavior,
    NoJudge,
    MaxHop2,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [
        Ablation::NoSsl,
        Ablation::NoTaskGate,
        Ablation::NoContent,
        Ablation::NoBehavior,
        Ablation::NoJudge,
        Ablation::MaxHop2,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::NoSsl => "no-ssl",
            Ablation::NoTaskGate => "no-task-gate",
            Ablation::NoContent => "no-content",
            Ablation::NoBehavior => "no-behavior",
            Ablation::NoJudge => "no-judge",
            Ablation::MaxHop2 => "max-hop-2",
        }
    }

    pub fn apply(self, cfg: &mut ExperimentConfig) -> Result<()> {
        match self {
            Ablation::NoSsl => cfg.train.lambda = 0.0,
            Ablation::NoTaskGate => cfg.model.use_task_gate = false,
            Ablation::NoContent => cfg.model.use_content = false,
            Ablation::NoBehavior => cfg.model.use_behavior = false,
            Ablation::NoJudge => cfg.use_judge = false,
            Ablation::MaxHop2 => cfg.model.meta_paths = cfg.model.meta_paths.truncated(2)?,
        }
        Ok(())
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown ablation {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Filter training edges through the oracle judge.
    pub use_judge: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let synth = SynthConfig {
            noise_ratio: 0.2,
            ..SynthConfig::default()
        };
        let model = ModelConfig {
            dim: synth.embed_dim,
            seq_len: synth.seq_len,
            ..ModelConfig::default()
        };
        Self {
            synth,
            model,
            train: TrainConfig::default(),
            use_judge: true,
        }
    }
}

impl ExperimentConfig {
    /// The same experiment under a different seed for every random stream.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.synth.seed = seed;
        c.train.seed = seed;
        c
    }

    pub fn ablated(&self, ablations: &[Ablation]) -> Result<Self> {
        let mut c = self.clone();
        for a in ablations {
            a.apply(&mut c)?;
        }
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.model.dim != self.synth.embed_dim || self.model.seq_len != self.synth.seq_len {
            return Err(Error::config(format!(
                "model dim/seq_len {}/{} differ from the data's {}/{}",
                self.model.dim, self.model.seq_len, self.synth.embed_dim, self.synth.seq_len
            )));
        }
        Ok(())
    }

    /// Seed of the neighbor draw used when embedding for evaluation.
    pub fn eval_neighbor_seed(&self) -> u64 {
        self.train.seed.wrapping_add(0x00e7_a1u64)
    }
}

/// A held-out split of a dataset.
#[derive(Clone, Debug)]
pub struct Split {
    pub train_graph: RelGraph,
    pub test: TestSet,
    pub stats: TestSetStats,
}

/// Holds out test edges, keeping the candidates `judge` accepts.
pub fn split_graph(g: &RelGraph, judge: &mut dyn Judge, cfg: &ExperimentConfig) -> Split {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.synth.seed);
    rng.set_stream(20);
    let (train_graph, test, stats) = build_test_set(g, judge, cfg.train.eval_negatives, &mut rng);
    Split { train_graph, test, stats }
}

/// Oracle-judged split; depends on the data seed only.
pub fn split_dataset(data: &SynthData, cfg: &ExperimentConfig) -> Split {
    split_graph(&data.graph, &mut OracleJudge::new(data.truth.clone()), cfg)
}

/// Training positives from `train_graph`: judge-filtered, or raw when the
/// judge is disabled or has no budget.
pub fn select_positives(
    train_graph: &RelGraph,
    judge: &mut dyn Judge,
    cfg: &ExperimentConfig,
) -> (AugmentedEdgeSet, bool) {
    if !cfg.use_judge || cfg.train.judge_budget == 0 {
        return (AugmentedEdgeSet::raw(train_graph), false);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    rng.set_stream(21);
    let aug = augment_edges(judge, train_graph, cfg.train.judge_budget, &mut rng);
    training_positives(&aug, train_graph)
}

pub fn positives_for(data: &SynthData, split: &Split, cfg: &ExperimentConfig) -> (AugmentedEdgeSet, bool) {
    select_positives(&split.train_graph, &mut OracleJudge::new(data.truth.clone()), cfg)
}

/// Fits on the split's training graph and evaluates on its test set.
pub fn train_and_evaluate(
    split: &Split,
    content: &ContentProvider,
    positives: &AugmentedEdgeSet,
    cfg: &ExperimentConfig,
) -> Result<(TrainOutcome, EmbeddingTable, EvalReport)> {
    let outcome = fit(&split.train_graph, content, positives, &cfg.model, &cfg.train)?;
    let embeddings = embed_all(&outcome.params, &cfg.model, content, &split.train_graph, cfg.eval_neighbor_seed())?;
    let report = evaluate(&embeddings, &split.test)?;
    Ok((outcome, embeddings, report))
}

pub struct RunResult {
    pub report: EvalReport,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub params: ParamStore,
    pub embeddings: EmbeddingTable,
    pub positives: AugmentedEdgeSet,
    /// Ground-truth precision of the training positives per relation.
    pub positive_precision: [f64; 2],
    /// Ground-truth precision of the generated behavior graph.
    pub graph_precision: f64,
    pub fell_back: bool,
}

/// Trains on `split` and evaluates on its test set.
pub fn run_on(data: &SynthData, split: &Split, cfg: &ExperimentConfig) -> Result<RunResult> {
    cfg.validate()?;
    let (positives, fell_back) = positives_for(data, split, cfg);
    let (outcome, embeddings, report) = train_and_evaluate(split, &data.content, &positives, cfg)?;
    let positive_precision =
        RelationType::ALL.map(|rel| data.truth.pair_precision(&positives.pairs[rel.index()], rel));
    Ok(RunResult {
        report,
        log: outcome.log,
        best_epoch: outcome.best_epoch,
        params: outcome.params,
        embeddings,
        positives,
        positive_precision,
        graph_precision: data.truth.precision(&data.graph),
        fell_back,
    })
}

/// Generates data from `cfg.synth`, then splits, trains and evaluates.
pub fn run_synthetic(cfg: &ExperimentConfig) -> Result<RunResult> {
    cfg.validate()?;
    let data = SynthData::generate(&cfg.synth)?;
    let split = split_dataset(&data, cfg);
    if split.test.is_empty() {
        return Err(Error::Empty("no test edges survived the hold-out".into()));
    }
    run_on(&data, &split, cfg)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub axis_value: f64,
    pub variant: String,
    pub seed: u64,
    pub graph_precision: f64,
    pub mrr: [f64; 2],
    pub hits: [f64; 2],
}

pub fn sweep_csv(axis: &str, rows: &[SweepRow]) -> String {
    let mut out = format!("{axis},variant,seed,graph_precision,H10_s,M10_s,H10_c,M10_c\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            r.axis_value, r.variant, r.seed, r.graph_precision, r.hits[0], r.mrr[0], r.hits[1], r.mrr[1]
        )
        .expect("write to string");
    }
    out
}

fn row(axis_value: f64, variant: &str, seed: u64, r: &RunResult) -> SweepRow {
    SweepRow {
        axis_value,
        variant: variant.to_string(),
        seed,
        graph_precision: r.graph_precision,
        mrr: RelationType::ALL.map(|rel| r.report.mrr_or_zero(rel)),
        hits: RelationType::ALL.map(|rel| r.report.hits_or_zero(rel)),
    }
}

/// Label of a variant given by its ablations.
pub fn variant_name(ablations: &[Ablation]) -> String {
    if ablations.is_empty() {
        "full".to_string()
    } else {
        ablations.iter().map(|a| a.as_str()).collect::<Vec<_>>().join("+")
    }
}

/// Train+eval for every (ratio, variant, seed) with injected behavior noise.
pub fn noise_sweep(
    base: &ExperimentConfig,
    ratios: &[f64],
    variants: &[Vec<Ablation>],
    seeds: &[u64],
) -> Result<Vec<SweepRow>> {
    if let Some(r) = ratios.iter().find(|r| !(0.0..=1.0).contains(*r)) {
        return Err(Error::config(format!("noise ratio {r} outside [0, 1]")));
    }
    let mut rows = Vec::new();
    for &ratio in ratios {
        for &seed in seeds {
            let mut cfg = base.with_seed(seed);
            cfg.synth.noise_ratio = ratio;
            let data = SynthData::generate(&cfg.synth)?;
            let split = split_dataset(&data, &cfg);
            for v in variants {
                let run = run_on(&data, &split, &cfg.ablated(v)?)?;
                log::info!("noise {ratio} {} seed {seed}: {}", variant_name(v), run.report.summary_line());
                rows.push(row(ratio, &variant_name(v), seed, &run));
            }
        }
    }
    Ok(rows)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    Lambda,
    JudgeBudget,
    Noise,
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::Lambda => "lambda",
            SweepAxis::JudgeBudget => "judge_budget",
            SweepAxis::Noise => "noise",
        }
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lambda" => Ok(SweepAxis::Lambda),
            "judge_budget" | "judge-budget" => Ok(SweepAxis::JudgeBudget),
            "noise" => Ok(SweepAxis::Noise),
            other => Err(Error::config(format!("unknown sweep axis {other:?}"))),
        }
    }
}

/// Train+eval across values of λ or the judge budget.
pub fn sensitivity_sweep(base: &ExperimentConfig, axis: SweepAxis, values: &[f64], seeds: &[u64]) -> Result<Vec<SweepRow>> {
    if values.len() < 2 {
        return Err(Error::config("a sweep needs at least two values"));
    }
    if axis == SweepAxis::Noise {
        return noise_sweep(base, values, &[Vec::new()], seeds);
    }
    let mut rows = Vec::new();
    for &seed in seeds {
        let cfg = base.with_seed(seed);
        let data = SynthData::generate(&cfg.synth)?;
        let split = split_dataset(&data, &cfg);
        for &v in values {
            let mut c = cfg.clone();
            match axis {
                SweepAxis::Lambda => c.train.lambda = v,
                SweepAxis::JudgeBudget => {
                    if v < 0.0 || v.fract() != 0.0 {
                        return Err(Error::config(format!("judge budget {v} is not a count")));
                    }
                    c.train.judge_budget = v as usize;
                }
                SweepAxis::Noise => unreachable!(),
            }
            let run = run_on(&data, &split, &c)?;
            log::info!("{} {v} seed {seed}: {}", axis.as_str(), run.report.summary_line());
            rows.push(row(v, "full", seed, &run));
        }
    }
    Ok(rows)
}

/// Mean of `f` over the rows of one variant at one axis value.
pub fn mean_of(rows: &[SweepRow], axis_value: f64, variant: &str, f: impl Fn(&SweepRow) -> f64) -> Option<f64> {
    let picked: Vec<f64> = rows
        .iter()
        .filter(|r| r.axis_value == axis_value && r.variant == variant)
        .map(f)
        .collect();
    (!picked.is_empty()).then(|| picked.iter().sum::<f64>() / picked.len() as f64)
}

