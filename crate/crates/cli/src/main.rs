use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mmsc_core::coldstart::{coldstart_evaluate, ColdStartConfig};
use mmsc_core::content::{read_embeddings, write_embeddings, ContentProvider};
use mmsc_core::eval::{degree_group_report, degree_rows_csv, evaluate, read_test_set, write_test_set, EvalReport};
use mmsc_core::experiment::{
    noise_sweep, select_positives, sensitivity_sweep, split_graph, sweep_csv, train_and_evaluate, Ablation,
    ExperimentConfig, SweepAxis,
};
use mmsc_core::graph::{read_edge_file, write_edge_file, Behavior, EdgeRecord, GraphError, RelGraph, RelationType};
use mmsc_core::judge::{ConstantJudge, ExternalJudge, Judge, OracleJudge, Verdict};
use mmsc_core::model::embed_all;
use mmsc_core::synth::{read_ground_truth, write_ground_truth, GroundTruth, SynthData};
use mmsc_core::trainer::{load_checkpoint, log_csv, save_checkpoint};
use mmsc_core::{Error, Result};

mod config;

use config::{JudgeKind, RunConfig};

#[derive(Parser)]
#[command(name = "mmsc", version, about = "Substitutable and complementary item embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a planted synthetic dataset.
    Synth(SynthArgs),
    /// Hold out test edges, train, checkpoint and evaluate.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a saved test set.
    Eval(EvalArgs),
    /// Train without some items and rank their partners from content alone.
    Coldstart(ColdstartArgs),
    /// Train and evaluate across values of one setting.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (created when missing).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Disable part of the model or pipeline; may be repeated.
    #[arg(long, value_name = "ABLATION")]
    ablate: Vec<String>,
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    clusters: Option<usize>,
    /// Items per cluster.
    #[arg(long)]
    items: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    intra_prob: Option<f64>,
    #[arg(long)]
    pairing_degree: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    noise: Option<f64>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    embed_noise: Option<f64>,
    #[arg(long)]
    seq_len: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, allow_negative_numbers = true)]
    lambda: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    lr: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    test: PathBuf,
    /// Message-passing graph; defaults to `train_edges.tsv` beside the checkpoint.
    #[arg(long)]
    graph: Option<PathBuf>,
}

#[derive(Args)]
struct ColdstartArgs {
    #[command(flatten)]
    common: Common,
    /// Fraction of items held out.
    #[arg(long)]
    holdout: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    /// noise, lambda or judge_budget.
    #[arg(long)]
    axis: String,
    #[arg(long, alias = "ratios", value_delimiter = ',', required = true)]
    values: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Extra noise-sweep variant, as a `+`-joined ablation list; may be repeated.
    #[arg(long)]
    variant: Vec<String>,
}

struct Setup {
    run: RunConfig,
    exp: ExperimentConfig,
    out: PathBuf,
}

fn setup(common: &Common, tweak: impl FnOnce(&mut RunConfig)) -> Result<Setup> {
    let mut run = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        run.seed = s;
    }
    if let Some(o) = &common.out {
        run.out_dir = Some(o.clone());
    }
    tweak(&mut run);
    let mut exp = run.experiment()?;
    for a in &common.ablate {
        a.parse::<Ablation>()?.apply(&mut exp)?;
    }
    exp.model.validate()?;
    run.absorb(&exp);
    let out = run.out_dir.clone().unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&out)?;
    Ok(Setup { run, exp, out })
}

struct Dataset {
    graph: RelGraph,
    content: ContentProvider,
    truth: Option<GroundTruth>,
}

fn load_data(s: &Setup) -> Result<Dataset> {
    if s.run.uses_synthetic_data() {
        let d = SynthData::generate(&s.exp.synth)?;
        return Ok(Dataset {
            graph: d.graph,
            content: d.content,
            truth: Some(d.truth),
        });
    }
    let data = &s.run.data;
    let content_path = data
        .content
        .as_ref()
        .ok_or_else(|| Error::config("data.content is required with data.edges"))?;
    let content = read_embeddings(BufReader::new(open(content_path)?))?;
    let graph = read_graph(data.edges.as_ref().expect("checked by caller"), content.n_items())?;
    let truth = match &data.truth {
        Some(p) => Some(read_ground_truth(BufReader::new(open(p)?))?),
        None => None,
    };
    if let Some(t) = &truth {
        if t.n_items() != content.n_items() {
            return Err(Error::Format {
                offset: 0,
                message: format!("ground truth covers {} items, content {}", t.n_items(), content.n_items()),
            });
        }
    }
    Ok(Dataset { graph, content, truth })
}

fn open(p: &Path) -> Result<File> {
    File::open(p).map_err(|e| Error::config(format!("cannot open {}: {e}", p.display())))
}

fn read_graph(path: &Path, n_items: usize) -> Result<RelGraph> {
    let (edges, implied) = read_edge_file(BufReader::new(open(path)?))?;
    if implied > n_items {
        return Err(Error::Format {
            offset: 0,
            message: format!("{} mentions item {} but there are only {n_items} items", path.display(), implied - 1),
        });
    }
    Ok(RelGraph::build(n_items, &edges)?)
}

fn edge_records(g: &RelGraph) -> Vec<EdgeRecord> {
    g.all_edges()
        .map(|k| {
            let b = match k.relation {
                RelationType::Substitutable => Behavior::CoView,
                RelationType::Complementary => Behavior::CoPurchase,
            };
            EdgeRecord::new(k.lo, k.hi, b)
        })
        .collect()
}

fn make_judge(run: &RunConfig, truth: Option<&GroundTruth>, n_items: usize) -> Result<Box<dyn Judge>> {
    Ok(match run.judge.kind {
        JudgeKind::Oracle => {
            let t = truth.ok_or_else(|| Error::config("the oracle judge needs data.truth"))?;
            Box::new(OracleJudge::new(t.clone()))
        }
        JudgeKind::External => {
            let program = run
                .judge
                .program
                .as_deref()
                .ok_or_else(|| Error::config("judge.program is required for the external judge"))?;
            let texts = match &run.judge.texts {
                Some(p) => fs::read_to_string(p)?.lines().map(str::to_string).collect(),
                None => (0..n_items).map(|i| format!("item {i}")).collect(),
            };
            Box::new(ExternalJudge::spawn(program, &run.judge.args, texts)?)
        }
        JudgeKind::None => Box::new(ConstantJudge(Verdict::Yes)),
    })
}

/// Writes `body` after the resolved configuration as comment lines.
fn write_with_config(path: &Path, run: &RunConfig, body: &str) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(run.as_comment().as_bytes())?;
    w.write_all(body.as_bytes())?;
    w.flush()?;
    Ok(())
}

fn write_reports(s: &Setup, name: &str, report: &EvalReport, graph: &RelGraph) -> Result<()> {
    write_with_config(&s.out.join(format!("{name}.csv")), &s.run, &report.to_csv())?;
    if report.ranks.iter().any(|r| !r.is_empty()) {
        let rows = degree_group_report(report, graph, s.run.eval.degree_groups)?;
        write_with_config(&s.out.join(format!("{name}_degree_groups.csv")), &s.run, &degree_rows_csv(&rows))?;
    }
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let s = setup(&a.common, |run| {
        let sy = &mut run.synth;
        sy.clusters = a.clusters.unwrap_or(sy.clusters);
        sy.items_per_cluster = a.items.unwrap_or(sy.items_per_cluster);
        sy.intra_prob = a.intra_prob.unwrap_or(sy.intra_prob);
        sy.pairing_degree = a.pairing_degree.unwrap_or(sy.pairing_degree);
        sy.noise = a.noise.unwrap_or(sy.noise);
        sy.embed_noise = a.embed_noise.unwrap_or(sy.embed_noise);
        if let Some(d) = a.dim {
            sy.embed_dim = d;
            run.model.dim = d;
        }
        if let Some(l) = a.seq_len {
            run.synth.seq_len = l;
            run.model.seq_len = l;
        }
        // The generated files stand alone; ignore any input paths.
        run.data = Default::default();
    })?;
    s.exp.synth.validate()?;
    let data = SynthData::generate(&s.exp.synth)?;

    let mut body = Vec::new();
    write_edge_file(&mut body, &edge_records(&data.graph))?;
    write_with_config(&s.out.join("edges.tsv"), &s.run, &String::from_utf8(body).expect("ascii"))?;
    let mut body = Vec::new();
    write_ground_truth(&mut body, &data.truth)?;
    write_with_config(&s.out.join("truth.txt"), &s.run, &String::from_utf8(body).expect("ascii"))?;
    let mut w = BufWriter::new(File::create(s.out.join("content.mmeb"))?);
    write_embeddings(&mut w, &data.content)?;
    w.flush()?;
    fs::write(s.out.join("config.toml"), toml::to_string(&s.run).expect("config serializes"))?;
    println!(
        "items={} substitutable={} complementary={} noise_edges={} precision={:.6}",
        data.graph.n_items(),
        data.graph.edge_count(RelationType::Substitutable),
        data.graph.edge_count(RelationType::Complementary),
        data.graph.noise_edges().len(),
        data.truth.precision(&data.graph)
    );
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let s = setup(&a.common, |run| {
        run.train.lambda = a.lambda.unwrap_or(run.train.lambda);
        run.train.max_epochs = a.epochs.unwrap_or(run.train.max_epochs);
        run.train.learning_rate = a.lr.unwrap_or(run.train.learning_rate);
    })?;
    let data = load_data(&s)?;
    let mut judge = make_judge(&s.run, data.truth.as_ref(), data.graph.n_items())?;
    let split = split_graph(&data.graph, judge.as_mut(), &s.exp);
    log::info!(
        "test queries: {} substitutable, {} complementary",
        split.test.get(RelationType::Substitutable).len(),
        split.test.get(RelationType::Complementary).len()
    );
    let (positives, fell_back) = select_positives(&split.train_graph, judge.as_mut(), &s.exp);
    if s.exp.use_judge && !fell_back {
        log::info!(
            "judge acceptance: {:.3} substitutable, {:.3} complementary",
            positives.acceptance_rate(RelationType::Substitutable),
            positives.acceptance_rate(RelationType::Complementary)
        );
    }
    let (outcome, _, report) = train_and_evaluate(&split, &data.content, &positives, &s.exp)?;

    let mut w = BufWriter::new(File::create(s.out.join("model.ckpt"))?);
    save_checkpoint(&mut w, &outcome.params, &s.exp.model)?;
    w.flush()?;
    write_with_config(&s.out.join("train_log.csv"), &s.run, &log_csv(&outcome.log))?;
    let mut body = Vec::new();
    write_test_set(&mut body, &split.test)?;
    write_with_config(&s.out.join("test.tsv"), &s.run, &String::from_utf8(body).expect("ascii"))?;
    let mut body = Vec::new();
    write_edge_file(&mut body, &edge_records(&split.train_graph))?;
    write_with_config(&s.out.join("train_edges.tsv"), &s.run, &String::from_utf8(body).expect("ascii"))?;
    write_reports(&s, "metrics", &report, &split.train_graph)?;
    log::info!("best epoch {}", outcome.best_epoch);
    println!("{}", report.summary_line());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let s = setup(&a.common, |_| {})?;
    let content = if s.run.uses_synthetic_data() {
        SynthData::generate(&s.exp.synth)?.content
    } else {
        let p = s.run.data.content.as_ref().ok_or_else(|| Error::config("data.content is required"))?;
        read_embeddings(BufReader::new(open(p)?))?
    };
    let graph_path = a
        .graph
        .clone()
        .unwrap_or_else(|| a.checkpoint.parent().unwrap_or(Path::new(".")).join("train_edges.tsv"));
    let graph = read_graph(&graph_path, content.n_items())?;
    let params = load_checkpoint(BufReader::new(open(&a.checkpoint)?), &s.exp.model)?;
    let test = read_test_set(BufReader::new(open(&a.test)?))?;
    let emb = embed_all(&params, &s.exp.model, &content, &graph, s.exp.eval_neighbor_seed())?;
    let report = evaluate(&emb, &test)?;
    write_reports(&s, "eval", &report, &graph)?;
    println!("{}", report.summary_line());
    Ok(())
}

fn synthetic_only(s: &Setup, what: &str) -> Result<SynthData> {
    let d = load_data(s)?;
    let truth = d
        .truth
        .ok_or_else(|| Error::config(format!("{what} needs ground truth (data.truth or synthetic data)")))?;
    Ok(SynthData {
        graph: d.graph,
        truth,
        content: d.content,
    })
}

fn cmd_coldstart(a: ColdstartArgs) -> Result<()> {
    let s = setup(&a.common, |run| {
        run.eval.holdout = a.holdout.unwrap_or(run.eval.holdout);
        run.eval.coldstart_k = a.k.unwrap_or(run.eval.coldstart_k);
    })?;
    let data = synthetic_only(&s, "coldstart")?;
    let cs = ColdStartConfig {
        holdout_fraction: s.run.eval.holdout,
        k: s.run.eval.coldstart_k,
    };
    let result = coldstart_evaluate(&data, &s.exp, &cs)?;
    write_with_config(&s.out.join("coldstart.csv"), &s.run, &result.report.to_csv())?;
    log::info!("{} cold items", result.cold_items.len());
    println!("{}", result.report.summary_line());
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let s = setup(&a.common, |_| {})?;
    if !s.run.uses_synthetic_data() {
        return Err(Error::config("sweeps regenerate data and need the [synth] section, not data files"));
    }
    let axis: SweepAxis = a.axis.parse()?;
    let seeds = if a.seeds.is_empty() { vec![s.run.seed] } else { a.seeds.clone() };
    let rows = match axis {
        SweepAxis::Noise => {
            let mut variants = vec![Vec::new()];
            for v in &a.variant {
                variants.push(v.split('+').map(str::parse).collect::<Result<Vec<Ablation>>>()?);
            }
            noise_sweep(&s.exp, &a.values, &variants, &seeds)?
        }
        _ => sensitivity_sweep(&s.exp, axis, &a.values, &seeds)?,
    };
    let csv = sweep_csv(axis.as_str(), &rows);
    write_with_config(&s.out.join(format!("sweep_{}.csv", axis.as_str())), &s.run, &csv)?;
    print!("{csv}");
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    if e.is_numerical() {
        4
    } else if e.is_data_format() {
        3
    } else {
        match e {
            Error::Coverage(_) | Error::Lookup(_) => 3,
            Error::Config(_)
            | Error::Usage(_)
            | Error::Capacity { .. }
            | Error::Io(_)
            | Error::Graph(GraphError::MetaPath(_))
            | Error::Checkpoint(_) => 2,
            _ => 1,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Coldstart(a) => cmd_coldstart(a),
        Command::Sweep(a) => cmd_sweep(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
