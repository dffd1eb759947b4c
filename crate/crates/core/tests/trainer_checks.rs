use mmsc_core::coldstart::{coldstart_evaluate, with_cold_rows, ColdStartConfig, ContentIndex};
use mmsc_core::content::ContentProvider;
use mmsc_core::experiment::{positives_for, split_dataset, ExperimentConfig};
use mmsc_core::graph::{RelGraph, RelationType};
use mmsc_core::synth::{SynthConfig, SynthData};
use mmsc_core::trainer::{fit, load_checkpoint, save_checkpoint, AugmentedEdgeSet, TrainOutcome};
use mmsc_core::{EmbeddingTable, Error};

fn tiny() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.synth = SynthConfig {
        n_clusters: 16,
        items_per_cluster: 6,
        noise_ratio: 0.2,
        embed_dim: 8,
        seq_len: 2,
        ..SynthConfig::default()
    };
    cfg.model.dim = 8;
    cfg.model.seq_len = 2;
    cfg.train.max_epochs = 6;
    cfg.train.patience = 6;
    cfg.train.batch_size = 32;
    cfg.train.judge_budget = 600;
    cfg.with_seed(3)
}

fn trained(cfg: &ExperimentConfig) -> (SynthData, TrainOutcome) {
    let data = SynthData::generate(&cfg.synth).unwrap();
    let split = split_dataset(&data, cfg);
    let (pos, _) = positives_for(&data, &split, cfg);
    let out = fit(&split.train_graph, &data.content, &pos, &cfg.model, &cfg.train).unwrap();
    (data, out)
}

fn checkpoint_bytes(out: &TrainOutcome, cfg: &ExperimentConfig) -> Vec<u8> {
    let mut buf = Vec::new();
    save_checkpoint(&mut buf, &out.params, &cfg.model).unwrap();
    buf
}

#[test]
fn training_is_reproducible_and_checkpoints_round_trip() {
    let cfg = tiny();
    let (data, a) = trained(&cfg);
    let (_, b) = trained(&cfg);
    let bytes = checkpoint_bytes(&a, &cfg);
    assert_eq!(bytes, checkpoint_bytes(&b, &cfg));
    assert_eq!(a.log, b.log);

    let loaded = load_checkpoint(bytes.as_slice(), &cfg.model).unwrap();
    let mut again = Vec::new();
    save_checkpoint(&mut again, &loaded, &cfg.model).unwrap();
    assert_eq!(again, bytes);

    let val = a.validation.evaluate(&loaded, &cfg.model, &data.content).unwrap();
    assert_eq!(val, a.log[a.best_epoch].val);
}

#[test]
fn training_lowers_the_triplet_loss() {
    let cfg = tiny();
    let (_, out) = trained(&cfg);
    assert_eq!(out.log.len(), cfg.train.max_epochs + 1);
    let first = out.log[1].triplet.unwrap();
    let last = out.log.last().unwrap().triplet.unwrap();
    assert!(last[0] + last[1] < first[0] + first[1], "{first:?} -> {last:?}");
    assert!(out.best_epoch >= 1);
    let best = out.log[out.best_epoch].val.mean_mrr();
    assert!(out.log[1..].iter().all(|r| r.val.mean_mrr() <= best));
}

#[test]
fn damaged_or_mismatched_checkpoints_are_rejected() {
    let cfg = tiny();
    let store = cfg.model.init_params(1).unwrap();
    let mut buf = Vec::new();
    save_checkpoint(&mut buf, &store, &cfg.model).unwrap();

    let mut bad = buf.clone();
    bad[0] ^= 0xff;
    assert!(matches!(load_checkpoint(bad.as_slice(), &cfg.model), Err(Error::Checkpoint(_))));

    let mut other = cfg.model.clone();
    other.use_task_gate = false;
    assert!(matches!(load_checkpoint(buf.as_slice(), &other), Err(Error::Checkpoint(_))));

    let cut = &buf[..buf.len() - 3];
    assert!(load_checkpoint(cut, &cfg.model).is_err());
}

#[test]
fn empty_training_set_is_a_config_error() {
    let cfg = tiny();
    let data = SynthData::generate(&cfg.synth).unwrap();
    let empty = RelGraph::empty(data.graph.n_items());
    let pos = AugmentedEdgeSet::raw(&empty);
    match fit(&empty, &data.content, &pos, &cfg.model, &cfg.train) {
        Err(Error::Config(msg)) => assert!(msg.contains("edges"), "{msg}"),
        other => panic!("unexpected {:?}", other.map(|o| o.best_epoch)),
    }
}

#[test]
fn cold_rows_copy_an_identical_warm_item() {
    // Item 3 repeats item 1's content; with k = 1 it inherits item 1's row.
    let rows = [[1.0, 0.0], [0.0, 1.0], [0.6, 0.8], [0.0, 1.0]];
    let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().chain(r.iter()).copied()).collect();
    let content = ContentProvider::new(4, 2, 2, data).unwrap();
    let warm = EmbeddingTable::new(2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 0.0, 0.0], vec![-1.0, -2.0, -3.0, -4.0, -5.0, -6.0, 0.0, 0.0])
        .unwrap();
    let index = ContentIndex::build(&content, &[0, 1, 2]).unwrap();
    let table = with_cold_rows(&warm, &content, &index, &[3], 1).unwrap();
    assert_eq!(table.pair(3), warm.pair(1));
    for i in 0..3 {
        assert_eq!(table.pair(i), warm.pair(i));
    }
    let two = with_cold_rows(&warm, &content, &index, &[3], 2).unwrap();
    assert_eq!(two.vector(3, RelationType::Substitutable), &[4.0, 5.0]);
}

#[test]
fn cold_items_beat_the_null_model() {
    let cfg = tiny();
    let res = coldstart_evaluate(&SynthData::generate(&cfg.synth).unwrap(), &cfg, &ColdStartConfig::default()).unwrap();
    assert!(!res.cold_items.is_empty() && res.cold_items.len() < 20);
    let m = res.report.get(RelationType::Substitutable).unwrap();
    assert_eq!(m.count, res.report.ranks[0].len());
    // Random scoring would give about 10 / 87.
    assert!(m.hits > 0.5, "{m:?}");
}
