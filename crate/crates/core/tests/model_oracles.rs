use mmsc_core::behavior::NeighborSets;
use mmsc_core::content::ContentProvider;
use mmsc_core::fusion::{gate_names, semantic_gate, task_gate, GateLevel};
use mmsc_core::graph::{sample_negatives, Fanout, RelGraph, RelationType};
use mmsc_core::model::{self, embed_with, GraphInputs, ModelConfig};
use mmsc_core::trainer::{total_loss, Batch, TrainConfig};
use mmsc_tensor::{finite_diff_check, ParamStore, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn random_graph(n: usize, edges: usize, rng: &mut impl Rng) -> RelGraph {
    let pairs: Vec<_> = (0..edges)
        .map(|_| {
            let a = rng.random_range(0..n);
            let b = rng.random_range(0..n);
            let rel = if rng.random_bool(0.5) { RelationType::Substitutable } else { RelationType::Complementary };
            (a, b, rel)
        })
        .filter(|(a, b, _)| a != b)
        .collect();
    RelGraph::from_typed_pairs(n, pairs).unwrap()
}

fn random_content(n: usize, seq_len: usize, dim: usize, rng: &mut impl Rng) -> ContentProvider {
    let data = (0..n * seq_len * dim).map(|_| StandardNormal.sample(rng)).collect();
    ContentProvider::new(n, seq_len, dim, data).unwrap()
}

fn toy_config() -> ModelConfig {
    ModelConfig {
        dim: 8,
        content_heads: 2,
        behavior_heads: 2,
        seq_len: 4,
        fanout: Fanout::Unlimited,
        ..ModelConfig::default()
    }
}

#[test]
fn attention_weights_are_distributions() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for trial in 0..1000 {
        let n = rng.random_range(3..15);
        let cfg = ModelConfig {
            dim: 4,
            content_heads: 1,
            behavior_heads: rng.random_range(1..3),
            seq_len: 2,
            fanout: Fanout::cap(rng.random_range(1..5)),
            ..ModelConfig::default()
        };
        let g = random_graph(n, rng.random_range(0..3 * n), &mut rng);
        let content = random_content(n, 2, 4, &mut rng);
        let store = cfg.init_params(trial).unwrap();
        let neighbors = NeighborSets::sample(&g, &cfg.meta_paths, cfg.fanout, &mut rng);
        let mut tape = Tape::new();
        let out = model::forward(&mut tape, &store, &cfg, &GraphInputs { content: &content, neighbors: &neighbors }).unwrap();
        for task in RelationType::ALL {
            let b = out.behavior[task.index()].as_ref().unwrap();
            let live: Vec<_> = neighbors.task(task).iter().filter(|p| p.n_edges() > 0).collect();
            assert_eq!(b.alphas.len(), live.len());
            for (paths, heads) in live.iter().zip(&b.alphas) {
                for &alpha in heads {
                    let a = tape.value(alpha).data();
                    let mut at = 0;
                    for i in 0..n {
                        let m = paths.of(i).len();
                        if m > 0 {
                            let s: f64 = a[at..at + m].iter().sum();
                            assert!((s - 1.0).abs() <= 1e-9, "alpha sum {s}");
                            assert!(a[at..at + m].iter().all(|&x| x >= 0.0));
                        }
                        at += m;
                    }
                    assert_eq!(at, a.len());
                }
            }
            if let Some(beta) = b.beta {
                let beta = tape.value(beta).data();
                for i in 0..n {
                    let (lo, hi) = (b.beta_offsets[i], b.beta_offsets[i + 1]);
                    if lo < hi {
                        let s: f64 = beta[lo..hi].iter().sum();
                        assert!((s - 1.0).abs() <= 1e-9, "beta sum {s}");
                    } else {
                        assert!(b.fallback_items.contains(&i));
                    }
                }
            }
        }
    }
}

fn random_gate_store(rng: &mut impl Rng, d: usize, scale: f64) -> ParamStore {
    let mut store = ParamStore::new();
    for level in [GateLevel::Semantic, GateLevel::Task] {
        for task in RelationType::ALL {
            let [w1, w2, b] = gate_names(level, task);
            let mut m = |shape: &[usize]| {
                let k = shape.iter().product();
                let v: Vec<f64> = (0..k).map(|_| { let x: f64 = StandardNormal.sample(&mut *rng); scale * x }).collect();
                Tensor::new(shape.to_vec(), v).unwrap()
            };
            let (a, c, e) = (m(&[d, d]), m(&[d, d]), m(&[d]));
            store.insert(w1, a).unwrap();
            store.insert(w2, c).unwrap();
            store.insert(b, e).unwrap();
        }
    }
    store
}

fn between(x: f64, a: f64, b: f64) -> bool {
    let slack = 1e-12 * (1.0 + a.abs().max(b.abs()));
    x >= a.min(b) - slack && x <= a.max(b) + slack
}

#[test]
fn gates_are_convex_on_random_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let d = 6;
    let mut store = ParamStore::new();
    for trial in 0..10_000 {
        if trial % 100 == 0 {
            // Fresh parameters, sometimes large enough to saturate the sigmoid.
            let scale = [0.1, 1.0, 30.0][trial / 100 % 3];
            store = random_gate_store(&mut rng, d, scale);
        }
        let mut v = || -> Vec<f64> { (0..d).map(|_| { let x: f64 = StandardNormal.sample(&mut rng); 5.0 * x }).collect() };
        let (q, p) = (v(), v());
        let task = if trial % 2 == 0 { RelationType::Substitutable } else { RelationType::Complementary };
        let a = semantic_gate(&store, task, &q, &p).unwrap();
        assert!((0..d).all(|i| between(a[i], q[i], p[i])));
        let (es, ec) = task_gate(&store, &q, &p).unwrap();
        assert!((0..d).all(|i| between(es[i], q[i], p[i]) && between(ec[i], q[i], p[i])));
    }
}

proptest! {
    #[test]
    fn semantic_gate_stays_between_inputs(
        seed in any::<u64>(),
        q in prop::collection::vec(-1e3f64..1e3, 4),
        p in prop::collection::vec(-1e3f64..1e3, 4),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let store = random_gate_store(&mut rng, 4, 1.0);
        let a = semantic_gate(&store, RelationType::Complementary, &q, &p).unwrap();
        for i in 0..4 {
            prop_assert!(between(a[i], q[i], p[i]));
        }
    }
}

struct Toy {
    cfg: ModelConfig,
    train: TrainConfig,
    content: ContentProvider,
    view: NeighborSets,
    perturbed: NeighborSets,
    batch: Batch,
    store: ParamStore,
}

fn toy(lambda: f64) -> Toy {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let n = 20;
    let cfg = toy_config();
    let g = random_graph(n, 40, &mut rng);
    let content = random_content(n, cfg.seq_len, cfg.dim, &mut rng);
    let view = NeighborSets::sample(&g, &cfg.meta_paths, cfg.fanout, &mut rng);
    let dropped = mmsc_core::graph::perturb(&g, 0.2, &mut rng);
    let perturbed = NeighborSets::sample(&dropped, &cfg.meta_paths, cfg.fanout, &mut rng);
    let mut batch = Batch::default();
    for rel in RelationType::ALL {
        for e in g.edges(rel).take(6) {
            let (a, b) = (e.lo, e.hi);
            batch.positives[rel.index()].push((a, b));
            batch.negatives[rel.index()].push(sample_negatives(&g, a, rel, 3, &mut rng).unwrap());
        }
    }
    batch.ssl_items = (0..n).step_by(2).collect();
    let train = TrainConfig { lambda, ..TrainConfig::default() };
    let store = cfg.init_params(5).unwrap();
    Toy { cfg, train, content, view, perturbed, batch, store }
}

#[test]
fn full_loss_gradients_match_finite_differences() {
    let t = toy(0.005);
    let started = std::time::Instant::now();
    let report = finite_diff_check(
        |p: &ParamStore, tape: &mut Tape| {
            let parts = total_loss(tape, p, &t.cfg, &t.train, &t.content, &t.view, Some(&t.perturbed), &t.batch)
                .map_err(|e| mmsc_tensor::TensorError::Usage(e.to_string()))?;
            assert!(parts.ssl.is_some());
            Ok(parts.total)
        },
        &t.store,
        1e-6,
    )
    .unwrap();
    assert!(report.checked > 1000, "{report:?}");
    assert!(report.max_rel_error < 1e-4, "{report:?}");
    assert!(started.elapsed().as_secs() < 60);
}

#[test]
fn zero_lambda_is_the_triplet_objective() {
    let t = toy(0.0);
    let mut tape = Tape::new();
    let parts = total_loss(
        &mut tape,
        &t.store,
        &t.cfg,
        &t.train,
        &t.content,
        &t.view,
        Some(&t.perturbed),
        &t.batch,
    )
    .unwrap();
    assert!(parts.ssl.is_none());

    // Reference: hinge sums over final embeddings computed outside the tape.
    let emb = embed_with(&t.store, &t.cfg, &t.content, &t.view).unwrap();
    let mut want = 0.0;
    for rel in RelationType::ALL {
        let i = rel.index();
        let mut sum = 0.0;
        for (&(a, p), negs) in t.batch.positives[i].iter().zip(&t.batch.negatives[i]) {
            for &k in negs {
                let sp = emb.score(a, p, rel).unwrap();
                let sn = emb.score(a, k, rel).unwrap();
                sum += (t.train.margin - sp + sn).max(0.0);
            }
        }
        want += sum / t.batch.positives[i].len() as f64;
    }
    let got = tape.value(parts.total).item().unwrap();
    assert!((got - want).abs() < 1e-12, "{got} vs {want}");

    let ts = tape.value(parts.triplet[0]).item().unwrap();
    let tc = tape.value(parts.triplet[1]).item().unwrap();
    assert_eq!(got.to_bits(), (ts + tc).to_bits());
}

#[test]
fn ssl_term_adds_lambda_weighted_infonce() {
    let with = toy(0.5);
    let mut tape = Tape::new();
    let p = total_loss(
        &mut tape,
        &with.store,
        &with.cfg,
        &with.train,
        &with.content,
        &with.view,
        Some(&with.perturbed),
        &with.batch,
    )
    .unwrap();
    let total = tape.value(p.total).item().unwrap();
    let trip = tape.value(p.triplet[0]).item().unwrap() + tape.value(p.triplet[1]).item().unwrap();
    let ssl = tape.value(p.ssl.unwrap()).item().unwrap();
    assert!(ssl > 0.0);
    assert!((total - trip - 0.5 * ssl).abs() < 1e-12);
}
