use mmsc_core::eval::{
    build_test_set, degree_group_report, evaluate, metrics_at_10, rank_of_positive, read_test_set, write_test_set,
    TestQuery, TestSet,
};
use mmsc_core::graph::{RelGraph, RelationType};
use mmsc_core::judge::{ConstantJudge, OracleJudge, Verdict};
use mmsc_core::synth::{SynthConfig, SynthData};
use mmsc_core::EmbeddingTable;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Direct transcription of the metric definitions, summing in rank order.
fn brute_force(ranks: &[usize]) -> (f64, f64, f64) {
    let mut h = 0.0;
    let mut m = 0.0;
    let mut n = 0.0;
    for &r in ranks {
        let hit = if r <= 10 { 1.0 } else { 0.0 };
        h += hit;
        m += hit * (1.0 / r as f64);
        n += hit * (1.0 / ((r + 1) as f64).log2());
    }
    let k = ranks.len() as f64;
    (h / k, m / k, n / k)
}

#[test]
fn metrics_match_brute_force_on_random_sequences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100_000 {
        let len = rng.random_range(1..20);
        let ranks: Vec<usize> = (0..len).map(|_| rng.random_range(1..25)).collect();
        let got = metrics_at_10(&ranks).unwrap();
        let (h, m, n) = brute_force(&ranks);
        assert_eq!((got.hits, got.mrr, got.ndcg), (h, m, n), "{ranks:?}");
    }
}

#[test]
fn metric_examples() {
    let m = metrics_at_10(&[1, 1, 1]).unwrap();
    assert_eq!((m.hits, m.mrr, m.ndcg), (1.0, 1.0, 1.0));
    let m = metrics_at_10(&[3]).unwrap();
    assert_eq!((m.hits, m.mrr, m.ndcg), (1.0, 1.0 / 3.0, 0.5));
    let m = metrics_at_10(&[11]).unwrap();
    assert_eq!((m.hits, m.mrr, m.ndcg), (0.0, 0.0, 0.0));
    assert!(metrics_at_10(&[]).is_err());
}

fn random_vec(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

#[test]
fn rank_matches_sort_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for trial in 0..10_000 {
        let d = rng.random_range(2..6);
        let q = random_vec(&mut rng, d);
        let pos = random_vec(&mut rng, d);
        let mut negs: Vec<Vec<f64>> = (0..rng.random_range(1..30)).map(|_| random_vec(&mut rng, d)).collect();
        if trial % 5 == 0 {
            // Exact ties must rank against the positive.
            negs.push(pos.clone());
        }
        // Sort all candidates by score, positive placed after equal scores.
        let mut scored: Vec<(f64, bool)> = negs.iter().map(|n| (cosine(&q, n), false)).collect();
        scored.push((cosine(&q, &pos), true));
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let want = scored.iter().position(|s| s.1).unwrap() + 1;
        let refs: Vec<&[f64]> = negs.iter().map(Vec::as_slice).collect();
        assert_eq!(rank_of_positive(&q, &pos, &refs).unwrap(), want);
    }
}

#[test]
fn rank_examples() {
    let q = [1.0, 0.0];
    let pos = [0.9, (1.0f64 - 0.81).sqrt()];
    let low = [0.5, (1.0f64 - 0.25).sqrt()];
    assert_eq!(rank_of_positive(&q, &pos, &[&low, &low]).unwrap(), 1);
    assert_eq!(rank_of_positive(&q, &pos, &[&pos, &low]).unwrap(), 2);
    assert!(rank_of_positive(&[0.0, 0.0], &pos, &[&low]).is_err());
    assert!(rank_of_positive(&q, &pos, &[]).is_err());
}

proptest! {
    #[test]
    fn rank_is_permutation_invariant(seed in any::<u64>(), m in 1usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = random_vec(&mut rng, 4);
        let pos = random_vec(&mut rng, 4);
        let mut negs: Vec<Vec<f64>> = (0..m).map(|_| random_vec(&mut rng, 4)).collect();
        let refs: Vec<&[f64]> = negs.iter().map(Vec::as_slice).collect();
        let r1 = rank_of_positive(&q, &pos, &refs).unwrap();
        negs.shuffle(&mut rng);
        let refs: Vec<&[f64]> = negs.iter().map(Vec::as_slice).collect();
        prop_assert_eq!(rank_of_positive(&q, &pos, &refs).unwrap(), r1);
    }
}

fn random_table(n: usize, d: usize, rng: &mut impl Rng) -> EmbeddingTable {
    let s = (0..n * d).map(|_| StandardNormal.sample(rng)).collect();
    let c = (0..n * d).map(|_| StandardNormal.sample(rng)).collect();
    EmbeddingTable::new(d, s, c).unwrap()
}

#[test]
fn random_embeddings_score_at_the_null_rate() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let n = 2000;
    let emb = random_table(n, 16, &mut rng);
    let mut test = TestSet::default();
    for rel in RelationType::ALL {
        for _ in 0..1500 {
            let query = rng.random_range(0..n);
            let mut positive = rng.random_range(0..n);
            while positive == query {
                positive = rng.random_range(0..n);
            }
            let negatives = mmsc_core::eval::sample_eval_negatives(n, &[query, positive], 1000, &mut rng);
            test.queries[rel.index()].push(TestQuery { query, positive, negatives });
        }
    }
    let report = evaluate(&emb, &test).unwrap();
    let p: f64 = 10.0 / 1001.0;
    let sd = (p * (1.0 - p) / 1500.0).sqrt();
    for rel in RelationType::ALL {
        let h = report.get(rel).unwrap().hits;
        assert!((h - p).abs() <= 3.0 * sd, "{rel}: H@10 {h} vs {p} ± {sd}");
    }
}

fn planted() -> SynthData {
    SynthData::generate(&SynthConfig {
        n_clusters: 20,
        items_per_cluster: 8,
        noise_ratio: 0.3,
        seed: 2,
        ..SynthConfig::default()
    })
    .unwrap()
}

#[test]
fn oracle_filtered_test_pairs_are_ground_truth() {
    let data = planted();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (train, test, stats) = build_test_set(&data.graph, &mut OracleJudge::new(data.truth.clone()), 1000, &mut rng);
    assert!(stats.retained.iter().all(|&r| r > 0));
    assert!(stats.retained[0] < stats.candidates[0] || stats.retained[1] < stats.candidates[1]);
    for rel in RelationType::ALL {
        for q in test.get(rel) {
            assert!(data.truth.contains(q.query, q.positive, rel));
            assert!(!train.has_edge(q.query, q.positive, rel));
            assert!(data.graph.has_edge(q.query, q.positive, rel));
            assert_eq!(q.negatives.len(), data.graph.n_items() - 2);
            assert!(!q.negatives.contains(&q.query) && !q.negatives.contains(&q.positive));
        }
        // Every item keeps an edge of each relation it had.
        for i in 0..train.n_items() {
            if data.graph.degree(i, rel) > 0 {
                assert!(train.degree(i, rel) > 0, "item {i} lost all {rel} edges");
            }
        }
    }
    assert_eq!(
        train.total_edges() + stats.retained.iter().sum::<usize>(),
        data.graph.total_edges()
    );
}

#[test]
fn small_universe_caps_negatives() {
    let pairs = [(0, 1), (1, 2), (2, 3), (3, 4), (4, 0)].map(|(a, b)| (a, b, RelationType::Substitutable));
    let g = RelGraph::from_typed_pairs(5, pairs).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (_, test, _) = build_test_set(&g, &mut ConstantJudge(Verdict::Yes), 1000, &mut rng);
    assert!(!test.is_empty());
    for q in test.get(RelationType::Substitutable) {
        assert_eq!(q.negatives.len(), 3);
    }
}

#[test]
fn rejecting_judge_gives_empty_test_set() {
    let data = planted();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (train, test, stats) = build_test_set(&data.graph, &mut ConstantJudge(Verdict::No), 1000, &mut rng);
    assert!(test.is_empty());
    assert!(stats.candidates.iter().sum::<usize>() > 0);
    assert_eq!(train, data.graph);
}

#[test]
fn degree_groups_recompose_to_global_metrics() {
    let data = planted();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (train, test, _) = build_test_set(&data.graph, &mut OracleJudge::new(data.truth.clone()), 100, &mut rng);
    let emb = random_table(data.graph.n_items(), 8, &mut rng);
    let report = evaluate(&emb, &test).unwrap();
    let rows = degree_group_report(&report, &train, 10).unwrap();
    for rel in RelationType::ALL {
        let global = report.get(rel).unwrap();
        let (mut count, mut hits, mut mrr, mut ndcg) = (0usize, 0.0, 0.0, 0.0);
        for r in rows.iter().filter(|r| r.relation == rel) {
            if let Some(m) = r.metrics {
                count += m.count;
                hits += m.hits * m.count as f64;
                mrr += m.mrr * m.count as f64;
                ndcg += m.ndcg * m.count as f64;
            }
        }
        assert_eq!(count, global.count);
        let k = count as f64;
        assert!((hits / k - global.hits).abs() < 1e-12);
        assert!((mrr / k - global.mrr).abs() < 1e-12);
        assert!((ndcg / k - global.ndcg).abs() < 1e-12);
    }
}

#[test]
fn uniform_degree_groups_look_alike() {
    // A ring has one degree everywhere; random embeddings give every group
    // the same expected hit rate.
    let n = 3000;
    let g = RelGraph::from_typed_pairs(n, (0..n).map(|i| (i, (i + 1) % n, RelationType::Substitutable))).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let emb = random_table(n, 8, &mut rng);
    let mut test = TestSet::default();
    for i in 0..n {
        let negatives = mmsc_core::eval::sample_eval_negatives(n, &[i, (i + 1) % n], 99, &mut rng);
        test.queries[0].push(TestQuery { query: i, positive: (i + 1) % n, negatives });
    }
    let report = evaluate(&emb, &test).unwrap();
    let rows = degree_group_report(&report, &g, 10).unwrap();
    let p: f64 = 0.1;
    let sd = (p * (1.0 - p) / 300.0).sqrt();
    for r in rows.iter().filter(|r| r.relation == RelationType::Substitutable) {
        let m = r.metrics.unwrap();
        assert_eq!(m.count, 300);
        assert!((m.hits - p).abs() < 4.0 * sd, "group {}: {}", r.group, m.hits);
    }
}

#[test]
fn unknown_items_are_a_coverage_error() {
    let emb = EmbeddingTable::new(2, vec![1.0; 6], vec![1.0; 6]).unwrap();
    let mut test = TestSet::default();
    test.queries[1].push(TestQuery { query: 0, positive: 7, negatives: vec![1, 9] });
    match evaluate(&emb, &test) {
        Err(mmsc_core::Error::Coverage(items)) => assert_eq!(items, vec![7, 9]),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn test_set_file_round_trip() {
    let data = planted();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (_, test, _) = build_test_set(&data.graph, &mut OracleJudge::new(data.truth.clone()), 20, &mut rng);
    let mut buf = Vec::new();
    write_test_set(&mut buf, &test).unwrap();
    assert_eq!(read_test_set(buf.as_slice()).unwrap(), test);
}
