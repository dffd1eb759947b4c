//! Link-prediction evaluation with sampled negatives.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use rand::seq::{index, SliceRandom};
use rand::Rng;

use crate::embedding::EmbeddingTable;
use crate::error::{Error, Result};
use crate::graph::{degree_groups, EdgeKey, ItemId, RelGraph, RelationType};
use crate::judge::{Judge, Verdict};

pub const CUTOFF: usize = 10;
pub const DEFAULT_NEGATIVES: usize = 1000;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TestQuery {
    pub query: ItemId,
    pub positive: ItemId,
    pub negatives: Vec<ItemId>,
}

/// Held-out positives with their sampled negatives, per relation.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TestSet {
    pub queries: [Vec<TestQuery>; 2],
}

impl TestSet {
    pub fn get(&self, rel: RelationType) -> &[TestQuery] {
        &self.queries[rel.index()]
    }

    pub fn len(&self) -> usize {
        self.queries.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn items(&self) -> BTreeSet<ItemId> {
        self.queries
            .iter()
            .flatten()
            .flat_map(|q| std::iter::once(q.query).chain(std::iter::once(q.positive)).chain(q.negatives.iter().copied()))
            .collect()
    }
}

/// Draws up to `n` distinct items uniformly from everything except `exclude`.
pub fn sample_eval_negatives<R: Rng + ?Sized>(n_items: usize, exclude: &[ItemId], n: usize, rng: &mut R) -> Vec<ItemId> {
    let mut banned: Vec<ItemId> = exclude.iter().copied().filter(|&x| x < n_items).collect();
    banned.sort_unstable();
    banned.dedup();
    let pool = n_items - banned.len();
    let take = n.min(pool);
    // Map a rank in the pool back to an item id by skipping banned ids.
    index::sample(rng, pool, take)
        .into_iter()
        .map(|mut r| {
            for &b in &banned {
                if b <= r {
                    r += 1;
                } else {
                    break;
                }
            }
            r
        })
        .collect()
}

/// Counters reported by [`build_test_set`].
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TestSetStats {
    pub candidates: [usize; 2],
    pub retained: [usize; 2],
    pub judge_failures: [usize; 2],
}

/// Holds out at most one edge per item per relation, keeping every endpoint
/// with at least one remaining edge of that relation. Candidates the judge
/// rejects stay in the training graph.
pub fn build_test_set<R: Rng + ?Sized>(
    g: &RelGraph,
    judge: &mut dyn Judge,
    n_negatives: usize,
    rng: &mut R,
) -> (RelGraph, TestSet, TestSetStats) {
    let n = g.n_items();
    let mut removed = BTreeSet::new();
    let mut test = TestSet::default();
    let mut stats = TestSetStats::default();
    for rel in RelationType::ALL {
        let mut degree: Vec<usize> = (0..n).map(|i| g.degree(i, rel)).collect();
        let mut order: Vec<ItemId> = (0..n).collect();
        order.shuffle(rng);
        for i in order {
            if degree[i] < 2 {
                continue;
            }
            let options: Vec<ItemId> = g
                .neighbors(i, rel)
                .iter()
                .copied()
                .filter(|&j| degree[j] >= 2 && !removed.contains(&EdgeKey::new(rel, i, j)))
                .collect();
            if options.is_empty() {
                continue;
            }
            let j = options[rng.random_range(0..options.len())];
            stats.candidates[rel.index()] += 1;
            match judge.judge(i, j, rel) {
                Ok(Verdict::Yes) => {
                    removed.insert(EdgeKey::new(rel, i, j));
                    degree[i] -= 1;
                    degree[j] -= 1;
                    let negatives = sample_eval_negatives(n, &[i, j], n_negatives, rng);
                    test.queries[rel.index()].push(TestQuery {
                        query: i,
                        positive: j,
                        negatives,
                    });
                    stats.retained[rel.index()] += 1;
                }
                Ok(Verdict::No) => {}
                Err(e) => {
                    log::warn!("judge failed on test candidate ({i}, {j}, {rel}): {e}");
                    stats.judge_failures[rel.index()] += 1;
                }
            }
        }
    }
    if test.is_empty() {
        log::warn!("test set is empty: the judge retained none of the candidate edges");
    }
    (g.without(&removed), test, stats)
}

/// `1 +` the number of negatives scoring strictly above the positive.
pub fn rank_of_positive(query: &[f64], positive: &[f64], negatives: &[&[f64]]) -> Result<usize> {
    if negatives.is_empty() {
        return Err(Error::Usage("ranking needs at least one negative".into()));
    }
    let pos = mmsc_tensor::cosine(query, positive)?;
    let mut rank = 1;
    for n in negatives {
        // A tie counts against the positive.
        if mmsc_tensor::cosine(query, n)? >= pos {
            rank += 1;
        }
    }
    Ok(rank)
}

/// Rank from precomputed scores, with the same pessimistic tie rule.
pub fn rank_from_scores(positive: f64, negatives: &[f64]) -> usize {
    1 + negatives.iter().filter(|&&s| s >= positive).count()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub hits: f64,
    pub mrr: f64,
    pub ndcg: f64,
    pub count: usize,
}

/// H@10, MRR@10 and NDCG@10 for one relevant item per query.
pub fn metrics_at_10(ranks: &[usize]) -> Result<Metrics> {
    if ranks.is_empty() {
        return Err(Error::Usage("no ranks to summarize".into()));
    }
    if ranks.contains(&0) {
        return Err(Error::Usage("ranks are 1-based".into()));
    }
    let (mut h, mut m, mut n) = (0.0, 0.0, 0.0);
    for &r in ranks {
        if r <= CUTOFF {
            h += 1.0;
            m += 1.0 / r as f64;
            n += 1.0 / ((r + 1) as f64).log2();
        }
    }
    let k = ranks.len() as f64;
    Ok(Metrics {
        hits: h / k,
        mrr: m / k,
        ndcg: n / k,
        count: ranks.len(),
    })
}

/// Per-relation ranks and metrics.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub metrics: [Option<Metrics>; 2],
    pub ranks: [Vec<usize>; 2],
    /// Query item of every rank, aligned with `ranks`.
    pub query_items: [Vec<ItemId>; 2],
}

impl EvalReport {
    pub fn get(&self, rel: RelationType) -> Option<Metrics> {
        self.metrics[rel.index()]
    }

    pub fn mrr_or_zero(&self, rel: RelationType) -> f64 {
        self.get(rel).map_or(0.0, |m| m.mrr)
    }

    pub fn hits_or_zero(&self, rel: RelationType) -> f64 {
        self.get(rel).map_or(0.0, |m| m.hits)
    }

    pub fn csv_header() -> &'static str {
        "relation,hits10,mrr10,ndcg10,queries"
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::csv_header());
        out.push('\n');
        for rel in RelationType::ALL {
            match self.get(rel) {
                Some(m) => writeln!(out, "{},{:.6},{:.6},{:.6},{}", rel.name(), m.hits, m.mrr, m.ndcg, m.count),
                None => writeln!(out, "{},,,,0", rel.name()),
            }
            .expect("write to string");
        }
        out
    }

    /// `key=value` summary with the six headline metrics.
    pub fn summary_line(&self) -> String {
        let f = |v: Option<f64>| v.map_or("nan".to_string(), |x| format!("{x:.6}"));
        let s = self.get(RelationType::Substitutable);
        let c = self.get(RelationType::Complementary);
        format!(
            "H10_s={} M10_s={} N10_s={} H10_c={} M10_c={} N10_c={}",
            f(s.map(|m| m.hits)),
            f(s.map(|m| m.mrr)),
            f(s.map(|m| m.ndcg)),
            f(c.map(|m| m.hits)),
            f(c.map(|m| m.mrr)),
            f(c.map(|m| m.ndcg)),
        )
    }
}

/// Scores every test query by cosine over the final task embeddings.
pub fn evaluate(emb: &EmbeddingTable, test: &TestSet) -> Result<EvalReport> {
    let n = emb.n_items();
    let missing: BTreeSet<ItemId> = test.items().into_iter().filter(|&i| i >= n).collect();
    if !missing.is_empty() {
        return Err(Error::Coverage(missing.into_iter().collect()));
    }
    let mut metrics = [None, None];
    let mut ranks: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    let mut query_items: [Vec<ItemId>; 2] = [Vec::new(), Vec::new()];
    for rel in RelationType::ALL {
        for q in test.get(rel) {
            let qv = emb.vector(q.query, rel);
            let negs: Vec<&[f64]> = q.negatives.iter().map(|&j| emb.vector(j, rel)).collect();
            let r = rank_of_positive(qv, emb.vector(q.positive, rel), &negs)?;
            ranks[rel.index()].push(r);
            query_items[rel.index()].push(q.query);
        }
        if !ranks[rel.index()].is_empty() {
            metrics[rel.index()] = Some(metrics_at_10(&ranks[rel.index()])?);
        }
    }
    Ok(EvalReport {
        metrics,
        ranks,
        query_items,
    })
}

/// Metrics per degree group of the query item.
#[derive(Clone, Debug, PartialEq)]
pub struct DegreeGroupRow {
    pub group: usize,
    pub relation: RelationType,
    pub metrics: Option<Metrics>,
}

pub fn degree_group_report(report: &EvalReport, g: &RelGraph, n_groups: usize) -> Result<Vec<DegreeGroupRow>> {
    if report.ranks.iter().all(Vec::is_empty) {
        return Err(Error::Empty("degree groups need a nonempty test set".into()));
    }
    let groups = degree_groups(g, n_groups);
    let mut rows = Vec::new();
    for group in 0..n_groups.max(1) {
        for rel in RelationType::ALL {
            let ranks: Vec<usize> = report.ranks[rel.index()]
                .iter()
                .zip(&report.query_items[rel.index()])
                .filter(|(_, q)| groups[**q] == group)
                .map(|(r, _)| *r)
                .collect();
            let metrics = if ranks.is_empty() { None } else { Some(metrics_at_10(&ranks)?) };
            rows.push(DegreeGroupRow {
                group,
                relation: rel,
                metrics,
            });
        }
    }
    Ok(rows)
}

pub fn degree_rows_csv(rows: &[DegreeGroupRow]) -> String {
    let mut out = String::from("group,relation,hits10,mrr10,ndcg10,queries\n");
    for r in rows {
        match r.metrics {
            Some(m) => writeln!(
                out,
                "{},{},{:.6},{:.6},{:.6},{}",
                r.group,
                r.relation.name(),
                m.hits,
                m.mrr,
                m.ndcg,
                m.count
            ),
            None => writeln!(out, "{},{},,,,0", r.group, r.relation.name()),
        }
        .expect("write to string");
    }
    out
}

/// One query per line: `relation<TAB>query<TAB>positive<TAB>comma-separated negatives`.
pub fn write_test_set<W: Write>(mut w: W, test: &TestSet) -> Result<()> {
    writeln!(w, "# relation\tquery\tpositive\tnegatives")?;
    for rel in RelationType::ALL {
        for q in test.get(rel) {
            let negs: Vec<String> = q.negatives.iter().map(|x| x.to_string()).collect();
            writeln!(w, "{}\t{}\t{}\t{}", rel.code(), q.query, q.positive, negs.join(","))?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_test_set<R: BufRead>(r: R) -> Result<TestSet> {
    let mut test = TestSet::default();
    let mut offset = 0;
    for line in r.lines() {
        let line = line?;
        let here = offset;
        offset += line.len() + 1;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |m: &str| Error::Format {
            offset: here,
            message: m.to_string(),
        };
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 {
            return Err(bad("expected four tab-separated fields"));
        }
        let rel = match f[0] {
            "s" => RelationType::Substitutable,
            "c" => RelationType::Complementary,
            _ => return Err(bad("relation must be s or c")),
        };
        let id = |s: &str| s.trim().parse::<ItemId>().map_err(|_| bad("bad item id"));
        let negatives = if f[3].is_empty() {
            Vec::new()
        } else {
            f[3].split(',').map(id).collect::<Result<Vec<_>>>()?
        };
        test.queries[rel.index()].push(TestQuery {
            query: id(f[1])?,
            positive: id(f[2])?,
            negatives,
        });
    }
    Ok(test)
}
