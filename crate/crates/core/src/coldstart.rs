//! Embeddings for items unseen in training: retrieve the most similar
//! training items by pooled content and average their final embeddings.

use mmsc_tensor::ParamStore;
use rand::seq::{index, IndexedRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::content::ContentProvider;
use crate::embedding::{EmbeddingTable, TaskPairEmbedding};
use crate::error::{Error, Result};
use crate::eval::{evaluate, sample_eval_negatives, EvalReport, TestQuery, TestSet};
use crate::experiment::{positives_for, ExperimentConfig, Split};
use crate::graph::{ItemId, RelationType};
use crate::model::embed_all;
use crate::synth::SynthData;
use crate::trainer::fit;

pub const DEFAULT_K: usize = 5;

/// Exact cosine index over pooled content of training items.
#[derive(Clone, Debug)]
pub struct ContentIndex {
    items: Vec<ItemId>,
    vectors: Vec<Vec<f64>>,
}

impl ContentIndex {
    pub fn build(content: &ContentProvider, items: &[ItemId]) -> Result<Self> {
        let mut vectors = Vec::with_capacity(items.len());
        for &i in items {
            let v = content.pooled(i)?;
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Format {
                    offset: 0,
                    message: format!("non-finite content for item {i}"),
                });
            }
            vectors.push(v.to_vec());
        }
        Ok(Self {
            items: items.to_vec(),
            vectors,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// The `k` most similar items, best first; ties go to the lower id.
    pub fn top_k(&self, query: &[f64], k: usize) -> Result<Vec<ItemId>> {
        let mut scored = Vec::with_capacity(self.len());
        for (&item, v) in self.items.iter().zip(&self.vectors) {
            scored.push((mmsc_tensor::cosine(query, v)?, item));
        }
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        Ok(scored.into_iter().take(k).map(|(_, i)| i).collect())
    }
}

/// Mean over positions of a flattened `S × d` sequence.
pub fn pool_sequence(seq: &[f64], dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || seq.is_empty() || seq.len() % dim != 0 {
        return Err(Error::config(format!("sequence of length {} is not a multiple of d={dim}", seq.len())));
    }
    let s = seq.len() / dim;
    let mut out = vec![0.0; dim];
    for row in seq.chunks(dim) {
        for (o, x) in out.iter_mut().zip(row) {
            *o += x;
        }
    }
    out.iter_mut().for_each(|x| *x /= s as f64);
    Ok(out)
}

/// `e'` for a cold item from its raw content sequence. Parameters are not touched.
pub fn coldstart_embed(
    cold_seq: &[f64],
    index: &ContentIndex,
    final_embeddings: &EmbeddingTable,
    k: usize,
) -> Result<TaskPairEmbedding> {
    if k == 0 {
        return Err(Error::config("k must be at least 1"));
    }
    if index.is_empty() {
        return Err(Error::Empty("content index has no items".into()));
    }
    let dim = index.vectors[0].len();
    let k = if k > index.len() {
        log::warn!("k={k} exceeds the {} indexed items; using all of them", index.len());
        index.len()
    } else {
        k
    };
    let h = pool_sequence(cold_seq, dim)?;
    let chosen = index.top_k(&h, k)?;
    let d = final_embeddings.dim();
    let mut sums = [vec![0.0; d], vec![0.0; d]];
    for &item in &chosen {
        if item >= final_embeddings.n_items() {
            return Err(Error::Lookup(item));
        }
        for rel in RelationType::ALL {
            for (s, x) in sums[rel.index()].iter_mut().zip(final_embeddings.vector(item, rel)) {
                *s += x;
            }
        }
    }
    let [s, c] = sums.map(|v| v.into_iter().map(|x| x / chosen.len() as f64).collect::<Vec<_>>());
    Ok(TaskPairEmbedding { s, c })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ColdStartConfig {
    pub holdout_fraction: f64,
    pub k: usize,
}

impl Default for ColdStartConfig {
    fn default() -> Self {
        Self {
            holdout_fraction: 0.1,
            k: DEFAULT_K,
        }
    }
}

/// Replaces the rows of `cold` items with retrieval-based embeddings.
pub fn with_cold_rows(
    warm: &EmbeddingTable,
    content: &ContentProvider,
    index: &ContentIndex,
    cold: &[ItemId],
    k: usize,
) -> Result<EmbeddingTable> {
    let mut rows: Vec<TaskPairEmbedding> = (0..warm.n_items()).map(|i| warm.pair(i)).collect();
    for &i in cold {
        if i >= rows.len() {
            return Err(Error::Lookup(i));
        }
        rows[i] = coldstart_embed(content.sequence_slice(i)?, index, warm, k)?;
    }
    let mut table = EmbeddingTable::new(warm.dim(), Vec::new(), Vec::new())?;
    for r in &rows {
        table.push(r);
    }
    Ok(table)
}

/// One query per cold item and relation: a ground-truth partner among warm
/// items against warm negatives.
pub fn cold_test_set(
    data: &SynthData,
    cold: &[ItemId],
    // Sorted ascending.
    warm: &[ItemId],
    n_negatives: usize,
    seed: u64,
) -> TestSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(31);
    let mut is_warm = vec![false; data.graph.n_items()];
    warm.iter().for_each(|&i| is_warm[i] = true);
    let mut test = TestSet::default();
    for rel in RelationType::ALL {
        for &q in cold {
            let partners: Vec<ItemId> = data.truth.partners(q, rel).into_iter().filter(|&j| is_warm[j]).collect();
            let Some(&positive) = partners.choose(&mut rng) else {
                continue;
            };
            let pos_rank = warm.binary_search(&positive).expect("warm partner");
            let negatives = sample_eval_negatives(warm.len(), &[pos_rank], n_negatives, &mut rng)
                .into_iter()
                .map(|r| warm[r])
                .collect();
            test.queries[rel.index()].push(TestQuery {
                query: q,
                positive,
                negatives,
            });
        }
    }
    test
}

pub struct ColdStartResult {
    pub report: EvalReport,
    pub cold_items: Vec<ItemId>,
    pub params: ParamStore,
}

/// Trains without the held-out items' edges, then ranks their ground-truth
/// partners using retrieval-based embeddings.
pub fn coldstart_evaluate(data: &SynthData, cfg: &ExperimentConfig, cs: &ColdStartConfig) -> Result<ColdStartResult> {
    cfg.validate()?;
    if !(0.0..1.0).contains(&cs.holdout_fraction) {
        return Err(Error::config(format!("holdout fraction {} outside [0, 1)", cs.holdout_fraction)));
    }
    let n = data.graph.n_items();
    let n_cold = (cs.holdout_fraction * n as f64).round() as usize;
    if n_cold == 0 {
        return Err(Error::Empty("no held-out items".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.synth.seed);
    rng.set_stream(30);
    let mut cold = index::sample(&mut rng, n, n_cold).into_vec();
    cold.sort_unstable();
    let mut keep = vec![true; n];
    cold.iter().for_each(|&i| keep[i] = false);
    let warm: Vec<ItemId> = (0..n).filter(|&i| keep[i]).collect();

    let split = Split {
        train_graph: data.graph.restricted_to(&keep),
        test: TestSet::default(),
        stats: Default::default(),
    };
    let (positives, _) = positives_for(data, &split, cfg);
    let outcome = fit(&split.train_graph, &data.content, &positives, &cfg.model, &cfg.train)?;
    let warm_emb = embed_all(
        &outcome.params,
        &cfg.model,
        &data.content,
        &split.train_graph,
        cfg.eval_neighbor_seed(),
    )?;
    let index = ContentIndex::build(&data.content, &warm)?;
    let table = with_cold_rows(&warm_emb, &data.content, &index, &cold, cs.k)?;
    let test = cold_test_set(data, &cold, &warm, cfg.train.eval_negatives, cfg.synth.seed);
    if test.is_empty() {
        return Err(Error::Empty("no held-out item has a warm ground-truth partner".into()));
    }
    Ok(ColdStartResult {
        report: evaluate(&table, &test)?,
        cold_items: cold,
        params: outcome.params,
    })
}
