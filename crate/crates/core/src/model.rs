//! The full item encoder: content attention, meta-path behavior encoding,
//! semantic gates and task gates, evaluated for every item at once.

use mmsc_tensor::{ParamStore, Tape, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::behavior::{self, BehaviorOutput, BehaviorShape, MetaPathSet, NeighborSets};
use crate::content::{self, ContentProvider, ContentShape};
use crate::embedding::{EmbeddingTable, TaskPairEmbedding};
use crate::error::{Error, Result};
use crate::fusion::{self, GateLevel};
use crate::graph::{Fanout, ItemId, RelGraph, RelationType};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub dim: usize,
    pub content_heads: usize,
    pub behavior_heads: usize,
    pub seq_len: usize,
    pub meta_paths: MetaPathSet,
    pub fanout: Fanout,
    pub use_content: bool,
    pub use_behavior: bool,
    pub use_task_gate: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            content_heads: 2,
            behavior_heads: 2,
            seq_len: 4,
            meta_paths: MetaPathSet::default(),
            fanout: Fanout::default(),
            use_content: true,
            use_behavior: true,
            use_task_gate: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.content_shape().validate()?;
        if self.behavior_heads == 0 {
            return Err(Error::config("behavior_heads must be at least 1"));
        }
        if self.seq_len == 0 {
            return Err(Error::config("seq_len must be at least 1"));
        }
        if !self.use_content && !self.use_behavior {
            return Err(Error::config("at least one of the content and behavior modules must be enabled"));
        }
        self.meta_paths.validate()
    }

    pub fn content_shape(&self) -> ContentShape {
        ContentShape {
            dim: self.dim,
            heads: self.content_heads,
        }
    }

    pub fn behavior_shape(&self) -> BehaviorShape {
        BehaviorShape {
            dim: self.dim,
            heads: self.behavior_heads,
        }
    }

    /// Hex SHA-256 of every setting that determines parameter shapes and names.
    pub fn hash(&self) -> String {
        let paths = |task| {
            self.meta_paths
                .for_task(task)
                .iter()
                .map(|p| p.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let canonical = format!(
            "dim={};content_heads={};behavior_heads={};seq_len={};paths_s={};paths_c={};content={};behavior={};task_gate={}",
            self.dim,
            self.content_heads,
            self.behavior_heads,
            self.seq_len,
            paths(RelationType::Substitutable),
            paths(RelationType::Complementary),
            self.use_content,
            self.use_behavior,
            self.use_task_gate,
        );
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Fresh parameters for this configuration, deterministic per seed.
    pub fn init_params(&self, seed: u64) -> Result<ParamStore> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        if self.use_content {
            content::init_params(&mut store, self.content_shape(), &mut rng)?;
        }
        if self.use_behavior {
            for task in RelationType::ALL {
                let n = self.meta_paths.for_task(task).len();
                behavior::init_params(&mut store, task, self.behavior_shape(), n, &mut rng)?;
            }
        }
        if self.use_content && self.use_behavior {
            for task in RelationType::ALL {
                fusion::init_gate(&mut store, GateLevel::Semantic, task, self.dim, &mut rng)?;
            }
        }
        if self.use_task_gate {
            for task in RelationType::ALL {
                fusion::init_gate(&mut store, GateLevel::Task, task, self.dim, &mut rng)?;
            }
        }
        Ok(store)
    }
}

/// Constant inputs for one forward pass over a graph view.
pub struct GraphInputs<'a> {
    pub content: &'a ContentProvider,
    pub neighbors: &'a NeighborSets,
}

/// Tape handles produced by [`forward`].
pub struct ForwardOutput {
    pub e: [Var; 2],
    pub a: [Var; 2],
    pub q: [Option<Var>; 2],
    pub behavior: [Option<BehaviorOutput>; 2],
    /// The pooled-content constant, reusable for further behavior passes.
    pub h: Var,
}

impl ForwardOutput {
    pub fn e(&self, rel: RelationType) -> Var {
        self.e[rel.index()]
    }

    pub fn p(&self, rel: RelationType) -> Option<Var> {
        self.behavior[rel.index()].as_ref().map(|b| b.p)
    }
}

/// Behavior embeddings `p^s, p^c` only, for an alternative graph view.
pub fn behavior_forward(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &ModelConfig,
    h: Var,
    neighbors: &NeighborSets,
) -> Result<[BehaviorOutput; 2]> {
    let s = behavior::encode_all(
        tape,
        store,
        RelationType::Substitutable,
        cfg.behavior_shape(),
        h,
        neighbors.task(RelationType::Substitutable),
    )?;
    let c = behavior::encode_all(
        tape,
        store,
        RelationType::Complementary,
        cfg.behavior_shape(),
        h,
        neighbors.task(RelationType::Complementary),
    )?;
    Ok([s, c])
}

/// Final embeddings `e` for every item.
pub fn forward(tape: &mut Tape, store: &ParamStore, cfg: &ModelConfig, inputs: &GraphInputs) -> Result<ForwardOutput> {
    cfg.validate()?;
    inputs.content.check_dims(cfg.dim, cfg.seq_len)?;
    let h = tape.constant(inputs.content.pooled_matrix());
    let mut q = [None, None];
    if cfg.use_content {
        let x = tape.constant(inputs.content.stacked());
        for task in RelationType::ALL {
            q[task.index()] = Some(content::encode_all(
                tape,
                store,
                task,
                cfg.content_shape(),
                x,
                cfg.seq_len,
            )?);
        }
    }
    let behavior: [Option<BehaviorOutput>; 2] = if cfg.use_behavior {
        let [s, c] = behavior_forward(tape, store, cfg, h, inputs.neighbors)?;
        [Some(s), Some(c)]
    } else {
        [None, None]
    };
    let mut a = Vec::with_capacity(2);
    for task in RelationType::ALL {
        let qi = q[task.index()];
        let pi = behavior[task.index()].as_ref().map(|b| b.p);
        a.push(match (pi, qi) {
            (Some(p), Some(q)) => fusion::gate(tape, store, GateLevel::Semantic, task, p, q)?.0,
            (Some(p), None) => p,
            (None, Some(q)) => q,
            (None, None) => unreachable!("validated config enables a module"),
        });
    }
    let a = [a[0], a[1]];
    let e = if cfg.use_task_gate {
        let (es, _) = fusion::gate(tape, store, GateLevel::Task, RelationType::Substitutable, a[0], a[1])?;
        let (ec, _) = fusion::gate(tape, store, GateLevel::Task, RelationType::Complementary, a[1], a[0])?;
        [es, ec]
    } else {
        a
    };
    Ok(ForwardOutput { e, a, q, behavior, h })
}

/// Evaluates the model on `graph` and returns final embeddings for every item.
///
/// Neighbor sets are sampled from a generator seeded with `neighbor_seed`.
pub fn embed_all(
    store: &ParamStore,
    cfg: &ModelConfig,
    content: &ContentProvider,
    graph: &RelGraph,
    neighbor_seed: u64,
) -> Result<EmbeddingTable> {
    if graph.n_items() != content.n_items() {
        return Err(Error::config(format!(
            "graph has {} items but the embedding file has {}",
            graph.n_items(),
            content.n_items()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(neighbor_seed);
    let neighbors = NeighborSets::sample(graph, &cfg.meta_paths, cfg.fanout, &mut rng);
    embed_with(store, cfg, content, &neighbors)
}

pub fn embed_with(
    store: &ParamStore,
    cfg: &ModelConfig,
    content: &ContentProvider,
    neighbors: &NeighborSets,
) -> Result<EmbeddingTable> {
    let mut tape = Tape::new();
    let out = forward(&mut tape, store, cfg, &GraphInputs { content, neighbors })?;
    EmbeddingTable::from_tensors(tape.value(out.e[0]), tape.value(out.e[1]))
}

/// `e_i` for one item.
pub fn embed_item(
    item: ItemId,
    store: &ParamStore,
    cfg: &ModelConfig,
    content: &ContentProvider,
    graph: &RelGraph,
    neighbor_seed: u64,
) -> Result<TaskPairEmbedding> {
    if item >= graph.n_items() {
        return Err(Error::Lookup(item));
    }
    Ok(embed_all(store, cfg, content, graph, neighbor_seed)?.pair(item))
}

/// Gathers rows of a forward output for a list of items.
pub fn rows_of(tape: &mut Tape, v: Var, items: &[ItemId]) -> Result<Var> {
    Ok(tape.gather_rows(v, items.iter().copied().collect())?)
}
