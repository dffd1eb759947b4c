//! Judge-filtered positives, the triplet + contrastive objective and the
//! epoch loop with validation-based early stopping.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::rc::Rc;

use mmsc_tensor::checkpoint::{read_checkpoint_for, write_checkpoint};
use mmsc_tensor::{ParamStore, Tape, Tensor, Var};
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::behavior::{infonce_loss, NeighborSets};
use crate::content::ContentProvider;
use crate::error::{Error, Result};
use crate::eval::{metrics_at_10, rank_from_scores, sample_eval_negatives, TestQuery, DEFAULT_NEGATIVES};
use crate::graph::{perturb, sample_negatives, EdgeKey, ItemId, RelGraph, RelationType};
use crate::judge::{Judge, Verdict};
use crate::model::{self, behavior_forward, embed_with, GraphInputs, ModelConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub drop_rate: f64,
    pub negatives: usize,
    pub margin: f64,
    pub tau: f64,
    pub lambda: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub val_fraction: f64,
    pub strict_infonce: bool,
    pub judge_budget: usize,
    pub eval_negatives: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-2,
            drop_rate: 0.2,
            negatives: 5,
            margin: 0.5,
            tau: 0.1,
            lambda: 0.005,
            batch_size: 128,
            max_epochs: 30,
            patience: 8,
            val_fraction: 0.05,
            strict_infonce: false,
            judge_budget: 4000,
            eval_negatives: DEFAULT_NEGATIVES,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64, field: &str| -> Result<()> {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(format!("{field} must be positive, got {v}")))
            }
        };
        positive(self.learning_rate, "learning_rate")?;
        positive(self.margin, "margin")?;
        positive(self.tau, "tau")?;
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(0.0..=1.0).contains(&self.drop_rate) {
            return Err(Error::config(format!("drop_rate must lie in [0, 1], got {}", self.drop_rate)));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::config(format!("val_fraction must lie in [0, 1), got {}", self.val_fraction)));
        }
        for (v, field) in [
            (self.negatives, "negatives"),
            (self.batch_size, "batch_size"),
            (self.max_epochs, "max_epochs"),
            (self.patience, "patience"),
            (self.eval_negatives, "eval_negatives"),
        ] {
            if v == 0 {
                return Err(Error::config(format!("{field} must be at least 1")));
            }
        }
        Ok(())
    }

    fn stream(&self, id: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(id);
        rng
    }
}

/// Judge-accepted positives per relation with provenance counts.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AugmentedEdgeSet {
    pub pairs: [Vec<(ItemId, ItemId)>; 2],
    pub submitted: [usize; 2],
    pub accepted: [usize; 2],
    pub failed: [usize; 2],
}

impl AugmentedEdgeSet {
    /// Every edge of the graph, unfiltered.
    pub fn raw(g: &RelGraph) -> Self {
        let mut out = Self::default();
        for rel in RelationType::ALL {
            out.pairs[rel.index()] = g.edges(rel).map(|k| (k.lo, k.hi)).collect();
            out.submitted[rel.index()] = out.pairs[rel.index()].len();
            out.accepted[rel.index()] = out.pairs[rel.index()].len();
        }
        out
    }

    pub fn len(&self) -> usize {
        self.pairs.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn acceptance_rate(&self, rel: RelationType) -> f64 {
        let s = self.submitted[rel.index()];
        if s == 0 {
            0.0
        } else {
            self.accepted[rel.index()] as f64 / s as f64
        }
    }
}

/// Sends up to `budget` uniformly sampled edges (split evenly across
/// relations) to the judge and keeps the accepted ones.
pub fn augment_edges<R: Rng + ?Sized>(
    judge: &mut dyn Judge,
    g: &RelGraph,
    budget: usize,
    rng: &mut R,
) -> AugmentedEdgeSet {
    let mut out = AugmentedEdgeSet::default();
    let shares = [budget - budget / 2, budget / 2];
    for rel in RelationType::ALL {
        let edges: Vec<EdgeKey> = g.edges(rel).collect();
        let take = shares[rel.index()].min(edges.len());
        let mut picked = index::sample(rng, edges.len(), take).into_vec();
        picked.sort_unstable();
        for i in picked {
            let k = edges[i];
            out.submitted[rel.index()] += 1;
            match judge.judge(k.lo, k.hi, rel) {
                Ok(Verdict::Yes) => {
                    out.pairs[rel.index()].push((k.lo, k.hi));
                    out.accepted[rel.index()] += 1;
                }
                Ok(Verdict::No) => {}
                Err(e) => {
                    log::warn!("judge failed on ({}, {}, {rel}): {e}", k.lo, k.hi);
                    out.failed[rel.index()] += 1;
                }
            }
        }
    }
    out
}

/// Training positives: the augmented set, or every raw edge when the judge kept nothing.
pub fn training_positives(aug: &AugmentedEdgeSet, g: &RelGraph) -> (AugmentedEdgeSet, bool) {
    if aug.is_empty() && g.total_edges() > 0 {
        log::warn!("judge accepted no training pairs; falling back to the raw behavior edges");
        (AugmentedEdgeSet::raw(g), true)
    } else {
        (aug.clone(), false)
    }
}

/// `max(0, margin − cos(a, pos) + cos(a, neg))` for single vectors.
pub fn triplet_loss(tape: &mut Tape, anchor: Var, pos: Var, neg: Var, margin: f64) -> Result<Var> {
    let sp = tape.cosine_sim(anchor, pos)?;
    let sn = tape.cosine_sim(anchor, neg)?;
    let diff = tape.sub(sn, sp)?;
    let shifted = tape.add_scalar(diff, margin)?;
    let hinge = tape.relu(shifted)?;
    Ok(tape.sum(hinge)?)
}

/// Triplet terms for rows of `e`; each positive contributes one hinge per
/// negative, summed, and the result is averaged over positives.
pub fn batch_triplet(
    tape: &mut Tape,
    e: Var,
    positives: &[(ItemId, ItemId)],
    negatives: &[Vec<ItemId>],
    margin: f64,
) -> Result<Var> {
    if positives.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)?));
    }
    let mut a = Vec::new();
    let mut p = Vec::new();
    let mut n = Vec::new();
    for (&(x, y), negs) in positives.iter().zip(negatives) {
        for &k in negs {
            a.push(x);
            p.push(y);
            n.push(k);
        }
    }
    let av = tape.gather_rows(e, a.into())?;
    let pv = tape.gather_rows(e, p.into())?;
    let nv = tape.gather_rows(e, n.into())?;
    let sp = tape.cosine_rows(av, pv)?;
    let sn = tape.cosine_rows(av, nv)?;
    let diff = tape.sub(sn, sp)?;
    let shifted = tape.add_scalar(diff, margin)?;
    let hinge = tape.relu(shifted)?;
    let total = tape.sum(hinge)?;
    Ok(tape.scale(total, 1.0 / positives.len() as f64)?)
}

/// One optimization batch.
#[derive(Clone, Debug, Default)]
pub struct Batch {
    pub positives: [Vec<(ItemId, ItemId)>; 2],
    pub negatives: [Vec<Vec<ItemId>>; 2],
    /// Items whose two graph views are contrasted.
    pub ssl_items: Vec<ItemId>,
}

pub struct LossParts {
    pub total: Var,
    pub triplet: [Var; 2],
    pub ssl: Option<Var>,
}

/// `L_trip^s + L_trip^c + λ (L_self^s + L_self^c)`.
///
/// The contrastive term is skipped when `λ = 0`, when there is no second
/// view or fewer than two contrast items, or when the behavior module is off.
pub fn total_loss(
    tape: &mut Tape,
    store: &ParamStore,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    content: &ContentProvider,
    view: &NeighborSets,
    perturbed: Option<&NeighborSets>,
    batch: &Batch,
) -> Result<LossParts> {
    let out = model::forward(tape, store, model_cfg, &GraphInputs { content, neighbors: view })?;
    let mut triplet = Vec::with_capacity(2);
    for rel in RelationType::ALL {
        let i = rel.index();
        triplet.push(batch_triplet(tape, out.e[i], &batch.positives[i], &batch.negatives[i], cfg.margin)?);
    }
    let mut total = tape.add(triplet[0], triplet[1])?;
    let mut ssl = None;
    if let (true, Some(pview), true, true) = (
        cfg.lambda > 0.0,
        perturbed,
        batch.ssl_items.len() >= 2,
        model_cfg.use_behavior,
    ) {
        let other = behavior_forward(tape, store, model_cfg, out.h, pview)?;
        let items: Rc<[usize]> = batch.ssl_items.iter().copied().collect();
        let mut parts = Vec::with_capacity(2);
        for rel in RelationType::ALL {
            let p = out.p(rel).expect("behavior enabled");
            let a = tape.gather_rows(p, items.clone())?;
            let b = tape.gather_rows(other[rel.index()].p, items.clone())?;
            parts.push(infonce_loss(tape, a, b, cfg.tau, cfg.strict_infonce)?);
        }
        let s = tape.add(parts[0], parts[1])?;
        let weighted = tape.scale(s, cfg.lambda)?;
        total = tape.add(total, weighted)?;
        ssl = Some(s);
    }
    Ok(LossParts {
        total,
        triplet: [triplet[0], triplet[1]],
        ssl,
    })
}

/// Metrics on held-out training edges for one epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ValMetrics {
    pub hits: [f64; 2],
    pub mrr: [f64; 2],
}

impl ValMetrics {
    pub fn mean_mrr(&self) -> f64 {
        (self.mrr[0] + self.mrr[1]) / 2.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean per-batch losses; `None` for the pre-training row.
    pub triplet: Option<[f64; 2]>,
    pub ssl: Option<f64>,
    pub val: ValMetrics,
}

pub fn log_csv(log: &[EpochLog]) -> String {
    let mut out = String::from("epoch,L_triplet_s,L_triplet_c,L_self,val_H10_s,val_M10_s,val_H10_c,val_M10_c\n");
    for row in log {
        let (ts, tc) = match row.triplet {
            Some([s, c]) => (format!("{s:.6}"), format!("{c:.6}")),
            None => (String::new(), String::new()),
        };
        let ssl = row.ssl.map_or(String::new(), |v| format!("{v:.6}"));
        writeln!(
            out,
            "{},{ts},{tc},{ssl},{:.6},{:.6},{:.6},{:.6}",
            row.epoch, row.val.hits[0], row.val.mrr[0], row.val.hits[1], row.val.mrr[1]
        )
        .expect("write to string");
    }
    out
}

/// Held-out validation queries with their fixed negatives and graph view.
#[derive(Clone, Debug)]
pub struct Validation {
    pub queries: [Vec<TestQuery>; 2],
    pub view: RelGraph,
    pub neighbor_seed: u64,
}

impl Validation {
    pub fn evaluate(&self, store: &ParamStore, cfg: &ModelConfig, content: &ContentProvider) -> Result<ValMetrics> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.neighbor_seed);
        let neighbors = NeighborSets::sample(&self.view, &cfg.meta_paths, cfg.fanout, &mut rng);
        let emb = embed_with(store, cfg, content, &neighbors)?;
        let mut val = ValMetrics {
            hits: [0.0; 2],
            mrr: [0.0; 2],
        };
        for rel in RelationType::ALL {
            let qs = &self.queries[rel.index()];
            if qs.is_empty() {
                continue;
            }
            let mut ranks = Vec::with_capacity(qs.len());
            for q in qs {
                let pos = emb.score(q.query, q.positive, rel)?;
                let negs = q
                    .negatives
                    .iter()
                    .map(|&j| emb.score(q.query, j, rel))
                    .collect::<Result<Vec<_>>>()?;
                ranks.push(rank_from_scores(pos, &negs));
            }
            let m = metrics_at_10(&ranks)?;
            val.hits[rel.index()] = m.hits;
            val.mrr[rel.index()] = m.mrr;
        }
        Ok(val)
    }
}

pub struct TrainOutcome {
    /// Parameters of the best validation epoch, counting trained epochs only.
    pub params: ParamStore,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub validation: Validation,
}

/// Splits positives into training and validation parts and removes the
/// validation edges from the graph seen during training.
fn split_validation(
    positives: &AugmentedEdgeSet,
    g: &RelGraph,
    cfg: &TrainConfig,
) -> ([Vec<(ItemId, ItemId)>; 2], Validation) {
    let mut rng = cfg.stream(10);
    let mut train: [Vec<(ItemId, ItemId)>; 2] = [Vec::new(), Vec::new()];
    let mut queries: [Vec<TestQuery>; 2] = [Vec::new(), Vec::new()];
    let mut removed = BTreeSet::new();
    for rel in RelationType::ALL {
        let mut pairs = positives.pairs[rel.index()].clone();
        pairs.shuffle(&mut rng);
        let n_val = (cfg.val_fraction * pairs.len() as f64).round() as usize;
        let n_val = n_val.min(pairs.len().saturating_sub(1));
        for &(a, b) in &pairs[..n_val] {
            let negatives = sample_eval_negatives(g.n_items(), &[a, b], cfg.eval_negatives, &mut rng);
            queries[rel.index()].push(TestQuery {
                query: a,
                positive: b,
                negatives,
            });
            removed.insert(EdgeKey::new(rel, a, b));
        }
        train[rel.index()] = pairs[n_val..].to_vec();
    }
    let validation = Validation {
        queries,
        view: g.without(&removed),
        neighbor_seed: cfg.seed ^ 0x5eed_0f_7a1,
    };
    (train, validation)
}

/// Trains from `positives` over the message-passing graph `g`.
pub fn fit(
    g: &RelGraph,
    content: &ContentProvider,
    positives: &AugmentedEdgeSet,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model_cfg.validate()?;
    content.check_dims(model_cfg.dim, model_cfg.seq_len)?;
    if g.n_items() != content.n_items() {
        return Err(Error::config(format!(
            "graph has {} items but content has {}",
            g.n_items(),
            content.n_items()
        )));
    }
    if positives.is_empty() {
        return Err(Error::config("no training edges"));
    }
    let (train_pairs, validation) = split_validation(positives, g, cfg);
    let view_graph = &validation.view;

    let mut store = model_cfg.init_params(cfg.seed)?;
    let mut rng = cfg.stream(11);
    let mut log = vec![EpochLog {
        epoch: 0,
        triplet: None,
        ssl: None,
        val: validation.evaluate(&store, model_cfg, content)?,
    }];
    let mut best = (log[0].val.mean_mrr(), 0, store.clone());
    let mut stale = 0;

    let mut tagged: Vec<(RelationType, (ItemId, ItemId))> = RelationType::ALL
        .iter()
        .flat_map(|&r| train_pairs[r.index()].iter().map(move |&p| (r, p)))
        .collect();

    for epoch in 1..=cfg.max_epochs {
        let view = NeighborSets::sample(view_graph, &model_cfg.meta_paths, model_cfg.fanout, &mut rng);
        tagged.shuffle(&mut rng);
        let mut sums = [0.0; 3];
        let mut batches = 0;
        for (bi, chunk) in tagged.chunks(cfg.batch_size).enumerate() {
            let mut batch = Batch::default();
            let mut seen = BTreeSet::new();
            for &(rel, (a, b)) in chunk {
                // Either endpoint may serve as anchor.
                let (a, b) = if rng.random_bool(0.5) { (a, b) } else { (b, a) };
                let negs = sample_negatives(g, a, rel, cfg.negatives, &mut rng)?;
                batch.positives[rel.index()].push((a, b));
                batch.negatives[rel.index()].push(negs);
                if seen.insert(a) {
                    batch.ssl_items.push(a);
                }
            }
            let perturbed = if cfg.lambda > 0.0 && model_cfg.use_behavior {
                let pg = perturb(view_graph, cfg.drop_rate, &mut rng);
                Some(NeighborSets::sample(&pg, &model_cfg.meta_paths, model_cfg.fanout, &mut rng))
            } else {
                None
            };
            let mut tape = Tape::new();
            let parts = total_loss(
                &mut tape,
                &store,
                model_cfg,
                cfg,
                content,
                &view,
                perturbed.as_ref(),
                &batch,
            )?;
            let total = tape.value(parts.total).data()[0];
            if !total.is_finite() {
                return Err(Error::NonFinite { epoch, batch: bi });
            }
            sums[0] += tape.value(parts.triplet[0]).data()[0];
            sums[1] += tape.value(parts.triplet[1]).data()[0];
            sums[2] += parts.ssl.map_or(0.0, |v| tape.value(v).data()[0]);
            batches += 1;
            let grads = tape.backward(parts.total)?;
            store.adam_step(&grads, cfg.learning_rate)?;
        }
        let nb = batches.max(1) as f64;
        let val = validation.evaluate(&store, model_cfg, content)?;
        log::info!(
            "epoch {epoch}: triplet_s={:.4} triplet_c={:.4} self={:.4} val_M10_s={:.4} val_M10_c={:.4}",
            sums[0] / nb,
            sums[1] / nb,
            sums[2] / nb,
            val.mrr[0],
            val.mrr[1]
        );
        log.push(EpochLog {
            epoch,
            triplet: Some([sums[0] / nb, sums[1] / nb]),
            ssl: (cfg.lambda > 0.0 && model_cfg.use_behavior).then_some(sums[2] / nb),
            val,
        });
        // Epoch 0 is logged as a baseline but never selected.
        if epoch == 1 || val.mean_mrr() > best.0 {
            best = (val.mean_mrr(), epoch, store.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    Ok(TrainOutcome {
        params: best.2,
        log,
        best_epoch: best.1,
        validation,
    })
}

pub fn save_checkpoint<W: Write>(w: W, params: &ParamStore, cfg: &ModelConfig) -> Result<()> {
    Ok(write_checkpoint(w, params, &cfg.hash())?)
}

pub fn load_checkpoint<R: BufRead>(r: R, cfg: &ModelConfig) -> Result<ParamStore> {
    Ok(read_checkpoint_for(r, &cfg.hash())?)
}
