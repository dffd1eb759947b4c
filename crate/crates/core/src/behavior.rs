//! Meta-path behavior encoder: node-level attention over each path's
//! neighbors, path-level attention across paths, and the contrastive
//! denoising objective between two graph views.

use std::rc::Rc;

use mmsc_tensor::{Activation, ParamStore, Tape, Tensor, Var};
use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{metapath_neighbors, Fanout, ItemId, MetaPath, RelGraph, RelationType};
use crate::init::{uniform_vector, xavier};

/// Meta-path lists for the two task encoders.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MetaPathSet {
    pub substitutable: Vec<MetaPath>,
    pub complementary: Vec<MetaPath>,
}

impl Default for MetaPathSet {
    fn default() -> Self {
        Self::parse(&["s", "s.s", "s.s.s"], &["c", "c.s", "s.c", "s.s.c", "s.c.s", "c.s.s"])
            .expect("default meta-paths parse")
    }
}

impl MetaPathSet {
    pub fn parse<S: AsRef<str>>(s: &[S], c: &[S]) -> Result<Self> {
        let parse = |list: &[S]| -> Result<Vec<MetaPath>> {
            list.iter()
                .map(|p| p.as_ref().parse::<MetaPath>().map_err(|e| Error::config(e.to_string())))
                .collect()
        };
        let set = Self {
            substitutable: parse(s)?,
            complementary: parse(c)?,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        if self.substitutable.is_empty() || self.complementary.is_empty() {
            return Err(Error::config("each task needs at least one meta-path"));
        }
        Ok(())
    }

    pub fn for_task(&self, task: RelationType) -> &[MetaPath] {
        match task {
            RelationType::Substitutable => &self.substitutable,
            RelationType::Complementary => &self.complementary,
        }
    }

    /// Keeps only paths with at most `hops` relations.
    pub fn truncated(&self, hops: usize) -> Result<Self> {
        let keep = |v: &[MetaPath]| v.iter().filter(|p| p.len() <= hops).cloned().collect::<Vec<_>>();
        let set = Self {
            substitutable: keep(&self.substitutable),
            complementary: keep(&self.complementary),
        };
        set.validate()?;
        Ok(set)
    }
}

/// Neighbor lists of one meta-path for every item, in CSR layout.
#[derive(Clone, Debug)]
pub struct PathNeighbors {
    offsets: Rc<[usize]>,
    nbrs: Rc<[usize]>,
    centers: Rc<[usize]>,
    // Neighbors that themselves have a nonempty list for this path.
    live_offsets: Rc<[usize]>,
    live_nbrs: Rc<[usize]>,
}

impl PathNeighbors {
    pub fn from_lists(lists: &[Vec<ItemId>]) -> Self {
        let mut offsets = Vec::with_capacity(lists.len() + 1);
        let mut nbrs = Vec::new();
        let mut centers = Vec::new();
        offsets.push(0);
        for (i, l) in lists.iter().enumerate() {
            nbrs.extend_from_slice(l);
            centers.extend(std::iter::repeat_n(i, l.len()));
            offsets.push(nbrs.len());
        }
        let mut live_offsets = Vec::with_capacity(lists.len() + 1);
        let mut live_nbrs = Vec::new();
        live_offsets.push(0);
        for l in lists {
            live_nbrs.extend(l.iter().copied().filter(|&j| !lists[j].is_empty()));
            live_offsets.push(live_nbrs.len());
        }
        Self {
            offsets: offsets.into(),
            nbrs: nbrs.into(),
            centers: centers.into(),
            live_offsets: live_offsets.into(),
            live_nbrs: live_nbrs.into(),
        }
    }

    pub fn sample<R: Rng + ?Sized>(g: &RelGraph, path: &MetaPath, fanout: Fanout, rng: &mut R) -> Self {
        let lists: Vec<Vec<ItemId>> = (0..g.n_items())
            .map(|i| metapath_neighbors(g, i, path, fanout, rng))
            .collect();
        Self::from_lists(&lists)
    }

    pub fn n_items(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn of(&self, item: ItemId) -> &[ItemId] {
        &self.nbrs[self.offsets[item]..self.offsets[item + 1]]
    }

    pub fn n_edges(&self) -> usize {
        self.nbrs.len()
    }

    pub fn is_empty_for(&self, item: ItemId) -> bool {
        self.offsets[item] == self.offsets[item + 1]
    }
}

/// Sampled neighbor lists for every meta-path of both tasks.
#[derive(Clone, Debug)]
pub struct NeighborSets {
    per_task: [Vec<PathNeighbors>; 2],
}

impl NeighborSets {
    pub fn sample<R: Rng + ?Sized>(g: &RelGraph, paths: &MetaPathSet, fanout: Fanout, rng: &mut R) -> Self {
        let mut per_task: [Vec<PathNeighbors>; 2] = [Vec::new(), Vec::new()];
        for task in RelationType::ALL {
            per_task[task.index()] = paths
                .for_task(task)
                .iter()
                .map(|p| PathNeighbors::sample(g, p, fanout, rng))
                .collect();
        }
        Self { per_task }
    }

    pub fn from_parts(s: Vec<PathNeighbors>, c: Vec<PathNeighbors>) -> Self {
        Self { per_task: [s, c] }
    }

    pub fn task(&self, task: RelationType) -> &[PathNeighbors] {
        &self.per_task[task.index()]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BehaviorShape {
    pub dim: usize,
    pub heads: usize,
}

fn name(task: RelationType, part: &str) -> String {
    format!("behavior.{}.{part}", task.code())
}

pub fn attn_name(task: RelationType, path: usize, head: usize) -> String {
    name(task, &format!("attn.{path}.{head}"))
}

pub fn proj_name(task: RelationType, head: usize) -> String {
    name(task, &format!("wa.{head}"))
}

/// Adds one task encoder's parameters for `n_paths` meta-paths.
pub fn init_params<R: Rng + ?Sized>(
    store: &mut ParamStore,
    task: RelationType,
    shape: BehaviorShape,
    n_paths: usize,
    rng: &mut R,
) -> Result<()> {
    if shape.heads == 0 || shape.dim == 0 {
        return Err(Error::config("behavior encoder needs at least one head and positive width"));
    }
    let d = shape.dim;
    for k in 0..n_paths {
        for h in 0..shape.heads {
            store.insert(attn_name(task, k, h), xavier(2 * d, 1, rng))?;
        }
    }
    for h in 0..shape.heads {
        store.insert(proj_name(task, h), xavier(d, d, rng))?;
    }
    store.insert(name(task, "mix"), xavier(shape.heads * d, d, rng))?;
    store.insert(name(task, "wb"), xavier(d, d, rng))?;
    store.insert(name(task, "bb"), uniform_vector(d, 0.1, rng))?;
    store.insert(name(task, "sv"), xavier(d, 1, rng))?;
    store.insert(name(task, "fallback"), xavier(d, d, rng))?;
    Ok(())
}

/// Node-level attention for one path over every item of the CSR layout.
///
/// Returns `z` (`N × d`, zero rows for items without neighbors) and the
/// per-head attention weights (one entry per stored neighbor).
pub fn node_level_all(
    tape: &mut Tape,
    store: &ParamStore,
    task: RelationType,
    path: usize,
    shape: BehaviorShape,
    h: Var,
    projected: &[Var],
    nb: &PathNeighbors,
) -> Result<(Var, Vec<Var>)> {
    let d = shape.dim;
    let n = tape.value(h).rows();
    let center_rows: Rc<[usize]> = nb.centers.iter().map(|&i| 2 * i).collect();
    let nbr_rows: Rc<[usize]> = nb.nbrs.iter().map(|&j| 2 * j + 1).collect();
    let mut heads = Vec::with_capacity(shape.heads);
    let mut alphas = Vec::with_capacity(shape.heads);
    for (t, &hw) in projected.iter().enumerate() {
        let a = tape.param(store, &attn_name(task, path, t))?;
        // [a_center; a_nbr] as a d×2 matrix so one product scores both roles.
        let a2 = tape.reshape(a, vec![2, d])?;
        let a2 = tape.transpose(a2)?;
        let roles = tape.matmul(h, a2)?;
        let roles = tape.reshape(roles, vec![2 * n, 1])?;
        let sc = tape.gather_rows(roles, center_rows.clone())?;
        let sn = tape.gather_rows(roles, nbr_rows.clone())?;
        let e = tape.add(sc, sn)?;
        let e = tape.reshape(e, vec![nb.n_edges()])?;
        let e = tape.activation(Activation::LeakyRelu, e)?;
        let alpha = tape.segment_softmax(e, nb.offsets.clone())?;
        let msgs = tape.gather_rows(hw, nb.nbrs.clone())?;
        let weighted = tape.scale_rows(msgs, alpha)?;
        let agg = tape.segment_sum(weighted, nb.offsets.clone())?;
        heads.push(tape.activation(Activation::Elu, agg)?);
        alphas.push(alpha);
    }
    let cat = tape.concat_cols(&heads)?;
    let mix = tape.param(store, &name(task, "mix"))?;
    Ok((tape.matmul(cat, mix)?, alphas))
}

/// Output of one task encoder over all items.
pub struct BehaviorOutput {
    pub p: Var,
    /// Path weights per (item, nonempty path) slot; `None` when every item fell back.
    pub beta: Option<Var>,
    /// `beta` segment boundaries per item.
    pub beta_offsets: Rc<[usize]>,
    /// Node-level weights per path (absent paths skipped) and head.
    pub alphas: Vec<Vec<Var>>,
    /// Items without any nonempty meta-path.
    pub fallback_items: Vec<ItemId>,
}

/// `p^t` for every item. `h` is the `N × d` pooled-content constant.
pub fn encode_all(
    tape: &mut Tape,
    store: &ParamStore,
    task: RelationType,
    shape: BehaviorShape,
    h: Var,
    neighbors: &[PathNeighbors],
) -> Result<BehaviorOutput> {
    let d = shape.dim;
    let n = tape.value(h).rows();
    let mut projected = Vec::with_capacity(shape.heads);
    for t in 0..shape.heads {
        let w = tape.param(store, &proj_name(task, t))?;
        projected.push(tape.matmul(h, w)?);
    }
    let wb = tape.param(store, &name(task, "wb"))?;
    let bb = tape.param(store, &name(task, "bb"))?;
    let sv = tape.param(store, &name(task, "sv"))?;

    let mut zs = Vec::new();
    let mut ws = Vec::new();
    let mut present = Vec::new();
    let mut alphas = Vec::new();
    for (k, nb) in neighbors.iter().enumerate() {
        if nb.n_items() != n {
            return Err(Error::Usage(format!(
                "neighbor lists cover {} items, content covers {n}",
                nb.n_items()
            )));
        }
        if nb.n_edges() == 0 {
            continue;
        }
        let (z, a) = node_level_all(tape, store, task, k, shape, h, &projected, nb)?;
        let u = tape.matmul(z, wb)?;
        let u = tape.add_row(u, bb)?;
        let u = tape.activation(Activation::Tanh, u)?;
        let u = tape.matmul(u, sv)?;
        let w = if nb.live_nbrs.is_empty() {
            tape.constant(Tensor::zeros(&[n, 1]))
        } else {
            let g = tape.gather_rows(u, nb.live_nbrs.clone())?;
            tape.segment_sum(g, nb.live_offsets.clone())?
        };
        zs.push(z);
        ws.push(w);
        present.push(nb);
        alphas.push(a);
    }

    let k = present.len();
    let mut slots = Vec::new();
    let mut beta_offsets = vec![0];
    let mut fallback_items = Vec::new();
    for i in 0..n {
        let before = slots.len();
        for (kk, nb) in present.iter().enumerate() {
            if !nb.is_empty_for(i) {
                slots.push(i * k + kk);
            }
        }
        if slots.len() == before {
            fallback_items.push(i);
        }
        beta_offsets.push(slots.len());
    }
    let beta_offsets: Rc<[usize]> = beta_offsets.into();

    let wf = tape.param(store, &name(task, "fallback"))?;
    let fb = tape.matmul(h, wf)?;
    if slots.is_empty() {
        return Ok(BehaviorOutput {
            p: fb,
            beta: None,
            beta_offsets,
            alphas,
            fallback_items,
        });
    }
    let slots: Rc<[usize]> = slots.into();
    let wcat = tape.concat_cols(&ws)?;
    let wcat = tape.reshape(wcat, vec![n * k, 1])?;
    let wsel = tape.gather_rows(wcat, slots.clone())?;
    let wsel = tape.reshape(wsel, vec![slots.len()])?;
    let beta = tape.segment_softmax(wsel, beta_offsets.clone())?;
    let zcat = tape.concat_cols(&zs)?;
    let zcat = tape.reshape(zcat, vec![n * k, d])?;
    let zsel = tape.gather_rows(zcat, slots)?;
    let weighted = tape.scale_rows(zsel, beta)?;
    let mut p = tape.segment_sum(weighted, beta_offsets.clone())?;
    if !fallback_items.is_empty() {
        let mut mask = vec![0.0; n * d];
        for &i in &fallback_items {
            mask[i * d..(i + 1) * d].iter_mut().for_each(|m| *m = 1.0);
        }
        let mask = tape.constant(Tensor::matrix(n, d, mask)?);
        let fbm = tape.mul(fb, mask)?;
        p = tape.add(p, fbm)?;
    }
    Ok(BehaviorOutput {
        p,
        beta: Some(beta),
        beta_offsets,
        alphas,
        fallback_items,
    })
}

fn stack_rows(tape: &mut Tape, rows: &[Vec<f64>]) -> Result<Var> {
    Ok(tape.constant(Tensor::from_rows(rows)?))
}

/// Node-level attention of one center over an explicit neighbor list.
pub fn node_level_attention(
    tape: &mut Tape,
    store: &ParamStore,
    task: RelationType,
    path: usize,
    shape: BehaviorShape,
    center_h: &[f64],
    neighbor_hs: &[Vec<f64>],
) -> Result<Var> {
    if neighbor_hs.is_empty() {
        return Err(Error::Usage("node-level attention needs at least one neighbor".into()));
    }
    let m = neighbor_hs.len();
    let mut rows = vec![center_h.to_vec()];
    rows.extend(neighbor_hs.iter().cloned());
    let mut lists = vec![(1..=m).collect::<Vec<_>>()];
    lists.extend(std::iter::repeat_n(Vec::new(), m));
    let nb = PathNeighbors::from_lists(&lists);
    let h = stack_rows(tape, &rows)?;
    let mut projected = Vec::with_capacity(shape.heads);
    for t in 0..shape.heads {
        let w = tape.param(store, &proj_name(task, t))?;
        projected.push(tape.matmul(h, w)?);
    }
    let (z, _) = node_level_all(tape, store, task, path, shape, h, &projected, &nb)?;
    Ok(tape.gather_rows(z, Rc::from(vec![0]))?)
}

/// One meta-path's input to path-level attention for a single item.
pub struct PathInput {
    /// The item's own `z` for this path (`1 × d`).
    pub z_self: Var,
    /// `z` of the item's neighbors along this path that have one (`m × d`).
    pub z_neighbors: Option<Var>,
}

/// Path-level attention for one item. Returns `p` (`1 × d`) and `β` (one per path).
pub fn path_level_attention(
    tape: &mut Tape,
    store: &ParamStore,
    task: RelationType,
    inputs: &[PathInput],
) -> Result<(Var, Var)> {
    if inputs.is_empty() {
        return Err(Error::Usage("path-level attention needs at least one meta-path".into()));
    }
    let wb = tape.param(store, &name(task, "wb"))?;
    let bb = tape.param(store, &name(task, "bb"))?;
    let sv = tape.param(store, &name(task, "sv"))?;
    let mut ws = Vec::with_capacity(inputs.len());
    let mut zs = Vec::with_capacity(inputs.len());
    for inp in inputs {
        let w = match inp.z_neighbors {
            Some(zn) => {
                let u = tape.matmul(zn, wb)?;
                let u = tape.add_row(u, bb)?;
                let u = tape.activation(Activation::Tanh, u)?;
                let u = tape.matmul(u, sv)?;
                let s = tape.sum(u)?;
                tape.reshape(s, vec![1, 1])?
            }
            None => tape.constant(Tensor::zeros(&[1, 1])),
        };
        ws.push(w);
        zs.push(inp.z_self);
    }
    let k = inputs.len();
    let w = tape.concat_cols(&ws)?;
    let w = tape.reshape(w, vec![k])?;
    let beta = tape.segment_softmax(w, Rc::from(vec![0, k]))?;
    let z = tape.concat_cols(&zs)?;
    let d = tape.value(z).len() / k;
    let z = tape.reshape(z, vec![k, d])?;
    let weighted = tape.scale_rows(z, beta)?;
    let p = tape.segment_sum(weighted, Rc::from(vec![0, k]))?;
    Ok((p, beta))
}

/// InfoNCE between two views, with in-batch negatives drawn from the anchors.
///
/// With `strict` the positive pair is left out of the denominator.
pub fn infonce_loss(tape: &mut Tape, anchors: Var, positives: Var, tau: f64, strict: bool) -> Result<Var> {
    let b = tape.value(anchors).rows();
    if b < 2 {
        return Err(Error::Usage("InfoNCE needs a batch of at least two".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::Usage(format!("temperature {tau} must be positive")));
    }
    let pos = tape.cosine_rows(anchors, positives)?;
    let pos = tape.reshape(pos, vec![b, 1])?;
    let left: Rc<[usize]> = (0..b * b).map(|x| x / b).collect();
    let right: Rc<[usize]> = (0..b * b).map(|x| x % b).collect();
    let l = tape.gather_rows(anchors, left)?;
    let r = tape.gather_rows(anchors, right)?;
    let cross = tape.cosine_rows(l, r)?;
    let cross = tape.reshape(cross, vec![b, b])?;
    let logits = tape.concat_cols(&[pos, cross])?;
    let logits = tape.scale(logits, 1.0 / tau)?;
    let mask: Rc<[bool]> = (0..b * (b + 1))
        .map(|x| {
            let (i, j) = (x / (b + 1), x % (b + 1));
            if j == 0 {
                !strict
            } else {
                j - 1 != i
            }
        })
        .collect();
    let lse = tape.logsumexp_rows_masked(logits, mask)?;
    let pos = tape.reshape(pos, vec![b])?;
    let pos = tape.scale(pos, 1.0 / tau)?;
    let per = tape.sub(lse, pos)?;
    Ok(tape.mean(per)?)
}
