//! Immutable item-item relationship graph with typed, undirected edges.

use std::collections::BTreeSet;
use std::fmt;
use std::io::{BufRead, Write};
use std::num::NonZeroUsize;
use std::str::FromStr;

use rand::seq::{index, IndexedRandom, SliceRandom};
use rand::Rng;
use thiserror::Error;

pub type ItemId = usize;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("item {item} out of range for {n_items} items")]
    IndexOutOfRange { item: ItemId, n_items: usize },
    #[error("self-loop on item {0}")]
    SelfLoop(ItemId),
    #[error("sampling pool holds {available} eligible items, {requested} requested")]
    SamplingPool { available: usize, requested: usize },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid meta-path {0:?}")]
    MetaPath(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RelationType {
    Substitutable,
    Complementary,
}

impl RelationType {
    pub const ALL: [RelationType; 2] = [RelationType::Substitutable, RelationType::Complementary];

    pub fn index(self) -> usize {
        match self {
            RelationType::Substitutable => 0,
            RelationType::Complementary => 1,
        }
    }

    pub fn code(self) -> char {
        match self {
            RelationType::Substitutable => 's',
            RelationType::Complementary => 'c',
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            RelationType::Substitutable => "substitutable",
            RelationType::Complementary => "complementary",
        }
    }

    pub fn from_code(c: char) -> Option<Self> {
        match c {
            's' => Some(RelationType::Substitutable),
            'c' => Some(RelationType::Complementary),
            _ => None,
        }
    }
}

impl fmt::Display for RelationType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Observed user behavior that produced an edge.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Behavior {
    CoView,
    BuyAfterView,
    CoPurchase,
}

impl Behavior {
    pub fn relation(self) -> RelationType {
        match self {
            Behavior::CoView | Behavior::BuyAfterView => RelationType::Substitutable,
            Behavior::CoPurchase => RelationType::Complementary,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Behavior::CoView => "co_view",
            Behavior::BuyAfterView => "buy_after_view",
            Behavior::CoPurchase => "co_purchase",
        }
    }
}

impl FromStr for Behavior {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "co_view" => Ok(Behavior::CoView),
            "buy_after_view" => Ok(Behavior::BuyAfterView),
            "co_purchase" => Ok(Behavior::CoPurchase),
            other => Err(format!("unknown behavior {other:?}")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EdgeRecord {
    pub src: ItemId,
    pub dst: ItemId,
    pub behavior: Behavior,
}

impl EdgeRecord {
    pub fn new(src: ItemId, dst: ItemId, behavior: Behavior) -> Self {
        Self { src, dst, behavior }
    }

    pub fn relation(&self) -> RelationType {
        self.behavior.relation()
    }
}

/// An undirected edge key with `lo < hi`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EdgeKey {
    pub relation: RelationType,
    pub lo: ItemId,
    pub hi: ItemId,
}

impl EdgeKey {
    pub fn new(relation: RelationType, a: ItemId, b: ItemId) -> Self {
        Self {
            relation,
            lo: a.min(b),
            hi: a.max(b),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RelGraph {
    n_items: usize,
    adj: [Vec<Vec<ItemId>>; 2],
    noise: BTreeSet<EdgeKey>,
}

impl RelGraph {
    /// Builds symmetric, deduplicated, sorted adjacency from behavior records.
    pub fn build(n_items: usize, edges: &[EdgeRecord]) -> Result<Self, GraphError> {
        Self::from_typed_pairs(n_items, edges.iter().map(|e| (e.src, e.dst, e.relation())))
    }

    pub fn from_typed_pairs<I>(n_items: usize, pairs: I) -> Result<Self, GraphError>
    where
        I: IntoIterator<Item = (ItemId, ItemId, RelationType)>,
    {
        let mut adj = [vec![Vec::new(); n_items], vec![Vec::new(); n_items]];
        for (a, b, rel) in pairs {
            for item in [a, b] {
                if item >= n_items {
                    return Err(GraphError::IndexOutOfRange { item, n_items });
                }
            }
            if a == b {
                return Err(GraphError::SelfLoop(a));
            }
            adj[rel.index()][a].push(b);
            adj[rel.index()][b].push(a);
        }
        for per_rel in adj.iter_mut() {
            for list in per_rel.iter_mut() {
                list.sort_unstable();
                list.dedup();
            }
        }
        Ok(Self {
            n_items,
            adj,
            noise: BTreeSet::new(),
        })
    }

    pub fn empty(n_items: usize) -> Self {
        Self {
            n_items,
            adj: [vec![Vec::new(); n_items], vec![Vec::new(); n_items]],
            noise: BTreeSet::new(),
        }
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn neighbors(&self, item: ItemId, rel: RelationType) -> &[ItemId] {
        &self.adj[rel.index()][item]
    }

    pub fn has_edge(&self, a: ItemId, b: ItemId, rel: RelationType) -> bool {
        a < self.n_items && self.adj[rel.index()][a].binary_search(&b).is_ok()
    }

    pub fn degree(&self, item: ItemId, rel: RelationType) -> usize {
        self.adj[rel.index()][item].len()
    }

    pub fn total_degree(&self, item: ItemId) -> usize {
        RelationType::ALL.iter().map(|r| self.degree(item, *r)).sum()
    }

    /// Undirected edge count for one relation.
    pub fn edge_count(&self, rel: RelationType) -> usize {
        self.adj[rel.index()].iter().map(Vec::len).sum::<usize>() / 2
    }

    pub fn total_edges(&self) -> usize {
        RelationType::ALL.iter().map(|r| self.edge_count(*r)).sum()
    }

    /// Undirected edges of one relation in ascending `(lo, hi)` order.
    pub fn edges(&self, rel: RelationType) -> impl Iterator<Item = EdgeKey> + '_ {
        self.adj[rel.index()].iter().enumerate().flat_map(move |(a, list)| {
            list.iter()
                .filter(move |&&b| b > a)
                .map(move |&b| EdgeKey::new(rel, a, b))
        })
    }

    pub fn all_edges(&self) -> impl Iterator<Item = EdgeKey> + '_ {
        RelationType::ALL.into_iter().flat_map(move |r| self.edges(r))
    }

    pub fn contains(&self, key: &EdgeKey) -> bool {
        self.has_edge(key.lo, key.hi, key.relation)
    }

    /// Edges flagged as injected noise (always a subset of the stored edges).
    pub fn noise_edges(&self) -> &BTreeSet<EdgeKey> {
        &self.noise
    }

    pub fn is_noise(&self, key: &EdgeKey) -> bool {
        self.noise.contains(key)
    }

    /// Rebuilds the graph from a subset of edges, keeping noise flags of survivors.
    pub fn from_edge_keys<I: IntoIterator<Item = EdgeKey>>(&self, keys: I) -> Self {
        let keys: Vec<EdgeKey> = keys.into_iter().collect();
        let mut g = Self::from_typed_pairs(self.n_items, keys.iter().map(|k| (k.lo, k.hi, k.relation)))
            .expect("keys come from a valid graph");
        g.noise = keys.into_iter().filter(|k| self.noise.contains(k)).collect();
        g
    }

    /// A copy without the given edges.
    pub fn without(&self, removed: &BTreeSet<EdgeKey>) -> Self {
        self.from_edge_keys(self.all_edges().filter(|k| !removed.contains(k)))
    }

    /// A copy with extra edges, flagged as noise when `as_noise` is set.
    pub fn with_added(&self, added: &[EdgeKey], as_noise: bool) -> Result<Self, GraphError> {
        let mut g = Self::from_typed_pairs(
            self.n_items,
            self.all_edges()
                .chain(added.iter().copied())
                .map(|k| (k.lo, k.hi, k.relation)),
        )?;
        g.noise = self.noise.clone();
        if as_noise {
            g.noise.extend(added.iter().copied());
        }
        Ok(g)
    }

    /// Restricts the graph to items where `keep[item]` holds; ids are unchanged.
    pub fn restricted_to(&self, keep: &[bool]) -> Self {
        self.from_edge_keys(self.all_edges().filter(|k| keep[k.lo] && keep[k.hi]))
    }
}

/// A typed relation sequence of length one to three.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct MetaPath(Vec<RelationType>);

impl MetaPath {
    pub const MAX_LEN: usize = 3;

    pub fn new(steps: Vec<RelationType>) -> Result<Self, GraphError> {
        if steps.is_empty() || steps.len() > Self::MAX_LEN {
            let s: String = steps.iter().map(|r| r.code()).collect();
            return Err(GraphError::MetaPath(s));
        }
        Ok(Self(steps))
    }

    pub fn steps(&self) -> &[RelationType] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl FromStr for MetaPath {
    type Err = GraphError;

    /// Parses dotted notation such as `s.s.c`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let steps = s
            .split('.')
            .map(|tok| {
                let mut chars = tok.trim().chars();
                match (chars.next(), chars.next()) {
                    (Some(c), None) => RelationType::from_code(c),
                    _ => None,
                }
            })
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| GraphError::MetaPath(s.to_string()))?;
        Self::new(steps).map_err(|_| GraphError::MetaPath(s.to_string()))
    }
}

impl fmt::Display for MetaPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|r| r.code().to_string()).collect();
        f.write_str(&parts.join("."))
    }
}

/// Per-hop frontier bound for meta-path expansion.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fanout {
    Unlimited,
    Cap(NonZeroUsize),
}

impl Fanout {
    pub fn cap(n: usize) -> Self {
        NonZeroUsize::new(n).map_or(Fanout::Unlimited, Fanout::Cap)
    }

    fn limit(self) -> usize {
        match self {
            Fanout::Unlimited => usize::MAX,
            Fanout::Cap(n) => n.get(),
        }
    }
}

impl Default for Fanout {
    fn default() -> Self {
        Fanout::cap(10)
    }
}

/// Items reachable from `start` by walking the relations of `path` in order.
///
/// Each hop's frontier is deduplicated and, when larger than the fanout cap,
/// uniformly subsampled. The start item is removed from the final set.
/// The result is sorted ascending.
pub fn metapath_neighbors<R: Rng + ?Sized>(
    g: &RelGraph,
    start: ItemId,
    path: &MetaPath,
    fanout: Fanout,
    rng: &mut R,
) -> Vec<ItemId> {
    let mut frontier = vec![start];
    let last = path.len() - 1;
    for (hop, rel) in path.steps().iter().enumerate() {
        let mut next: Vec<ItemId> = frontier
            .iter()
            .flat_map(|&u| g.neighbors(u, *rel).iter().copied())
            .collect();
        next.sort_unstable();
        next.dedup();
        if hop == last {
            next.retain(|&v| v != start);
        }
        let limit = fanout.limit();
        if next.len() > limit {
            let mut picked: Vec<ItemId> = index::sample(rng, next.len(), limit)
                .into_iter()
                .map(|i| next[i])
                .collect();
            picked.sort_unstable();
            next = picked;
        }
        if next.is_empty() {
            return next;
        }
        frontier = next;
    }
    frontier
}

/// Graph-level dropout: keeps each undirected edge with probability `1 − drop_rate`.
pub fn perturb<R: Rng + ?Sized>(g: &RelGraph, drop_rate: f64, rng: &mut R) -> RelGraph {
    let drop_rate = drop_rate.clamp(0.0, 1.0);
    let kept: Vec<EdgeKey> = g
        .all_edges()
        .filter(|_| rng.random::<f64>() >= drop_rate)
        .collect();
    g.from_edge_keys(kept)
}

/// Draws `n` distinct items uniformly among those that are neither `anchor`
/// nor adjacent to it under `rel`.
pub fn sample_negatives<R: Rng + ?Sized>(
    g: &RelGraph,
    anchor: ItemId,
    rel: RelationType,
    n: usize,
    rng: &mut R,
) -> Result<Vec<ItemId>, GraphError> {
    if anchor >= g.n_items() {
        return Err(GraphError::IndexOutOfRange {
            item: anchor,
            n_items: g.n_items(),
        });
    }
    let banned = g.neighbors(anchor, rel);
    let available = g.n_items() - 1 - banned.len();
    if available < n {
        return Err(GraphError::SamplingPool {
            available,
            requested: n,
        });
    }
    let eligible = |v: ItemId| v != anchor && banned.binary_search(&v).is_err();
    if available <= 4 * n {
        let pool: Vec<ItemId> = (0..g.n_items()).filter(|&v| eligible(v)).collect();
        let mut out: Vec<ItemId> = pool.choose_multiple(rng, n).copied().collect();
        out.shuffle(rng);
        return Ok(out);
    }
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let v = rng.random_range(0..g.n_items());
        if eligible(v) && !out.contains(&v) {
            out.push(v);
        }
    }
    Ok(out)
}

/// Assigns items to `n_groups` near-equal groups by ascending total degree,
/// ties broken by item id. Returns the group index of every item.
pub fn degree_groups(g: &RelGraph, n_groups: usize) -> Vec<usize> {
    let n_groups = n_groups.max(1);
    let n = g.n_items();
    let mut order: Vec<ItemId> = (0..n).collect();
    order.sort_by_key(|&i| (g.total_degree(i), i));
    let mut groups = vec![0; n];
    for (rank, item) in order.into_iter().enumerate() {
        groups[item] = rank * n_groups / n;
    }
    groups
}

/// Parses the tab-separated edge file format.
///
/// Returns the records and the number of items implied by the largest id.
pub fn read_edge_file<R: BufRead>(r: R) -> Result<(Vec<EdgeRecord>, usize), GraphError> {
    let mut edges = Vec::new();
    let mut n_items = 0;
    for (i, line) in r.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| GraphError::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        let trimmed = line.trim_end_matches('\r');
        if trimmed.trim().is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split('\t').collect();
        if fields.len() != 3 {
            return Err(GraphError::Parse {
                line: lineno,
                message: format!("expected 3 tab-separated fields, found {}", fields.len()),
            });
        }
        let parse_id = |s: &str| {
            s.trim().parse::<ItemId>().map_err(|_| GraphError::Parse {
                line: lineno,
                message: format!("bad item id {s:?}"),
            })
        };
        let (src, dst) = (parse_id(fields[0])?, parse_id(fields[1])?);
        let behavior = fields[2]
            .trim()
            .parse::<Behavior>()
            .map_err(|message| GraphError::Parse { line: lineno, message })?;
        n_items = n_items.max(src + 1).max(dst + 1);
        edges.push(EdgeRecord::new(src, dst, behavior));
    }
    Ok((edges, n_items))
}

pub fn write_edge_file<W: Write>(mut w: W, edges: &[EdgeRecord]) -> std::io::Result<()> {
    writeln!(w, "# src\tdst\tbehavior")?;
    for e in edges {
        writeln!(w, "{}\t{}\t{}", e.src, e.dst, e.behavior.as_str())?;
    }
    Ok(())
}
