//! Planted-partition item graphs with heavy-tailed activity, clustered
//! content sequences and labelled noise edges.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Normal, Zipf};

use crate::content::ContentProvider;
use crate::error::{Error, Result};
use crate::graph::{EdgeKey, ItemId, RelGraph, RelationType};

/// Upper end of the Zipf activity support.
pub const ACTIVITY_LEVELS: f64 = 50.0;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_clusters: usize,
    pub items_per_cluster: usize,
    pub intra_sub_prob: f64,
    pub cluster_pairing_degree: usize,
    pub noise_ratio: f64,
    pub embed_dim: usize,
    pub embed_noise_std: f64,
    pub seq_len: usize,
    pub zipf_exponent: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_clusters: 50,
            items_per_cluster: 10,
            intra_sub_prob: 0.5,
            cluster_pairing_degree: 1,
            noise_ratio: 0.0,
            embed_dim: 32,
            embed_noise_std: 0.1,
            seq_len: 4,
            zipf_exponent: 1.1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn n_items(&self) -> usize {
        self.n_clusters * self.items_per_cluster
    }

    pub fn validate(&self) -> Result<()> {
        let prob_ok = |p: f64| (0.0..=1.0).contains(&p);
        if self.n_clusters == 0 || self.items_per_cluster == 0 || self.embed_dim == 0 || self.seq_len == 0 {
            return Err(Error::config("cluster, item, dimension and sequence counts must be at least 1"));
        }
        if self.n_items() < 4 {
            return Err(Error::config(format!("need at least 4 items, config yields {}", self.n_items())));
        }
        if !prob_ok(self.intra_sub_prob) {
            return Err(Error::config(format!("intra_sub_prob {} outside [0, 1]", self.intra_sub_prob)));
        }
        if !(self.noise_ratio >= 0.0 && self.noise_ratio.is_finite()) {
            return Err(Error::config(format!("noise_ratio {} must be >= 0", self.noise_ratio)));
        }
        if !(self.embed_noise_std >= 0.0 && self.embed_noise_std.is_finite()) {
            return Err(Error::config("embed_noise_std must be a finite non-negative number"));
        }
        if !(self.zipf_exponent > 0.0 && self.zipf_exponent.is_finite()) {
            return Err(Error::config("zipf_exponent must be positive"));
        }
        cluster_partners(self.n_clusters, self.cluster_pairing_degree).map(|_| ())
    }

    fn stream(&self, id: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(id);
        rng
    }
}

/// Circulant pairing: every cluster gets exactly `degree` partners.
pub fn cluster_partners(n_clusters: usize, degree: usize) -> Result<Vec<Vec<usize>>> {
    if degree == 0 {
        return Ok(vec![Vec::new(); n_clusters]);
    }
    if degree >= n_clusters {
        return Err(Error::config(format!(
            "cannot pair each of {n_clusters} clusters with {degree} others"
        )));
    }
    if degree % 2 == 1 && n_clusters % 2 == 1 {
        return Err(Error::config(format!(
            "odd pairing degree {degree} needs an even cluster count, got {n_clusters}"
        )));
    }
    let mut partners = vec![Vec::new(); n_clusters];
    for (c, list) in partners.iter_mut().enumerate() {
        for k in 1..=degree / 2 {
            list.push((c + k) % n_clusters);
            list.push((c + n_clusters - k) % n_clusters);
        }
        if degree % 2 == 1 {
            list.push((c + n_clusters / 2) % n_clusters);
        }
        list.sort_unstable();
        list.dedup();
    }
    Ok(partners)
}

/// Planted relationships: every same-cluster pair is substitutable and
/// every pair across paired clusters is complementary.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroundTruth {
    pub clusters: Vec<usize>,
    pub pairs: [BTreeSet<(ItemId, ItemId)>; 2],
}

impl GroundTruth {
    pub fn n_items(&self) -> usize {
        self.clusters.len()
    }

    pub fn contains(&self, a: ItemId, b: ItemId, rel: RelationType) -> bool {
        self.pairs[rel.index()].contains(&(a.min(b), a.max(b)))
    }

    pub fn contains_any(&self, a: ItemId, b: ItemId) -> bool {
        RelationType::ALL.iter().any(|r| self.contains(a, b, *r))
    }

    /// Partners of `item` under `rel`, ascending.
    pub fn partners(&self, item: ItemId, rel: RelationType) -> Vec<ItemId> {
        (0..self.n_items())
            .filter(|&j| j != item && self.contains(item, j, rel))
            .collect()
    }

    /// Fraction of graph edges that are true relationships.
    pub fn precision(&self, g: &RelGraph) -> f64 {
        let total = g.total_edges();
        if total == 0 {
            return 1.0;
        }
        let good = g.all_edges().filter(|k| self.contains(k.lo, k.hi, k.relation)).count();
        good as f64 / total as f64
    }

    /// Precision of an explicit pair list for one relation.
    pub fn pair_precision(&self, pairs: &[(ItemId, ItemId)], rel: RelationType) -> f64 {
        if pairs.is_empty() {
            return 1.0;
        }
        pairs.iter().filter(|(a, b)| self.contains(*a, *b, rel)).count() as f64 / pairs.len() as f64
    }
}

fn activity_weights<R: Rng + ?Sized>(n: usize, exponent: f64, rng: &mut R) -> Vec<f64> {
    let zipf = Zipf::new(ACTIVITY_LEVELS, exponent).expect("validated exponent");
    (0..n).map(|_| zipf.sample(rng)).collect()
}

/// Keeps a Binomial(|candidates|, p) count of candidate pairs, chosen
/// without replacement with weight proportional to the endpoint activity product.
fn select_pairs<R: Rng + ?Sized>(
    candidates: &[(ItemId, ItemId)],
    p: f64,
    activity: &[f64],
    rng: &mut R,
) -> Vec<(ItemId, ItemId)> {
    if candidates.is_empty() {
        return Vec::new();
    }
    let m = Binomial::new(candidates.len() as u64, p)
        .expect("validated probability")
        .sample(rng) as usize;
    if m == 0 {
        return Vec::new();
    }
    if m == candidates.len() {
        return candidates.to_vec();
    }
    let mut picked: Vec<usize> = index::sample_weighted(
        rng,
        candidates.len(),
        |i| {
            let (a, b) = candidates[i];
            activity[a] * activity[b]
        },
        m,
    )
    .expect("positive weights")
    .into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| candidates[i]).collect()
}

/// Planted graph and its ground truth; deterministic per `cfg.seed`.
pub fn generate_planted_graph(cfg: &SynthConfig) -> Result<(RelGraph, GroundTruth)> {
    cfg.validate()?;
    if cfg.n_clusters == 1 && cfg.cluster_pairing_degree > 0 {
        return Err(Error::config("complementary pairing needs at least two clusters"));
    }
    let n = cfg.n_items();
    let k = cfg.items_per_cluster;
    let clusters: Vec<usize> = (0..n).map(|i| i / k).collect();
    let partners = cluster_partners(cfg.n_clusters, cfg.cluster_pairing_degree)?;

    let mut sub_pairs = Vec::new();
    for c in 0..cfg.n_clusters {
        for a in c * k..(c + 1) * k {
            for b in a + 1..(c + 1) * k {
                sub_pairs.push((a, b));
            }
        }
    }
    let mut com_pairs = Vec::new();
    for c in 0..cfg.n_clusters {
        for &o in partners[c].iter().filter(|&&o| o > c) {
            for a in c * k..(c + 1) * k {
                for b in o * k..(o + 1) * k {
                    com_pairs.push((a, b));
                }
            }
        }
    }

    let mut rng = cfg.stream(1);
    let activity = activity_weights(n, cfg.zipf_exponent, &mut rng);
    let sub = select_pairs(&sub_pairs, cfg.intra_sub_prob, &activity, &mut rng);
    let com = select_pairs(&com_pairs, cfg.intra_sub_prob, &activity, &mut rng);
    let g = RelGraph::from_typed_pairs(
        n,
        sub.iter()
            .map(|&(a, b)| (a, b, RelationType::Substitutable))
            .chain(com.iter().map(|&(a, b)| (a, b, RelationType::Complementary))),
    )?;
    let truth = GroundTruth {
        clusters,
        pairs: [sub_pairs.into_iter().collect(), com_pairs.into_iter().collect()],
    };
    Ok((g, truth))
}

/// Adds `⌊ratio·|E|⌋` labelled noise edges among pairs that are neither
/// edges nor ground-truth relationships, each with a uniformly drawn relation.
pub fn inject_noise<R: Rng + ?Sized>(
    g: &RelGraph,
    truth: &GroundTruth,
    ratio: f64,
    rng: &mut R,
) -> Result<RelGraph> {
    if !(ratio >= 0.0 && ratio.is_finite()) {
        return Err(Error::config(format!("noise ratio {ratio} must be >= 0")));
    }
    let requested = (ratio * g.total_edges() as f64).floor() as usize;
    if requested == 0 {
        return Ok(g.clone());
    }
    let n = g.n_items();
    let mut eligible: [Vec<(ItemId, ItemId)>; 2] = [Vec::new(), Vec::new()];
    for a in 0..n {
        for b in a + 1..n {
            if truth.contains_any(a, b) {
                continue;
            }
            for rel in RelationType::ALL {
                if !g.has_edge(a, b, rel) {
                    eligible[rel.index()].push((a, b));
                }
            }
        }
    }
    let available = eligible[0].len() + eligible[1].len();
    if requested > available {
        return Err(Error::Capacity { requested, available });
    }
    let mut counts = [0usize; 2];
    for _ in 0..requested {
        counts[usize::from(rng.random_bool(0.5))] += 1;
    }
    for r in 0..2 {
        let excess = counts[r].saturating_sub(eligible[r].len());
        counts[r] -= excess;
        counts[1 - r] += excess;
    }
    let mut added = Vec::with_capacity(requested);
    for rel in RelationType::ALL {
        let pool = &eligible[rel.index()];
        let mut picked = index::sample(rng, pool.len(), counts[rel.index()]).into_vec();
        picked.sort_unstable();
        added.extend(picked.into_iter().map(|i| EdgeKey::new(rel, pool[i].0, pool[i].1)));
    }
    Ok(g.with_added(&added, true)?)
}

/// Unit-norm centroid per cluster; each position is centroid plus Gaussian noise.
///
/// Values are rounded through `f32` so the provider survives the embedding
/// file format unchanged.
pub fn generate_embeddings<R: Rng + ?Sized>(
    truth: &GroundTruth,
    cfg: &SynthConfig,
    rng: &mut R,
) -> Result<ContentProvider> {
    if cfg.embed_dim < 2 {
        return Err(Error::config("embed_dim must be at least 2"));
    }
    let d = cfg.embed_dim;
    let n_clusters = truth.clusters.iter().max().map_or(0, |m| m + 1);
    let unit = Normal::new(0.0, 1.0).expect("valid normal");
    let mut centroids = Vec::with_capacity(n_clusters);
    for _ in 0..n_clusters {
        let mut v: Vec<f64> = (0..d).map(|_| unit.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        centroids.push(v);
    }
    let noise = Normal::new(0.0, cfg.embed_noise_std).expect("validated std");
    let mut data = Vec::with_capacity(truth.n_items() * cfg.seq_len * d);
    for &c in &truth.clusters {
        for _ in 0..cfg.seq_len {
            for x in &centroids[c] {
                let v = if cfg.embed_noise_std > 0.0 { x + noise.sample(rng) } else { *x };
                data.push(v as f32 as f64);
            }
        }
    }
    ContentProvider::new(truth.n_items(), cfg.seq_len, d, data)
}

/// A complete synthetic dataset.
#[derive(Clone, Debug)]
pub struct SynthData {
    pub graph: RelGraph,
    pub truth: GroundTruth,
    pub content: ContentProvider,
}

impl SynthData {
    pub fn generate(cfg: &SynthConfig) -> Result<Self> {
        let (clean, truth) = generate_planted_graph(cfg)?;
        let graph = inject_noise(&clean, &truth, cfg.noise_ratio, &mut cfg.stream(2))?;
        let content = generate_embeddings(&truth, cfg, &mut cfg.stream(3))?;
        Ok(Self { graph, truth, content })
    }
}

pub fn write_ground_truth<W: Write>(mut w: W, truth: &GroundTruth) -> Result<()> {
    writeln!(w, "[clusters]")?;
    for (i, c) in truth.clusters.iter().enumerate() {
        writeln!(w, "{i}\t{c}")?;
    }
    for rel in RelationType::ALL {
        writeln!(w, "[{}]", rel.name())?;
        for (a, b) in &truth.pairs[rel.index()] {
            writeln!(w, "{a}\t{b}")?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_ground_truth<R: BufRead>(r: R) -> Result<GroundTruth> {
    #[derive(PartialEq)]
    enum Section {
        None,
        Clusters,
        Pairs(usize),
    }
    let mut section = Section::None;
    let mut clusters: Vec<(usize, usize)> = Vec::new();
    let mut pairs: [BTreeSet<(ItemId, ItemId)>; 2] = [BTreeSet::new(), BTreeSet::new()];
    let mut offset = 0;
    for line in r.lines() {
        let line = line?;
        let here = offset;
        offset += line.len() + 1;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let bad = |message: String| Error::Format { offset: here, message };
        match t {
            "[clusters]" => section = Section::Clusters,
            "[substitutable]" => section = Section::Pairs(0),
            "[complementary]" => section = Section::Pairs(1),
            _ => {
                let fields: Vec<&str> = t.split('\t').collect();
                if fields.len() != 2 {
                    return Err(bad(format!("expected two tab-separated fields in {t:?}")));
                }
                let a: usize = fields[0].parse().map_err(|_| bad(format!("bad id {:?}", fields[0])))?;
                let b: usize = fields[1].parse().map_err(|_| bad(format!("bad id {:?}", fields[1])))?;
                match section {
                    Section::None => return Err(bad("line outside any section".into())),
                    Section::Clusters => clusters.push((a, b)),
                    Section::Pairs(r) => {
                        pairs[r].insert((a.min(b), a.max(b)));
                    }
                }
            }
        }
    }
    clusters.sort_unstable();
    if clusters.iter().enumerate().any(|(i, (item, _))| *item != i) {
        return Err(Error::Format {
            offset: 0,
            message: "cluster section must list items 0..N exactly once".into(),
        });
    }
    let clusters: Vec<usize> = clusters.into_iter().map(|(_, c)| c).collect();
    let n = clusters.len();
    if pairs.iter().flatten().any(|&(a, b)| b >= n || a == b) {
        return Err(Error::Format {
            offset: 0,
            message: "pair references an unknown item or itself".into(),
        });
    }
    Ok(GroundTruth { clusters, pairs })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(prob: f64) -> SynthConfig {
        SynthConfig {
            n_clusters: 2,
            items_per_cluster: 2,
            intra_sub_prob: prob,
            embed_dim: 3,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn probability_one_plants_everything() {
        let (g, truth) = generate_planted_graph(&tiny(1.0)).unwrap();
        assert_eq!(g.edge_count(RelationType::Substitutable), 2);
        assert_eq!(g.edge_count(RelationType::Complementary), 4);
        assert!(g.has_edge(0, 1, RelationType::Substitutable));
        assert!(g.has_edge(2, 3, RelationType::Substitutable));
        for a in 0..2 {
            for b in 2..4 {
                assert!(g.has_edge(a, b, RelationType::Complementary));
                assert!(truth.contains(a, b, RelationType::Complementary));
            }
        }
    }

    #[test]
    fn probability_zero_plants_nothing() {
        let (g, _) = generate_planted_graph(&tiny(0.0)).unwrap();
        assert_eq!(g.total_edges(), 0);
    }

    #[test]
    fn single_cluster_with_pairing_is_rejected() {
        let cfg = SynthConfig {
            n_clusters: 1,
            items_per_cluster: 8,
            ..SynthConfig::default()
        };
        assert!(matches!(generate_planted_graph(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn partners_are_symmetric_and_regular() {
        for (n, k) in [(50, 1), (10, 2), (10, 3), (7, 4)] {
            let p = cluster_partners(n, k).unwrap();
            for (c, list) in p.iter().enumerate() {
                assert_eq!(list.len(), k);
                assert!(!list.contains(&c));
                assert!(list.iter().all(|o| p[*o].contains(&c)));
            }
        }
        assert!(cluster_partners(7, 3).is_err());
    }

    #[test]
    fn zero_noise_is_identity() {
        let (g, truth) = generate_planted_graph(&SynthConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(inject_noise(&g, &truth, 0.0, &mut rng).unwrap(), g);
    }

    #[test]
    fn noise_beyond_capacity_fails() {
        let (g, truth) = generate_planted_graph(&tiny(1.0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(inject_noise(&g, &truth, 5.0, &mut rng), Err(Error::Capacity { .. })));
    }

    #[test]
    fn ground_truth_round_trip() {
        let (_, truth) = generate_planted_graph(&tiny(0.5)).unwrap();
        let mut buf = Vec::new();
        write_ground_truth(&mut buf, &truth).unwrap();
        assert_eq!(read_ground_truth(buf.as_slice()).unwrap(), truth);
    }
}
