use mmsc_tensor::{cosine, Tensor};

use crate::error::{Error, Result};
use crate::graph::{ItemId, RelationType};

/// A `{s, c}` pair of vectors: the shape shared by `q`, `p`, `a` and `e`.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskPairEmbedding {
    pub s: Vec<f64>,
    pub c: Vec<f64>,
}

impl TaskPairEmbedding {
    pub fn get(&self, rel: RelationType) -> &[f64] {
        match rel {
            RelationType::Substitutable => &self.s,
            RelationType::Complementary => &self.c,
        }
    }
}

/// Final per-item embeddings for both tasks, row-major `N × d` each.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    tables: [Vec<f64>; 2],
}

impl EmbeddingTable {
    pub fn new(dim: usize, s: Vec<f64>, c: Vec<f64>) -> Result<Self> {
        if dim == 0 || s.len() % dim != 0 || s.len() != c.len() {
            return Err(Error::Usage(format!(
                "embedding tables of length {} and {} do not tile dimension {dim}",
                s.len(),
                c.len()
            )));
        }
        Ok(Self { dim, tables: [s, c] })
    }

    pub fn from_tensors(s: &Tensor, c: &Tensor) -> Result<Self> {
        Self::new(s.cols(), s.data().to_vec(), c.data().to_vec())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_items(&self) -> usize {
        self.tables[0].len() / self.dim
    }

    pub fn vector(&self, item: ItemId, rel: RelationType) -> &[f64] {
        &self.tables[rel.index()][item * self.dim..(item + 1) * self.dim]
    }

    pub fn pair(&self, item: ItemId) -> TaskPairEmbedding {
        TaskPairEmbedding {
            s: self.vector(item, RelationType::Substitutable).to_vec(),
            c: self.vector(item, RelationType::Complementary).to_vec(),
        }
    }

    /// Cosine score `F^r(a, b)`.
    pub fn score(&self, a: ItemId, b: ItemId, rel: RelationType) -> Result<f64> {
        Ok(cosine(self.vector(a, rel), self.vector(b, rel))?)
    }

    /// Appends rows for additional items.
    pub fn push(&mut self, e: &TaskPairEmbedding) {
        self.tables[0].extend_from_slice(&e.s);
        self.tables[1].extend_from_slice(&e.c);
    }
}
