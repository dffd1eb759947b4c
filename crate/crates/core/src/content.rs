//! Precomputed content embeddings and the task-decoupled relational
//! fine-tuning attention that turns them into `q = {q^s, q^c}`.

use std::io::{Read, Write};
use std::rc::Rc;

use mmsc_tensor::{ParamStore, Tape, Tensor, Var};
use rand::Rng;

use crate::embedding::TaskPairEmbedding;
use crate::error::{Error, Result};
use crate::graph::{ItemId, RelationType};
use crate::init::xavier;

pub const EMBEDDING_MAGIC: &[u8; 5] = b"MMEB1";

/// Fixed per-item content sequences (`S × d` each), plus their mean-pooled vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct ContentProvider {
    n_items: usize,
    seq_len: usize,
    dim: usize,
    data: Vec<f64>,
    pooled: Vec<f64>,
}

impl ContentProvider {
    /// `data` is item-major: item, position, coordinate.
    pub fn new(n_items: usize, seq_len: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if n_items == 0 || seq_len == 0 || dim == 0 {
            return Err(Error::config(format!(
                "embedding header must be positive, got items={n_items} S={seq_len} d={dim}"
            )));
        }
        if data.len() != n_items * seq_len * dim {
            return Err(Error::Format {
                offset: 0,
                message: format!(
                    "expected {} values, found {}",
                    n_items * seq_len * dim,
                    data.len()
                ),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Format {
                offset: 17 + 4 * i,
                message: "non-finite embedding value".into(),
            });
        }
        let mut pooled = vec![0.0; n_items * dim];
        for item in 0..n_items {
            for pos in 0..seq_len {
                let base = (item * seq_len + pos) * dim;
                for c in 0..dim {
                    pooled[item * dim + c] += data[base + c];
                }
            }
            for c in 0..dim {
                pooled[item * dim + c] /= seq_len as f64;
            }
        }
        Ok(Self {
            n_items,
            seq_len,
            dim,
            data,
            pooled,
        })
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn check(&self, item: ItemId) -> Result<()> {
        if item >= self.n_items {
            return Err(Error::Lookup(item));
        }
        Ok(())
    }

    /// The `S × d` sequence of one item.
    pub fn sequence(&self, item: ItemId) -> Result<Tensor> {
        self.check(item)?;
        let n = self.seq_len * self.dim;
        Ok(Tensor::matrix(
            self.seq_len,
            self.dim,
            self.data[item * n..(item + 1) * n].to_vec(),
        )?)
    }

    pub fn sequence_slice(&self, item: ItemId) -> Result<&[f64]> {
        self.check(item)?;
        let n = self.seq_len * self.dim;
        Ok(&self.data[item * n..(item + 1) * n])
    }

    /// Mean over positions of the raw sequence.
    pub fn pooled(&self, item: ItemId) -> Result<&[f64]> {
        self.check(item)?;
        Ok(&self.pooled[item * self.dim..(item + 1) * self.dim])
    }

    /// All sequences stacked into an `(N·S) × d` matrix.
    pub fn stacked(&self) -> Tensor {
        Tensor::matrix(self.n_items * self.seq_len, self.dim, self.data.clone())
            .expect("validated at construction")
    }

    /// All pooled vectors as an `N × d` matrix.
    pub fn pooled_matrix(&self) -> Tensor {
        Tensor::matrix(self.n_items, self.dim, self.pooled.clone()).expect("validated at construction")
    }

    /// Rejects providers whose shape disagrees with the model.
    pub fn check_dims(&self, dim: usize, seq_len: usize) -> Result<()> {
        if self.dim != dim || self.seq_len != seq_len {
            return Err(Error::config(format!(
                "embedding file has S={} d={}, model expects S={seq_len} d={dim}",
                self.seq_len, self.dim
            )));
        }
        Ok(())
    }

    /// Rows of every listed item, as a new provider with ids renumbered 0..k.
    pub fn subset(&self, items: &[ItemId]) -> Result<Self> {
        let mut data = Vec::with_capacity(items.len() * self.seq_len * self.dim);
        for &i in items {
            data.extend_from_slice(self.sequence_slice(i)?);
        }
        Self::new(items.len(), self.seq_len, self.dim, data)
    }
}

pub fn write_embeddings<W: Write>(mut w: W, p: &ContentProvider) -> Result<()> {
    w.write_all(EMBEDDING_MAGIC)?;
    for v in [p.n_items, p.seq_len, p.dim] {
        let v = u32::try_from(v).map_err(|_| Error::config("embedding header exceeds u32"))?;
        w.write_all(&v.to_le_bytes())?;
    }
    for v in &p.data {
        w.write_all(&(*v as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_embeddings<R: Read>(mut r: R) -> Result<ContentProvider> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() < 5 || &bytes[..5] != EMBEDDING_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: "bad magic, expected MMEB1".into(),
        });
    }
    if bytes.len() < 17 {
        return Err(Error::Format {
            offset: bytes.len(),
            message: "truncated header".into(),
        });
    }
    let header = |i: usize| u32::from_le_bytes(bytes[5 + 4 * i..9 + 4 * i].try_into().expect("4 bytes")) as usize;
    let (n, s, d) = (header(0), header(1), header(2));
    let expected = n
        .checked_mul(s)
        .and_then(|x| x.checked_mul(d))
        .and_then(|x| x.checked_mul(4))
        .ok_or_else(|| Error::Format {
            offset: 5,
            message: "header sizes overflow".into(),
        })?;
    let payload = &bytes[17..];
    if payload.len() != expected {
        return Err(Error::Format {
            offset: 17 + payload.len().min(expected),
            message: format!("payload holds {} bytes, header implies {expected}", payload.len()),
        });
    }
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
        .collect();
    ContentProvider::new(n, s, d, data)
}

/// Shape of the relational fine-tuning layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ContentShape {
    pub dim: usize,
    pub heads: usize,
}

impl ContentShape {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.dim == 0 || self.dim % self.heads != 0 {
            return Err(Error::config(format!(
                "model dim {} must be a positive multiple of the content head count {}",
                self.dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

pub fn param_name(task: RelationType, part: &str, head: Option<usize>) -> String {
    match head {
        Some(h) => format!("content.{}.{part}.{h}", task.code()),
        None => format!("content.{}.{part}", task.code()),
    }
}

/// Adds both tasks' attention parameters to `store`.
pub fn init_params<R: Rng + ?Sized>(store: &mut ParamStore, shape: ContentShape, rng: &mut R) -> Result<()> {
    shape.validate()?;
    let (d, dh) = (shape.dim, shape.head_dim());
    for task in RelationType::ALL {
        for l in 0..shape.heads {
            for part in ["wq", "wk", "wv"] {
                store.insert(param_name(task, part, Some(l)), xavier(d, dh, rng))?;
            }
        }
        store.insert(param_name(task, "wo", None), xavier(d, d, rng))?;
    }
    Ok(())
}

/// Multi-head self-attention applied independently to consecutive blocks
/// of `seq_len` rows of `x`, followed by the output map.
pub fn mh_self_attention(
    tape: &mut Tape,
    store: &ParamStore,
    task: RelationType,
    shape: ContentShape,
    x: Var,
    seq_len: usize,
) -> Result<Var> {
    shape.validate()?;
    let scale = 1.0 / (shape.head_dim() as f64).sqrt();
    let mut heads = Vec::with_capacity(shape.heads);
    for l in 0..shape.heads {
        let wq = tape.param(store, &param_name(task, "wq", Some(l)))?;
        let wk = tape.param(store, &param_name(task, "wk", Some(l)))?;
        let wv = tape.param(store, &param_name(task, "wv", Some(l)))?;
        let q = tape.matmul(x, wq)?;
        let k = tape.matmul(x, wk)?;
        let v = tape.matmul(x, wv)?;
        heads.push(tape.block_attention(q, k, v, seq_len, scale)?);
    }
    let cat = tape.concat_cols(&heads)?;
    let wo = tape.param(store, &param_name(task, "wo", None))?;
    Ok(tape.matmul(cat, wo)?)
}

/// Mean over each block of `seq_len` rows.
pub fn pool_blocks(tape: &mut Tape, x: Var, seq_len: usize) -> Result<Var> {
    let rows = tape.value(x).rows();
    let offsets: Rc<[usize]> = (0..=rows / seq_len).map(|b| b * seq_len).collect();
    let summed = tape.segment_sum(x, offsets)?;
    Ok(tape.scale(summed, 1.0 / seq_len as f64)?)
}

/// `q^t` for every item stacked in `x` (`(N·S) × d`), as an `N × d` matrix.
pub fn encode_all(
    tape: &mut Tape,
    store: &ParamStore,
    task: RelationType,
    shape: ContentShape,
    x: Var,
    seq_len: usize,
) -> Result<Var> {
    let attended = mh_self_attention(tape, store, task, shape, x, seq_len)?;
    pool_blocks(tape, attended, seq_len)
}

/// `q_i = {q^s_i, q^c_i}` for one item.
pub fn encode_content(
    item: ItemId,
    provider: &ContentProvider,
    store: &ParamStore,
    shape: ContentShape,
) -> Result<TaskPairEmbedding> {
    let seq = provider.sequence(item)?;
    let mut tape = Tape::new();
    let x = tape.constant(seq);
    let s = encode_all(&mut tape, store, RelationType::Substitutable, shape, x, provider.seq_len())?;
    let c = encode_all(&mut tape, store, RelationType::Complementary, shape, x, provider.seq_len())?;
    Ok(TaskPairEmbedding {
        s: tape.value(s).data().to_vec(),
        c: tape.value(c).data().to_vec(),
    })
}
