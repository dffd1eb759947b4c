//! Gated fusion: content with behavior per task, then across tasks.

use mmsc_tensor::{Activation, ParamStore, Tape, Tensor, Var};
use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::RelationType;
use crate::init::xavier;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateLevel {
    Semantic,
    Task,
}

impl GateLevel {
    fn label(self) -> &'static str {
        match self {
            GateLevel::Semantic => "semantic",
            GateLevel::Task => "task",
        }
    }
}

/// Parameter names `(W_g1, W_g2, b_g)` of one gate instance.
pub fn gate_names(level: GateLevel, task: RelationType) -> [String; 3] {
    let base = format!("gate.{}.{}", level.label(), task.code());
    [format!("{base}.w1"), format!("{base}.w2"), format!("{base}.b")]
}

pub fn init_gate<R: Rng + ?Sized>(
    store: &mut ParamStore,
    level: GateLevel,
    task: RelationType,
    dim: usize,
    rng: &mut R,
) -> Result<()> {
    let [w1, w2, b] = gate_names(level, task);
    store.insert(w1, xavier(dim, dim, rng))?;
    store.insert(w2, xavier(dim, dim, rng))?;
    store.insert(b, Tensor::zeros(&[dim]))?;
    Ok(())
}

/// `g = σ(P·W1 + Q·W2 + b)`, `g ⊙ P + (1 − g) ⊙ Q`, applied row-wise.
/// Returns the fused rows and the gate values.
pub fn gate(
    tape: &mut Tape,
    store: &ParamStore,
    level: GateLevel,
    task: RelationType,
    primary: Var,
    auxiliary: Var,
) -> Result<(Var, Var)> {
    let (ps, qs) = (tape.value(primary).shape().to_vec(), tape.value(auxiliary).shape().to_vec());
    if ps != qs {
        return Err(Error::Tensor(mmsc_tensor::TensorError::Dimension {
            op: "gate",
            left: ps,
            right: qs,
        }));
    }
    let [w1, w2, b] = gate_names(level, task);
    let w1 = tape.param(store, &w1)?;
    let w2 = tape.param(store, &w2)?;
    let b = tape.param(store, &b)?;
    let lp = tape.matmul(primary, w1)?;
    let lq = tape.matmul(auxiliary, w2)?;
    let pre = tape.add(lp, lq)?;
    let pre = tape.add_row(pre, b)?;
    let g = tape.activation(Activation::Sigmoid, pre)?;
    let fused = tape.gate_mix(g, primary, auxiliary)?;
    Ok((fused, g))
}

fn as_row(tape: &mut Tape, v: &[f64]) -> Result<Var> {
    Ok(tape.constant(Tensor::matrix(1, v.len(), v.to_vec())?))
}

/// Semantic-level gate on single vectors: behavior `p` takes the gate side.
pub fn semantic_gate(store: &ParamStore, task: RelationType, q: &[f64], p: &[f64]) -> Result<Vec<f64>> {
    if q.len() != p.len() {
        return Err(Error::Tensor(mmsc_tensor::TensorError::Dimension {
            op: "semantic_gate",
            left: vec![q.len()],
            right: vec![p.len()],
        }));
    }
    let mut tape = Tape::new();
    let (pv, qv) = (as_row(&mut tape, p)?, as_row(&mut tape, q)?);
    let (a, _) = gate(&mut tape, store, GateLevel::Semantic, task, pv, qv)?;
    Ok(tape.value(a).data().to_vec())
}

/// Task-level gates on single vectors: each task's own vector takes the gate side.
pub fn task_gate(store: &ParamStore, a_s: &[f64], a_c: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if a_s.len() != a_c.len() {
        return Err(Error::Tensor(mmsc_tensor::TensorError::Dimension {
            op: "task_gate",
            left: vec![a_s.len()],
            right: vec![a_c.len()],
        }));
    }
    let mut tape = Tape::new();
    let (s, c) = (as_row(&mut tape, a_s)?, as_row(&mut tape, a_c)?);
    let (es, _) = gate(&mut tape, store, GateLevel::Task, RelationType::Substitutable, s, c)?;
    let (ec, _) = gate(&mut tape, store, GateLevel::Task, RelationType::Complementary, c, s)?;
    Ok((tape.value(es).data().to_vec(), tape.value(ec).data().to_vec()))
}
