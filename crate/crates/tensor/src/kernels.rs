//! Plain forward kernels shared by the tape and by reference code.

use crate::error::Result;
use crate::tensor::Tensor;

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let (x, y) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for r in 0..m {
        let orow = &mut out[r * n..(r + 1) * n];
        for t in 0..k {
            let av = x[r * k + t];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(&y[t * n..(t + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    Tensor::from_parts(vec![m, n], out)
}

pub fn transpose(a: &Tensor) -> Tensor {
    let (m, n) = (a.rows(), a.cols());
    let mut out = vec![0.0; m * n];
    for r in 0..m {
        for c in 0..n {
            out[c * m + r] = a.data()[r * n + c];
        }
    }
    Tensor::from_parts(vec![n, m], out).expect("transpose preserves finiteness")
}

/// Max-subtracted softmax of `x` written into `out`.
pub fn softmax_into(x: &[f64], out: &mut [f64]) {
    if x.is_empty() {
        return;
    }
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let n = x.cols();
    let mut out = vec![0.0; x.len()];
    for r in 0..x.rows() {
        softmax_into(x.row(r), &mut out[r * n..(r + 1) * n]);
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

/// Per-block attention weights `softmax(Q_b K_bᵀ · scale)`, block-major, each block `block×block`.
pub fn block_attention_probs(q: &Tensor, k: &Tensor, block: usize, scale: f64) -> Vec<f64> {
    let d = q.cols();
    let blocks = q.rows() / block;
    let mut probs = vec![0.0; blocks * block * block];
    let mut scores = vec![0.0; block];
    for b in 0..blocks {
        for i in 0..block {
            let qi = q.row(b * block + i);
            for (j, s) in scores.iter_mut().enumerate() {
                let kj = k.row(b * block + j);
                *s = (0..d).map(|c| qi[c] * kj[c]).sum::<f64>() * scale;
            }
            let base = (b * block + i) * block;
            softmax_into(&scores, &mut probs[base..base + block]);
        }
    }
    probs
}

pub fn block_apply(probs: &[f64], v: &Tensor, block: usize) -> Result<Tensor> {
    let n = v.cols();
    let rows = v.rows();
    let mut out = vec![0.0; rows * n];
    for r in 0..rows {
        let b = r / block;
        for j in 0..block {
            let p = probs[r * block + j];
            let vr = v.row(b * block + j);
            for c in 0..n {
                out[r * n + c] += p * vr[c];
            }
        }
    }
    Tensor::from_parts(vec![rows, n], out)
}

pub(crate) fn block_attention_adjoint(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    probs: &[f64],
    g: &[f64],
    block: usize,
    scale: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let dh = q.cols();
    let n = v.cols();
    let rows = q.rows();
    let mut dq = vec![0.0; rows * dh];
    let mut dk = vec![0.0; rows * dh];
    let mut dv = vec![0.0; rows * n];
    let mut dp = vec![0.0; block];
    for r in 0..rows {
        let b = r / block;
        let p = &probs[r * block..(r + 1) * block];
        let gr = &g[r * n..(r + 1) * n];
        for j in 0..block {
            let vj = (b * block + j) * n;
            let mut acc = 0.0;
            for c in 0..n {
                dv[vj + c] += p[j] * gr[c];
                acc += gr[c] * v.data()[vj + c];
            }
            dp[j] = acc;
        }
        let dot: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
        for j in 0..block {
            let ds = p[j] * (dp[j] - dot) * scale;
            if ds == 0.0 {
                continue;
            }
            let kj = (b * block + j) * dh;
            for c in 0..dh {
                dq[r * dh + c] += ds * k.data()[kj + c];
                dk[kj + c] += ds * q.data()[r * dh + c];
            }
        }
    }
    (dq, dk, dv)
}
