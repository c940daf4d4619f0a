//! Fused scaled dot-product attention for the global non-local block.
//!
//! out[i] = sum_j softmax_j(Q[i]·K[j] / sqrt(c)) V[j]. The N x M attention
//! matrix is never materialized; rows are recomputed during the backward pass
//! in the same order and arithmetic as the forward pass, so repeated passes
//! are bitwise identical. Everything runs serially.

use super::{common_tape, DiffTensor, GradSink, NodeId, OpNode, Shape};
use crate::error::{Error, Result};
use std::sync::Arc;

fn attn_row(q: &[f64], k: &[f64], m: usize, c: usize, scale: f64, a: &mut [f64]) {
    // a <- softmax(scale * q K^T), one row.
    let mut mx = f64::NEG_INFINITY;
    for j in 0..m {
        let kr = &k[j * c..(j + 1) * c];
        let mut dot = 0.0;
        for t in 0..c {
            dot += q[t] * kr[t];
        }
        let z = scale * dot;
        a[j] = z;
        if z > mx {
            mx = z;
        }
    }
    let mut denom = 0.0;
    for j in 0..m {
        let e = (a[j] - mx).exp();
        a[j] = e;
        denom += e;
    }
    for j in 0..m {
        a[j] /= denom;
    }
}

struct AttentionOp {
    q: Option<NodeId>,
    k: Option<NodeId>,
    v: Option<NodeId>,
    q_vals: Arc<Vec<f64>>,
    k_vals: Arc<Vec<f64>>,
    v_vals: Arc<Vec<f64>>,
    n: usize,
    m: usize,
    c: usize,
    cv: usize,
}

impl OpNode for AttentionOp {
    fn backward(&self, g: &[f64], sink: &mut GradSink) {
        let (n, m, c, cv) = (self.n, self.m, self.c, self.cv);
        let scale = 1.0 / (c as f64).sqrt();
        let (qv, kv, vv) = (&self.q_vals, &self.k_vals, &self.v_vals);
        let mut dq = vec![0.0; n * c];
        let mut dk = vec![0.0; m * c];
        let mut dv = vec![0.0; m * cv];
        let mut a = vec![0.0; m];
        let mut da = vec![0.0; m];
        for i in 0..n {
            let qr = &qv[i * c..(i + 1) * c];
            let gr = &g[i * cv..(i + 1) * cv];
            attn_row(qr, kv, m, c, scale, &mut a);
            let mut srow = 0.0;
            for j in 0..m {
                let vr = &vv[j * cv..(j + 1) * cv];
                let mut dot = 0.0;
                for t in 0..cv {
                    dot += gr[t] * vr[t];
                }
                da[j] = dot;
                srow += a[j] * dot;
            }
            for j in 0..m {
                let dz = a[j] * (da[j] - srow) * scale;
                let kr = &kv[j * c..(j + 1) * c];
                let dqr = &mut dq[i * c..(i + 1) * c];
                for t in 0..c {
                    dqr[t] += dz * kr[t];
                }
                let dkr = &mut dk[j * c..(j + 1) * c];
                for t in 0..c {
                    dkr[t] += dz * qr[t];
                }
                let dvr = &mut dv[j * cv..(j + 1) * cv];
                for t in 0..cv {
                    dvr[t] += a[j] * gr[t];
                }
            }
        }
        sink.accumulate(self.q, |buf| {
            for i in 0..buf.len() {
                buf[i] += dq[i];
            }
        });
        sink.accumulate(self.k, |buf| {
            for i in 0..buf.len() {
                buf[i] += dk[i];
            }
        });
        sink.accumulate(self.v, |buf| {
            for i in 0..buf.len() {
                buf[i] += dv[i];
            }
        });
    }
}

/// Scaled dot-product attention: q [N,c], k [M,c], v [M,cv] -> [N,cv].
pub fn attention(q: &DiffTensor, k: &DiffTensor, v: &DiffTensor) -> Result<DiffTensor> {
    if q.shape.rank() != 2 || k.shape.rank() != 2 || v.shape.rank() != 2 {
        return Err(Error::shape(format!(
            "attention needs rank-2 q/k/v, got {}, {}, {}",
            q.shape, k.shape, v.shape
        )));
    }
    let (n, c) = (q.shape.dims()[0], q.shape.dims()[1]);
    let (m, ck) = (k.shape.dims()[0], k.shape.dims()[1]);
    let (mv, cv) = (v.shape.dims()[0], v.shape.dims()[1]);
    if c != ck || m != mv {
        return Err(Error::shape(format!(
            "attention shape mismatch: q {}, k {}, v {}",
            q.shape, k.shape, v.shape
        )));
    }
    let scale = 1.0 / (c as f64).sqrt();
    let mut out = vec![0.0; n * cv];
    let mut a = vec![0.0; m];
    for i in 0..n {
        let qr = &q.vals[i * c..(i + 1) * c];
        attn_row(qr, &k.vals, m, c, scale, &mut a);
        let orow = &mut out[i * cv..(i + 1) * cv];
        for j in 0..m {
            let vr = &v.vals[j * cv..(j + 1) * cv];
            let aj = a[j];
            for t in 0..cv {
                orow[t] += aj * vr[t];
            }
        }
    }
    let shape = Shape::new(&[n, cv])?;
    let node = match common_tape(&[q, k, v])? {
        Some(tape) => {
            let op = Box::new(AttentionOp {
                q: q.node_id(),
                k: k.node_id(),
                v: v.node_id(),
                q_vals: q.vals.clone(),
                k_vals: k.vals.clone(),
                v_vals: v.vals.clone(),
                n,
                m,
                c,
                cv,
            });
            let id = tape.push(op, out.len());
            Some((tape, id))
        }
        None => None,
    };
    Ok(DiffTensor::tracked(out, shape, node))
}
