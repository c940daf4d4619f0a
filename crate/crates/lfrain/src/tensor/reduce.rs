//! Reductions, losses that reduce to scalars, matrix products, and row
//! softmax.

use super::{common_tape, DiffTensor, GradSink, NodeId, OpNode, Shape};
use crate::error::{Error, Result};
use std::sync::Arc;

struct SumOp {
    x: Option<NodeId>,
    k: f64,
}

impl OpNode for SumOp {
    fn backward(&self, g: &[f64], sink: &mut GradSink) {
        let v = g[0] * self.k;
        sink.accumulate(self.x, |buf| {
            for b in buf.iter_mut() {
                *b += v;
            }
        });
    }
}

struct L2NormOp {
    x: Option<NodeId>,
    x_vals: Arc<Vec<f64>>,
    norm: f64,
}

impl OpNode for L2NormOp {
    fn backward(&self, g: &[f64], sink: &mut GradSink) {
        // d||x||/dx = x / ||x||; subgradient 0 at the origin.
        if self.norm == 0.0 {
            return;
        }
        let s = g[0] / self.norm;
        let xv = &self.x_vals;
        sink.accumulate(self.x, |buf| {
            for i in 0..buf.len() {
                buf[i] += s * xv[i];
            }
        });
    }
}

struct SumSqOp {
    x: Option<NodeId>,
    x_vals: Arc<Vec<f64>>,
}

impl OpNode for SumSqOp {
    fn backward(&self, g: &[f64], sink: &mut GradSink) {
        let s = 2.0 * g[0];
        let xv = &self.x_vals;
        sink.accumulate(self.x, |buf| {
            for i in 0..buf.len() {
                buf[i] += s * xv[i];
            }
        });
    }
}

struct MeanAbsOp {
    x: Option<NodeId>,
    x_vals: Arc<Vec<f64>>,
}

impl OpNode for MeanAbsOp {
    fn backward(&self, g: &[f64], sink: &mut GradSink) {
        let s = g[0] / self.x_vals.len() as f64;
        let xv = &self.x_vals;
        sink.accumulate(self.x, |buf| {
            for i in 0..buf.len() {
                if xv[i] > 0.0 {
                    buf[i] += s;
                } else if xv[i] < 0.0 {
                    buf[i] -= s;
                }
            }
        });
    }
}

struct SmoothL1Op {
    x: Option<NodeId>,
    x_vals: Arc<Vec<f64>>,
}

impl OpNode for SmoothL1Op {
    fn backward(&self, g: &[f64], sink: &mut GradSink) {
        let s = g[0] / self.x_vals.len() as f64;
        let xv = &self.x_vals;
        sink.accumulate(self.x, |buf| {
            for i in 0..buf.len() {
                let x = xv[i];
                let d = if x.abs() < 1.0 { x } else { x.signum() };
                buf[i] += s * d;
            }
        });
    }
}

impl DiffTensor {
    fn reduce_scalar(&self, value: f64, op: Box<dyn OpNode>) -> Result<DiffTensor> {
        let node = match common_tape(&[self])? {
            Some(tape) => {
                let id = tape.push(op, 1);
                Some((tape, id))
            }
            None => None,
        };
        Ok(DiffTensor::tracked(vec![value], Shape::scalar(), node))
    }

    /// Sum of all elements.
    pub fn sum(&self) -> Result<DiffTensor> {
        let v: f64 = self.vals.iter().sum();
        self.reduce_scalar(v, Box::new(SumOp { x: self.node_id(), k: 1.0 }))
    }

    /// Arithmetic mean of all elements.
    pub fn mean(&self) -> Result<DiffTensor> {
        let n = self.vals.len() as f64;
        let v: f64 = self.vals.iter().sum::<f64>() / n;
        self.reduce_scalar(v, Box::new(SumOp { x: self.node_id(), k: 1.0 / n }))
    }

    /// Euclidean norm of all elements viewed as one vector.
    pub fn l2_norm(&self) -> Result<DiffTensor> {
        let ss: f64 = self.vals.iter().map(|&x| x * x).sum();
        let norm = ss.sqrt();
        self.reduce_scalar(
            norm,
            Box::new(L2NormOp {
                x: self.node_id(),
                x_vals: self.vals.clone(),
                norm,
            }),
        )
    }

    /// Sum of squared elements (squared Euclidean norm).
    pub fn sum_sq(&self) -> Result<DiffTensor> {
        let ss: f64 = self.vals.iter().map(|&x| x * x).sum();
        self.reduce_scalar(
            ss,
            Box::new(SumSqOp { x: self.node_id(), x_vals: self.vals.clone() }),
        )
    }

    /// Mean absolute value of all elements.
    pub fn mean_abs(&self) -> Result<DiffTensor> {
        let n = self.vals.len() as f64;
        let v: f64 = self.vals.iter().map(|&x| x.abs()).sum::<f64>() / n;
        self.reduce_scalar(
            v,
            Box::new(MeanAbsOp { x: self.node_id(), x_vals: self.vals.clone() }),
        )
    }

    /// Mean over elements of the Huber-style penalty
    /// 0.5 x^2 for |x| < 1, |x| - 0.5 otherwise. C1-continuous at the knees.
    pub fn smooth_l1_mean(&self) -> Result<DiffTensor> {
        let n = self.vals.len() as f64;
        let v: f64 = self
            .vals
            .iter()
            .map(|&x| {
                let a = x.abs();
                if a < 1.0 {
                    0.5 * x * x
                } else {
                    a - 0.5
                }
            })
            .sum::<f64>()
            / n;
        self.reduce_scalar(
            v,
            Box::new(SmoothL1Op { x: self.node_id(), x_vals: self.vals.clone() }),
        )
    }
}

struct MatmulOp {
    a: Option<NodeId>,
    b: Option<NodeId>,
    a_vals: Arc<Vec<f64>>,
    b_vals: Arc<Vec<f64>>,
    m: usize,
    k: usize,
    n: usize,
}

impl OpNode for MatmulOp {
    fn backward(&self, g: &[f64], sink: &mut GradSink) {
        let (m, k, n) = (self.m, self.k, self.n);
        let (av, bv) = (&self.a_vals, &self.b_vals);
        // dA = G B^T
        sink.accumulate(self.a, |buf| {
            for i in 0..m {
                let grow = &g[i * n..(i + 1) * n];
                for j in 0..k {
                    let brow = &bv[j * n..(j + 1) * n];
                    let mut acc = 0.0;
                    for t in 0..n {
                        acc += grow[t] * brow[t];
                    }
                    buf[i * k + j] += acc;
                }
            }
        });
        // dB = A^T G
        sink.accumulate(self.b, |buf| {
            for i in 0..m {
                let grow = &g[i * n..(i + 1) * n];
                let arow = &av[i * k..(i + 1) * k];
                for j in 0..k {
                    let aij = arow[j];
                    let brow = &mut buf[j * n..(j + 1) * n];
                    for t in 0..n {
                        brow[t] += aij * grow[t];
                    }
                }
            }
        });
    }
}

/// Row-major [m,k] x [k,n] -> [m,n].
pub fn matmul(a: &DiffTensor, b: &DiffTensor) -> Result<DiffTensor> {
    if a.shape.rank() != 2 || b.shape.rank() != 2 {
        return Err(Error::shape(format!(
            "matmul needs rank-2 operands, got {} and {}",
            a.shape, b.shape
        )));
    }
    let (m, k) = (a.shape.dims()[0], a.shape.dims()[1]);
    let (k2, n) = (b.shape.dims()[0], b.shape.dims()[1]);
    if k != k2 {
        return Err(Error::shape(format!(
            "matmul inner dims differ: {} vs {}",
            a.shape, b.shape
        )));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.vals[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (j, &aij) in arow.iter().enumerate() {
            let brow = &b.vals[j * n..(j + 1) * n];
            for t in 0..n {
                orow[t] += aij * brow[t];
            }
        }
    }
    let shape = Shape::new(&[m, n])?;
    let node = match common_tape(&[a, b])? {
        Some(tape) => {
            let op = Box::new(MatmulOp {
                a: a.node_id(),
                b: b.node_id(),
                a_vals: a.vals.clone(),
                b_vals: b.vals.clone(),
                m,
                k,
                n,
            });
            let id = tape.push(op, m * n);
            Some((tape, id))
        }
        None => None,
    };
    Ok(DiffTensor::tracked(out, shape, node))
}

struct BatchedMatmulTBOp {
    a: Option<NodeId>,
    b: Option<NodeId>,
    a_vals: Arc<Vec<f64>>,
    b_vals: Arc<Vec<f64>>,
    g_count: usize,
    m: usize,
    k: usize,
    n: usize,
}

impl OpNode for BatchedMatmulTBOp {
    fn backward(&self, g: &[f64], sink: &mut GradSink) {
        let (gc, m, k, n) = (self.g_count, self.m, self.k, self.n);
        let (av, bv) = (&self.a_vals, &self.b_vals);
        // out[g] = A[g] B[g]^T with A [m,k], B [n,k]; G [m,n].
        // dA[g] = G B[g]; dB[g] = G^T A[g].
        sink.accumulate(self.a, |buf| {
            for gi in 0..gc {
                let gb = &g[gi * m * n..(gi + 1) * m * n];
                let bb = &bv[gi * n * k..(gi + 1) * n * k];
                let ab = &mut buf[gi * m * k..(gi + 1) * m * k];
                for i in 0..m {
                    let grow = &gb[i * n..(i + 1) * n];
                    let arow = &mut ab[i * k..(i + 1) * k];
                    for (j, &gij) in grow.iter().enumerate() {
                        let brow = &bb[j * k..(j + 1) * k];
                        for t in 0..k {
                            arow[t] += gij * brow[t];
                        }
                    }
                }
            }
        });
        sink.accumulate(self.b, |buf| {
            for gi in 0..gc {
                let gb = &g[gi * m * n..(gi + 1) * m * n];
                let ab = &av[gi * m * k..(gi + 1) * m * k];
                let bb = &mut buf[gi * n * k..(gi + 1) * n * k];
                for i in 0..m {
                    let grow = &gb[i * n..(i + 1) * n];
                    let arow = &ab[i * k..(i + 1) * k];
                    for (j, &gij) in grow.iter().enumerate() {
                        let brow = &mut bb[j * k..(j + 1) * k];
                        for t in 0..k {
                            brow[t] += gij * arow[t];
                        }
                    }
                }
            }
        });
    }
}

/// Per-group product with the second operand transposed:
/// [g,m,k] x [g,n,k] -> [g,m,n].
pub fn batched_matmul_tb(a: &DiffTensor, b: &DiffTensor) -> Result<DiffTensor> {
    if a.shape.rank() != 3 || b.shape.rank() != 3 {
        return Err(Error::shape(format!(
            "batched_matmul_tb needs rank-3 operands, got {} and {}",
            a.shape, b.shape
        )));
    }
    let (gc, m, k) = (a.shape.dims()[0], a.shape.dims()[1], a.shape.dims()[2]);
    let (gc2, n, k2) = (b.shape.dims()[0], b.shape.dims()[1], b.shape.dims()[2]);
    if gc != gc2 || k != k2 {
        return Err(Error::shape(format!(
            "batched_matmul_tb mismatch: {} vs {}",
            a.shape, b.shape
        )));
    }
    let mut out = vec![0.0; gc * m * n];
    for gi in 0..gc {
        let ab = &a.vals[gi * m * k..(gi + 1) * m * k];
        let bb = &b.vals[gi * n * k..(gi + 1) * n * k];
        let ob = &mut out[gi * m * n..(gi + 1) * m * n];
        for i in 0..m {
            let arow = &ab[i * k..(i + 1) * k];
            let orow = &mut ob[i * n..(i + 1) * n];
            for j in 0..n {
                let brow = &bb[j * k..(j + 1) * k];
                let mut acc = 0.0;
                for t in 0..k {
                    acc += arow[t] * brow[t];
                }
                orow[j] = acc;
            }
        }
    }
    let shape = Shape::new(&[gc, m, n])?;
    let node = match common_tape(&[a, b])? {
        Some(tape) => {
            let op = Box::new(BatchedMatmulTBOp {
                a: a.node_id(),
                b: b.node_id(),
                a_vals: a.vals.clone(),
                b_vals: b.vals.clone(),
                g_count: gc,
                m,
                k,
                n,
            });
            let id = tape.push(op, gc * m * n);
            Some((tape, id))
        }
        None => None,
    };
    Ok(DiffTensor::tracked(out, shape, node))
}

struct BatchedMatmulOp {
    a: Option<NodeId>,
    b: Option<NodeId>,
    a_vals: Arc<Vec<f64>>,
    b_vals: Arc<Vec<f64>>,
    g_count: usize,
    m: usize,
    k: usize,
    n: usize,
}

impl OpNode for BatchedMatmulOp {
    fn backward(&self, g: &[f64], sink: &mut GradSink) {
        let (gc, m, k, n) = (self.g_count, self.m, self.k, self.n);
        let (av, bv) = (&self.a_vals, &self.b_vals);
        // out[g] = A[g] B[g]; dA[g] = G B[g]^T; dB[g] = A[g]^T G.
        sink.accumulate(self.a, |buf| {
            for gi in 0..gc {
                let gb = &g[gi * m * n..(gi + 1) * m * n];
                let bb = &bv[gi * k * n..(gi + 1) * k * n];
                let ab = &mut buf[gi * m * k..(gi + 1) * m * k];
                for i in 0..m {
                    let grow = &gb[i * n..(i + 1) * n];
                    let arow = &mut ab[i * k..(i + 1) * k];
                    for j in 0..k {
                        let brow = &bb[j * n..(j + 1) * n];
                        let mut acc = 0.0;
                        for t in 0..n {
                            acc += grow[t] * brow[t];
                        }
                        arow[j] += acc;
                    }
                }
            }
        });
        sink.accumulate(self.b, |buf| {
            for gi in 0..gc {
                let gb = &g[gi * m * n..(gi + 1) * m * n];
                let ab = &av[gi * m * k..(gi + 1) * m * k];
                let bb = &mut buf[gi * k * n..(gi + 1) * k * n];
                for i in 0..m {
                    let grow = &gb[i * n..(i + 1) * n];
                    let arow = &ab[i * k..(i + 1) * k];
                    for (j, &aij) in arow.iter().enumerate() {
                        let brow = &mut bb[j * n..(j + 1) * n];
                        for t in 0..n {
                            brow[t] += aij * grow[t];
                        }
                    }
                }
            }
        });
    }
}

/// Per-group product [g,m,k] x [g,k,n] -> [g,m,n].
pub fn batched_matmul(a: &DiffTensor, b: &DiffTensor) -> Result<DiffTensor> {
    if a.shape.rank() != 3 || b.shape.rank() != 3 {
        return Err(Error::shape(format!(
            "batched_matmul needs rank-3 operands, got {} and {}",
            a.shape, b.shape
        )));
    }
    let (gc, m, k) = (a.shape.dims()[0], a.shape.dims()[1], a.shape.dims()[2]);
    let (gc2, k2, n) = (b.shape.dims()[0], b.shape.dims()[1], b.shape.dims()[2]);
    if gc != gc2 || k != k2 {
        return Err(Error::shape(format!(
            "batched_matmul mismatch: {} vs {}",
            a.shape, b.shape
        )));
    }
    let mut out = vec![0.0; gc * m * n];
    for gi in 0..gc {
        let ab = &a.vals[gi * m * k..(gi + 1) * m * k];
        let bb = &b.vals[gi * k * n..(gi + 1) * k * n];
        let ob = &mut out[gi * m * n..(gi + 1) * m * n];
        for i in 0..m {
            let arow = &ab[i * k..(i + 1) * k];
            let orow = &mut ob[i * n..(i + 1) * n];
            for (j, &aij) in arow.iter().enumerate() {
                let brow = &bb[j * n..(j + 1) * n];
                for t in 0..n {
                    orow[t] += aij * brow[t];
                }
            }
        }
    }
    let shape = Shape::new(&[gc, m, n])?;
    let node = match common_tape(&[a, b])? {
        Some(tape) => {
            let op = Box::new(BatchedMatmulOp {
                a: a.node_id(),
                b: b.node_id(),
                a_vals: a.vals.clone(),
                b_vals: b.vals.clone(),
                g_count: gc,
                m,
                k,
                n,
            });
            let id = tape.push(op, gc * m * n);
            Some((tape, id))
        }
        None => None,
    };
    Ok(DiffTensor::tracked(out, shape, node))
}

struct SoftmaxRowsOp {
    x: Option<NodeId>,
    out_vals: Arc<Vec<f64>>,
    cols: usize,
}

impl OpNode for SoftmaxRowsOp {
    fn backward(&self, g: &[f64], sink: &mut GradSink) {
        let cols = self.cols;
        let ov = &self.out_vals;
        sink.accumulate(self.x, |buf| {
            for r in 0..ov.len() / cols {
                let o = &ov[r * cols..(r + 1) * cols];
                let gr = &g[r * cols..(r + 1) * cols];
                let dot: f64 = o.iter().zip(gr.iter()).map(|(&a, &b)| a * b).sum();
                let br = &mut buf[r * cols..(r + 1) * cols];
                for j in 0..cols {
                    br[j] += o[j] * (gr[j] - dot);
                }
            }
        });
    }
}

/// Softmax along the last axis of a rank >= 1 tensor.
pub fn softmax_last(x: &DiffTensor) -> Result<DiffTensor> {
    let dims = x.shape.dims();
    let cols = *dims.last().unwrap();
    let rows = x.shape.numel() / cols;
    let mut out = vec![0.0; x.shape.numel()];
    for r in 0..rows {
        let xr = &x.vals[r * cols..(r + 1) * cols];
        let m = xr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        let or = &mut out[r * cols..(r + 1) * cols];
        for j in 0..cols {
            let e = (xr[j] - m).exp();
            or[j] = e;
            denom += e;
        }
        for j in 0..cols {
            or[j] /= denom;
        }
    }
    let out_t = DiffTensor::tracked(out, x.shape.clone(), None);
    let node = match common_tape(&[x])? {
        Some(tape) => {
            let op = Box::new(SoftmaxRowsOp {
                x: x.node_id(),
                out_vals: out_t.vals.clone(),
                cols,
            });
            let id = tape.push(op, out_t.vals.len());
            Some((tape, id))
        }
        None => None,
    };
    Ok(DiffTensor { node, ..out_t })
}

#[cfg(test)]
mod tests {
    use super::super::Tape;
    use super::*;

    fn t(vals: &[f64], dims: &[usize]) -> DiffTensor {
        DiffTensor::from_vec(vals.to_vec(), dims).unwrap()
    }

    #[test]
    fn mean_grad_is_uniform() {
        let tape = Tape::new();
        let x = tape.leaf(&t(&[1.0, 3.0, 5.0, 7.0], &[4]));
        let m = x.mean().unwrap();
        assert_eq!(m.item().unwrap(), 4.0);
        let g = tape.backward(&m).unwrap();
        assert_eq!(g.get(&x).unwrap().unwrap(), &[0.25, 0.25, 0.25, 0.25]);
    }

    #[test]
    fn l2_norm_value_and_grad() {
        let tape = Tape::new();
        let x = tape.leaf(&t(&[3.0, 4.0], &[2]));
        let n = x.l2_norm().unwrap();
        assert_eq!(n.item().unwrap(), 5.0);
        let g = tape.backward(&n).unwrap();
        let got = g.get(&x).unwrap().unwrap();
        assert!((got[0] - 0.6).abs() < 1e-15);
        assert!((got[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn l2_norm_zero_vector_has_zero_subgradient() {
        let tape = Tape::new();
        let x = tape.leaf(&t(&[0.0, 0.0], &[2]));
        let n = x.l2_norm().unwrap();
        let g = tape.backward(&n).unwrap();
        // No gradient flowed at all: the subgradient choice at 0 is 0.
        assert!(g.get(&x).unwrap().is_none());
    }

    #[test]
    fn smooth_l1_point_values() {
        let half = t(&[0.5], &[1]).smooth_l1_mean().unwrap();
        assert_eq!(half.item().unwrap(), 0.125);
        let two = t(&[2.0], &[1]).smooth_l1_mean().unwrap();
        assert_eq!(two.item().unwrap(), 1.5);
        let knee = t(&[1.0], &[1]).smooth_l1_mean().unwrap();
        assert_eq!(knee.item().unwrap(), 0.5);
    }

    #[test]
    fn matmul_small_oracle() {
        let a = t(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
        let b = t(&[7.0, 8.0, 9.0, 10.0, 11.0, 12.0], &[3, 2]);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.values(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn matmul_grads_match_manual() {
        let tape = Tape::new();
        let a = tape.leaf(&t(&[1.0, 2.0, 3.0, 4.0], &[2, 2]));
        let b = tape.leaf(&t(&[5.0, 6.0, 7.0, 8.0], &[2, 2]));
        let c = matmul(&a, &b).unwrap();
        let s = c.sum().unwrap();
        let g = tape.backward(&s).unwrap();
        // dA = 1 B^T, dB = A^T 1.
        assert_eq!(g.get(&a).unwrap().unwrap(), &[11.0, 15.0, 11.0, 15.0]);
        assert_eq!(g.get(&b).unwrap().unwrap(), &[4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn batched_matmul_tb_matches_plain() {
        let a = t(&[1.0, 2.0, 3.0, 4.0], &[1, 2, 2]);
        let b = t(&[5.0, 6.0, 7.0, 8.0], &[1, 2, 2]);
        let c = batched_matmul_tb(&a, &b).unwrap();
        // A [2,2] x B^T: [[1*5+2*6, 1*7+2*8], [3*5+4*6, 3*7+4*8]]
        assert_eq!(c.values(), &[17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = t(&[0.0, 1.0, 2.0, -5.0, 0.0, 5.0], &[2, 3]);
        let s = softmax_last(&x).unwrap();
        for r in 0..2 {
            let sum: f64 = s.values()[r * 3..(r + 1) * 3].iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }
}
