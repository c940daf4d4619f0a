//! Elementwise operations. Binary ops require identical shapes; there is no
//! implicit broadcasting anywhere in the engine.

use super::{common_tape, DiffTensor, GradSink, NodeId, OpNode};
use crate::error::{Error, Result};
use std::sync::Arc;

fn check_same_shape(a: &DiffTensor, b: &DiffTensor, op: &str) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::shape(format!(
            "{op} operands differ in shape: {} vs {}",
            a.shape, b.shape
        )));
    }
    Ok(())
}

struct AddOp {
    a: Option<NodeId>,
    b: Option<NodeId>,
}

impl OpNode for AddOp {
    fn backward(&self, g: &[f64], sink: &mut GradSink) {
        sink.accumulate(self.a, |buf| {
            for i in 0..g.len() {
                buf[i] += g[i];
            }
        });
        sink.accumulate(self.b, |buf| {
            for i in 0..g.len() {
                buf[i] += g[i];
            }
        });
    }
}

struct SubOp {
    a: Option<NodeId>,
    b: Option<NodeId>,
}

impl OpNode for SubOp {
    fn backward(&self, g: &[f64], sink: &mut GradSink) {
        sink.accumulate(self.a, |buf| {
            for i in 0..g.len() {
                buf[i] += g[i];
            }
        });
        sink.accumulate(self.b, |buf| {
            for i in 0..g.len() {
                buf[i] -= g[i];
            }
        });
    }
}

struct MulOp {
    a: Option<NodeId>,
    b: Option<NodeId>,
    a_vals: Arc<Vec<f64>>,
    b_vals: Arc<Vec<f64>>,
}

impl OpNode for MulOp {
    fn backward(&self, g: &[f64], sink: &mut GradSink) {
        let (av, bv) = (&self.a_vals, &self.b_vals);
        sink.accumulate(self.a, |buf| {
            for i in 0..g.len() {
                buf[i] += g[i] * bv[i];
            }
        });
        sink.accumulate(self.b, |buf| {
            for i in 0..g.len() {
                buf[i] += g[i] * av[i];
            }
        });
    }
}

/// out = k*x + c, elementwise. Covers scaling and constant shifts.
struct AffineOp {
    x: Option<NodeId>,
    k: f64,
}

impl OpNode for AffineOp {
    fn backward(&self, g: &[f64], sink: &mut GradSink) {
        let k = self.k;
        sink.accumulate(self.x, |buf| {
            for i in 0..g.len() {
                buf[i] += k * g[i];
            }
        });
    }
}

/// Unary elementwise op whose derivative is recoverable from saved values.
enum UnaryKind {
    /// d/dx relu = [x > 0]; subgradient 0 at x = 0.
    Relu,
    /// d/dx = 1 on (lo, hi), else 0; boundary points use 0.
    Clamp { lo: f64, hi: f64 },
    /// saved holds output; d/dx = out.
    Exp,
    /// saved holds input; d/dx = 1/x.
    Log,
    /// saved holds output; d/dx = out (1 - out).
    Sigmoid,
    /// saved holds output; d/dx = 1 - out^2.
    Tanh,
    /// saved holds input; d/dx = sigmoid(x).
    Softplus,
    /// d/dx = sign(x); subgradient 0 at x = 0.
    Abs,
}

struct UnaryOp {
    x: Option<NodeId>,
    kind: UnaryKind,
    saved: Arc<Vec<f64>>,
}

impl OpNode for UnaryOp {
    fn backward(&self, g: &[f64], sink: &mut GradSink) {
        let s = &self.saved;
        let kind = &self.kind;
        sink.accumulate(self.x, |buf| match kind {
            UnaryKind::Relu => {
                for i in 0..g.len() {
                    if s[i] > 0.0 {
                        buf[i] += g[i];
                    }
                }
            }
            UnaryKind::Clamp { lo, hi } => {
                for i in 0..g.len() {
                    if s[i] > *lo && s[i] < *hi {
                        buf[i] += g[i];
                    }
                }
            }
            UnaryKind::Exp => {
                for i in 0..g.len() {
                    buf[i] += g[i] * s[i];
                }
            }
            UnaryKind::Log => {
                for i in 0..g.len() {
                    buf[i] += g[i] / s[i];
                }
            }
            UnaryKind::Sigmoid => {
                for i in 0..g.len() {
                    buf[i] += g[i] * s[i] * (1.0 - s[i]);
                }
            }
            UnaryKind::Tanh => {
                for i in 0..g.len() {
                    buf[i] += g[i] * (1.0 - s[i] * s[i]);
                }
            }
            UnaryKind::Softplus => {
                for i in 0..g.len() {
                    buf[i] += g[i] * stable_sigmoid(s[i]);
                }
            }
            UnaryKind::Abs => {
                for i in 0..g.len() {
                    if s[i] > 0.0 {
                        buf[i] += g[i];
                    } else if s[i] < 0.0 {
                        buf[i] -= g[i];
                    }
                }
            }
        });
    }
}

pub(crate) fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn stable_softplus(x: f64) -> f64 {
    // log(1 + e^x) without overflow for large |x|.
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn binary(
    a: &DiffTensor,
    b: &DiffTensor,
    name: &str,
    fwd: impl Fn(f64, f64) -> f64,
    make: impl FnOnce(Option<NodeId>, Option<NodeId>, &DiffTensor, &DiffTensor) -> Box<dyn OpNode>,
) -> Result<DiffTensor> {
    check_same_shape(a, b, name)?;
    let out: Vec<f64> = a.vals.iter().zip(b.vals.iter()).map(|(&x, &y)| fwd(x, y)).collect();
    let node = match common_tape(&[a, b])? {
        Some(tape) => {
            let op = make(a.node_id(), b.node_id(), a, b);
            let id = tape.push(op, out.len());
            Some((tape, id))
        }
        None => None,
    };
    Ok(DiffTensor::tracked(out, a.shape.clone(), node))
}

impl DiffTensor {
    pub fn add(&self, other: &DiffTensor) -> Result<DiffTensor> {
        binary(self, other, "add", |x, y| x + y, |a, b, _, _| Box::new(AddOp { a, b }))
    }

    pub fn sub(&self, other: &DiffTensor) -> Result<DiffTensor> {
        binary(self, other, "sub", |x, y| x - y, |a, b, _, _| Box::new(SubOp { a, b }))
    }

    pub fn mul(&self, other: &DiffTensor) -> Result<DiffTensor> {
        binary(
            self,
            other,
            "mul",
            |x, y| x * y,
            |a, b, at, bt| {
                Box::new(MulOp {
                    a,
                    b,
                    a_vals: at.vals.clone(),
                    b_vals: bt.vals.clone(),
                })
            },
        )
    }

    /// k * x + c elementwise.
    pub fn affine(&self, k: f64, c: f64) -> Result<DiffTensor> {
        let out: Vec<f64> = self.vals.iter().map(|&x| k * x + c).collect();
        let node = match common_tape(&[self])? {
            Some(tape) => {
                let op = Box::new(AffineOp { x: self.node_id(), k });
                let id = tape.push(op, out.len());
                Some((tape, id))
            }
            None => None,
        };
        Ok(DiffTensor::tracked(out, self.shape.clone(), node))
    }

    pub fn scale(&self, k: f64) -> Result<DiffTensor> {
        self.affine(k, 0.0)
    }

    fn unary(
        &self,
        fwd: impl Fn(f64) -> Result<f64>,
        kind: impl FnOnce(&Arc<Vec<f64>>, &Arc<Vec<f64>>) -> UnaryOpSpec,
    ) -> Result<DiffTensor> {
        let mut out = Vec::with_capacity(self.vals.len());
        for &x in self.vals.iter() {
            out.push(fwd(x)?);
        }
        let out_t = DiffTensor::tracked(out, self.shape.clone(), None);
        let node = match common_tape(&[self])? {
            Some(tape) => {
                let spec = kind(&self.vals, &out_t.vals);
                let op = Box::new(UnaryOp {
                    x: self.node_id(),
                    kind: spec.kind,
                    saved: spec.saved,
                });
                let id = tape.push(op, out_t.vals.len());
                Some((tape, id))
            }
            None => None,
        };
        Ok(DiffTensor { node, ..out_t })
    }

    pub fn relu(&self) -> Result<DiffTensor> {
        self.unary(
            |x| Ok(if x > 0.0 { x } else { 0.0 }),
            |xv, _| UnaryOpSpec { kind: UnaryKind::Relu, saved: xv.clone() },
        )
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Result<DiffTensor> {
        if !(lo <= hi) {
            return Err(Error::domain(format!("clamp bounds inverted: [{lo}, {hi}]")));
        }
        self.unary(
            |x| Ok(x.clamp(lo, hi)),
            |xv, _| UnaryOpSpec { kind: UnaryKind::Clamp { lo, hi }, saved: xv.clone() },
        )
    }

    pub fn exp(&self) -> Result<DiffTensor> {
        self.unary(
            |x| Ok(x.exp()),
            |_, ov| UnaryOpSpec { kind: UnaryKind::Exp, saved: ov.clone() },
        )
    }

    pub fn log(&self) -> Result<DiffTensor> {
        self.unary(
            |x| {
                if x <= 0.0 {
                    Err(Error::domain(format!("log of non-positive value {x}")))
                } else {
                    Ok(x.ln())
                }
            },
            |xv, _| UnaryOpSpec { kind: UnaryKind::Log, saved: xv.clone() },
        )
    }

    pub fn sigmoid(&self) -> Result<DiffTensor> {
        self.unary(
            |x| Ok(stable_sigmoid(x)),
            |_, ov| UnaryOpSpec { kind: UnaryKind::Sigmoid, saved: ov.clone() },
        )
    }

    pub fn tanh(&self) -> Result<DiffTensor> {
        self.unary(
            |x| Ok(x.tanh()),
            |_, ov| UnaryOpSpec { kind: UnaryKind::Tanh, saved: ov.clone() },
        )
    }

    pub fn softplus(&self) -> Result<DiffTensor> {
        self.unary(
            |x| Ok(stable_softplus(x)),
            |xv, _| UnaryOpSpec { kind: UnaryKind::Softplus, saved: xv.clone() },
        )
    }

    pub fn abs(&self) -> Result<DiffTensor> {
        self.unary(
            |x| Ok(x.abs()),
            |xv, _| UnaryOpSpec { kind: UnaryKind::Abs, saved: xv.clone() },
        )
    }
}

struct UnaryOpSpec {
    kind: UnaryKind,
    saved: Arc<Vec<f64>>,
}

struct AddNOp {
    parents: Vec<Option<NodeId>>,
}

impl OpNode for AddNOp {
    fn backward(&self, g: &[f64], sink: &mut GradSink) {
        for &p in &self.parents {
            sink.accumulate(p, |buf| {
                for i in 0..g.len() {
                    buf[i] += g[i];
                }
            });
        }
    }
}

/// Sum of an arbitrary number of same-shape tensors in one node.
pub fn add_n(args: &[&DiffTensor]) -> Result<DiffTensor> {
    let first = args
        .first()
        .ok_or_else(|| Error::contract("add_n needs at least one operand"))?;
    for a in args {
        check_same_shape(first, a, "add_n")?;
    }
    let n = first.shape.numel();
    let mut out = vec![0.0; n];
    for a in args {
        for i in 0..n {
            out[i] += a.vals[i];
        }
    }
    let node = match common_tape(args)? {
        Some(tape) => {
            let op = Box::new(AddNOp {
                parents: args.iter().map(|a| a.node_id()).collect(),
            });
            let id = tape.push(op, n);
            Some((tape, id))
        }
        None => None,
    };
    Ok(DiffTensor::tracked(out, first.shape.clone(), node))
}

#[cfg(test)]
mod tests {
    use super::super::Tape;
    use super::*;

    fn t(vals: &[f64]) -> DiffTensor {
        DiffTensor::from_vec(vals.to_vec(), &[vals.len()]).unwrap()
    }

    #[test]
    fn add_mul_forward_and_grad() {
        let tape = Tape::new();
        let x = tape.leaf(&t(&[1.0, 2.0, 3.0]));
        let y = tape.leaf(&t(&[4.0, 5.0, 6.0]));
        let p = x.mul(&y).unwrap();
        let s = p.sum().unwrap();
        assert_eq!(s.item().unwrap(), 4.0 + 10.0 + 18.0);
        let g = tape.backward(&s).unwrap();
        assert_eq!(g.get(&x).unwrap().unwrap(), &[4.0, 5.0, 6.0]);
        assert_eq!(g.get(&y).unwrap().unwrap(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(&t(&[2.0]));
        let c = t(&[10.0]);
        let y = x.mul(&c).unwrap();
        let g = tape.backward(&y.sum().unwrap()).unwrap();
        assert_eq!(g.get(&x).unwrap().unwrap(), &[10.0]);
        assert!(g.get(&c).is_err());
    }

    #[test]
    fn relu_subgradient_zero_at_zero() {
        let tape = Tape::new();
        let x = tape.leaf(&t(&[-1.0, 0.0, 2.0]));
        let y = x.relu().unwrap();
        assert_eq!(y.values(), &[0.0, 0.0, 2.0]);
        let g = tape.backward(&y.sum().unwrap()).unwrap();
        assert_eq!(g.get(&x).unwrap().unwrap(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn clamp_passes_inside_blocks_outside() {
        let tape = Tape::new();
        let x = tape.leaf(&t(&[-0.5, 0.25, 1.5]));
        let y = x.clamp(0.0, 1.0).unwrap();
        assert_eq!(y.values(), &[0.0, 0.25, 1.0]);
        let g = tape.backward(&y.sum().unwrap()).unwrap();
        assert_eq!(g.get(&x).unwrap().unwrap(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn log_rejects_nonpositive() {
        assert!(t(&[0.0]).log().is_err());
        assert!(t(&[-1.0]).log().is_err());
        assert!(t(&[1.0]).log().is_ok());
    }

    #[test]
    fn sigmoid_matches_closed_form_grad() {
        let tape = Tape::new();
        let x = tape.leaf(&t(&[0.3]));
        let y = x.sigmoid().unwrap();
        let g = tape.backward(&y.sum().unwrap()).unwrap();
        let s = stable_sigmoid(0.3);
        let got = g.get(&x).unwrap().unwrap()[0];
        assert!((got - s * (1.0 - s)).abs() < 1e-15);
    }

    #[test]
    fn add_n_matches_chained_adds() {
        let tape = Tape::new();
        let a = tape.leaf(&t(&[1.0, 2.0]));
        let b = tape.leaf(&t(&[3.0, 4.0]));
        let c = tape.leaf(&t(&[5.0, 6.0]));
        let s = add_n(&[&a, &b, &c]).unwrap();
        assert_eq!(s.values(), &[9.0, 12.0]);
        let g = tape.backward(&s.sum().unwrap()).unwrap();
        assert_eq!(g.get(&b).unwrap().unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let a = t(&[1.0, 2.0]);
        let b = DiffTensor::from_vec(vec![1.0, 2.0], &[2, 1]).unwrap();
        assert!(a.add(&b).is_err());
    }
}
