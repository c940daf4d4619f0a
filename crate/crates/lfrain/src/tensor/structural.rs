//! Structural ops: axis permutation, reshape, slicing, concatenation, bias
//! broadcast, 2x spatial average pooling, and window partition/merge. All are
//! index shuffles (or fixed linear maps) with exact inverse VJPs.

use super::{common_tape, DiffTensor, GradSink, NodeId, OpNode, Shape};
use crate::error::{Error, Result};

pub(crate) fn strides_of(dims: &[usize]) -> Vec<usize> {
    let mut s = vec![1; dims.len()];
    for i in (0..dims.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * dims[i + 1];
    }
    s
}

fn permute_copy(src: &[f64], dims: &[usize], a: usize, b: usize, dst: &mut [f64]) {
    let rank = dims.len();
    let mut out_dims = dims.to_vec();
    out_dims.swap(a, b);
    let out_strides = strides_of(&out_dims);
    // Walk the input in order; scatter into the output.
    let mut idx = vec![0usize; rank];
    for (lin, &v) in src.iter().enumerate() {
        let mut out_lin = 0;
        for (ax, &i) in idx.iter().enumerate() {
            let out_ax = if ax == a {
                b
            } else if ax == b {
                a
            } else {
                ax
            };
            out_lin += i * out_strides[out_ax];
        }
        dst[out_lin] = v;
        // Increment the multi-index (row-major order).
        if lin + 1 < src.len() {
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                if idx[ax] < dims[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
    }
}

struct PermuteOp {
    x: Option<NodeId>,
    out_dims: Vec<usize>,
    a: usize,
    b: usize,
}

impl OpNode for PermuteOp {
    fn backward(&self, g: &[f64], sink: &mut GradSink) {
        // The inverse of an axis swap is the same swap.
        let mut tmp = vec![0.0; g.len()];
        permute_copy(g, &self.out_dims, self.a, self.b, &mut tmp);
        sink.accumulate(self.x, |buf| {
            for i in 0..tmp.len() {
                buf[i] += tmp[i];
            }
        });
    }
}

struct ReshapeOp {
    x: Option<NodeId>,
}

impl OpNode for ReshapeOp {
    fn backward(&self, g: &[f64], sink: &mut GradSink) {
        sink.accumulate(self.x, |buf| {
            for i in 0..g.len() {
                buf[i] += g[i];
            }
        });
    }
}

struct SliceAxisOp {
    x: Option<NodeId>,
    outer: usize,
    mid: usize,
    inner: usize,
    start: usize,
    len: usize,
}

impl OpNode for SliceAxisOp {
    fn backward(&self, g: &[f64], sink: &mut GradSink) {
        let (outer, mid, inner, start, len) = (self.outer, self.mid, self.inner, self.start, self.len);
        sink.accumulate(self.x, |buf| {
            for o in 0..outer {
                let src = &g[o * len * inner..(o + 1) * len * inner];
                let dst = &mut buf[o * mid * inner + start * inner..o * mid * inner + (start + len) * inner];
                for i in 0..len * inner {
                    dst[i] += src[i];
                }
            }
        });
    }
}

struct ConcatOp {
    parents: Vec<Option<NodeId>>,
    outer: usize,
    inner: usize,
    part_mids: Vec<usize>,
    total_mid: usize,
}

impl OpNode for ConcatOp {
    fn backward(&self, g: &[f64], sink: &mut GradSink) {
        let mut off = 0;
        for (pi, &p) in self.parents.iter().enumerate() {
            let mid = self.part_mids[pi];
            let start = off;
            sink.accumulate(p, |buf| {
                for o in 0..self.outer {
                    let src = &g[(o * self.total_mid + start) * self.inner..(o * self.total_mid + start + mid) * self.inner];
                    let dst = &mut buf[o * mid * self.inner..(o + 1) * mid * self.inner];
                    for i in 0..mid * self.inner {
                        dst[i] += src[i];
                    }
                }
            });
            off += mid;
        }
    }
}

struct AddBiasOp {
    x: Option<NodeId>,
    bias: Option<NodeId>,
    outer: usize,
    ch: usize,
    inner: usize,
}

impl OpNode for AddBiasOp {
    fn backward(&self, g: &[f64], sink: &mut GradSink) {
        sink.accumulate(self.x, |buf| {
            for i in 0..g.len() {
                buf[i] += g[i];
            }
        });
        let (outer, ch, inner) = (self.outer, self.ch, self.inner);
        sink.accumulate(self.bias, |buf| {
            for o in 0..outer {
                for c in 0..ch {
                    let blk = &g[(o * ch + c) * inner..(o * ch + c + 1) * inner];
                    let mut acc = 0.0;
                    for &v in blk {
                        acc += v;
                    }
                    buf[c] += acc;
                }
            }
        });
    }
}

struct AvgPoolHw2Op {
    x: Option<NodeId>,
    lead: usize,
    h: usize,
    w: usize,
}

impl OpNode for AvgPoolHw2Op {
    fn backward(&self, g: &[f64], sink: &mut GradSink) {
        let (lead, h, w) = (self.lead, self.h, self.w);
        let (hh, ww) = (h / 2, w / 2);
        sink.accumulate(self.x, |buf| {
            for l in 0..lead {
                let gb = &g[l * hh * ww..(l + 1) * hh * ww];
                let xb = &mut buf[l * h * w..(l + 1) * h * w];
                for y in 0..hh {
                    for x in 0..ww {
                        let v = gb[y * ww + x] * 0.25;
                        xb[(2 * y) * w + 2 * x] += v;
                        xb[(2 * y) * w + 2 * x + 1] += v;
                        xb[(2 * y + 1) * w + 2 * x] += v;
                        xb[(2 * y + 1) * w + 2 * x + 1] += v;
                    }
                }
            }
        });
    }
}

/// Gather map for window partition: out token-major, channels last.
fn window_maps(c: usize, s: usize, v: usize, h: usize, w: usize, win: usize) -> Vec<usize> {
    // For each output element (g, t, ch) the source linear index in [C,S,V,H,W].
    let (gh, gw) = (h / win, w / win);
    let groups = s * v * gh * gw;
    let t = win * win;
    let mut map = vec![0usize; groups * t * c];
    let mut o = 0;
    for si in 0..s {
        for vi in 0..v {
            for wy in 0..gh {
                for wx in 0..gw {
                    for ty in 0..win {
                        for tx in 0..win {
                            for ch in 0..c {
                                let y = wy * win + ty;
                                let x = wx * win + tx;
                                map[o] = (((ch * s + si) * v + vi) * h + y) * w + x;
                                o += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    map
}

struct GatherOp {
    x: Option<NodeId>,
    // out[i] = x[map[i]]; map is a bijection for window ops.
    map: Vec<usize>,
}

impl OpNode for GatherOp {
    fn backward(&self, g: &[f64], sink: &mut GradSink) {
        let map = &self.map;
        sink.accumulate(self.x, |buf| {
            for (i, &src) in map.iter().enumerate() {
                buf[src] += g[i];
            }
        });
    }
}

struct ScatterOp {
    x: Option<NodeId>,
    // out[map[i]] = x[i]; inverse of GatherOp with the same map.
    map: Vec<usize>,
}

impl OpNode for ScatterOp {
    fn backward(&self, g: &[f64], sink: &mut GradSink) {
        let map = &self.map;
        sink.accumulate(self.x, |buf| {
            for (i, &dst) in map.iter().enumerate() {
                buf[i] += g[dst];
            }
        });
    }
}

impl DiffTensor {
    /// Swaps two axes.
    pub fn permute(&self, a: usize, b: usize) -> Result<DiffTensor> {
        let rank = self.shape.rank();
        if a >= rank || b >= rank {
            return Err(Error::shape(format!(
                "permute axes ({a},{b}) out of range for rank {rank}"
            )));
        }
        if a == b {
            // Still a fresh tensor so callers can rely on a new node.
            return self.reshape(self.shape.dims());
        }
        let mut out_dims = self.shape.dims().to_vec();
        out_dims.swap(a, b);
        let mut out = vec![0.0; self.shape.numel()];
        permute_copy(&self.vals, self.shape.dims(), a, b, &mut out);
        let node = match common_tape(&[self])? {
            Some(tape) => {
                let op = Box::new(PermuteOp {
                    x: self.node_id(),
                    out_dims: out_dims.clone(),
                    a,
                    b,
                });
                let id = tape.push(op, out.len());
                Some((tape, id))
            }
            None => None,
        };
        Ok(DiffTensor::tracked(out, Shape::new(&out_dims)?, node))
    }

    /// Same elements, new extents (must preserve element count).
    pub fn reshape(&self, dims: &[usize]) -> Result<DiffTensor> {
        let shape = Shape::new(dims)?;
        if shape.numel() != self.shape.numel() {
            return Err(Error::shape(format!(
                "reshape {} -> {shape} changes element count",
                self.shape
            )));
        }
        let node = match common_tape(&[self])? {
            Some(tape) => {
                let op = Box::new(ReshapeOp { x: self.node_id() });
                let id = tape.push(op, self.vals.len());
                Some((tape, id))
            }
            None => None,
        };
        Ok(DiffTensor {
            vals: self.vals.clone(),
            shape,
            node,
        })
    }

    /// Contiguous slice `start..start+len` along one axis.
    pub fn slice_axis(&self, axis: usize, start: usize, len: usize) -> Result<DiffTensor> {
        let dims = self.shape.dims();
        let mid = self.shape.dim(axis)?;
        if len == 0 || start + len > mid {
            return Err(Error::shape(format!(
                "slice {start}..{} out of range for axis {axis} of {}",
                start + len,
                self.shape
            )));
        }
        let outer: usize = dims[..axis].iter().product();
        let inner: usize = dims[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * len * inner];
        for o in 0..outer {
            let src = &self.vals[o * mid * inner + start * inner..o * mid * inner + (start + len) * inner];
            out[o * len * inner..(o + 1) * len * inner].copy_from_slice(src);
        }
        let mut out_dims = dims.to_vec();
        out_dims[axis] = len;
        let node = match common_tape(&[self])? {
            Some(tape) => {
                let op = Box::new(SliceAxisOp {
                    x: self.node_id(),
                    outer,
                    mid,
                    inner,
                    start,
                    len,
                });
                let id = tape.push(op, out.len());
                Some((tape, id))
            }
            None => None,
        };
        Ok(DiffTensor::tracked(out, Shape::new(&out_dims)?, node))
    }

    /// Adds a per-index bias along `axis` (bias is rank-1 of that length).
    pub fn add_bias(&self, bias: &DiffTensor, axis: usize) -> Result<DiffTensor> {
        let ch = self.shape.dim(axis)?;
        if bias.shape.rank() != 1 || bias.shape.dims()[0] != ch {
            return Err(Error::shape(format!(
                "bias shape {} does not match axis {axis} of {}",
                bias.shape, self.shape
            )));
        }
        let dims = self.shape.dims();
        let outer: usize = dims[..axis].iter().product();
        let inner: usize = dims[axis + 1..].iter().product();
        let mut out = vec![0.0; self.shape.numel()];
        for o in 0..outer {
            for c in 0..ch {
                let b = bias.vals[c];
                let src = &self.vals[(o * ch + c) * inner..(o * ch + c + 1) * inner];
                let dst = &mut out[(o * ch + c) * inner..(o * ch + c + 1) * inner];
                for i in 0..inner {
                    dst[i] = src[i] + b;
                }
            }
        }
        let node = match common_tape(&[self, bias])? {
            Some(tape) => {
                let op = Box::new(AddBiasOp {
                    x: self.node_id(),
                    bias: bias.node_id(),
                    outer,
                    ch,
                    inner,
                });
                let id = tape.push(op, out.len());
                Some((tape, id))
            }
            None => None,
        };
        Ok(DiffTensor::tracked(out, self.shape.clone(), node))
    }

    /// 2x2 average pooling over the two innermost axes (must be even).
    pub fn avgpool_hw2(&self) -> Result<DiffTensor> {
        let rank = self.shape.rank();
        if rank < 2 {
            return Err(Error::shape(format!("avgpool_hw2 needs rank >= 2, got {}", self.shape)));
        }
        let dims = self.shape.dims();
        let (h, w) = (dims[rank - 2], dims[rank - 1]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(format!(
                "avgpool_hw2 needs even spatial extents, got {}x{}",
                h, w
            )));
        }
        let lead: usize = dims[..rank - 2].iter().product();
        let (hh, ww) = (h / 2, w / 2);
        let mut out = vec![0.0; lead * hh * ww];
        for l in 0..lead {
            let xb = &self.vals[l * h * w..(l + 1) * h * w];
            let ob = &mut out[l * hh * ww..(l + 1) * hh * ww];
            for y in 0..hh {
                for x in 0..ww {
                    ob[y * ww + x] = 0.25
                        * (xb[(2 * y) * w + 2 * x]
                            + xb[(2 * y) * w + 2 * x + 1]
                            + xb[(2 * y + 1) * w + 2 * x]
                            + xb[(2 * y + 1) * w + 2 * x + 1]);
                }
            }
        }
        let mut out_dims = dims.to_vec();
        out_dims[rank - 2] = hh;
        out_dims[rank - 1] = ww;
        let node = match common_tape(&[self])? {
            Some(tape) => {
                let op = Box::new(AvgPoolHw2Op { x: self.node_id(), lead, h, w });
                let id = tape.push(op, out.len());
                Some((tape, id))
            }
            None => None,
        };
        Ok(DiffTensor::tracked(out, Shape::new(&out_dims)?, node))
    }
}

/// Concatenates along `axis`; all other extents must match.
pub fn concat(parts: &[&DiffTensor], axis: usize) -> Result<DiffTensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::contract("concat needs at least one operand"))?;
    let rank = first.shape.rank();
    if axis >= rank {
        return Err(Error::shape(format!("concat axis {axis} out of range for rank {rank}")));
    }
    let mut total_mid = 0;
    for p in parts {
        if p.shape.rank() != rank {
            return Err(Error::shape("concat rank mismatch".to_string()));
        }
        for ax in 0..rank {
            if ax != axis && p.shape.dims()[ax] != first.shape.dims()[ax] {
                return Err(Error::shape(format!(
                    "concat extent mismatch on axis {ax}: {} vs {}",
                    p.shape, first.shape
                )));
            }
        }
        total_mid += p.shape.dims()[axis];
    }
    let outer: usize = first.shape.dims()[..axis].iter().product();
    let inner: usize = first.shape.dims()[axis + 1..].iter().product();
    let mut out = vec![0.0; outer * total_mid * inner];
    let mut off = 0;
    for p in parts {
        let mid = p.shape.dims()[axis];
        for o in 0..outer {
            let src = &p.vals[o * mid * inner..(o + 1) * mid * inner];
            out[(o * total_mid + off) * inner..(o * total_mid + off + mid) * inner].copy_from_slice(src);
        }
        off += mid;
    }
    let mut out_dims = first.shape.dims().to_vec();
    out_dims[axis] = total_mid;
    let node = match common_tape(parts)? {
        Some(tape) => {
            let op = Box::new(ConcatOp {
                parents: parts.iter().map(|p| p.node_id()).collect(),
                outer,
                inner,
                part_mids: parts.iter().map(|p| p.shape.dims()[axis]).collect(),
                total_mid,
            });
            let id = tape.push(op, out.len());
            Some((tape, id))
        }
        None => None,
    };
    Ok(DiffTensor::tracked(out, Shape::new(&out_dims)?, node))
}

/// [C,S,V,H,W] -> [G,T,C] token groups of win x win spatial windows,
/// G = S*V*(H/win)*(W/win), T = win^2.
pub fn window_partition(x: &DiffTensor, win: usize) -> Result<DiffTensor> {
    if x.shape.rank() != 5 {
        return Err(Error::shape(format!("window_partition needs rank 5, got {}", x.shape)));
    }
    let d = x.shape.dims();
    let (c, s, v, h, w) = (d[0], d[1], d[2], d[3], d[4]);
    if win == 0 || h % win != 0 || w % win != 0 {
        return Err(Error::shape(format!(
            "window {win} must divide spatial extents {h}x{w}"
        )));
    }
    let map = window_maps(c, s, v, h, w, win);
    let mut out = vec![0.0; map.len()];
    for (i, &src) in map.iter().enumerate() {
        out[i] = x.vals[src];
    }
    let groups = s * v * (h / win) * (w / win);
    let shape = Shape::new(&[groups, win * win, c])?;
    let node = match common_tape(&[x])? {
        Some(tape) => {
            let op = Box::new(GatherOp { x: x.node_id(), map });
            let id = tape.push(op, out.len());
            Some((tape, id))
        }
        None => None,
    };
    Ok(DiffTensor::tracked(out, shape, node))
}

/// Inverse of [`window_partition`] back to [C,S,V,H,W].
pub fn window_merge(x: &DiffTensor, dims: &[usize; 5], win: usize) -> Result<DiffTensor> {
    let (c, s, v, h, w) = (dims[0], dims[1], dims[2], dims[3], dims[4]);
    if win == 0 || h % win != 0 || w % win != 0 {
        return Err(Error::shape(format!(
            "window {win} must divide spatial extents {h}x{w}"
        )));
    }
    let groups = s * v * (h / win) * (w / win);
    let expect = Shape::new(&[groups, win * win, c])?;
    if x.shape != expect {
        return Err(Error::shape(format!(
            "window_merge input {} does not match expected {expect}",
            x.shape
        )));
    }
    let map = window_maps(c, s, v, h, w, win);
    let mut out = vec![0.0; map.len()];
    for (i, &dst) in map.iter().enumerate() {
        out[dst] = x.vals[i];
    }
    let shape = Shape::new(dims)?;
    let node = match common_tape(&[x])? {
        Some(tape) => {
            let op = Box::new(ScatterOp { x: x.node_id(), map });
            let id = tape.push(op, out.len());
            Some((tape, id))
        }
        None => None,
    };
    Ok(DiffTensor::tracked(out, shape, node))
}
