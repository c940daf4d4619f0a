//! Convolutions. All convolutions are cross-correlations with zero "same"
//! padding, stride 1, dilation 1, except [`conv2d_strided`] which downsamples.
//!
//! conv4d is realized exactly as a sum over the unit-axis kernel offsets of
//! conv3d calls reading unit-shifted slices, sandwiched between the
//! channel<->unit permutation that exposes the unit axis to the 3D path. The
//! inner numeric routine is shared with plain conv3d, so a 4D kernel with unit
//! extent 1 reproduces per-unit conv3d bitwise.

use super::elem::add_n;
use super::{common_tape, DiffTensor, GradSink, NodeId, OpNode, Shape};
use crate::error::{Error, Result};
use std::sync::Arc;

/// 4D convolution kernel: weights [C_out, C_in, k_s, k_v, k_h, k_w] plus a
/// per-output-channel bias. Extents must be odd and at most 7 so that same
/// padding preserves extents.
pub struct ConvKernel4d {
    pub weights: DiffTensor,
    pub bias: DiffTensor,
}

impl ConvKernel4d {
    pub fn new(weights: DiffTensor, bias: DiffTensor) -> Result<ConvKernel4d> {
        if weights.shape.rank() != 6 {
            return Err(Error::shape(format!(
                "conv4d weights need rank 6, got {}",
                weights.shape
            )));
        }
        let d = weights.shape.dims();
        for &k in &d[2..6] {
            if k % 2 == 0 || k > 7 {
                return Err(Error::shape(format!(
                    "kernel extents must be odd and <= 7, got {:?}",
                    &d[2..6]
                )));
            }
        }
        if bias.shape.rank() != 1 || bias.shape.dims()[0] != d[0] {
            return Err(Error::shape(format!(
                "bias shape {} does not match {} output channels",
                bias.shape, d[0]
            )));
        }
        Ok(ConvKernel4d { weights, bias })
    }

    pub fn c_out(&self) -> usize {
        self.weights.shape.dims()[0]
    }

    pub fn c_in(&self) -> usize {
        self.weights.shape.dims()[1]
    }

    pub fn extents(&self) -> [usize; 4] {
        let d = self.weights.shape.dims();
        [d[2], d[3], d[4], d[5]]
    }
}

/// Valid output range along one axis for a given tap, so that the input index
/// z + t - p stays inside [0, d).
#[inline]
fn tap_range(d: usize, t: usize, p: usize) -> (usize, usize) {
    let lo = p.saturating_sub(t);
    let hi = (d + p).saturating_sub(t).min(d);
    (lo, hi.max(lo))
}

struct ConvDims {
    s_count: usize,
    c_in: usize,
    c_out: usize,
    d1: usize,
    d2: usize,
    d3: usize,
    k1: usize,
    k2: usize,
    k3: usize,
}

impl ConvDims {
    fn pads(&self) -> (usize, usize, usize) {
        ((self.k1 - 1) / 2, (self.k2 - 1) / 2, (self.k3 - 1) / 2)
    }
    fn vol(&self) -> usize {
        self.d1 * self.d2 * self.d3
    }
}

/// out[s, co, z] += sum_{ci, t} x[s + off, ci, z + t - p] * w[co, ci, t]
fn conv3d_offset_fwd(x: &[f64], w: &[f64], dm: &ConvDims, off: i64, out: &mut [f64]) {
    let (p1, p2, p3) = dm.pads();
    let vol = dm.vol();
    let ksz = dm.k1 * dm.k2 * dm.k3;
    for s in 0..dm.s_count {
        let si = s as i64 + off;
        if si < 0 || si >= dm.s_count as i64 {
            continue;
        }
        let xs = &x[si as usize * dm.c_in * vol..(si as usize + 1) * dm.c_in * vol];
        let os = &mut out[s * dm.c_out * vol..(s + 1) * dm.c_out * vol];
        for co in 0..dm.c_out {
            let ob = &mut os[co * vol..(co + 1) * vol];
            for ci in 0..dm.c_in {
                let xb = &xs[ci * vol..(ci + 1) * vol];
                let wb = &w[(co * dm.c_in + ci) * ksz..(co * dm.c_in + ci + 1) * ksz];
                for t1 in 0..dm.k1 {
                    let (z1l, z1h) = tap_range(dm.d1, t1, p1);
                    for t2 in 0..dm.k2 {
                        let (z2l, z2h) = tap_range(dm.d2, t2, p2);
                        for t3 in 0..dm.k3 {
                            let kw = wb[(t1 * dm.k2 + t2) * dm.k3 + t3];
                            if kw == 0.0 {
                                continue;
                            }
                            let (z3l, z3h) = tap_range(dm.d3, t3, p3);
                            let span = z3h - z3l;
                            if span == 0 {
                                continue;
                            }
                            for z1 in z1l..z1h {
                                let i1 = z1 + t1 - p1;
                                for z2 in z2l..z2h {
                                    let i2 = z2 + t2 - p2;
                                    let xo = (i1 * dm.d2 + i2) * dm.d3 + z3l + t3 - p3;
                                    let oo = (z1 * dm.d2 + z2) * dm.d3 + z3l;
                                    let xr = &xb[xo..xo + span];
                                    let or = &mut ob[oo..oo + span];
                                    for i in 0..span {
                                        or[i] += kw * xr[i];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Scatter of the output gradient back onto the input.
fn conv3d_offset_bwd_x(g: &[f64], w: &[f64], dm: &ConvDims, off: i64, dx: &mut [f64]) {
    let (p1, p2, p3) = dm.pads();
    let vol = dm.vol();
    let ksz = dm.k1 * dm.k2 * dm.k3;
    for s in 0..dm.s_count {
        let si = s as i64 + off;
        if si < 0 || si >= dm.s_count as i64 {
            continue;
        }
        let gs = &g[s * dm.c_out * vol..(s + 1) * dm.c_out * vol];
        let dxs = &mut dx[si as usize * dm.c_in * vol..(si as usize + 1) * dm.c_in * vol];
        for co in 0..dm.c_out {
            let gb = &gs[co * vol..(co + 1) * vol];
            for ci in 0..dm.c_in {
                let xb = &mut dxs[ci * vol..(ci + 1) * vol];
                let wb = &w[(co * dm.c_in + ci) * ksz..(co * dm.c_in + ci + 1) * ksz];
                for t1 in 0..dm.k1 {
                    let (z1l, z1h) = tap_range(dm.d1, t1, p1);
                    for t2 in 0..dm.k2 {
                        let (z2l, z2h) = tap_range(dm.d2, t2, p2);
                        for t3 in 0..dm.k3 {
                            let kw = wb[(t1 * dm.k2 + t2) * dm.k3 + t3];
                            if kw == 0.0 {
                                continue;
                            }
                            let (z3l, z3h) = tap_range(dm.d3, t3, p3);
                            let span = z3h - z3l;
                            if span == 0 {
                                continue;
                            }
                            for z1 in z1l..z1h {
                                let i1 = z1 + t1 - p1;
                                for z2 in z2l..z2h {
                                    let i2 = z2 + t2 - p2;
                                    let xo = (i1 * dm.d2 + i2) * dm.d3 + z3l + t3 - p3;
                                    let go = (z1 * dm.d2 + z2) * dm.d3 + z3l;
                                    let gr = &gb[go..go + span];
                                    let xr = &mut xb[xo..xo + span];
                                    for i in 0..span {
                                        xr[i] += kw * gr[i];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Correlation of the output gradient with the input, accumulated per tap.
fn conv3d_offset_bwd_w(g: &[f64], x: &[f64], dm: &ConvDims, off: i64, dw: &mut [f64]) {
    let (p1, p2, p3) = dm.pads();
    let vol = dm.vol();
    let ksz = dm.k1 * dm.k2 * dm.k3;
    for s in 0..dm.s_count {
        let si = s as i64 + off;
        if si < 0 || si >= dm.s_count as i64 {
            continue;
        }
        let gs = &g[s * dm.c_out * vol..(s + 1) * dm.c_out * vol];
        let xs = &x[si as usize * dm.c_in * vol..(si as usize + 1) * dm.c_in * vol];
        for co in 0..dm.c_out {
            let gb = &gs[co * vol..(co + 1) * vol];
            for ci in 0..dm.c_in {
                let xb = &xs[ci * vol..(ci + 1) * vol];
                let wb = &mut dw[(co * dm.c_in + ci) * ksz..(co * dm.c_in + ci + 1) * ksz];
                for t1 in 0..dm.k1 {
                    let (z1l, z1h) = tap_range(dm.d1, t1, p1);
                    for t2 in 0..dm.k2 {
                        let (z2l, z2h) = tap_range(dm.d2, t2, p2);
                        for t3 in 0..dm.k3 {
                            let (z3l, z3h) = tap_range(dm.d3, t3, p3);
                            let span = z3h - z3l;
                            if span == 0 {
                                continue;
                            }
                            let mut acc = 0.0;
                            for z1 in z1l..z1h {
                                let i1 = z1 + t1 - p1;
                                for z2 in z2l..z2h {
                                    let i2 = z2 + t2 - p2;
                                    let xo = (i1 * dm.d2 + i2) * dm.d3 + z3l + t3 - p3;
                                    let go = (z1 * dm.d2 + z2) * dm.d3 + z3l;
                                    let gr = &gb[go..go + span];
                                    let xr = &xb[xo..xo + span];
                                    for i in 0..span {
                                        acc += gr[i] * xr[i];
                                    }
                                }
                            }
                            wb[(t1 * dm.k2 + t2) * dm.k3 + t3] += acc;
                        }
                    }
                }
            }
        }
    }
}

struct Conv3dOffsetOp {
    x: Option<NodeId>,
    w: Option<NodeId>,
    x_vals: Arc<Vec<f64>>,
    w_vals: Arc<Vec<f64>>,
    dm: ConvDims,
    off: i64,
}

impl OpNode for Conv3dOffsetOp {
    fn backward(&self, g: &[f64], sink: &mut GradSink) {
        let dm = &self.dm;
        sink.accumulate(self.x, |buf| conv3d_offset_bwd_x(g, &self.w_vals, dm, self.off, buf));
        sink.accumulate(self.w, |buf| conv3d_offset_bwd_w(g, &self.x_vals, dm, self.off, buf));
    }
}

/// Batched conv3d over [S, C_in, D1, D2, D3] reading the unit-shifted slice
/// s + off; weights [C_out, C_in, k1, k2, k3]. Bias-free (compose with
/// `add_bias`).
fn conv3d_offset(x: &DiffTensor, w: &DiffTensor, off: i64) -> Result<DiffTensor> {
    if x.shape.rank() != 5 || w.shape.rank() != 5 {
        return Err(Error::shape(format!(
            "conv3d_offset needs rank-5 input and weights, got {} and {}",
            x.shape, w.shape
        )));
    }
    let xd = x.shape.dims();
    let wd = w.shape.dims();
    if xd[1] != wd[1] {
        return Err(Error::shape(format!(
            "input channels {} do not match kernel channels {}",
            xd[1], wd[1]
        )));
    }
    for &k in &wd[2..5] {
        if k % 2 == 0 || k > 7 {
            return Err(Error::shape(format!(
                "kernel extents must be odd and <= 7, got {:?}",
                &wd[2..5]
            )));
        }
    }
    let dm = ConvDims {
        s_count: xd[0],
        c_in: xd[1],
        c_out: wd[0],
        d1: xd[2],
        d2: xd[3],
        d3: xd[4],
        k1: wd[2],
        k2: wd[3],
        k3: wd[4],
    };
    let mut out = vec![0.0; dm.s_count * dm.c_out * dm.vol()];
    conv3d_offset_fwd(&x.vals, &w.vals, &dm, off, &mut out);
    let shape = Shape::new(&[dm.s_count, dm.c_out, dm.d1, dm.d2, dm.d3])?;
    let node = match common_tape(&[x, w])? {
        Some(tape) => {
            let op = Box::new(Conv3dOffsetOp {
                x: x.node_id(),
                w: w.node_id(),
                x_vals: x.vals.clone(),
                w_vals: w.vals.clone(),
                dm,
                off,
            });
            let id = tape.push(op, out.len());
            Some((tape, id))
        }
        None => None,
    };
    Ok(DiffTensor::tracked(out, shape, node))
}

/// conv3d over [C_in, D1, D2, D3] -> [C_out, D1, D2, D3], same zero padding.
pub fn conv3d(x: &DiffTensor, w: &DiffTensor, bias: Option<&DiffTensor>) -> Result<DiffTensor> {
    if x.shape.rank() != 4 {
        return Err(Error::shape(format!("conv3d needs rank-4 input, got {}", x.shape)));
    }
    let xd = x.shape.dims().to_vec();
    let xb = x.reshape(&[1, xd[0], xd[1], xd[2], xd[3]])?;
    let y = conv3d_offset(&xb, w, 0)?;
    let y = match bias {
        Some(b) => y.add_bias(b, 1)?,
        None => y,
    };
    let yd = y.shape.dims().to_vec();
    y.reshape(&[yd[1], yd[2], yd[3], yd[4]])
}

/// conv4d over [C_in, S, V, H, W] -> [C_out, S, V, H, W].
///
/// The input is permuted so the unit axis leads, each unit-axis kernel offset
/// contributes one shifted conv3d over [C, V, H, W] volumes, the offset
/// contributions are summed with the bias, and the result is permuted back.
pub fn conv4d(x: &DiffTensor, kernel: &ConvKernel4d) -> Result<DiffTensor> {
    if x.shape.rank() != 5 {
        return Err(Error::shape(format!("conv4d needs rank-5 input, got {}", x.shape)));
    }
    let xd = x.shape.dims();
    if xd[0] != kernel.c_in() {
        return Err(Error::shape(format!(
            "input channels {} do not match kernel channels {}",
            xd[0],
            kernel.c_in()
        )));
    }
    let [ks, kv, kh, kw] = kernel.extents();
    let ps = (ks - 1) as i64 / 2;
    let wd = kernel.weights.shape.dims().to_vec();
    // Unit axis out, channel axis in: [C,S,V,H,W] -> [S,C,V,H,W].
    let xp = x.permute(0, 1)?;
    let mut parts = Vec::with_capacity(ks);
    for ds in 0..ks {
        let w3 = kernel
            .weights
            .slice_axis(2, ds, 1)?
            .reshape(&[wd[0], wd[1], kv, kh, kw])?;
        parts.push(conv3d_offset(&xp, &w3, ds as i64 - ps)?);
    }
    let part_refs: Vec<&DiffTensor> = parts.iter().collect();
    let summed = add_n(&part_refs)?;
    let biased = summed.add_bias(&kernel.bias, 1)?;
    biased.permute(0, 1)
}

struct Conv2dStridedOp {
    x: Option<NodeId>,
    w: Option<NodeId>,
    x_vals: Arc<Vec<f64>>,
    w_vals: Arc<Vec<f64>>,
    c_in: usize,
    c_out: usize,
    h: usize,
    w_dim: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    oh: usize,
    ow: usize,
}

impl Conv2dStridedOp {
    fn pads(&self) -> (usize, usize) {
        ((self.kh - 1) / 2, (self.kw - 1) / 2)
    }
}

impl OpNode for Conv2dStridedOp {
    fn backward(&self, g: &[f64], sink: &mut GradSink) {
        let (ph, pw) = self.pads();
        let (h, w, oh, ow, s) = (self.h, self.w_dim, self.oh, self.ow, self.stride);
        sink.accumulate(self.x, |buf| {
            for co in 0..self.c_out {
                let gb = &g[co * oh * ow..(co + 1) * oh * ow];
                for ci in 0..self.c_in {
                    let xb = &mut buf[ci * h * w..(ci + 1) * h * w];
                    let wb = &self.w_vals
                        [(co * self.c_in + ci) * self.kh * self.kw..(co * self.c_in + ci + 1) * self.kh * self.kw];
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gv = gb[oy * ow + ox];
                            if gv == 0.0 {
                                continue;
                            }
                            for t1 in 0..self.kh {
                                let iy = (oy * s + t1) as i64 - ph as i64;
                                if iy < 0 || iy >= h as i64 {
                                    continue;
                                }
                                for t2 in 0..self.kw {
                                    let ix = (ox * s + t2) as i64 - pw as i64;
                                    if ix < 0 || ix >= w as i64 {
                                        continue;
                                    }
                                    xb[iy as usize * w + ix as usize] += gv * wb[t1 * self.kw + t2];
                                }
                            }
                        }
                    }
                }
            }
        });
        sink.accumulate(self.w, |buf| {
            for co in 0..self.c_out {
                let gb = &g[co * oh * ow..(co + 1) * oh * ow];
                for ci in 0..self.c_in {
                    let xb = &self.x_vals[ci * h * w..(ci + 1) * h * w];
                    let wb = &mut buf
                        [(co * self.c_in + ci) * self.kh * self.kw..(co * self.c_in + ci + 1) * self.kh * self.kw];
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gv = gb[oy * ow + ox];
                            if gv == 0.0 {
                                continue;
                            }
                            for t1 in 0..self.kh {
                                let iy = (oy * s + t1) as i64 - ph as i64;
                                if iy < 0 || iy >= h as i64 {
                                    continue;
                                }
                                for t2 in 0..self.kw {
                                    let ix = (ox * s + t2) as i64 - pw as i64;
                                    if ix < 0 || ix >= w as i64 {
                                        continue;
                                    }
                                    wb[t1 * self.kw + t2] += gv * xb[iy as usize * w + ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        });
    }
}

/// Strided 2D convolution over [C_in, H, W] -> [C_out, ceil-ish H/s, W/s]
/// with zero padding (k-1)/2; used by the perceptual net and discriminators.
pub fn conv2d_strided(
    x: &DiffTensor,
    w: &DiffTensor,
    bias: Option<&DiffTensor>,
    stride: usize,
) -> Result<DiffTensor> {
    if x.shape.rank() != 3 || w.shape.rank() != 4 {
        return Err(Error::shape(format!(
            "conv2d_strided needs rank-3 input and rank-4 weights, got {} and {}",
            x.shape, w.shape
        )));
    }
    if stride == 0 {
        return Err(Error::domain("stride must be positive".to_string()));
    }
    let xd = x.shape.dims();
    let wd = w.shape.dims();
    if xd[0] != wd[1] {
        return Err(Error::shape(format!(
            "input channels {} do not match kernel channels {}",
            xd[0], wd[1]
        )));
    }
    if wd[2] % 2 == 0 || wd[3] % 2 == 0 {
        return Err(Error::shape("conv2d kernel extents must be odd".to_string()));
    }
    let (c_in, h, w_dim) = (xd[0], xd[1], xd[2]);
    let (c_out, kh, kw) = (wd[0], wd[2], wd[3]);
    let (ph, pw) = ((kh - 1) / 2, (kw - 1) / 2);
    let oh = (h + 2 * ph - kh) / stride + 1;
    let ow = (w_dim + 2 * pw - kw) / stride + 1;
    let mut out = vec![0.0; c_out * oh * ow];
    for co in 0..c_out {
        let ob = &mut out[co * oh * ow..(co + 1) * oh * ow];
        for ci in 0..c_in {
            let xb = &x.vals[ci * h * w_dim..(ci + 1) * h * w_dim];
            let wb = &w.vals[(co * c_in + ci) * kh * kw..(co * c_in + ci + 1) * kh * kw];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for t1 in 0..kh {
                        let iy = (oy * stride + t1) as i64 - ph as i64;
                        if iy < 0 || iy >= h as i64 {
                            continue;
                        }
                        for t2 in 0..kw {
                            let ix = (ox * stride + t2) as i64 - pw as i64;
                            if ix < 0 || ix >= w_dim as i64 {
                                continue;
                            }
                            acc += wb[t1 * kw + t2] * xb[iy as usize * w_dim + ix as usize];
                        }
                    }
                    ob[oy * ow + ox] += acc;
                }
            }
        }
    }
    let shape = Shape::new(&[c_out, oh, ow])?;
    let node = match common_tape(&[x, w])? {
        Some(tape) => {
            let op = Box::new(Conv2dStridedOp {
                x: x.node_id(),
                w: w.node_id(),
                x_vals: x.vals.clone(),
                w_vals: w.vals.clone(),
                c_in,
                c_out,
                h,
                w_dim,
                kh,
                kw,
                stride,
                oh,
                ow,
            });
            let id = tape.push(op, out.len());
            Some((tape, id))
        }
        None => None,
    };
    let y = DiffTensor::tracked(out, shape, node);
    match bias {
        Some(b) => y.add_bias(b, 0),
        None => Ok(y),
    }
}

#[cfg(test)]
mod tests {
    use super::super::Tape;
    use super::*;
    use rand::Rng;

    fn randn(dims: &[usize], seed: u64) -> DiffTensor {
        let mut rng = crate::rng::stream(seed, "conv-test");
        let n: usize = dims.iter().product();
        DiffTensor::from_vec((0..n).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect(), dims).unwrap()
    }

    /// Direct 6-loop oracle for conv3d, written independently of the
    /// implementation's loop structure.
    fn conv3d_oracle(x: &DiffTensor, w: &DiffTensor, bias: &DiffTensor) -> Vec<f64> {
        let xd = x.shape().dims();
        let wd = w.shape().dims();
        let (ci_n, d1, d2, d3) = (xd[0], xd[1], xd[2], xd[3]);
        let (co_n, k1, k2, k3) = (wd[0], wd[2], wd[3], wd[4]);
        let (p1, p2, p3) = ((k1 as i64 - 1) / 2, (k2 as i64 - 1) / 2, (k3 as i64 - 1) / 2);
        let mut out = vec![0.0; co_n * d1 * d2 * d3];
        for co in 0..co_n {
            for z1 in 0..d1 as i64 {
                for z2 in 0..d2 as i64 {
                    for z3 in 0..d3 as i64 {
                        let mut acc = bias.values()[co];
                        for ci in 0..ci_n {
                            for t1 in 0..k1 as i64 {
                                for t2 in 0..k2 as i64 {
                                    for t3 in 0..k3 as i64 {
                                        let (i1, i2, i3) = (z1 + t1 - p1, z2 + t2 - p2, z3 + t3 - p3);
                                        if i1 < 0
                                            || i1 >= d1 as i64
                                            || i2 < 0
                                            || i2 >= d2 as i64
                                            || i3 < 0
                                            || i3 >= d3 as i64
                                        {
                                            continue;
                                        }
                                        let xi = ((ci * d1 + i1 as usize) * d2 + i2 as usize) * d3 + i3 as usize;
                                        let wi = ((((co * ci_n + ci) * k1 + t1 as usize) * k2 + t2 as usize) * k3)
                                            + t3 as usize;
                                        acc += x.values()[xi] * w.values()[wi];
                                    }
                                }
                            }
                        }
                        out[((co * d1 + z1 as usize) * d2 + z2 as usize) * d3 + z3 as usize] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv3d_matches_loop_oracle() {
        for seed in 0..4 {
            let x = randn(&[2, 3, 4, 5], 100 + seed);
            let w = randn(&[3, 2, 3, 3, 3], 200 + seed);
            let b = randn(&[3], 300 + seed);
            let y = conv3d(&x, &w, Some(&b)).unwrap();
            let want = conv3d_oracle(&x, &w, &b);
            for (a, e) in y.values().iter().zip(want.iter()) {
                assert!((a - e).abs() < 1e-12, "{a} vs {e}");
            }
        }
    }

    #[test]
    fn conv3d_identity_kernel_preserves_input() {
        // Single-tap kernel with weight 1 at the center must copy the input.
        let x = randn(&[1, 3, 3, 3], 7);
        let mut wv = vec![0.0; 27];
        wv[13] = 1.0;
        let w = DiffTensor::from_vec(wv, &[1, 1, 3, 3, 3]).unwrap();
        let b = DiffTensor::zeros(&[1]).unwrap();
        let y = conv3d(&x, &w, Some(&b)).unwrap();
        assert_eq!(y.values(), x.values());
    }

    #[test]
    fn conv4d_unit_extent_one_equals_per_unit_conv3d() {
        let s_count = 3;
        let x = randn(&[2, s_count, 3, 4, 4], 11);
        let w = randn(&[2, 2, 1, 3, 3, 3], 12);
        let b = randn(&[2], 13);
        let kernel = ConvKernel4d::new(w.clone(), b.clone()).unwrap();
        let y = conv4d(&x, &kernel).unwrap();
        // Per-unit conv3d with the same 3D kernel slice.
        let w3 = w.reshape(&[2, 2, 3, 3, 3]).unwrap();
        for s in 0..s_count {
            let xs = x.slice_axis(1, s, 1).unwrap().reshape(&[2, 3, 4, 4]).unwrap();
            let ys = conv3d(&xs, &w3, Some(&b)).unwrap();
            let got = y.slice_axis(1, s, 1).unwrap().reshape(&[2, 3, 4, 4]).unwrap();
            assert_eq!(got.values(), ys.values(), "unit {s} differs");
        }
    }

    #[test]
    fn conv4d_gradients_flow_to_weights_and_input() {
        let tape = Tape::new();
        let x = tape.leaf(&randn(&[1, 2, 2, 3, 3], 21));
        let w = tape.leaf(&randn(&[1, 1, 3, 3, 3, 3], 22));
        let b = tape.leaf(&randn(&[1], 23));
        let kernel = ConvKernel4d::new(w.clone(), b.clone()).unwrap();
        let y = conv4d(&x, &kernel).unwrap();
        let loss = y.sum_sq().unwrap();
        let g = tape.backward(&loss).unwrap();
        assert!(g.get(&x).unwrap().is_some());
        assert!(g.get(&w).unwrap().is_some());
        assert!(g.get(&b).unwrap().is_some());
    }

    #[test]
    fn conv2d_stride2_downsamples() {
        let x = randn(&[3, 8, 8], 31);
        let w = randn(&[4, 3, 3, 3], 32);
        let b = randn(&[4], 33);
        let y = conv2d_strided(&x, &w, Some(&b), 2).unwrap();
        assert_eq!(y.shape().dims(), &[4, 4, 4]);
    }

    #[test]
    fn conv2d_stride1_center_matches_manual() {
        // 1x1 input channel, 3x3 kernel, check one interior output by hand.
        let x = DiffTensor::from_vec((0..25).map(|i| i as f64).collect(), &[1, 5, 5]).unwrap();
        let w = DiffTensor::from_vec(vec![0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0], &[1, 1, 3, 3]).unwrap();
        let y = conv2d_strided(&x, &w, None, 1).unwrap();
        assert_eq!(y.values(), x.values());
    }

    #[test]
    fn kernel_extent_validation() {
        let w = DiffTensor::zeros(&[1, 1, 2, 3, 3, 3]).unwrap();
        let b = DiffTensor::zeros(&[1]).unwrap();
        assert!(ConvKernel4d::new(w, b).is_err());
        let w9 = DiffTensor::zeros(&[1, 1, 9, 3, 3, 3]).unwrap();
        let b = DiffTensor::zeros(&[1]).unwrap();
        assert!(ConvKernel4d::new(w9, b).is_err());
    }
}
