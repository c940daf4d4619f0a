//! Shared building blocks for the 4D networks: the convolution-mode
//! ablation switch, seeded parameter initialization, channel-axis linear
//! maps, token flattening for attention, and patch sampling.
//!
//! Network tensors use the [C, S, V, H, W] layout that conv4d consumes;
//! unit stacks ([S, C, V, H, W]) swap their first two axes on entry.

use crate::error::{Error, Result};
use crate::lightfield::PatchSpec;
use crate::params::{ParamCtx, ParamStore};
use crate::rng::{stream, uniform};
use crate::tensor::{ConvKernel4d, DiffTensor};
use rand::Rng;

/// Which axes of every network kernel are active. Lower modes degenerate
/// the unit (and angular) kernel extents to 1, turning the 4D convolution
/// into independent per-unit 3D (or per-view 2D) convolutions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvMode {
    C2d,
    C3d,
    C4d,
}

impl ConvMode {
    /// Kernel extents for a nominal size `e`: [unit, angular, height, width].
    pub fn extents(self, e: usize) -> [usize; 4] {
        match self {
            ConvMode::C4d => [e, e, e, e],
            ConvMode::C3d => [1, e, e, e],
            ConvMode::C2d => [1, 1, e, e],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ConvMode::C2d => "2d",
            ConvMode::C3d => "3d",
            ConvMode::C4d => "4d",
        }
    }

    pub fn parse(s: &str) -> Result<ConvMode> {
        match s {
            "2d" => Ok(ConvMode::C2d),
            "3d" => Ok(ConvMode::C3d),
            "4d" => Ok(ConvMode::C4d),
            other => Err(Error::format(format!("conv_mode must be 2d, 3d, or 4d, got '{other}'"))),
        }
    }
}

fn fan_in_init(seed: u64, name: &str, fan_in: usize, n: usize) -> Vec<f64> {
    let mut rng = stream(seed, name);
    let bound = (1.0 / fan_in as f64).sqrt();
    (0..n).map(|_| uniform(&mut rng, -bound, bound)).collect()
}

/// Registers a conv4d weight/bias pair under `name.w` / `name.b`.
/// Weights draw from a fan-in-scaled uniform stream keyed by the parameter
/// name; biases start at zero.
pub fn init_conv4d(
    store: &mut ParamStore,
    seed: u64,
    name: &str,
    co: usize,
    ci: usize,
    ext: [usize; 4],
) -> Result<()> {
    let wn = format!("{name}.w");
    let n = co * ci * ext[0] * ext[1] * ext[2] * ext[3];
    let fan_in = ci * ext[0] * ext[1] * ext[2] * ext[3];
    store.get_or_init(&wn, &[co, ci, ext[0], ext[1], ext[2], ext[3]], || {
        fan_in_init(seed, &wn, fan_in, n)
    })?;
    store.get_or_init(&format!("{name}.b"), &[co], || vec![0.0; co])?;
    Ok(())
}

/// Fetches the pair registered by [`init_conv4d`] as a kernel.
pub fn conv4d_kernel(ctx: &ParamCtx, name: &str) -> Result<ConvKernel4d> {
    ConvKernel4d::new(ctx.param(&format!("{name}.w"))?, ctx.param(&format!("{name}.b"))?)
}

/// Registers a channel linear map `name.w` ([C_in, C_out]) and optional
/// `name.b` ([C_out]).
pub fn init_linear(
    store: &mut ParamStore,
    seed: u64,
    name: &str,
    ci: usize,
    co: usize,
    bias: bool,
) -> Result<()> {
    let wn = format!("{name}.w");
    store.get_or_init(&wn, &[ci, co], || fan_in_init(seed, &wn, ci, ci * co))?;
    if bias {
        store.get_or_init(&format!("{name}.b"), &[co], || vec![0.0; co])?;
    }
    Ok(())
}

/// Applies the channel linear `name` over axis 0 of a [C, S, V, H, W]
/// tensor: out[c',s,v,y,x] = sum_c x[c,s,v,y,x] * w[c,c'] (+ b[c']).
pub fn channel_linear(ctx: &ParamCtx, name: &str, x: &DiffTensor, bias: bool) -> Result<DiffTensor> {
    let d = x.shape().dims().to_vec();
    if d.len() != 5 {
        return Err(Error::shape(format!("channel_linear needs rank 5, got {}", x.shape())));
    }
    let w = ctx.param(&format!("{name}.w"))?;
    let co = w.shape().dims()[1];
    // Channels last, flatten positions, multiply, restore.
    let t = x.permute(0, 4)?;
    let rows = d[4] * d[1] * d[2] * d[3];
    let flat = t.reshape(&[rows, d[0]])?;
    let mut y = crate::tensor::matmul(&flat, &w)?;
    if bias {
        y = y.add_bias(&ctx.param(&format!("{name}.b"))?, 1)?;
    }
    y.reshape(&[d[4], d[1], d[2], d[3], co])?.permute(0, 4)
}

/// [C, S, V, H, W] -> [N, C] token matrix, N = S*V*H*W.
pub fn to_tokens(x: &DiffTensor) -> Result<DiffTensor> {
    let d = x.shape().dims().to_vec();
    if d.len() != 5 {
        return Err(Error::shape(format!("to_tokens needs rank 5, got {}", x.shape())));
    }
    let t = x.permute(0, 4)?;
    t.reshape(&[d[4] * d[1] * d[2] * d[3], d[0]])
}

/// Inverse of [`to_tokens`] given the original dims.
pub fn from_tokens(t: &DiffTensor, dims: &[usize; 5]) -> Result<DiffTensor> {
    let [c, s, v, h, w] = *dims;
    t.reshape(&[w, s, v, h, c])?.permute(0, 4)
}

/// Central unit and view of a [C, S, V, H, W] tensor as [C, H, W].
pub fn central_view(x: &DiffTensor) -> Result<DiffTensor> {
    let d = x.shape().dims().to_vec();
    if d.len() != 5 {
        return Err(Error::shape(format!("central_view needs rank 5, got {}", x.shape())));
    }
    let sl = x.slice_axis(1, d[1] / 2, 1)?.slice_axis(2, d[2] / 2, 1)?;
    sl.reshape(&[d[0], d[3], d[4]])
}

/// Stacks every sub-view along the channel axis: [C, S, V, H, W] ->
/// [S*V*C, H, W], the form the 2D discriminators consume.
pub fn stack_views_2d(x: &DiffTensor) -> Result<DiffTensor> {
    let d = x.shape().dims().to_vec();
    if d.len() != 5 {
        return Err(Error::shape(format!("stack_views_2d needs rank 5, got {}", x.shape())));
    }
    let t = x.permute(0, 1)?.permute(1, 2)?;
    t.reshape(&[d[1] * d[2] * d[0], d[3], d[4]])
}

/// Concatenates `n` copies of a [1, S, V, H, W] tensor along channels.
pub fn replicate_channels(x: &DiffTensor, n: usize) -> Result<DiffTensor> {
    let parts: Vec<&DiffTensor> = std::iter::repeat(x).take(n).collect();
    crate::tensor::concat(&parts, 0)
}

/// Seeded training patch: centered angular window of `angular` rows/cols,
/// uniformly random spatial origin for a `patch` x `patch` crop.
pub fn sample_patch(
    nu: usize,
    nv: usize,
    h: usize,
    w: usize,
    patch: usize,
    angular: usize,
    seed: u64,
) -> Result<PatchSpec> {
    if patch > h || patch > w {
        return Err(Error::shape(format!("patch {patch} exceeds views {h}x{w}")));
    }
    let au = angular.min(nu);
    let av = angular.min(nv);
    let mut rng = stream(seed, "patch");
    let y = if h > patch { rng.gen_range(0..=h - patch) } else { 0 };
    let x = if w > patch { rng.gen_range(0..=w - patch) } else { 0 };
    Ok(PatchSpec {
        y,
        x,
        h: patch,
        w: patch,
        u0: (nu - au) / 2,
        v0: (nv - av) / 2,
        nu: au,
        nv: av,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use crate::tensor::Tape;

    #[test]
    fn conv_mode_extents() {
        assert_eq!(ConvMode::C4d.extents(5), [5, 5, 5, 5]);
        assert_eq!(ConvMode::C3d.extents(5), [1, 5, 5, 5]);
        assert_eq!(ConvMode::C2d.extents(5), [1, 1, 5, 5]);
        assert_eq!(ConvMode::parse("3d").unwrap(), ConvMode::C3d);
        assert!(ConvMode::parse("5d").is_err());
    }

    #[test]
    fn channel_linear_matches_loop_oracle() {
        let mut store = ParamStore::new();
        store.insert("lin.w", vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        store.insert("lin.b", vec![3], vec![0.1, 0.2, 0.3]).unwrap();
        let x = DiffTensor::from_vec((0..2 * 2 * 1 * 2 * 2).map(|i| i as f64).collect(), &[2, 2, 1, 2, 2]).unwrap();
        let ctx = ParamCtx::frozen(&store);
        let y = channel_linear(&ctx, "lin", &x, true).unwrap();
        assert_eq!(y.shape().dims(), &[3, 2, 1, 2, 2]);
        let xd = x.values();
        let w = [[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]];
        let b = [0.1, 0.2, 0.3];
        let plane = 2 * 1 * 2 * 2;
        for co in 0..3 {
            for p in 0..plane {
                let want: f64 = (0..2).map(|ci| xd[ci * plane + p] * w[ci][co]).sum::<f64>() + b[co];
                let got = y.values()[co * plane + p];
                assert!((got - want).abs() < 1e-12, "co={co} p={p}");
            }
        }
    }

    #[test]
    fn tokens_roundtrip_and_grad() {
        let dims = [3usize, 2, 2, 4, 4];
        let n: usize = dims.iter().product();
        let tape = Tape::new();
        let x = tape.leaf(&DiffTensor::from_vec((0..n).map(|i| i as f64).collect(), &dims).unwrap());
        let t = to_tokens(&x).unwrap();
        assert_eq!(t.shape().dims(), &[2 * 2 * 4 * 4, 3]);
        let back = from_tokens(&t, &dims).unwrap();
        assert_eq!(back.values(), x.values());
        let loss = back.mul(&back).unwrap().sum().unwrap();
        let g = tape.backward(&loss).unwrap();
        let gx = g.get(&x).unwrap().unwrap();
        for (i, v) in x.values().iter().enumerate() {
            assert!((gx[i] - 2.0 * v).abs() < 1e-12);
        }
    }

    #[test]
    fn central_view_picks_grid_middle() {
        let dims = [2usize, 3, 3, 2, 2];
        let n: usize = dims.iter().product();
        let x = DiffTensor::from_vec((0..n).map(|i| i as f64).collect(), &dims).unwrap();
        let c = central_view(&x).unwrap();
        assert_eq!(c.shape().dims(), &[2, 2, 2]);
        // x[c][s=1][v=1][y][x], strides: c:36, s:12, v:4, y:2, x:1
        for ch in 0..2 {
            for y in 0..2 {
                for xx in 0..2 {
                    let want = (ch * 36 + 1 * 12 + 1 * 4 + y * 2 + xx) as f64;
                    assert_eq!(c.values()[ch * 4 + y * 2 + xx], want);
                }
            }
        }
    }

    #[test]
    fn stack_views_groups_by_view_then_channel() {
        let dims = [2usize, 1, 2, 2, 2];
        let n: usize = dims.iter().product();
        let x = DiffTensor::from_vec((0..n).map(|i| i as f64).collect(), &dims).unwrap();
        let y = stack_views_2d(&x).unwrap();
        assert_eq!(y.shape().dims(), &[1 * 2 * 2, 2, 2]);
        // out[(s*V+v)*C+c] plane == x[c,s,v] plane
        // x strides: c:8, s:8(S=1)->s index 0 only, v:4, y:2, x:1
        for v in 0..2 {
            for c in 0..2 {
                for p in 0..4 {
                    let want = (c * 8 + v * 4 + p) as f64;
                    assert_eq!(y.values()[(v * 2 + c) * 4 + p], want, "v={v} c={c} p={p}");
                }
            }
        }
    }

    #[test]
    fn patch_sampling_is_centered_and_seeded() {
        let p1 = sample_patch(5, 5, 64, 64, 16, 3, 42).unwrap();
        let p2 = sample_patch(5, 5, 64, 64, 16, 3, 42).unwrap();
        assert_eq!(p1, p2);
        assert_eq!((p1.u0, p1.v0, p1.nu, p1.nv), (1, 1, 3, 3));
        assert!(p1.y + 16 <= 64 && p1.x + 16 <= 64);
        let p3 = sample_patch(5, 5, 64, 64, 16, 3, 43).unwrap();
        assert!(p1 != p3 || p1.y == p3.y);
    }
}
