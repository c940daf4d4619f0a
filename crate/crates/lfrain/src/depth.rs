//! Depth estimation from rain-subtracted sub-views, and conversion of
//! depth to fog maps for the restoration stage. The estimator is a small
//! stack of 4D-convolutional residual blocks trained on synthetic ground
//! truth, then frozen for all later pipeline training.

use crate::blocks::{conv4d_kernel, init_conv4d, sample_patch, ConvMode};
use crate::error::{Error, Result};
use crate::lightfield::{to_epi_units, LightField};
use crate::optim::{lr_at, Adam};
use crate::params::{ParamCtx, ParamStore};
use crate::rng::derive_seed;
use crate::synth::{depth_to_fog, RainScene};
use crate::tensor::{conv4d, DiffTensor, Tape};

use crate::detector::{stack_tensor, StageCfg};

/// Estimated depth and the fog map derived from it, both 1-channel
/// fields over the same view grid. fog = 1 - exp(-beta * depth).
#[derive(Clone, Debug)]
pub struct DepthFogPair {
    pub depth: LightField,
    pub fog: LightField,
    pub beta: f64,
}

impl DepthFogPair {
    pub fn new(depth: LightField, beta: f64) -> Result<DepthFogPair> {
        let fog = fog_from_depth(&depth, beta)?;
        Ok(DepthFogPair { depth, fog, beta })
    }
}

/// Architecture knobs: residual block count and the kernel-axis mode.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DepthCfg {
    pub blocks: usize,
    pub conv_mode: ConvMode,
}

impl Default for DepthCfg {
    fn default() -> DepthCfg {
        DepthCfg { blocks: 3, conv_mode: ConvMode::C4d }
    }
}

pub struct DepthNet {
    pub cfg: DepthCfg,
}

impl DepthNet {
    pub fn new(cfg: DepthCfg) -> Result<DepthNet> {
        if cfg.blocks == 0 {
            return Err(Error::domain("depth net needs at least one block".to_string()));
        }
        Ok(DepthNet { cfg })
    }

    /// Registers parameters: per block two 3-channel conv4d layers, plus a
    /// 1-channel head. Existing entries are kept.
    pub fn init(store: &mut ParamStore, cfg: &DepthCfg, seed: u64) -> Result<()> {
        DepthNet::new(*cfg)?;
        let e = cfg.conv_mode.extents(3);
        for b in 1..=cfg.blocks {
            init_conv4d(store, seed, &format!("depth.blk{b}.c1"), 3, 3, e)?;
            init_conv4d(store, seed, &format!("depth.blk{b}.c2"), 3, 3, e)?;
        }
        init_conv4d(store, seed, "depth.head", 1, 3, e)?;
        Ok(())
    }

    /// D' = softplus(head(residual blocks(I - R'))). Inputs are unit-stack
    /// tensors [S, 3, V, h, w]; the output is [S, 1, V, h, w] and
    /// everywhere positive.
    pub fn estimate(&self, ctx: &ParamCtx, input: &DiffTensor, rain: &DiffTensor) -> Result<DiffTensor> {
        if input.shape() != rain.shape() {
            return Err(Error::shape(format!(
                "input {} and rain estimate {} differ",
                input.shape(),
                rain.shape()
            )));
        }
        let d = input.shape().dims().to_vec();
        if d.len() != 5 || d[1] != 3 {
            return Err(Error::shape(format!(
                "depth input must be [S, 3, V, h, w], got {}",
                input.shape()
            )));
        }
        let mut h = input.sub(rain)?.permute(0, 1)?;
        for b in 1..=self.cfg.blocks {
            let y = conv4d(&h, &conv4d_kernel(ctx, &format!("depth.blk{b}.c1"))?)?
                .relu()?;
            let y = conv4d(&y, &conv4d_kernel(ctx, &format!("depth.blk{b}.c2"))?)?;
            h = h.add(&y)?;
        }
        let out = conv4d(&h, &conv4d_kernel(ctx, "depth.head")?)?.softplus()?;
        out.permute(0, 1)
    }
}

/// A' = 1 - exp(-beta * D'), sharing the synthesis-side formula so both
/// directions agree bitwise. Depth must be non-negative.
pub fn fog_from_depth(depth: &LightField, beta: f64) -> Result<LightField> {
    let (_t, a) = depth_to_fog(depth, beta)?;
    Ok(a)
}

/// Tensor-path fog map for training graphs: same arithmetic as
/// [`fog_from_depth`], elementwise 1 - exp(-beta * d), differentiable.
pub fn fog_tensor(depth: &DiffTensor, beta: f64) -> Result<DiffTensor> {
    if !(beta > 0.0) {
        return Err(Error::domain(format!("beta must be positive, got {beta}")));
    }
    depth.scale(-beta)?.exp()?.affine(-1.0, 1.0)
}

/// Supervised depth training: descend smooth_l1(D' - D_gt) over random
/// patches of the given scenes. Returns the loss history. The caller is
/// responsible for freezing the weights afterwards (see
/// [`crate::params::FreezeSet`]).
pub fn train_depth(store: &mut ParamStore, scenes: &[RainScene], cfg: &StageCfg, dcfg: &DepthCfg) -> Result<Vec<f64>> {
    if scenes.is_empty() {
        return Err(Error::contract("depth training needs at least one scene".to_string()));
    }
    DepthNet::init(store, dcfg, cfg.seed)?;
    let net = DepthNet::new(*dcfg)?;
    let mut opt = Adam::load_from(store, "opt.", cfg.adam)?;
    let mut history = Vec::with_capacity(cfg.steps);
    for step in cfg.start_step..cfg.start_step + cfg.steps {
        let sseed = derive_seed(cfg.seed, &format!("depth:{step}"));
        let scene = &scenes[step % scenes.len()];
        let lf = &scene.rainy;
        let patch = sample_patch(lf.nu, lf.nv, lf.h, lf.w, cfg.patch, cfg.angular, sseed)?;
        let x = stack_tensor(lf, &patch, "depth-train")?;
        let gt = to_epi_units(&scene.depth, &patch, "depth-gt")?.to_tensor()?;
        let rain_gt = crate::detector::rain_target(scene, &patch)?;
        let (loss_val, g) = {
            let tape = Tape::new();
            let ctx = ParamCtx::trainable(store, &tape);
            let est = net.estimate(&ctx, &x, &rain_gt)?;
            let loss = est.sub(&gt)?.smooth_l1_mean()?;
            let grads = tape.backward(&loss)?;
            (loss.values()[0], ctx.grads(&grads)?)
        };
        let epoch = step / scenes.len();
        opt.apply(store, &g, lr_at(cfg.lr, cfg.lr_decay_factor, cfg.lr_decay_every, epoch))?;
        history.push(loss_val);
    }
    opt.save_into(store, "opt.")?;
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::DetectorCfg;
    use crate::lightfield::PatchSpec;
    use crate::rng::stream;
    use crate::synth::{gen_scene, SynthParams};
    use crate::tensor::finite_diff_check;
    use rand::Rng;

    fn rand_stack(dims: &[usize; 5], seed: u64) -> DiffTensor {
        let n: usize = dims.iter().product();
        let mut rng = stream(seed, "stack");
        DiffTensor::from_vec((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(), dims).unwrap()
    }

    #[test]
    fn zero_weights_give_constant_softplus_zero() {
        let mut store = ParamStore::new();
        let cfg = DepthCfg::default();
        DepthNet::init(&mut store, &cfg, 3).unwrap();
        let names: Vec<String> = store.names().map(|s| s.to_string()).collect();
        for name in names {
            let n = store.get(&name).unwrap().vals.len();
            store.set_vals(&name, vec![0.0; n]).unwrap();
        }
        let net = DepthNet::new(cfg).unwrap();
        let ctx = ParamCtx::frozen(&store);
        let x = rand_stack(&[2, 3, 2, 6, 6], 1);
        let r = rand_stack(&[2, 3, 2, 6, 6], 2);
        let d = net.estimate(&ctx, &x, &r).unwrap();
        assert_eq!(d.shape().dims(), &[2, 1, 2, 6, 6]);
        let want = (0.0f64).exp().ln_1p();
        for v in d.values() {
            assert!((v - want).abs() < 1e-15, "expected softplus(0), got {v}");
        }
    }

    #[test]
    fn estimate_is_positive_and_shaped() {
        let mut store = ParamStore::new();
        let cfg = DepthCfg { blocks: 2, conv_mode: ConvMode::C4d };
        DepthNet::init(&mut store, &cfg, 5).unwrap();
        let net = DepthNet::new(cfg).unwrap();
        let ctx = ParamCtx::frozen(&store);
        let x = rand_stack(&[3, 3, 2, 6, 8], 3);
        let r = rand_stack(&[3, 3, 2, 6, 8], 4);
        let d = net.estimate(&ctx, &x, &r).unwrap();
        assert_eq!(d.shape().dims(), &[3, 1, 2, 6, 8]);
        assert!(d.values().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn estimate_gradient_matches_finite_differences() {
        let mut store = ParamStore::new();
        let cfg = DepthCfg { blocks: 2, conv_mode: ConvMode::C4d };
        DepthNet::init(&mut store, &cfg, 6).unwrap();
        let net = DepthNet::new(cfg).unwrap();
        let r = rand_stack(&[2, 3, 2, 6, 6], 7);
        let x = rand_stack(&[2, 3, 2, 6, 6], 8);
        let rel = finite_diff_check(
            |_tape, xs| {
                let ctx = ParamCtx::frozen(&store);
                net.estimate(&ctx, xs, &r)?.sum_sq()
            },
            &x,
            6,
            1e-5,
            31,
        )
        .unwrap();
        assert!(rel < 1e-3, "depth finite-diff rel error {rel}");
    }

    #[test]
    fn fog_examples_and_monotonicity() {
        let d = LightField::new(1, 1, 1, 1, 2, vec![0.0, 0.5]).unwrap();
        let a = fog_from_depth(&d, 1.8).unwrap();
        assert_eq!(a.data()[0], 0.0);
        assert!((a.data()[1] - (1.0 - (-0.9f64).exp())).abs() < 1e-15);
        assert!((a.data()[1] - 0.59343).abs() < 1e-5);
        // Strictly monotone, bounded in [0, 1).
        let ramp: Vec<f64> = (0..64).map(|i| i as f64 * 0.1).collect();
        let lf = LightField::new(1, 1, 1, 8, 8, ramp).unwrap();
        let fog = fog_from_depth(&lf, 1.8).unwrap();
        for w in fog.data().windows(2) {
            assert!(w[1] > w[0]);
        }
        assert!(fog.data().iter().all(|&v| (0.0..1.0).contains(&v)));
        let neg = LightField::new(1, 1, 1, 1, 1, vec![-0.1]).unwrap();
        assert!(fog_from_depth(&neg, 1.8).is_err());
    }

    #[test]
    fn fog_tensor_matches_field_path_bitwise() {
        let mut rng = stream(9, "fog");
        let vals: Vec<f64> = (0..2 * 1 * 2 * 4 * 4).map(|_| rng.gen_range(0.0..3.0)).collect();
        let lf = LightField::new(2, 2, 1, 4, 4, vals.clone()).unwrap();
        let a_field = fog_from_depth(&lf, 1.8).unwrap();
        let t = DiffTensor::from_vec(vals, &[2, 1, 2, 4, 4]).unwrap();
        let a_t = fog_tensor(&t, 1.8).unwrap();
        // Same elements visit the same arithmetic, so equality is exact.
        let stack = to_epi_units(&a_field, &PatchSpec::full(&a_field), "t").unwrap();
        assert_eq!(stack.data, a_t.values());
    }

    #[test]
    fn depth_training_descends_on_fixed_patch() {
        let params = SynthParams { rng_seed: 77, streak_count: 8, ..SynthParams::default() };
        let scene = gen_scene(&params, 3, 3, 16, 16).unwrap();
        let mut store = ParamStore::new();
        let mut cfg = StageCfg::desk(DetectorCfg::default(), 12, 16, 13);
        cfg.lr = 0.005;
        let dcfg = DepthCfg { blocks: 2, conv_mode: ConvMode::C4d };
        let hist = train_depth(&mut store, &[scene], &cfg, &dcfg).unwrap();
        assert_eq!(hist.len(), 12);
        assert!(hist.iter().all(|v| v.is_finite()));
        assert!(hist[11] < hist[0], "first {} last {}", hist[0], hist[11]);
    }
}
