//! Rain streak detector: a 4D-convolutional stem with non-local
//! self-attention feeding three progressively fused multi-kernel dense
//! branches, plus its supervised and semi-supervised training loops.
//!
//! Spec-facing tensors use the unit-stack layout [S, C, V, h, w]; the
//! convolution path swaps the first two axes internally.

use crate::blocks::{
    central_view, channel_linear, conv4d_kernel, from_tokens, init_conv4d, init_linear,
    sample_patch, to_tokens, ConvMode,
};
use crate::error::{Error, Result};
use crate::gp::{gp_loss, unsup_loss_aggregate, FeatureBank, GpConfig, GpLossWeights, GuideState};
use crate::lightfield::{to_epi_units, LightField, PatchSpec};
use crate::optim::{lr_at, Adam, AdamCfg};
use crate::params::{ParamCtx, ParamStore};
use crate::percept::{default_feature_net, FeatureNet};
use crate::rng::derive_seed;
use crate::synth::RainScene;
use crate::tensor::{attention, concat, conv4d, DiffTensor, Tape};

/// Architecture knobs. `c` is the channel width everywhere, `dense_depth`
/// the layer count per branch, `conv_mode` the kernel-axis ablation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetectorCfg {
    pub c: usize,
    pub dense_depth: usize,
    pub conv_mode: ConvMode,
}

impl Default for DetectorCfg {
    fn default() -> DetectorCfg {
        DetectorCfg { c: 8, dense_depth: 3, conv_mode: ConvMode::C4d }
    }
}

impl DetectorCfg {
    pub fn validate(&self) -> Result<()> {
        if self.c == 0 || self.dense_depth == 0 {
            return Err(Error::domain(format!(
                "detector needs c >= 1 and dense_depth >= 1, got c={} depth={}",
                self.c, self.dense_depth
            )));
        }
        Ok(())
    }
}

/// Intermediate activations in the unit-stack layout [S, ., V, h, w].
/// f0 is the attended stem output; f1..f3 are the branch outputs.
#[derive(Clone, Debug)]
pub struct BranchFeatures {
    pub f0: DiffTensor,
    pub f1: DiffTensor,
    pub f2: DiffTensor,
    pub f3: DiffTensor,
}

/// Detector forward results. `rain` is the per-sub-view residual estimate
/// [S, 3, V, h, w]; `feats` holds one [3, h, w] central-view feature map
/// per scale for the GP path.
#[derive(Clone, Debug)]
pub struct Detection {
    pub rain: DiffTensor,
    pub branch: BranchFeatures,
    pub feats: Vec<DiffTensor>,
}

pub struct RainDetector {
    pub cfg: DetectorCfg,
}

impl RainDetector {
    pub fn new(cfg: DetectorCfg) -> Result<RainDetector> {
        cfg.validate()?;
        Ok(RainDetector { cfg })
    }

    /// Registers every parameter (uniform fan-in weights, zero biases).
    /// Existing entries are kept, so resumed runs keep their state.
    pub fn init(store: &mut ParamStore, cfg: &DetectorCfg, seed: u64) -> Result<()> {
        cfg.validate()?;
        let c = cfg.c;
        init_conv4d(store, seed, "detector.stem", c, 3, cfg.conv_mode.extents(3))?;
        for name in ["detector.nl.q", "detector.nl.k", "detector.nl.v", "detector.nl.o"] {
            init_linear(store, seed, name, c, c, false)?;
        }
        for (bi, e) in [(1usize, 3usize), (2, 5), (3, 7)] {
            for j in 1..=cfg.dense_depth {
                let ci = bi * c + (j - 1) * c;
                init_conv4d(
                    store,
                    seed,
                    &format!("detector.b{bi}.l{j}"),
                    c,
                    ci,
                    cfg.conv_mode.extents(e),
                )?;
            }
        }
        init_conv4d(store, seed, "detector.fuse", 3, 3 * c, cfg.conv_mode.extents(3))?;
        for k in 1..=3 {
            init_linear(store, seed, &format!("detector.feat{k}"), c, 3, true)?;
        }
        Ok(())
    }

    /// Stem: conv -> ReLU -> non-local attention with a residual add.
    /// Takes and returns channel-first [c, S, V, h, w] tensors.
    fn stem(&self, ctx: &ParamCtx, x: &DiffTensor) -> Result<DiffTensor> {
        let s = conv4d(x, &conv4d_kernel(ctx, "detector.stem")?)?.relu()?;
        self.non_local(ctx, &s)
    }

    /// Single-head embedded dot-product attention over all positions, with
    /// keys and values taken from a 2x2 spatially pooled copy to bound the
    /// score matrix, residual-added to the input.
    fn non_local(&self, ctx: &ParamCtx, x: &DiffTensor) -> Result<DiffTensor> {
        let dims: [usize; 5] = x.shape().dims().try_into().map_err(|_| {
            Error::shape(format!("non-local needs rank 5, got {}", x.shape()))
        })?;
        let q = channel_linear(ctx, "detector.nl.q", x, false)?;
        let pooled = x.avgpool_hw2()?;
        let k = channel_linear(ctx, "detector.nl.k", &pooled, false)?;
        let v = channel_linear(ctx, "detector.nl.v", &pooled, false)?;
        let att = attention(&to_tokens(&q)?, &to_tokens(&k)?, &to_tokens(&v)?)?;
        let o = channel_linear(ctx, "detector.nl.o", &from_tokens(&att, &dims)?, false)?;
        x.add(&o)
    }

    /// One dense branch: layer j convolves the concatenation of the branch
    /// input and every previous layer output, then applies ReLU. Returns
    /// the last layer's c-channel output.
    fn dense_branch(&self, ctx: &ParamCtx, prefix: &str, x: &DiffTensor) -> Result<DiffTensor> {
        let mut feats = vec![x.clone()];
        let mut last = x.clone();
        for j in 1..=self.cfg.dense_depth {
            let cat = if feats.len() == 1 {
                feats[0].clone()
            } else {
                let refs: Vec<&DiffTensor> = feats.iter().collect();
                concat(&refs, 0)?
            };
            last = conv4d(&cat, &conv4d_kernel(ctx, &format!("{prefix}.l{j}"))?)?.relu()?;
            feats.push(last.clone());
        }
        Ok(last)
    }

    /// Full forward pass over a [S, 3, V, h, w] unit-stack tensor.
    /// Branch fusion is progressive: f1 = B1(f0), f2 = B2([f0, f1]),
    /// f3 = B3([f0, f1, f2]), rain = Fuse([f1, f2, f3]).
    pub fn detect(&self, ctx: &ParamCtx, stack: &DiffTensor) -> Result<Detection> {
        let d = stack.shape().dims().to_vec();
        if d.len() != 5 || d[1] != 3 {
            return Err(Error::shape(format!(
                "detector input must be [S, 3, V, h, w], got {}",
                stack.shape()
            )));
        }
        let x = stack.permute(0, 1)?;
        let f0 = self.stem(ctx, &x)?;
        let f1 = self.dense_branch(ctx, "detector.b1", &f0)?;
        let f2 = self.dense_branch(ctx, "detector.b2", &concat(&[&f0, &f1], 0)?)?;
        let f3 = self.dense_branch(ctx, "detector.b3", &concat(&[&f0, &f1, &f2], 0)?)?;
        let rain = conv4d(&concat(&[&f1, &f2, &f3], 0)?, &conv4d_kernel(ctx, "detector.fuse")?)?
            .permute(0, 1)?;
        let mut feats = Vec::with_capacity(3);
        for (k, f) in [&f1, &f2, &f3].iter().enumerate() {
            let proj = channel_linear(ctx, &format!("detector.feat{}", k + 1), f, true)?;
            feats.push(central_view(&proj)?);
        }
        Ok(Detection {
            rain,
            branch: BranchFeatures {
                f0: f0.permute(0, 1)?,
                f1: f1.permute(0, 1)?,
                f2: f2.permute(0, 1)?,
                f3: f3.permute(0, 1)?,
            },
            feats,
        })
    }
}

/// Supervision target for a patch: the rain contribution exactly as the
/// compositor added it, alpha times the motion-blurred streak layer,
/// replicated to 3 channels. Off the saturation clamp, input minus this
/// target equals the clean image plus the fog term.
pub fn rain_target(scene: &RainScene, patch: &PatchSpec) -> Result<DiffTensor> {
    let st = to_epi_units(&scene.blurred_streaks, patch, "rain-gt")?;
    if st.c != 1 {
        return Err(Error::shape(format!("streak layer must have 1 channel, got {}", st.c)));
    }
    let (s, v, h, w) = (st.s, st.v, st.h, st.w);
    let plane = v * h * w;
    let mut out = vec![0.0; s * 3 * plane];
    for si in 0..s {
        let src = &st.data[si * plane..(si + 1) * plane];
        for ch in 0..3 {
            let dst = &mut out[(si * 3 + ch) * plane..(si * 3 + ch + 1) * plane];
            for (d, x) in dst.iter_mut().zip(src.iter()) {
                *d = scene.params.alpha * x;
            }
        }
    }
    DiffTensor::from_vec(out, &[s, 3, v, h, w])
}

/// Cuts one unit-stack input tensor [S, C, V, h, w] out of a field.
pub fn stack_tensor(lf: &LightField, patch: &PatchSpec, source: &str) -> Result<DiffTensor> {
    to_epi_units(lf, patch, source)?.to_tensor()
}

/// L_s = smooth_l1(rain - gt) + lambda_p * |phi(rain_c) - phi(gt_c)|^2,
/// the perceptual term comparing central sub-views.
pub fn supervised_loss(
    rain: &DiffTensor,
    gt: &DiffTensor,
    phi: &FeatureNet,
    lambda_p: f64,
) -> Result<DiffTensor> {
    if rain.shape() != gt.shape() {
        return Err(Error::shape(format!(
            "rain estimate {} and target {} differ",
            rain.shape(),
            gt.shape()
        )));
    }
    let l1 = rain.sub(gt)?.smooth_l1_mean()?;
    if lambda_p == 0.0 {
        return Ok(l1);
    }
    let rc = central_view(&rain.permute(0, 1)?)?;
    let gc = central_view(&gt.permute(0, 1)?)?;
    let perc = phi.dist2(&rc, &gc)?.scale(lambda_p)?;
    l1.add(&perc)
}

/// L_rain = L_s + L_r.
pub fn rain_loss(l_s: &DiffTensor, l_r: &DiffTensor) -> Result<DiffTensor> {
    l_s.add(l_r)
}

/// Shared training hyperparameters for both detector stages.
#[derive(Clone, Debug)]
pub struct StageCfg {
    pub det: DetectorCfg,
    pub steps: usize,
    /// First absolute step index; nonzero when resuming, so per-step seeds
    /// and the epoch-based rate schedule continue the original sequence.
    pub start_step: usize,
    pub lr: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub patch: usize,
    pub angular: usize,
    pub lambda_p: f64,
    pub adam: AdamCfg,
    pub seed: u64,
}

impl StageCfg {
    pub fn desk(det: DetectorCfg, steps: usize, patch: usize, seed: u64) -> StageCfg {
        StageCfg {
            det,
            steps,
            start_step: 0,
            lr: 0.0002,
            lr_decay_factor: 0.5,
            lr_decay_every: 80,
            patch,
            angular: 3,
            lambda_p: 0.04,
            adam: AdamCfg::default(),
            seed,
        }
    }
}

/// Supervised phase: descend L_s over synthetic scenes, appending each
/// step's detached central-view features to the per-scale banks. Returns
/// the per-step loss history.
pub fn train_stage1(
    store: &mut ParamStore,
    scenes: &[RainScene],
    banks: &mut [FeatureBank; 3],
    cfg: &StageCfg,
) -> Result<Vec<f64>> {
    if scenes.is_empty() {
        return Err(Error::contract("stage 1 needs at least one scene".to_string()));
    }
    RainDetector::init(store, &cfg.det, cfg.seed)?;
    let det = RainDetector::new(cfg.det)?;
    let phi = default_feature_net()?;
    let mut opt = Adam::load_from(store, "opt.", cfg.adam)?;
    let mut history = Vec::with_capacity(cfg.steps);
    for step in cfg.start_step..cfg.start_step + cfg.steps {
        let sseed = derive_seed(cfg.seed, &format!("stage1:{step}"));
        let scene = &scenes[step % scenes.len()];
        let lf = &scene.rainy;
        let patch = sample_patch(lf.nu, lf.nv, lf.h, lf.w, cfg.patch, cfg.angular, sseed)?;
        let x = stack_tensor(lf, &patch, "stage1")?;
        let gt = rain_target(scene, &patch)?;
        let (loss_val, feat_vals, g) = {
            let tape = Tape::new();
            let ctx = ParamCtx::trainable(store, &tape);
            let d = det.detect(&ctx, &x)?;
            let loss = supervised_loss(&d.rain, &gt, &phi, cfg.lambda_p)?;
            let grads = tape.backward(&loss)?;
            let fv: Vec<Vec<f64>> = d.feats.iter().map(|f| f.values().to_vec()).collect();
            (loss.values()[0], fv, ctx.grads(&grads)?)
        };
        let epoch = step / scenes.len();
        opt.apply(store, &g, lr_at(cfg.lr, cfg.lr_decay_factor, cfg.lr_decay_every, epoch))?;
        for (bank, fv) in banks.iter_mut().zip(feat_vals) {
            bank.push(fv)?;
        }
        history.push(loss_val);
    }
    opt.save_into(store, "opt.")?;
    Ok(history)
}

/// Semi-supervised phase settings on top of [`StageCfg`].
#[derive(Clone, Debug)]
pub struct Stage2Cfg {
    pub stage: StageCfg,
    pub gp: GpConfig,
    pub weights: GpLossWeights,
    pub omega: f64,
}

/// Unsupervised phase: for each real patch, chain the per-scale GP
/// queries (scale 1 unguided, later scales blended with the previous
/// pseudo target), accumulate the per-scale losses into L_r, and take one
/// optimizer step per patch. The banks are never written.
pub fn train_stage2(
    store: &mut ParamStore,
    reals: &[LightField],
    banks: &[FeatureBank; 3],
    cfg: &Stage2Cfg,
) -> Result<Vec<f64>> {
    if reals.is_empty() {
        return Err(Error::contract("stage 2 needs at least one input field".to_string()));
    }
    let need = cfg.gp.n_near.max(cfg.gp.n_far);
    for (k, bank) in banks.iter().enumerate() {
        if bank.len() < need {
            return Err(Error::contract(format!(
                "scale {} bank holds {} vectors, need at least {}",
                k + 1,
                bank.len(),
                need
            )));
        }
    }
    cfg.gp.validate()?;
    let sc = &cfg.stage;
    RainDetector::init(store, &sc.det, sc.seed)?;
    let det = RainDetector::new(sc.det)?;
    let phi = default_feature_net()?;
    let mut opt = Adam::load_from(store, "opt.", sc.adam)?;
    let mut history = Vec::with_capacity(sc.steps);
    for step in sc.start_step..sc.start_step + sc.steps {
        let sseed = derive_seed(sc.seed, &format!("stage2:{step}"));
        let lf = &reals[step % reals.len()];
        let patch = sample_patch(lf.nu, lf.nv, lf.h, lf.w, sc.patch, sc.angular, sseed)?;
        let x = stack_tensor(lf, &patch, "stage2")?;
        let (loss_val, g) = {
            let tape = Tape::new();
            let ctx = ParamCtx::trainable(store, &tape);
            let d = det.detect(&ctx, &x)?;
            let mut guide = GuideState::new(cfg.omega)?;
            let mut losses = Vec::with_capacity(3);
            for (k, feat) in d.feats.iter().enumerate() {
                let query = guide.query(feat.values())?;
                let post = crate::gp::gp_infer(&query, &banks[k], &cfg.gp)?;
                losses.push(gp_loss(feat, &post, &phi, &cfg.weights)?);
                guide.update(post.pseudo_gt.clone());
            }
            let l_r = unsup_loss_aggregate(&losses)?;
            let grads = tape.backward(&l_r)?;
            (l_r.values()[0], ctx.grads(&grads)?)
        };
        let epoch = step / reals.len();
        opt.apply(store, &g, lr_at(sc.lr, sc.lr_decay_factor, sc.lr_decay_every, epoch))?;
        history.push(loss_val);
    }
    opt.save_into(store, "opt.")?;
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use crate::synth::{gen_scene, SynthParams};
    use crate::tensor::finite_diff_check;
    use rand::Rng;

    fn tiny_cfg() -> DetectorCfg {
        DetectorCfg { c: 2, dense_depth: 1, conv_mode: ConvMode::C4d }
    }

    fn rand_stack(dims: &[usize; 5], seed: u64) -> DiffTensor {
        let n: usize = dims.iter().product();
        let mut rng = stream(seed, "stack");
        DiffTensor::from_vec((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(), dims).unwrap()
    }

    fn tiny_scene(seed: u64) -> RainScene {
        let params = SynthParams { rng_seed: seed, streak_count: 8, ..SynthParams::default() };
        gen_scene(&params, 3, 3, 16, 16).unwrap()
    }

    #[test]
    fn zero_weights_give_zero_rain_and_features() {
        let mut store = ParamStore::new();
        let cfg = tiny_cfg();
        RainDetector::init(&mut store, &cfg, 7).unwrap();
        let names: Vec<String> = store.names().map(|s| s.to_string()).collect();
        for name in names {
            let n = store.get(&name).unwrap().vals.len();
            store.set_vals(&name, vec![0.0; n]).unwrap();
        }
        let det = RainDetector::new(cfg).unwrap();
        let ctx = ParamCtx::frozen(&store);
        let x = rand_stack(&[2, 3, 2, 6, 6], 1);
        let d = det.detect(&ctx, &x).unwrap();
        assert!(d.rain.values().iter().all(|&v| v == 0.0));
        assert!(d.branch.f0.values().iter().all(|&v| v == 0.0));
        for f in &d.feats {
            assert!(f.values().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn output_shapes_follow_input() {
        let mut store = ParamStore::new();
        let cfg = tiny_cfg();
        RainDetector::init(&mut store, &cfg, 7).unwrap();
        let det = RainDetector::new(cfg).unwrap();
        let ctx = ParamCtx::frozen(&store);
        let x = rand_stack(&[3, 3, 2, 8, 6], 2);
        let d = det.detect(&ctx, &x).unwrap();
        assert_eq!(d.rain.shape().dims(), &[3, 3, 2, 8, 6]);
        assert_eq!(d.branch.f0.shape().dims(), &[3, 2, 2, 8, 6]);
        assert_eq!(d.branch.f3.shape().dims(), &[3, 2, 2, 8, 6]);
        assert_eq!(d.feats.len(), 3);
        for f in &d.feats {
            assert_eq!(f.shape().dims(), &[3, 8, 6]);
        }
    }

    #[test]
    fn progressive_fusion_channel_widths() {
        let mut store = ParamStore::new();
        let cfg = DetectorCfg { c: 4, dense_depth: 3, conv_mode: ConvMode::C4d };
        RainDetector::init(&mut store, &cfg, 7).unwrap();
        let dims = |n: &str| store.get(n).unwrap().dims.clone();
        // Branch input widths verify f1=B1(f0), f2=B2([f0,f1]), f3=B3([f0,f1,f2]).
        assert_eq!(dims("detector.b1.l1.w")[1], 4);
        assert_eq!(dims("detector.b2.l1.w")[1], 8);
        assert_eq!(dims("detector.b3.l1.w")[1], 12);
        // Dense growth: layer j adds c channels to its input.
        assert_eq!(dims("detector.b1.l2.w")[1], 8);
        assert_eq!(dims("detector.b1.l3.w")[1], 12);
        assert_eq!(dims("detector.b3.l3.w")[1], 20);
        // Fusion consumes [f1, f2, f3] and emits 3 channels.
        assert_eq!(dims("detector.fuse.w")[0], 3);
        assert_eq!(dims("detector.fuse.w")[1], 12);
        // Branch k uses kernel extent 2k+1 on all four axes.
        assert_eq!(&dims("detector.b1.l1.w")[2..], &[3, 3, 3, 3]);
        assert_eq!(&dims("detector.b2.l1.w")[2..], &[5, 5, 5, 5]);
        assert_eq!(&dims("detector.b3.l1.w")[2..], &[7, 7, 7, 7]);
    }

    #[test]
    fn every_branch_contributes_to_rain() {
        let cfg = tiny_cfg();
        let x = rand_stack(&[2, 3, 2, 6, 6], 3);
        let mut base_store = ParamStore::new();
        RainDetector::init(&mut base_store, &cfg, 7).unwrap();
        let det = RainDetector::new(cfg).unwrap();
        let base = det.detect(&ParamCtx::frozen(&base_store), &x).unwrap().rain;
        for bn in ["detector.b1.l1.w", "detector.b2.l1.w", "detector.b3.l1.w"] {
            let mut store = base_store.clone();
            let mut vals = store.get(bn).unwrap().vals.clone();
            for v in vals.iter_mut() {
                *v += 0.05;
            }
            store.set_vals(bn, vals).unwrap();
            let r = det.detect(&ParamCtx::frozen(&store), &x).unwrap().rain;
            let diff: f64 = r
                .values()
                .iter()
                .zip(base.values())
                .map(|(a, b)| (a - b).abs())
                .sum();
            assert!(diff > 1e-9, "perturbing {bn} left the rain estimate unchanged");
        }
    }

    #[test]
    fn unit_coupling_depends_on_conv_mode() {
        // Perturb only unit 0 of the input; 4D kernels couple units, so
        // unit 1 of the output moves. Per-unit 3D kernels leave it fixed.
        let xa = rand_stack(&[2, 3, 2, 6, 6], 4);
        let mut vals = xa.values().to_vec();
        let plane = 3 * 2 * 6 * 6;
        for v in vals[..plane].iter_mut() {
            *v += 0.3;
        }
        let xb = DiffTensor::from_vec(vals, &[2, 3, 2, 6, 6]).unwrap();
        for (mode, couples) in [(ConvMode::C4d, true), (ConvMode::C3d, false)] {
            let cfg = DetectorCfg { c: 2, dense_depth: 1, conv_mode: mode };
            let mut store = ParamStore::new();
            RainDetector::init(&mut store, &cfg, 7).unwrap();
            // Zero the attention projections so only convolution kernels
            // can carry information between units.
            for nl in ["detector.nl.q.w", "detector.nl.k.w", "detector.nl.v.w", "detector.nl.o.w"] {
                let n = store.get(nl).unwrap().vals.len();
                store.set_vals(nl, vec![0.0; n]).unwrap();
            }
            let det = RainDetector::new(cfg).unwrap();
            let ctx = ParamCtx::frozen(&store);
            let ra = det.detect(&ctx, &xa).unwrap().rain;
            let rb = det.detect(&ctx, &xb).unwrap().rain;
            let unit1 = |t: &DiffTensor| t.values()[plane..2 * plane].to_vec();
            let diff: f64 = unit1(&ra)
                .iter()
                .zip(unit1(&rb))
                .map(|(a, b)| (a - b).abs())
                .sum();
            if couples {
                assert!(diff > 1e-9, "4d mode should couple units");
            } else {
                assert!(diff < 1e-12, "3d mode must process units independently, diff={diff}");
            }
        }
    }

    #[test]
    fn supervised_loss_identities() {
        let phi = default_feature_net().unwrap();
        let r = rand_stack(&[2, 3, 2, 8, 8], 5);
        let zero = supervised_loss(&r, &r, &phi, 0.04).unwrap();
        assert_eq!(zero.values()[0], 0.0);
        let gt = rand_stack(&[2, 3, 2, 8, 8], 6);
        let no_perc = supervised_loss(&r, &gt, &phi, 0.0).unwrap();
        let direct = r.sub(&gt).unwrap().smooth_l1_mean().unwrap();
        assert!((no_perc.values()[0] - direct.values()[0]).abs() < 1e-15);
        let with_perc = supervised_loss(&r, &gt, &phi, 0.04).unwrap();
        assert!(with_perc.values()[0] >= no_perc.values()[0]);
        let ls = DiffTensor::scalar(0.3);
        let lr = DiffTensor::scalar(0.2);
        assert!((rain_loss(&ls, &lr).unwrap().values()[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn rain_target_inverts_composition_off_clamp() {
        let scene = tiny_scene(11);
        let patch = PatchSpec::full(&scene.rainy);
        let gt = rain_target(&scene, &patch).unwrap();
        let rainy = stack_tensor(&scene.rainy, &patch, "t").unwrap();
        let clean = stack_tensor(&scene.clean, &patch, "t").unwrap();
        let fog1 = to_epi_units(&scene.fog, &patch, "t").unwrap();
        let a0 = scene.params.a0;
        let al = scene.params.alpha;
        let plane = fog1.v * fog1.h * fog1.w;
        let mut checked = 0usize;
        for si in 0..fog1.s {
            for ch in 0..3 {
                for p in 0..plane {
                    let i = rainy.values()[(si * 3 + ch) * plane + p];
                    if i >= 1.0 {
                        continue;
                    }
                    let b = clean.values()[(si * 3 + ch) * plane + p];
                    let f = fog1.data[si * plane + p];
                    let want = b + gt.values()[(si * 3 + ch) * plane + p] + (1.0 - al) * a0 * f;
                    assert!((i - want).abs() < 1e-12, "unit {si} ch {ch} pos {p}");
                    checked += 1;
                }
            }
        }
        assert!(checked > plane, "clamp saturated nearly everything");
    }

    #[test]
    fn stem_gradient_matches_finite_differences() {
        let mut store = ParamStore::new();
        let cfg = tiny_cfg();
        RainDetector::init(&mut store, &cfg, 9).unwrap();
        let det = RainDetector::new(cfg).unwrap();
        let x = rand_stack(&[2, 3, 2, 6, 6], 8).permute(0, 1).unwrap();
        let rel = finite_diff_check(
            |_tape, xs| {
                let ctx = ParamCtx::frozen(&store);
                det.stem(&ctx, xs)?.sum_sq()
            },
            &x,
            6,
            1e-5,
            21,
        )
        .unwrap();
        assert!(rel < 1e-3, "stem finite-diff rel error {rel}");
    }

    #[test]
    fn detect_loss_gradient_matches_finite_differences() {
        let mut store = ParamStore::new();
        let cfg = tiny_cfg();
        RainDetector::init(&mut store, &cfg, 10).unwrap();
        let det = RainDetector::new(cfg).unwrap();
        let phi = default_feature_net().unwrap();
        let x = rand_stack(&[2, 3, 2, 8, 8], 12);
        let gt = rand_stack(&[2, 3, 2, 8, 8], 13);
        let rel = finite_diff_check(
            |_tape, xs| {
                let ctx = ParamCtx::frozen(&store);
                let d = det.detect(&ctx, xs)?;
                supervised_loss(&d.rain, &gt, &phi, 0.04)
            },
            &x,
            6,
            1e-5,
            22,
        )
        .unwrap();
        assert!(rel < 1e-3, "detect+loss finite-diff rel error {rel}");
    }

    #[test]
    fn stage1_descends_and_fills_banks() {
        let scene = tiny_scene(31);
        let mut store = ParamStore::new();
        // Full-view patches make every step minimize the same objective,
        // so the loss comparison is not confounded by patch sampling.
        let d = 3 * 16 * 16;
        let mut banks = [
            FeatureBank::new(d, 64).unwrap(),
            FeatureBank::new(d, 64).unwrap(),
            FeatureBank::new(d, 64).unwrap(),
        ];
        let mut cfg = StageCfg::desk(tiny_cfg(), 10, 16, 41);
        cfg.lr = 0.003;
        let hist = train_stage1(&mut store, &[scene], &mut banks, &cfg).unwrap();
        assert_eq!(hist.len(), 10);
        assert!(hist.iter().all(|v| v.is_finite()));
        assert!(
            hist[9] < hist[0],
            "loss should drop: first {} last {}",
            hist[0],
            hist[9]
        );
        for bank in &banks {
            assert_eq!(bank.len(), 10);
        }
    }

    #[test]
    fn stage1_is_deterministic() {
        let run = || {
            let scene = tiny_scene(31);
            let mut store = ParamStore::new();
            let d = 3 * 8 * 8;
            let mut banks = [
                FeatureBank::new(d, 16).unwrap(),
                FeatureBank::new(d, 16).unwrap(),
                FeatureBank::new(d, 16).unwrap(),
            ];
            let cfg = StageCfg::desk(tiny_cfg(), 4, 8, 41);
            let hist = train_stage1(&mut store, &[scene], &mut banks, &cfg).unwrap();
            (hist, store.checksum_prefix("detector."))
        };
        let (h1, c1) = run();
        let (h2, c2) = run();
        assert_eq!(h1, h2);
        assert_eq!(c1, c2);
    }

    #[test]
    fn stage2_runs_readonly_and_stays_finite() {
        let scene = tiny_scene(31);
        let mut store = ParamStore::new();
        let d = 3 * 8 * 8;
        let mut banks = [
            FeatureBank::new(d, 64).unwrap(),
            FeatureBank::new(d, 64).unwrap(),
            FeatureBank::new(d, 64).unwrap(),
        ];
        let cfg = StageCfg::desk(tiny_cfg(), 8, 8, 41);
        train_stage1(&mut store, &[scene.clone()], &mut banks, &cfg).unwrap();
        let banks_before = banks.clone();
        let s2 = Stage2Cfg {
            stage: StageCfg::desk(tiny_cfg(), 4, 8, 52),
            gp: GpConfig { n_near: 4, n_far: 4, ..GpConfig::default() },
            weights: GpLossWeights::default(),
            omega: 0.5,
        };
        let hist = train_stage2(&mut store, &[scene.rainy.clone()], &banks, &s2).unwrap();
        assert_eq!(hist.len(), 4);
        assert!(hist.iter().all(|v| v.is_finite()));
        assert_eq!(banks[0], banks_before[0]);
        assert_eq!(banks[2], banks_before[2]);
    }

    #[test]
    #[ignore]
    fn bench_stage1_step_desk() {
        let params = SynthParams { rng_seed: 5, ..SynthParams::default() };
        let scene = gen_scene(&params, 5, 5, 64, 64).unwrap();
        let mut store = ParamStore::new();
        let d = 3 * 8 * 8;
        let mut banks = [
            FeatureBank::new(d, 64).unwrap(),
            FeatureBank::new(d, 64).unwrap(),
            FeatureBank::new(d, 64).unwrap(),
        ];
        let cfg = StageCfg::desk(DetectorCfg::default(), 3, 8, 41);
        let t0 = std::time::Instant::now();
        train_stage1(&mut store, &[scene], &mut banks, &cfg).unwrap();
        eprintln!("stage1 c=8 depth=3 patch=8: {:.2} s/step", t0.elapsed().as_secs_f64() / 3.0);
    }

    #[test]
    fn stage2_requires_populated_banks() {
        let scene = tiny_scene(31);
        let mut store = ParamStore::new();
        let d = 3 * 8 * 8;
        let banks = [
            FeatureBank::new(d, 8).unwrap(),
            FeatureBank::new(d, 8).unwrap(),
            FeatureBank::new(d, 8).unwrap(),
        ];
        let s2 = Stage2Cfg {
            stage: StageCfg::desk(tiny_cfg(), 2, 8, 52),
            gp: GpConfig { n_near: 4, n_far: 4, ..GpConfig::default() },
            weights: GpLossWeights::default(),
            omega: 0.5,
        };
        let err = train_stage2(&mut store, &[scene.rainy.clone()], &banks, &s2).unwrap_err();
        assert!(matches!(err, Error::Contract(_)), "got {err:?}");
    }
}
