//! Recurrent restoration network with dense window-attention blocks,
//! global and local discriminators, and the joint adversarial training
//! loop that produces the final rain-free light field.
//!
//! Spec-facing tensors use the unit-stack layout [S, C, V, h, w]; the
//! convolution path swaps the first two axes internally.

use crate::blocks::{
    central_view, channel_linear, conv4d_kernel, init_conv4d, init_linear, sample_patch,
    stack_views_2d, ConvMode,
};
use crate::depth::{fog_tensor, DepthCfg, DepthNet};
use crate::detector::{rain_target, stack_tensor, supervised_loss, RainDetector, StageCfg};
use crate::error::{Error, Result};
use crate::gp::GpLossWeights;
use crate::lightfield::to_epi_units;
use crate::optim::{lr_at, Adam};
use crate::params::{FreezeSet, ParamCtx, ParamStore};
use crate::percept::{default_feature_net, FeatureNet};
use crate::rng::{derive_seed, stream};
use crate::synth::RainScene;
use crate::tensor::{
    batched_matmul, batched_matmul_tb, concat, conv2d_strided, conv4d, matmul, softmax_last,
    window_merge, window_partition, DiffTensor, Tape,
};
use rand::Rng;

/// All loss weighting constants of the pipeline.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_p: f64,
    pub lambda_p_real: f64,
    pub lambda_gp: f64,
    pub lambda_p_g: f64,
    pub lambda_gan: f64,
}

impl Default for LossWeights {
    fn default() -> LossWeights {
        LossWeights {
            lambda_p: 0.04,
            lambda_p_real: 0.04,
            lambda_gp: 0.015,
            lambda_p_g: 0.04,
            lambda_gan: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_p", self.lambda_p),
            ("lambda_p_real", self.lambda_p_real),
            ("lambda_gp", self.lambda_gp),
            ("lambda_p_g", self.lambda_p_g),
            ("lambda_gan", self.lambda_gan),
        ] {
            if !(v >= 0.0) {
                return Err(Error::domain(format!("{name} must be non-negative, got {v}")));
            }
        }
        Ok(())
    }

    pub fn gp(&self) -> GpLossWeights {
        GpLossWeights { lambda_gp: self.lambda_gp, lambda_p_real: self.lambda_p_real }
    }
}

/// Architecture knobs for the restorer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RestorerCfg {
    pub c: usize,
    pub blocks: usize,
    pub t_stages: usize,
    pub win: usize,
    pub conv_mode: ConvMode,
}

impl Default for RestorerCfg {
    fn default() -> RestorerCfg {
        RestorerCfg { c: 8, blocks: 2, t_stages: 3, win: 4, conv_mode: ConvMode::C4d }
    }
}

impl RestorerCfg {
    pub fn validate(&self) -> Result<()> {
        if self.c == 0 || self.blocks == 0 || self.t_stages == 0 || self.win == 0 {
            return Err(Error::domain(format!(
                "restorer needs positive widths, got c={} blocks={} stages={} win={}",
                self.c, self.blocks, self.t_stages, self.win
            )));
        }
        Ok(())
    }
}

/// Restoration results: the clamped output and each stage's running
/// estimate, all [S, 3, V, h, w].
#[derive(Clone, Debug)]
pub struct Restoration {
    pub output: DiffTensor,
    pub stages: Vec<DiffTensor>,
}

pub struct Restorer {
    pub cfg: RestorerCfg,
}

impl Restorer {
    pub fn new(cfg: RestorerCfg) -> Result<Restorer> {
        cfg.validate()?;
        Ok(Restorer { cfg })
    }

    /// Registers every parameter. The stem consumes the 7-channel
    /// concatenation [estimate, rain, fog]; the GRU gates see
    /// [hidden, features]; each block holds one window-attention head and
    /// two densely fed convolutions; the head emits a 3-channel delta.
    pub fn init(store: &mut ParamStore, cfg: &RestorerCfg, seed: u64) -> Result<()> {
        cfg.validate()?;
        let c = cfg.c;
        let e = cfg.conv_mode.extents(3);
        init_conv4d(store, seed, "restorer.stem", c, 7, e)?;
        for g in ["z", "r", "h"] {
            init_conv4d(store, seed, &format!("restorer.gru.{g}"), c, 2 * c, e)?;
        }
        for b in 1..=cfg.blocks {
            for p in ["q", "k", "v", "o"] {
                init_linear(store, seed, &format!("restorer.blk{b}.attn.{p}"), c, c, false)?;
            }
            init_conv4d(store, seed, &format!("restorer.blk{b}.c1"), c, 2 * c, e)?;
            init_conv4d(store, seed, &format!("restorer.blk{b}.c2"), c, 3 * c, e)?;
        }
        init_conv4d(store, seed, "restorer.head", 3, c, e)?;
        Ok(())
    }

    /// Non-shifted single-head attention over win x win spatial windows,
    /// residual-added, then two convolutions fed densely: y1 = relu(conv
    /// [x, a]), y2 = conv[x, a, y1], block output x + y2.
    fn attn_dense_block(&self, ctx: &ParamCtx, prefix: &str, x: &DiffTensor) -> Result<DiffTensor> {
        let dims: [usize; 5] = x.shape().dims().try_into().map_err(|_| {
            Error::shape(format!("attention block needs rank 5, got {}", x.shape()))
        })?;
        let c = dims[0];
        let q = channel_linear(ctx, &format!("{prefix}.attn.q"), x, false)?;
        let k = channel_linear(ctx, &format!("{prefix}.attn.k"), x, false)?;
        let v = channel_linear(ctx, &format!("{prefix}.attn.v"), x, false)?;
        let qw = window_partition(&q, self.cfg.win)?;
        let kw = window_partition(&k, self.cfg.win)?;
        let vw = window_partition(&v, self.cfg.win)?;
        let scores = batched_matmul_tb(&qw, &kw)?.scale(1.0 / (c as f64).sqrt())?;
        let att = batched_matmul(&softmax_last(&scores)?, &vw)?;
        let merged = window_merge(&att, &dims, self.cfg.win)?;
        let o = channel_linear(ctx, &format!("{prefix}.attn.o"), &merged, false)?;
        let a = x.add(&o)?;
        let y1 = conv4d(&concat(&[x, &a], 0)?, &conv4d_kernel(ctx, &format!("{prefix}.c1"))?)?
            .relu()?;
        let y2 = conv4d(
            &concat(&[x, &a, &y1], 0)?,
            &conv4d_kernel(ctx, &format!("{prefix}.c2"))?,
        )?;
        x.add(&y2)
    }

    /// Convolutional GRU update over channel-first tensors.
    fn gru(&self, ctx: &ParamCtx, hidden: &DiffTensor, x: &DiffTensor) -> Result<DiffTensor> {
        let cat = concat(&[hidden, x], 0)?;
        let z = conv4d(&cat, &conv4d_kernel(ctx, "restorer.gru.z")?)?.sigmoid()?;
        let r = conv4d(&cat, &conv4d_kernel(ctx, "restorer.gru.r")?)?.sigmoid()?;
        let cat2 = concat(&[&r.mul(hidden)?, x], 0)?;
        let cand = conv4d(&cat2, &conv4d_kernel(ctx, "restorer.gru.h")?)?.tanh()?;
        let keep = z.affine(-1.0, 1.0)?.mul(hidden)?;
        keep.add(&z.mul(&cand)?)
    }

    /// One recurrent stage over the channel-first 7-channel concatenation
    /// [estimate, rain, fog]. Returns the 3-channel delta and the new
    /// hidden state.
    fn stage_core(
        &self,
        ctx: &ParamCtx,
        cat: &DiffTensor,
        hidden: &DiffTensor,
    ) -> Result<(DiffTensor, DiffTensor)> {
        let s = conv4d(cat, &conv4d_kernel(ctx, "restorer.stem")?)?.relu()?;
        let h2 = self.gru(ctx, hidden, &s)?;
        let mut b = h2.clone();
        for i in 1..=self.cfg.blocks {
            b = self.attn_dense_block(ctx, &format!("restorer.blk{i}"), &b)?;
        }
        let delta = conv4d(&b, &conv4d_kernel(ctx, "restorer.head")?)?;
        Ok((delta, h2))
    }

    /// T recurrent stages of residual refinement. Inputs are unit-stack
    /// tensors: `input` and `rain` [S, 3, V, h, w], `fog` [S, 1, V, h, w].
    /// The running estimate starts at the input, so a zero-weight network
    /// returns the input unchanged.
    pub fn restore(
        &self,
        ctx: &ParamCtx,
        input: &DiffTensor,
        rain: &DiffTensor,
        fog: &DiffTensor,
    ) -> Result<Restoration> {
        let d = input.shape().dims().to_vec();
        if d.len() != 5 || d[1] != 3 {
            return Err(Error::shape(format!(
                "restorer input must be [S, 3, V, h, w], got {}",
                input.shape()
            )));
        }
        if rain.shape() != input.shape() {
            return Err(Error::shape(format!(
                "rain estimate {} does not match input {}",
                rain.shape(),
                input.shape()
            )));
        }
        let fd = fog.shape().dims();
        if fd.len() != 5 || fd[1] != 1 || fd[0] != d[0] || fd[2..] != d[2..] {
            return Err(Error::shape(format!(
                "fog map {} does not match input {}",
                fog.shape(),
                input.shape()
            )));
        }
        let rain_cf = rain.permute(0, 1)?;
        let fog_cf = fog.permute(0, 1)?;
        let mut est = input.permute(0, 1)?;
        let hdims = [self.cfg.c, d[0], d[2], d[3], d[4]];
        let mut hidden = DiffTensor::from_vec(vec![0.0; hdims.iter().product()], &hdims)?;
        let mut stages = Vec::with_capacity(self.cfg.t_stages);
        for _ in 0..self.cfg.t_stages {
            let cat = concat(&[&est, &rain_cf, &fog_cf], 0)?;
            let (delta, h2) = self.stage_core(ctx, &cat, &hidden)?;
            est = est.add(&delta)?;
            hidden = h2;
            stages.push(est.permute(0, 1)?);
        }
        let output = est.clamp(0.0, 1.0)?.permute(0, 1)?;
        Ok(Restoration { output, stages })
    }
}

/// Discriminator shape knobs shared by the global and local nets.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiscCfg {
    pub c1: usize,
    pub c2: usize,
    pub patch: usize,
    pub n_p: usize,
}

impl Default for DiscCfg {
    fn default() -> DiscCfg {
        DiscCfg { c1: 8, c2: 16, patch: 16, n_p: 4 }
    }
}

/// Pre-sigmoid clamp bound: sigmoid(+-LOGIT_CLAMP) = 1 - 1e-6 / 1e-6, so
/// discriminator outputs stay strictly inside (0, 1) and logs are finite.
pub const LOGIT_CLAMP: f64 = 13.815509557963773;

/// Registers both discriminators for fields whose stacked view count is
/// s*v (input channels s*v*3 each).
pub fn init_discs(store: &mut ParamStore, seed: u64, s: usize, v: usize, cfg: &DiscCfg) -> Result<()> {
    let ci = s * v * 3;
    for side in ["g", "l"] {
        let p = format!("disc.{side}");
        let wn = format!("{p}.c1");
        store.get_or_init(&format!("{wn}.w"), &[cfg.c1, ci, 3, 3], || {
            fan_in_vals(seed, &format!("{wn}.w"), ci * 9, cfg.c1 * ci * 9)
        })?;
        store.get_or_init(&format!("{wn}.b"), &[cfg.c1], || vec![0.0; cfg.c1])?;
        let wn = format!("{p}.c2");
        store.get_or_init(&format!("{wn}.w"), &[cfg.c2, cfg.c1, 3, 3], || {
            fan_in_vals(seed, &format!("{wn}.w"), cfg.c1 * 9, cfg.c2 * cfg.c1 * 9)
        })?;
        store.get_or_init(&format!("{wn}.b"), &[cfg.c2], || vec![0.0; cfg.c2])?;
        init_linear(store, seed, &format!("{p}.fc"), cfg.c2, 1, true)?;
    }
    Ok(())
}

fn fan_in_vals(seed: u64, name: &str, fan_in: usize, n: usize) -> Vec<f64> {
    use crate::rng::uniform;
    let mut rng = stream(seed, name);
    let bound = (1.0 / fan_in as f64).sqrt();
    (0..n).map(|_| uniform(&mut rng, -bound, bound)).collect()
}

/// Clamps a logit into [-LOGIT_CLAMP, LOGIT_CLAMP] and squashes it, so
/// the result lies in [1e-6, 1 - 1e-6].
pub fn squash_logit(logit: &DiffTensor) -> Result<DiffTensor> {
    logit.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)?.sigmoid()
}

/// One discriminator pass over a stacked 2D input [Ci, H, W]: two strided
/// convolutions, per-channel global means, a linear head, and the clamped
/// sigmoid. Returns a [1] tensor strictly inside (0, 1).
pub fn disc_forward(ctx: &ParamCtx, prefix: &str, x: &DiffTensor) -> Result<DiffTensor> {
    let y = conv2d_strided(
        x,
        &ctx.param(&format!("{prefix}.c1.w"))?,
        Some(&ctx.param(&format!("{prefix}.c1.b"))?),
        2,
    )?
    .relu()?;
    let y = conv2d_strided(
        &y,
        &ctx.param(&format!("{prefix}.c2.w"))?,
        Some(&ctx.param(&format!("{prefix}.c2.b"))?),
        2,
    )?
    .relu()?;
    let yd = y.shape().dims().to_vec();
    let n = yd[1] * yd[2];
    let flat = y.reshape(&[yd[0], n])?;
    let ones = DiffTensor::from_vec(vec![1.0 / n as f64; n], &[n, 1])?;
    let means = matmul(&flat, &ones)?.reshape(&[1, yd[0]])?;
    let logit = matmul(&means, &ctx.param(&format!("{prefix}.fc.w"))?)?
        .add_bias(&ctx.param(&format!("{prefix}.fc.b"))?, 1)?
        .reshape(&[1])?;
    squash_logit(&logit)
}

/// -log(d_real) - log(1 - d_fake) for [1]-shaped discriminator outputs.
pub fn gan_pair_loss(d_real: &DiffTensor, d_fake: &DiffTensor) -> Result<DiffTensor> {
    let a = d_real.log()?.scale(-1.0)?;
    let b = d_fake.affine(-1.0, 1.0)?.log()?.scale(-1.0)?;
    a.add(&b)?.sum()
}

/// Seeded local-patch origins, identical for real and fake stacks.
pub fn sample_patch_origins(h: usize, w: usize, p: usize, n_p: usize, seed: u64) -> Result<Vec<(usize, usize)>> {
    if p > h || p > w {
        return Err(Error::shape(format!("local patch {p} exceeds views {h}x{w}")));
    }
    let mut rng = stream(seed, "disc-patches");
    Ok((0..n_p)
        .map(|_| {
            let y = if h > p { rng.gen_range(0..=h - p) } else { 0 };
            let x = if w > p { rng.gen_range(0..=w - p) } else { 0 };
            (y, x)
        })
        .collect())
}

/// Discriminator-side losses on one (real, fake) pair of unit-stack
/// tensors: the global loss over full stacked views and the local loss
/// averaged over n_p seeded patch positions shared by both stacks.
pub fn gan_losses(
    ctx: &ParamCtx,
    real: &DiffTensor,
    fake: &DiffTensor,
    cfg: &DiscCfg,
    seed: u64,
) -> Result<(DiffTensor, DiffTensor)> {
    if real.shape() != fake.shape() {
        return Err(Error::shape(format!(
            "real {} and fake {} stacks differ",
            real.shape(),
            fake.shape()
        )));
    }
    let r2 = stack_views_2d(&real.permute(0, 1)?)?;
    let f2 = stack_views_2d(&fake.permute(0, 1)?)?;
    let g = gan_pair_loss(&disc_forward(ctx, "disc.g", &r2)?, &disc_forward(ctx, "disc.g", &f2)?)?;
    let d = r2.shape().dims().to_vec();
    let origins = sample_patch_origins(d[1], d[2], cfg.patch, cfg.n_p, seed)?;
    let mut acc: Option<DiffTensor> = None;
    for (y, x) in origins {
        let rp = r2.slice_axis(1, y, cfg.patch)?.slice_axis(2, x, cfg.patch)?;
        let fp = f2.slice_axis(1, y, cfg.patch)?.slice_axis(2, x, cfg.patch)?;
        let term = gan_pair_loss(&disc_forward(ctx, "disc.l", &rp)?, &disc_forward(ctx, "disc.l", &fp)?)?;
        acc = Some(match acc {
            None => term,
            Some(a) => a.add(&term)?,
        });
    }
    let l = acc.unwrap().scale(1.0 / cfg.n_p as f64)?;
    Ok((g, l))
}

/// Generator-side adversarial terms on the fake stack alone: the
/// non-saturating -log D(fake) by default, or the literal saturating
/// log(1 - D(fake)) when requested. Returns (global, local-mean).
pub fn gen_gan_terms(
    ctx: &ParamCtx,
    fake: &DiffTensor,
    cfg: &DiscCfg,
    seed: u64,
    saturating: bool,
) -> Result<(DiffTensor, DiffTensor)> {
    let term = |d: &DiffTensor| -> Result<DiffTensor> {
        if saturating {
            d.affine(-1.0, 1.0)?.log()?.sum()
        } else {
            d.log()?.scale(-1.0)?.sum()
        }
    };
    let f2 = stack_views_2d(&fake.permute(0, 1)?)?;
    let g = term(&disc_forward(ctx, "disc.g", &f2)?)?;
    let d = f2.shape().dims().to_vec();
    let origins = sample_patch_origins(d[1], d[2], cfg.patch, cfg.n_p, seed)?;
    let mut acc: Option<DiffTensor> = None;
    for (y, x) in origins {
        let fp = f2.slice_axis(1, y, cfg.patch)?.slice_axis(2, x, cfg.patch)?;
        let t = term(&disc_forward(ctx, "disc.l", &fp)?)?;
        acc = Some(match acc {
            None => t,
            Some(a) => a.add(&t)?,
        });
    }
    Ok((g, acc.unwrap().scale(1.0 / cfg.n_p as f64)?))
}

/// L_g = mean |Y' - Y_gt| + lambda_p_g * |phi(Y'_c) - phi(Y_gt_c)|^2,
/// the perceptual term comparing central sub-views.
pub fn generator_loss(
    y: &DiffTensor,
    gt: &DiffTensor,
    phi: &FeatureNet,
    lambda_p_g: f64,
) -> Result<DiffTensor> {
    if y.shape() != gt.shape() {
        return Err(Error::shape(format!(
            "restored {} and target {} differ",
            y.shape(),
            gt.shape()
        )));
    }
    let l1 = y.sub(gt)?.mean_abs()?;
    if lambda_p_g == 0.0 {
        return Ok(l1);
    }
    let yc = central_view(&y.permute(0, 1)?)?;
    let gc = central_view(&gt.permute(0, 1)?)?;
    l1.add(&phi.dist2(&yc, &gc)?.scale(lambda_p_g)?)
}

/// Pseudo clean target for real scenes: clamp(I - R', 0, 1).
pub fn pseudo_gt_views(input: &DiffTensor, rain: &DiffTensor) -> Result<DiffTensor> {
    if input.shape() != rain.shape() {
        return Err(Error::shape(format!(
            "input {} and rain {} differ",
            input.shape(),
            rain.shape()
        )));
    }
    input.sub(rain)?.clamp(0.0, 1.0)
}

/// L_derain = L_g + lambda_gan * (global + local adversarial terms).
pub fn derain_loss(
    l_g: &DiffTensor,
    l_g_gan: &DiffTensor,
    l_l_gan: &DiffTensor,
    lambda_gan: f64,
) -> Result<DiffTensor> {
    l_g.add(&l_g_gan.add(l_l_gan)?.scale(lambda_gan)?)
}

/// L_total = L_rain + L_derain.
pub fn total_loss(l_rain: &DiffTensor, l_derain: &DiffTensor) -> Result<DiffTensor> {
    l_rain.add(l_derain)
}

/// Joint-phase settings: detector, frozen depth, restorer, and the
/// adversarial pair, all driven by one stage schedule.
#[derive(Clone, Debug)]
pub struct JointCfg {
    pub stage: StageCfg,
    pub depth: DepthCfg,
    pub rest: RestorerCfg,
    pub disc: DiscCfg,
    pub weights: LossWeights,
    pub beta: f64,
    pub saturating_gan: bool,
    pub fog_off: bool,
    /// When false the patch discriminator is skipped and only the whole-view
    /// adversary trains; its parameters stay at initialization.
    pub local_disc: bool,
}

/// Per-step loss record of the joint phase.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JointStep {
    pub l_s: f64,
    pub l_g: f64,
    pub l_gan: f64,
    pub l_total: f64,
}

/// Alternating adversarial training of detector + restorer with the depth
/// net frozen. Each step: one untracked generator pass producing the fake
/// stack, a discriminator update on it, then a generator update against
/// the refreshed discriminators. Returns the per-step loss records.
pub fn train_joint(store: &mut ParamStore, scenes: &[RainScene], cfg: &JointCfg) -> Result<Vec<JointStep>> {
    if scenes.is_empty() {
        return Err(Error::contract("joint training needs at least one scene".to_string()));
    }
    cfg.weights.validate()?;
    if store.get("detector.stem.w").is_err() {
        return Err(Error::contract(
            "joint training requires detector weights from stage 1; run the detector stages first"
                .to_string(),
        ));
    }
    if store.get("depth.head.w").is_err() {
        return Err(Error::contract(
            "joint training requires pretrained depth weights; run the depth stage first"
                .to_string(),
        ));
    }
    let sc = &cfg.stage;
    Restorer::init(store, &cfg.rest, sc.seed)?;
    let lf0 = &scenes[0].rainy;
    let s_units = cfg.stage.angular.min(lf0.nu);
    let v_units = cfg.stage.angular.min(lf0.nv);
    init_discs(store, sc.seed, s_units, v_units, &cfg.disc)?;
    let det = RainDetector::new(sc.det)?;
    let dep = DepthNet::new(cfg.depth)?;
    let rest = Restorer::new(cfg.rest)?;
    let phi = default_feature_net()?;
    let freeze = FreezeSet::new(&["depth.", "opt."]);
    let mut opt_g = Adam::load_from(store, "opt.g.", sc.adam)?;
    let mut opt_d = Adam::load_from(store, "opt.d.", sc.adam)?;
    let mut history = Vec::with_capacity(sc.steps);
    for step in sc.start_step..sc.start_step + sc.steps {
        let sseed = derive_seed(sc.seed, &format!("joint:{step}"));
        let scene = &scenes[step % scenes.len()];
        let lf = &scene.rainy;
        let patch = sample_patch(lf.nu, lf.nv, lf.h, lf.w, sc.patch, sc.angular, sseed)?;
        let x = stack_tensor(lf, &patch, "joint")?;
        let y_gt = to_epi_units(&scene.clean, &patch, "joint-gt")?.to_tensor()?;
        let rain_gt = rain_target(scene, &patch)?;
        let pseed = derive_seed(sseed, "patches");

        // Untracked generator pass for the discriminator step.
        let fake_vals = {
            let ctx = ParamCtx::frozen(store);
            let r = forward_generator(&det, &dep, &rest, &ctx, &x, cfg)?;
            DiffTensor::from_vec(r.output.values().to_vec(), r.output.shape().dims())?
        };

        // Discriminator step on (real, detached fake).
        let d_grads = {
            let tape = Tape::new();
            let ctx = ParamCtx::trainable(store, &tape);
            let (lg, ll) = gan_losses(&ctx, &y_gt, &fake_vals, &cfg.disc, pseed)?;
            let loss = if cfg.local_disc { lg.add(&ll)? } else { lg };
            let grads = tape.backward(&loss)?;
            ctx.grads(&grads)?
        };
        freeze.assert_disjoint(&d_grads)?;
        let epoch = step / scenes.len();
        let lr = lr_at(sc.lr, sc.lr_decay_factor, sc.lr_decay_every, epoch);
        opt_d.apply(store, &d_grads, lr)?;

        // Generator step against the refreshed discriminators.
        let (row, g_grads) = {
            let tape = Tape::new();
            let ctx_t = ParamCtx::trainable(store, &tape);
            let ctx_f = ParamCtx::frozen(store);
            let rain = det.detect(&ctx_t, &x)?;
            let dmap = dep.estimate(&ctx_f, &x, &rain.rain)?;
            let fog = make_fog(&dmap, cfg)?;
            let restored = rest.restore(&ctx_t, &x, &rain.rain, &fog)?;
            let l_s = supervised_loss(&rain.rain, &rain_gt, &phi, cfg.weights.lambda_p)?;
            let l_g = generator_loss(&restored.output, &y_gt, &phi, cfg.weights.lambda_p_g)?;
            let (gg, gl) = gen_gan_terms(&ctx_f, &restored.output, &cfg.disc, pseed, cfg.saturating_gan)?;
            let gl = if cfg.local_disc { gl } else { DiffTensor::from_vec(vec![0.0], &[1])? };
            let l_gan = gg.add(&gl)?;
            let l_derain = derain_loss(&l_g, &gg, &gl, cfg.weights.lambda_gan)?;
            let l_total = total_loss(&l_s, &l_derain)?;
            let grads = tape.backward(&l_total)?;
            let row = JointStep {
                l_s: l_s.values()[0],
                l_g: l_g.values()[0],
                l_gan: l_gan.values()[0],
                l_total: l_total.values()[0],
            };
            (row, ctx_t.grads(&grads)?)
        };
        freeze.assert_disjoint(&g_grads)?;
        opt_g.apply(store, &g_grads, lr)?;
        history.push(row);
    }
    opt_g.save_into(store, "opt.g.")?;
    opt_d.save_into(store, "opt.d.")?;
    Ok(history)
}

/// Full generator path: detect rain, estimate depth (frozen), derive fog,
/// restore. Used by inference and by the untracked pass of the joint loop.
pub fn forward_generator(
    det: &RainDetector,
    dep: &DepthNet,
    rest: &Restorer,
    ctx: &ParamCtx,
    x: &DiffTensor,
    cfg: &JointCfg,
) -> Result<Restoration> {
    let rain = det.detect(ctx, x)?;
    let dmap = dep.estimate(ctx, x, &rain.rain)?;
    let fog = make_fog(&dmap, cfg)?;
    rest.restore(ctx, x, &rain.rain, &fog)
}

fn make_fog(dmap: &DiffTensor, cfg: &JointCfg) -> Result<DiffTensor> {
    if cfg.fog_off {
        DiffTensor::from_vec(vec![0.0; dmap.shape().numel()], dmap.shape().dims())
    } else {
        fog_tensor(dmap, cfg.beta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::{train_stage1, DetectorCfg};
    use crate::gp::FeatureBank;
    use crate::synth::{gen_scene, SynthParams};
    use crate::tensor::finite_diff_check;

    fn rand_stack(dims: &[usize; 5], seed: u64) -> DiffTensor {
        let n: usize = dims.iter().product();
        let mut rng = stream(seed, "stack");
        DiffTensor::from_vec((0..n).map(|_| rng.gen_range(0.0..1.0)).collect(), dims).unwrap()
    }

    fn tiny_rest() -> RestorerCfg {
        RestorerCfg { c: 2, blocks: 1, t_stages: 2, win: 4, conv_mode: ConvMode::C4d }
    }

    #[test]
    fn zero_weights_return_input_unchanged() {
        let mut store = ParamStore::new();
        let cfg = tiny_rest();
        Restorer::init(&mut store, &cfg, 3).unwrap();
        let names: Vec<String> = store.names().map(|s| s.to_string()).collect();
        for name in names {
            let n = store.get(&name).unwrap().vals.len();
            store.set_vals(&name, vec![0.0; n]).unwrap();
        }
        let rest = Restorer::new(cfg).unwrap();
        let ctx = ParamCtx::frozen(&store);
        let x = rand_stack(&[2, 3, 2, 8, 8], 1);
        let rain = rand_stack(&[2, 3, 2, 8, 8], 2);
        let fog = rand_stack(&[2, 1, 2, 8, 8], 3);
        let r = rest.restore(&ctx, &x, &rain, &fog).unwrap();
        assert_eq!(r.output.values(), x.values());
        assert_eq!(r.stages.len(), 2);
    }

    #[test]
    fn output_matches_input_shape() {
        let mut store = ParamStore::new();
        let cfg = tiny_rest();
        Restorer::init(&mut store, &cfg, 4).unwrap();
        let rest = Restorer::new(cfg).unwrap();
        let ctx = ParamCtx::frozen(&store);
        let x = rand_stack(&[3, 3, 2, 8, 4], 5);
        let rain = rand_stack(&[3, 3, 2, 8, 4], 6);
        let fog = rand_stack(&[3, 1, 2, 8, 4], 7);
        let r = rest.restore(&ctx, &x, &rain, &fog).unwrap();
        assert_eq!(r.output.shape().dims(), &[3, 3, 2, 8, 4]);
        assert!(r.output.values().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn single_stage_equals_first_of_many() {
        let mut store = ParamStore::new();
        let cfg3 = RestorerCfg { t_stages: 3, ..tiny_rest() };
        Restorer::init(&mut store, &cfg3, 8).unwrap();
        let ctx = ParamCtx::frozen(&store);
        let x = rand_stack(&[2, 3, 2, 8, 8], 9);
        let rain = rand_stack(&[2, 3, 2, 8, 8], 10);
        let fog = rand_stack(&[2, 1, 2, 8, 8], 11);
        let r3 = Restorer::new(cfg3).unwrap().restore(&ctx, &x, &rain, &fog).unwrap();
        let cfg1 = RestorerCfg { t_stages: 1, ..cfg3 };
        let r1 = Restorer::new(cfg1).unwrap().restore(&ctx, &x, &rain, &fog).unwrap();
        let clamped: Vec<f64> = r3.stages[0].values().iter().map(|v| v.clamp(0.0, 1.0)).collect();
        assert_eq!(r1.output.values(), &clamped[..]);
    }

    #[test]
    fn stage_gradient_matches_finite_differences() {
        let mut store = ParamStore::new();
        let cfg = tiny_rest();
        Restorer::init(&mut store, &cfg, 12).unwrap();
        let rest = Restorer::new(cfg).unwrap();
        let hd = [cfg.c, 2, 2, 8, 8];
        let hidden = DiffTensor::from_vec(vec![0.0; hd.iter().product()], &hd).unwrap();
        let x = rand_stack(&[2, 7, 2, 8, 8], 13).permute(0, 1).unwrap();
        let rel = finite_diff_check(
            |_tape, xs| {
                let ctx = ParamCtx::frozen(&store);
                let (delta, h2) = rest.stage_core(&ctx, xs, &hidden)?;
                delta.sum_sq()?.add(&h2.sum_sq()?)
            },
            &x,
            6,
            1e-5,
            33,
        )
        .unwrap();
        assert!(rel < 1e-3, "stage finite-diff rel error {rel}");
    }

    #[test]
    fn fog_channel_changes_output() {
        let mut store = ParamStore::new();
        let cfg = tiny_rest();
        Restorer::init(&mut store, &cfg, 14).unwrap();
        let rest = Restorer::new(cfg).unwrap();
        let ctx = ParamCtx::frozen(&store);
        let x = rand_stack(&[2, 3, 2, 8, 8], 15);
        let rain = rand_stack(&[2, 3, 2, 8, 8], 16);
        let fog = rand_stack(&[2, 1, 2, 8, 8], 17);
        let zero_fog = DiffTensor::from_vec(vec![0.0; 2 * 2 * 64], &[2, 1, 2, 8, 8]).unwrap();
        let a = rest.restore(&ctx, &x, &rain, &fog).unwrap();
        let b = rest.restore(&ctx, &x, &rain, &zero_fog).unwrap();
        let diff: f64 = a
            .output
            .values()
            .iter()
            .zip(b.output.values())
            .map(|(p, q)| (p - q).abs())
            .sum();
        assert!(diff > 1e-9, "fog channel had no effect");
    }

    #[test]
    fn gan_losses_at_half_equal_two_log_two() {
        let mut store = ParamStore::new();
        init_discs(&mut store, 5, 2, 2, &DiscCfg { patch: 4, ..DiscCfg::default() }).unwrap();
        let names: Vec<String> = store.names().map(|s| s.to_string()).collect();
        for name in names {
            let n = store.get(&name).unwrap().vals.len();
            store.set_vals(&name, vec![0.0; n]).unwrap();
        }
        let ctx = ParamCtx::frozen(&store);
        let real = rand_stack(&[2, 3, 2, 8, 8], 18);
        let fake = rand_stack(&[2, 3, 2, 8, 8], 19);
        let cfg = DiscCfg { patch: 4, ..DiscCfg::default() };
        let (g, l) = gan_losses(&ctx, &real, &fake, &cfg, 77).unwrap();
        let want = 2.0 * (2.0f64).ln();
        assert!((g.values()[0] - want).abs() < 1e-12, "global {}", g.values()[0]);
        assert!((l.values()[0] - want).abs() < 1e-12, "local {}", l.values()[0]);
    }

    #[test]
    fn perfect_discriminator_loss_is_near_zero() {
        let big = DiffTensor::from_vec(vec![1e9], &[1]).unwrap();
        let small = DiffTensor::from_vec(vec![-1e9], &[1]).unwrap();
        let d_real = squash_logit(&big).unwrap();
        let d_fake = squash_logit(&small).unwrap();
        assert!((d_real.values()[0] - (1.0 - 1e-6)).abs() < 1e-12);
        assert!((d_fake.values()[0] - 1e-6).abs() < 1e-12);
        let loss = gan_pair_loss(&d_real, &d_fake).unwrap();
        assert!(loss.values()[0] > 0.0);
        assert!(loss.values()[0] < 1e-5, "clamped perfect loss {}", loss.values()[0]);
    }

    #[test]
    fn patch_origins_are_seeded_and_bounded() {
        let a = sample_patch_origins(32, 32, 8, 4, 9).unwrap();
        let b = sample_patch_origins(32, 32, 8, 4, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
        for (y, x) in &a {
            assert!(y + 8 <= 32 && x + 8 <= 32);
        }
        let c = sample_patch_origins(32, 32, 8, 4, 10).unwrap();
        assert!(a != c);
        assert!(sample_patch_origins(8, 8, 16, 4, 1).is_err());
    }

    #[test]
    fn generator_loss_identities() {
        let phi = default_feature_net().unwrap();
        let y = rand_stack(&[2, 3, 2, 8, 8], 20);
        assert_eq!(generator_loss(&y, &y, &phi, 0.04).unwrap().values()[0], 0.0);
        let gt = rand_stack(&[2, 3, 2, 8, 8], 21);
        let pure = generator_loss(&y, &gt, &phi, 0.0).unwrap();
        let oracle = y.sub(&gt).unwrap().mean_abs().unwrap();
        assert!((pure.values()[0] - oracle.values()[0]).abs() < 1e-15);
        // Constant absolute deviation 0.1 gives exactly 0.1.
        let shifted = y.affine(1.0, 0.1).unwrap();
        let hand = generator_loss(&shifted, &y, &phi, 0.0).unwrap();
        assert!((hand.values()[0] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn derain_total_and_pseudo_gt_arithmetic() {
        let lg = DiffTensor::scalar(1.0);
        let g2 = DiffTensor::scalar(2.0);
        let g3 = DiffTensor::scalar(3.0);
        assert!((derain_loss(&lg, &g2, &g3, 0.01).unwrap().values()[0] - 1.05).abs() < 1e-15);
        assert_eq!(derain_loss(&lg, &g2, &g3, 0.0).unwrap().values()[0], 1.0);
        let lt = total_loss(&DiffTensor::scalar(0.5), &DiffTensor::scalar(0.25)).unwrap();
        assert_eq!(lt.values()[0], 0.75);
        let i = rand_stack(&[2, 3, 2, 4, 4], 22);
        let zero = DiffTensor::from_vec(vec![0.0; i.shape().numel()], i.shape().dims()).unwrap();
        assert_eq!(pseudo_gt_views(&i, &zero).unwrap().values(), i.values());
        assert!(pseudo_gt_views(&i, &i).unwrap().values().iter().all(|&v| v == 0.0));
        let r = rand_stack(&[2, 3, 2, 4, 4], 23);
        let p = pseudo_gt_views(&i, &r).unwrap();
        for (k, pv) in p.values().iter().enumerate() {
            let want = (i.values()[k] - r.values()[k]).clamp(0.0, 1.0);
            assert_eq!(*pv, want);
        }
    }

    fn joint_fixture() -> (ParamStore, Vec<RainScene>, JointCfg) {
        let params = SynthParams { rng_seed: 99, streak_count: 8, ..SynthParams::default() };
        let scene = gen_scene(&params, 3, 3, 16, 16).unwrap();
        let det = DetectorCfg { c: 2, dense_depth: 1, conv_mode: ConvMode::C4d };
        let mut store = ParamStore::new();
        let d = 3 * 8 * 8;
        let mut banks = [
            FeatureBank::new(d, 16).unwrap(),
            FeatureBank::new(d, 16).unwrap(),
            FeatureBank::new(d, 16).unwrap(),
        ];
        let s1 = StageCfg { det, ..StageCfg::desk(det, 2, 8, 71) };
        train_stage1(&mut store, &[scene.clone()], &mut banks, &s1).unwrap();
        store.remove_prefix("opt.");
        let dcfg = DepthCfg { blocks: 1, conv_mode: ConvMode::C4d };
        let depth_stage = StageCfg { det, ..StageCfg::desk(det, 2, 8, 72) };
        crate::depth::train_depth(&mut store, &[scene.clone()], &depth_stage, &dcfg).unwrap();
        store.remove_prefix("opt.");
        let cfg = JointCfg {
            stage: StageCfg { det, ..StageCfg::desk(det, 3, 8, 73) },
            depth: dcfg,
            rest: tiny_rest(),
            disc: DiscCfg { patch: 4, ..DiscCfg::default() },
            weights: LossWeights::default(),
            beta: 1.8,
            saturating_gan: false,
            fog_off: false,
            local_disc: true,
        };
        (store, vec![scene], cfg)
    }

    #[test]
    fn joint_training_updates_generator_and_discriminator_only() {
        let (mut store, scenes, cfg) = joint_fixture();
        let depth_sum = store.checksum_prefix("depth.");
        let det_sum = store.checksum_prefix("detector.");
        let hist = train_joint(&mut store, &scenes, &cfg).unwrap();
        assert_eq!(hist.len(), 3);
        for row in &hist {
            assert!(row.l_s.is_finite() && row.l_g.is_finite() && row.l_total.is_finite());
            assert!(row.l_gan.is_finite());
        }
        assert_eq!(store.checksum_prefix("depth."), depth_sum, "frozen depth moved");
        assert_ne!(store.checksum_prefix("detector."), det_sum, "detector never updated");
        assert!(store.get("disc.g.fc.w").is_ok());
    }

    #[test]
    fn joint_training_is_deterministic() {
        let run = || {
            let (mut store, scenes, cfg) = joint_fixture();
            train_joint(&mut store, &scenes, &cfg).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn joint_requires_pretrained_stages() {
        let params = SynthParams { rng_seed: 99, streak_count: 8, ..SynthParams::default() };
        let scene = gen_scene(&params, 3, 3, 16, 16).unwrap();
        let det = DetectorCfg { c: 2, dense_depth: 1, conv_mode: ConvMode::C4d };
        let cfg = JointCfg {
            stage: StageCfg { det, ..StageCfg::desk(det, 1, 8, 73) },
            depth: DepthCfg { blocks: 1, conv_mode: ConvMode::C4d },
            rest: tiny_rest(),
            disc: DiscCfg { patch: 4, ..DiscCfg::default() },
            weights: LossWeights::default(),
            beta: 1.8,
            saturating_gan: false,
            fog_off: false,
            local_disc: true,
        };
        let mut empty = ParamStore::new();
        let err = train_joint(&mut empty, &[scene], &cfg).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
        let msg = format!("{err}");
        assert!(msg.contains("stage 1"), "unexpected message: {msg}");
    }
}
