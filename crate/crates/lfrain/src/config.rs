//! Run configuration shared by every subcommand: a flat `[section]` /
//! `key = value` text file covering scene synthesis, model widths, the
//! training schedule, loss weights, the process-regression settings,
//! ablation switches, and file-system paths. Every key has a default, so
//! the empty string parses to `RunConfig::default()`, and serialization is
//! lossless: `parse(&serialize(&c)) == c` for any valid config.

use std::path::Path;

use crate::blocks::ConvMode;
use crate::depth::DepthCfg;
use crate::detector::{DetectorCfg, Stage2Cfg, StageCfg};
use crate::error::{Error, Result};
use crate::gp::{GpConfig, GpLossWeights, Kernel};
use crate::optim::AdamCfg;
use crate::restorer::{DiscCfg, JointCfg, LossWeights, RestorerCfg};
use crate::rng::derive_seed;
use crate::synth::{fmt_f64, SynthParams};

/// Semi-supervised mode: `Off` skips the unsupervised phase entirely,
/// `Plain` runs per-scale regression without cross-scale blending, and
/// `Guided` blends each scale's target with the previous scale's.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GpMode {
    Off,
    Plain,
    Guided,
}

impl GpMode {
    pub fn as_str(self) -> &'static str {
        match self {
            GpMode::Off => "off",
            GpMode::Plain => "plain",
            GpMode::Guided => "guided",
        }
    }

    pub fn parse(s: &str) -> Result<GpMode> {
        match s {
            "off" => Ok(GpMode::Off),
            "plain" => Ok(GpMode::Plain),
            "guided" => Ok(GpMode::Guided),
            other => Err(Error::format(format!(
                "gp_mode must be one of off/plain/guided, got '{other}'"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    // [run]
    pub seed: u64,
    pub views_u: usize,
    pub views_v: usize,
    pub height: usize,
    pub width: usize,
    // [synth]; rng_seed is not a config key: scene seeds derive from the
    // master seed, so the field keeps its default through a round trip.
    pub synth: SynthParams,
    // [gp]
    pub sigma_eps2: f64,
    pub n_near: usize,
    pub n_far: usize,
    pub bank_cap: usize,
    pub omega: f64,
    pub gp_mode: GpMode,
    // [loss]
    pub weights: LossWeights,
    // [net]
    pub conv_mode: ConvMode,
    pub detector_c: usize,
    pub dense_depth: usize,
    pub depth_blocks: usize,
    pub restorer_c: usize,
    pub restorer_blocks: usize,
    pub t_stages: usize,
    pub win: usize,
    pub disc_c1: usize,
    pub disc_c2: usize,
    pub disc_patch: usize,
    pub disc_n_p: usize,
    // [train]
    pub lr: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub patch: usize,
    pub angular: usize,
    pub depth_steps: usize,
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub joint_steps: usize,
    /// Checkpoint cadence in steps; 0 saves only at stage boundaries.
    pub save_every: usize,
    pub local_disc: bool,
    pub saturating_gan: bool,
    /// When false the restorer's fog channel is zeroed (ablation).
    pub fog_input: bool,
    // [paths]
    pub data_dir: String,
    /// Unpaired rainy fields for the unsupervised phase; empty skips it.
    pub real_dir: String,
    pub ckpt_dir: String,
    pub out_dir: String,
}

impl Default for RunConfig {
    fn default() -> RunConfig {
        RunConfig {
            seed: 1234,
            views_u: 5,
            views_v: 5,
            height: 64,
            width: 64,
            synth: SynthParams::default(),
            sigma_eps2: 0.1,
            n_near: 16,
            n_far: 16,
            bank_cap: 256,
            omega: 0.5,
            gp_mode: GpMode::Guided,
            weights: LossWeights::default(),
            conv_mode: ConvMode::C4d,
            detector_c: 8,
            dense_depth: 3,
            depth_blocks: 3,
            restorer_c: 8,
            restorer_blocks: 2,
            t_stages: 3,
            win: 4,
            disc_c1: 8,
            disc_c2: 16,
            disc_patch: 16,
            disc_n_p: 4,
            lr: 0.0002,
            lr_decay_factor: 0.5,
            lr_decay_every: 80,
            patch: 32,
            angular: 3,
            depth_steps: 40,
            stage1_steps: 60,
            stage2_steps: 20,
            joint_steps: 40,
            save_every: 0,
            local_disc: true,
            saturating_gan: false,
            fog_input: true,
            data_dir: "data/synth".to_string(),
            real_dir: String::new(),
            ckpt_dir: "ckpt".to_string(),
            out_dir: "out".to_string(),
        }
    }
}

const SECTIONS: [&str; 7] = ["run", "synth", "gp", "loss", "net", "train", "paths"];

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.weights.validate()?;
        self.detector_cfg().validate()?;
        self.restorer_cfg().validate()?;
        if self.views_u == 0 || self.views_v == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::domain("scene dimensions must be positive".to_string()));
        }
        if self.sigma_eps2 <= 0.0 {
            return Err(Error::domain(format!(
                "sigma_eps2 must be positive, got {}",
                self.sigma_eps2
            )));
        }
        if !(0.0..=1.0).contains(&self.omega) {
            return Err(Error::domain(format!("omega must lie in [0,1], got {}", self.omega)));
        }
        if self.n_near == 0 || self.n_far == 0 || self.bank_cap < self.n_near.max(self.n_far) {
            return Err(Error::domain(format!(
                "bank sizes must satisfy 0 < n_near,n_far <= bank_cap, got {}/{}/{}",
                self.n_near, self.n_far, self.bank_cap
            )));
        }
        if self.patch == 0 || self.patch % 2 != 0 {
            return Err(Error::domain(format!(
                "patch must be even and positive (pooling halves it), got {}",
                self.patch
            )));
        }
        if self.patch % self.win != 0 {
            return Err(Error::domain(format!(
                "patch {} must be a multiple of the attention window {}",
                self.patch, self.win
            )));
        }
        if self.disc_patch == 0 || self.disc_patch > self.patch {
            return Err(Error::domain(format!(
                "disc_patch must lie in 1..=patch, got {} with patch {}",
                self.disc_patch, self.patch
            )));
        }
        if self.angular == 0 || self.angular % 2 == 0 {
            return Err(Error::domain(format!(
                "angular crop must be odd so a central view exists, got {}",
                self.angular
            )));
        }
        if self.lr <= 0.0 || self.lr_decay_factor <= 0.0 || self.lr_decay_factor > 1.0 {
            return Err(Error::domain(format!(
                "rate schedule needs lr > 0 and decay factor in (0,1], got {}/{}",
                self.lr, self.lr_decay_factor
            )));
        }
        Ok(())
    }

    pub fn detector_cfg(&self) -> DetectorCfg {
        DetectorCfg { c: self.detector_c, dense_depth: self.dense_depth, conv_mode: self.conv_mode }
    }

    pub fn depth_cfg(&self) -> DepthCfg {
        DepthCfg { blocks: self.depth_blocks, conv_mode: self.conv_mode }
    }

    pub fn restorer_cfg(&self) -> RestorerCfg {
        RestorerCfg {
            c: self.restorer_c,
            blocks: self.restorer_blocks,
            t_stages: self.t_stages,
            win: self.win,
            conv_mode: self.conv_mode,
        }
    }

    pub fn disc_cfg(&self) -> DiscCfg {
        DiscCfg { c1: self.disc_c1, c2: self.disc_c2, patch: self.disc_patch, n_p: self.disc_n_p }
    }

    pub fn gp_config(&self) -> GpConfig {
        GpConfig {
            sigma_eps: self.sigma_eps2.sqrt(),
            n_near: self.n_near,
            n_far: self.n_far,
            kernel: Kernel::Cosine,
        }
    }

    /// Synthesis parameters for scene `index`, seeded from the master seed.
    pub fn scene_params(&self, index: usize) -> SynthParams {
        SynthParams {
            rng_seed: derive_seed(self.seed, &format!("synth:scene:{index}")),
            ..self.synth.clone()
        }
    }

    /// Per-stage schedule; `label` namespaces both the weight-init seed and
    /// the per-step sampling seeds.
    pub fn stage_cfg(&self, label: &str, steps: usize, start_step: usize) -> StageCfg {
        StageCfg {
            det: self.detector_cfg(),
            steps,
            start_step,
            lr: self.lr,
            lr_decay_factor: self.lr_decay_factor,
            lr_decay_every: self.lr_decay_every,
            patch: self.patch,
            angular: self.angular,
            lambda_p: self.weights.lambda_p,
            adam: AdamCfg::default(),
            seed: derive_seed(self.seed, label),
        }
    }

    pub fn stage2_cfg(&self, steps: usize, start_step: usize) -> Stage2Cfg {
        Stage2Cfg {
            stage: self.stage_cfg("stage2", steps, start_step),
            gp: self.gp_config(),
            weights: GpLossWeights {
                lambda_gp: self.weights.lambda_gp,
                lambda_p_real: self.weights.lambda_p_real,
            },
            // Plain mode regresses each scale against its own bank only.
            omega: if self.gp_mode == GpMode::Plain { 0.0 } else { self.omega },
        }
    }

    pub fn joint_cfg(&self, steps: usize, start_step: usize) -> JointCfg {
        JointCfg {
            stage: self.stage_cfg("joint", steps, start_step),
            depth: self.depth_cfg(),
            rest: self.restorer_cfg(),
            disc: self.disc_cfg(),
            weights: self.weights,
            beta: self.synth.beta,
            saturating_gan: self.saturating_gan,
            fog_off: !self.fog_input,
            local_disc: self.local_disc,
        }
    }

    fn set(&mut self, section: &str, key: &str, val: &str) -> Result<()> {
        let bad = |what: &str| Error::format(format!("{section}.{key}: invalid {what} '{val}'"));
        let f = || val.parse::<f64>().map_err(|_| bad("number"));
        let n = || val.parse::<usize>().map_err(|_| bad("integer"));
        let b = || match val {
            "true" => Ok(true),
            "false" => Ok(false),
            _ => Err(bad("flag (true/false)")),
        };
        match (section, key) {
            ("run", "seed") => self.seed = val.parse().map_err(|_| bad("integer"))?,
            ("run", "views_u") => self.views_u = n()?,
            ("run", "views_v") => self.views_v = n()?,
            ("run", "height") => self.height = n()?,
            ("run", "width") => self.width = n()?,
            ("synth", "alpha") => self.synth.alpha = f()?,
            ("synth", "beta") => self.synth.beta = f()?,
            ("synth", "a0") => self.synth.a0 = f()?,
            ("synth", "streak_count") => self.synth.streak_count = n()?,
            ("synth", "length_min") => self.synth.length_min = f()?,
            ("synth", "length_max") => self.synth.length_max = f()?,
            ("synth", "width_min") => self.synth.width_min = f()?,
            ("synth", "width_max") => self.synth.width_max = f()?,
            ("synth", "angle_min") => self.synth.angle_min = f()?,
            ("synth", "angle_max") => self.synth.angle_max = f()?,
            ("synth", "opacity_min") => self.synth.opacity_min = f()?,
            ("synth", "opacity_max") => self.synth.opacity_max = f()?,
            ("synth", "disparity_min") => self.synth.disparity_min = f()?,
            ("synth", "disparity_max") => self.synth.disparity_max = f()?,
            ("synth", "blur_length") => self.synth.blur_length = n()?,
            ("synth", "blur_angle") => self.synth.blur_angle = f()?,
            ("gp", "sigma_eps2") => self.sigma_eps2 = f()?,
            ("gp", "n_near") => self.n_near = n()?,
            ("gp", "n_far") => self.n_far = n()?,
            ("gp", "bank_cap") => self.bank_cap = n()?,
            ("gp", "omega") => self.omega = f()?,
            ("gp", "gp_mode") => self.gp_mode = GpMode::parse(val)?,
            ("loss", "lambda_p") => self.weights.lambda_p = f()?,
            ("loss", "lambda_p_real") => self.weights.lambda_p_real = f()?,
            ("loss", "lambda_gp") => self.weights.lambda_gp = f()?,
            ("loss", "lambda_p_g") => self.weights.lambda_p_g = f()?,
            ("loss", "lambda_gan") => self.weights.lambda_gan = f()?,
            ("net", "conv_mode") => self.conv_mode = ConvMode::parse(val)?,
            ("net", "detector_c") => self.detector_c = n()?,
            ("net", "dense_depth") => self.dense_depth = n()?,
            ("net", "depth_blocks") => self.depth_blocks = n()?,
            ("net", "restorer_c") => self.restorer_c = n()?,
            ("net", "restorer_blocks") => self.restorer_blocks = n()?,
            ("net", "t_stages") => self.t_stages = n()?,
            ("net", "win") => self.win = n()?,
            ("net", "disc_c1") => self.disc_c1 = n()?,
            ("net", "disc_c2") => self.disc_c2 = n()?,
            ("net", "disc_patch") => self.disc_patch = n()?,
            ("net", "disc_n_p") => self.disc_n_p = n()?,
            ("train", "lr") => self.lr = f()?,
            ("train", "lr_decay_factor") => self.lr_decay_factor = f()?,
            ("train", "lr_decay_every") => self.lr_decay_every = n()?,
            ("train", "patch") => self.patch = n()?,
            ("train", "angular") => self.angular = n()?,
            ("train", "depth_steps") => self.depth_steps = n()?,
            ("train", "stage1_steps") => self.stage1_steps = n()?,
            ("train", "stage2_steps") => self.stage2_steps = n()?,
            ("train", "joint_steps") => self.joint_steps = n()?,
            ("train", "save_every") => self.save_every = n()?,
            ("train", "local_disc") => self.local_disc = b()?,
            ("train", "saturating_gan") => self.saturating_gan = b()?,
            ("train", "fog_input") => self.fog_input = b()?,
            ("paths", "data_dir") => self.data_dir = val.to_string(),
            ("paths", "real_dir") => self.real_dir = val.to_string(),
            ("paths", "ckpt_dir") => self.ckpt_dir = val.to_string(),
            ("paths", "out_dir") => self.out_dir = val.to_string(),
            _ => return Err(Error::format(format!("unknown config key '{section}.{key}'"))),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let mut section = String::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let at = |e: Error| Error::format(format!("config line {}: {}", idx + 1, e));
            if let Some(inner) = line.strip_prefix('[') {
                let name = inner
                    .strip_suffix(']')
                    .ok_or_else(|| at(Error::format("unclosed section header".to_string())))?
                    .trim();
                if !SECTIONS.contains(&name) {
                    return Err(at(Error::format(format!("unknown section '[{name}]'"))));
                }
                section = name.to_string();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| at(Error::format(format!("expected 'key = value', got '{line}'"))))?;
            cfg.set(&section, k.trim(), v.trim()).map_err(at)?;
        }
        Ok(cfg)
    }

    pub fn serialize(&self) -> String {
        let mut out = String::new();
        let mut sec = |name: &str, pairs: &[(&str, String)]| {
            out.push('[');
            out.push_str(name);
            out.push_str("]\n");
            for (k, v) in pairs {
                out.push_str(k);
                out.push_str(" = ");
                out.push_str(v);
                out.push('\n');
            }
            out.push('\n');
        };
        sec(
            "run",
            &[
                ("seed", self.seed.to_string()),
                ("views_u", self.views_u.to_string()),
                ("views_v", self.views_v.to_string()),
                ("height", self.height.to_string()),
                ("width", self.width.to_string()),
            ],
        );
        let p = &self.synth;
        sec(
            "synth",
            &[
                ("alpha", fmt_f64(p.alpha)),
                ("beta", fmt_f64(p.beta)),
                ("a0", fmt_f64(p.a0)),
                ("streak_count", p.streak_count.to_string()),
                ("length_min", fmt_f64(p.length_min)),
                ("length_max", fmt_f64(p.length_max)),
                ("width_min", fmt_f64(p.width_min)),
                ("width_max", fmt_f64(p.width_max)),
                ("angle_min", fmt_f64(p.angle_min)),
                ("angle_max", fmt_f64(p.angle_max)),
                ("opacity_min", fmt_f64(p.opacity_min)),
                ("opacity_max", fmt_f64(p.opacity_max)),
                ("disparity_min", fmt_f64(p.disparity_min)),
                ("disparity_max", fmt_f64(p.disparity_max)),
                ("blur_length", p.blur_length.to_string()),
                ("blur_angle", fmt_f64(p.blur_angle)),
            ],
        );
        sec(
            "gp",
            &[
                ("sigma_eps2", fmt_f64(self.sigma_eps2)),
                ("n_near", self.n_near.to_string()),
                ("n_far", self.n_far.to_string()),
                ("bank_cap", self.bank_cap.to_string()),
                ("omega", fmt_f64(self.omega)),
                ("gp_mode", self.gp_mode.as_str().to_string()),
            ],
        );
        let w = &self.weights;
        sec(
            "loss",
            &[
                ("lambda_p", fmt_f64(w.lambda_p)),
                ("lambda_p_real", fmt_f64(w.lambda_p_real)),
                ("lambda_gp", fmt_f64(w.lambda_gp)),
                ("lambda_p_g", fmt_f64(w.lambda_p_g)),
                ("lambda_gan", fmt_f64(w.lambda_gan)),
            ],
        );
        sec(
            "net",
            &[
                ("conv_mode", self.conv_mode.as_str().to_string()),
                ("detector_c", self.detector_c.to_string()),
                ("dense_depth", self.dense_depth.to_string()),
                ("depth_blocks", self.depth_blocks.to_string()),
                ("restorer_c", self.restorer_c.to_string()),
                ("restorer_blocks", self.restorer_blocks.to_string()),
                ("t_stages", self.t_stages.to_string()),
                ("win", self.win.to_string()),
                ("disc_c1", self.disc_c1.to_string()),
                ("disc_c2", self.disc_c2.to_string()),
                ("disc_patch", self.disc_patch.to_string()),
                ("disc_n_p", self.disc_n_p.to_string()),
            ],
        );
        sec(
            "train",
            &[
                ("lr", fmt_f64(self.lr)),
                ("lr_decay_factor", fmt_f64(self.lr_decay_factor)),
                ("lr_decay_every", self.lr_decay_every.to_string()),
                ("patch", self.patch.to_string()),
                ("angular", self.angular.to_string()),
                ("depth_steps", self.depth_steps.to_string()),
                ("stage1_steps", self.stage1_steps.to_string()),
                ("stage2_steps", self.stage2_steps.to_string()),
                ("joint_steps", self.joint_steps.to_string()),
                ("save_every", self.save_every.to_string()),
                ("local_disc", self.local_disc.to_string()),
                ("saturating_gan", self.saturating_gan.to_string()),
                ("fog_input", self.fog_input.to_string()),
            ],
        );
        sec(
            "paths",
            &[
                ("data_dir", self.data_dir.clone()),
                ("real_dir", self.real_dir.clone()),
                ("ckpt_dir", self.ckpt_dir.clone()),
                ("out_dir", self.out_dir.clone()),
            ],
        );
        out
    }

    /// Reads, parses, and validates a config file.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
        let cfg = RunConfig::parse(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, self.serialize())?;
        Ok(())
    }
}
