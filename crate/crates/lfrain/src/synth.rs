//! Procedural rainy light-field synthesis: seeded streak populations shared
//! across sub-views with per-streak disparity shifts, directional motion
//! blur, exponential depth fog, and the additive composition
//! I = clamp(B + alpha*R + (1-alpha)*A0*A, 0, 1).

use crate::error::{Error, Result};
use crate::lightfield::LightField;
use crate::rng::{derive_seed, stream, uniform};

/// Degradation constants and streak population ranges.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthParams {
    /// Rain blend weight in (0,1).
    pub alpha: f64,
    /// Fog density, positive.
    pub beta: f64,
    /// Global atmospheric light in (0,1].
    pub a0: f64,
    pub streak_count: usize,
    pub length_min: f64,
    pub length_max: f64,
    pub width_min: f64,
    pub width_max: f64,
    /// Streak tilt from vertical, radians.
    pub angle_min: f64,
    pub angle_max: f64,
    pub opacity_min: f64,
    pub opacity_max: f64,
    /// Per-streak view-shift magnitude in pixels per angular step.
    pub disparity_min: f64,
    pub disparity_max: f64,
    /// Motion-blur line length in pixels (1 = no blur).
    pub blur_length: usize,
    /// Motion-blur direction, radians; 0 runs along a row.
    pub blur_angle: f64,
    pub rng_seed: u64,
}

impl Default for SynthParams {
    fn default() -> SynthParams {
        SynthParams {
            alpha: 0.6,
            beta: 1.8,
            a0: 1.0,
            streak_count: 24,
            length_min: 6.0,
            length_max: 14.0,
            width_min: 1.0,
            width_max: 2.0,
            angle_min: -0.35,
            angle_max: 0.35,
            opacity_min: 0.35,
            opacity_max: 0.9,
            disparity_min: 0.5,
            disparity_max: 2.0,
            blur_length: 5,
            blur_angle: 1.35,
            rng_seed: 7,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::domain(format!("alpha must be in (0,1), got {}", self.alpha)));
        }
        if !(self.beta > 0.0) {
            return Err(Error::domain(format!("beta must be positive, got {}", self.beta)));
        }
        if !(self.a0 > 0.0 && self.a0 <= 1.0) {
            return Err(Error::domain(format!("a0 must be in (0,1], got {}", self.a0)));
        }
        let ranges = [
            ("length", self.length_min, self.length_max),
            ("width", self.width_min, self.width_max),
            ("angle", self.angle_min, self.angle_max),
            ("opacity", self.opacity_min, self.opacity_max),
            ("disparity", self.disparity_min, self.disparity_max),
        ];
        for (name, lo, hi) in ranges {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::domain(format!("{name} range [{lo}, {hi}] is degenerate")));
            }
        }
        if self.length_min <= 0.0 || self.width_min <= 0.0 {
            return Err(Error::domain("streak length and width must be positive".to_string()));
        }
        if self.opacity_min < 0.0 || self.opacity_max > 1.0 {
            return Err(Error::domain("opacity range must stay within [0,1]".to_string()));
        }
        if self.blur_length < 1 {
            return Err(Error::domain("blur_length must be at least 1".to_string()));
        }
        Ok(())
    }
}

/// One rain streak in the reference (central) view.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Streak {
    pub cx: f64,
    pub cy: f64,
    pub length: f64,
    pub halfwidth: f64,
    /// Tilt from vertical, radians.
    pub angle: f64,
    pub opacity: f64,
    /// View shift in pixels per unit angular offset.
    pub disparity: f64,
}

/// Full per-view bundle of one synthesized scene.
#[derive(Clone, Debug)]
pub struct RainScene {
    pub clean: LightField,
    pub static_streaks: LightField,
    pub blurred_streaks: LightField,
    pub depth: LightField,
    pub transmission: LightField,
    pub fog: LightField,
    pub rainy: LightField,
    pub params: SynthParams,
}

/// Samples a streak population from the parameter ranges.
pub fn sample_streaks(params: &SynthParams, h: usize, w: usize) -> Result<Vec<Streak>> {
    params.validate()?;
    let mut rng = stream(params.rng_seed, "streaks");
    let mut out = Vec::with_capacity(params.streak_count);
    for _ in 0..params.streak_count {
        out.push(Streak {
            cx: uniform(&mut rng, 0.0, w as f64),
            cy: uniform(&mut rng, 0.0, h as f64),
            length: uniform(&mut rng, params.length_min, params.length_max),
            halfwidth: uniform(&mut rng, params.width_min, params.width_max) * 0.5,
            angle: uniform(&mut rng, params.angle_min, params.angle_max),
            opacity: uniform(&mut rng, params.opacity_min, params.opacity_max),
            disparity: uniform(&mut rng, params.disparity_min, params.disparity_max),
        });
    }
    Ok(out)
}

fn segment_distance(px: f64, py: f64, x0: f64, y0: f64, x1: f64, y1: f64) -> f64 {
    let (dx, dy) = (x1 - x0, y1 - y0);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((px - x0) * dx + (py - y0) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (x0 + t * dx, y0 + t * dy);
    ((px - qx) * (px - qx) + (py - qy) * (py - qy)).sqrt()
}

fn splat_streak(map: &mut [f64], h: usize, w: usize, s: &Streak, shift_x: f64, shift_y: f64) {
    // Angle 0 points straight down the image (falling rain).
    let (dx, dy) = (s.angle.sin(), s.angle.cos());
    let (cx, cy) = (s.cx + shift_x, s.cy + shift_y);
    let (x0, y0) = (cx - 0.5 * s.length * dx, cy - 0.5 * s.length * dy);
    let (x1, y1) = (cx + 0.5 * s.length * dx, cy + 0.5 * s.length * dy);
    let pad = s.halfwidth + 1.5;
    let ylo = (y0.min(y1) - pad).floor().max(0.0) as usize;
    let yhi = ((y0.max(y1) + pad).ceil() as usize).min(h.saturating_sub(1));
    let xlo = (x0.min(x1) - pad).floor().max(0.0) as usize;
    let xhi = ((x0.max(x1) + pad).ceil() as usize).min(w.saturating_sub(1));
    if ylo > yhi || xlo > xhi {
        return;
    }
    for y in ylo..=yhi {
        for x in xlo..=xhi {
            let d = segment_distance(x as f64, y as f64, x0, y0, x1, y1);
            // Linear one-pixel falloff at the edge keeps the profile anti-aliased.
            let cover = (s.halfwidth + 0.5 - d).clamp(0.0, 1.0);
            if cover > 0.0 {
                map[y * w + x] += s.opacity * cover;
            }
        }
    }
}

/// Rasterizes one streak population into every sub-view of an `nu` x `nv`
/// grid. Each streak shifts by disparity * (view offset from center):
/// x follows the horizontal view index, y the vertical one.
pub fn rasterize_streaks(
    streaks: &[Streak],
    nu: usize,
    nv: usize,
    h: usize,
    w: usize,
) -> Result<LightField> {
    let mut lf = LightField::zeros(nu, nv, 1, h, w)?;
    let (uc, vc) = (nu / 2, nv / 2);
    for u in 0..nu {
        for v in 0..nv {
            let view = lf.view_mut(u, v)?;
            for s in streaks {
                let shift_x = s.disparity * (v as f64 - vc as f64);
                let shift_y = s.disparity * (u as f64 - uc as f64);
                splat_streak(view, h, w, s, shift_x, shift_y);
            }
            for p in view.iter_mut() {
                *p = p.clamp(0.0, 1.0);
            }
        }
    }
    Ok(lf)
}

/// Builds the normalized 1D line kernel: `length` equal taps spaced one
/// pixel apart along `angle` (0 = along a row), bilinearly splatted onto a
/// pixel grid. Returns (kernel, half_h, half_w); weights sum to 1.
pub fn blur_kernel(length: usize, angle: f64) -> Result<(Vec<f64>, usize, usize)> {
    if length < 1 {
        return Err(Error::domain("blur_length must be at least 1".to_string()));
    }
    let (dx, dy) = (angle.cos(), angle.sin());
    let reach = 0.5 * (length as f64 - 1.0);
    let half = (reach * dx.abs().max(dy.abs())).ceil() as usize + 1;
    let (kh, kw) = (2 * half + 1, 2 * half + 1);
    let mut k = vec![0.0; kh * kw];
    let wgt = 1.0 / length as f64;
    for i in 0..length {
        let t = i as f64 - reach;
        let (px, py) = (t * dx + half as f64, t * dy + half as f64);
        let (x0, y0) = (px.floor(), py.floor());
        let (fx, fy) = (px - x0, py - y0);
        let (x0, y0) = (x0 as usize, y0 as usize);
        for (oy, ox, bw) in [
            (0, 0, (1.0 - fx) * (1.0 - fy)),
            (0, 1, fx * (1.0 - fy)),
            (1, 0, (1.0 - fx) * fy),
            (1, 1, fx * fy),
        ] {
            if bw > 0.0 {
                k[(y0 + oy) * kw + (x0 + ox)] += wgt * bw;
            }
        }
    }
    Ok((k, half, half))
}

/// Convolves every view of a 1-channel field with the normalized line
/// kernel (zero padding). `blur_length` = 1 is an exact identity.
pub fn motion_blur(streaks: &LightField, blur_length: usize, blur_angle: f64) -> Result<LightField> {
    if streaks.c != 1 {
        return Err(Error::shape(format!(
            "motion blur expects a 1-channel layer, got {} channels",
            streaks.c
        )));
    }
    if blur_length == 1 {
        return Ok(streaks.clone());
    }
    let (k, half_h, half_w) = blur_kernel(blur_length, blur_angle)?;
    let kw = 2 * half_w + 1;
    let (h, w) = (streaks.h, streaks.w);
    let mut out = LightField::zeros(streaks.nu, streaks.nv, 1, h, w)?;
    for u in 0..streaks.nu {
        for v in 0..streaks.nv {
            let src = streaks.view(u, v)?;
            let dst = out.view_mut(u, v)?;
            for (ti, &tw) in k.iter().enumerate() {
                if tw == 0.0 {
                    continue;
                }
                let oy = (ti / kw) as i64 - half_h as i64;
                let ox = (ti % kw) as i64 - half_w as i64;
                for y in 0..h as i64 {
                    let sy = y - oy;
                    if sy < 0 || sy >= h as i64 {
                        continue;
                    }
                    for x in 0..w as i64 {
                        let sx = x - ox;
                        if sx >= 0 && sx < w as i64 {
                            dst[y as usize * w + x as usize] += tw * src[sy as usize * w + sx as usize];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// T = exp(-beta * D), A = 1 - T per sample. Depth must be non-negative.
pub fn depth_to_fog(depth: &LightField, beta: f64) -> Result<(LightField, LightField)> {
    if !(beta > 0.0) {
        return Err(Error::domain(format!("beta must be positive, got {beta}")));
    }
    if let Some(bad) = depth.data().iter().find(|d| **d < 0.0) {
        return Err(Error::domain(format!("negative depth sample {bad}")));
    }
    let t_vals: Vec<f64> = depth.data().iter().map(|d| (-beta * d).exp()).collect();
    let a_vals: Vec<f64> = t_vals.iter().map(|t| 1.0 - t).collect();
    let t = LightField::new(depth.nu, depth.nv, depth.c, depth.h, depth.w, t_vals)?;
    let a = LightField::new(depth.nu, depth.nv, depth.c, depth.h, depth.w, a_vals)?;
    Ok((t, a))
}

/// I = clamp(B + alpha*R + (1-alpha)*A0*A, 0, 1); the 1-channel rain and
/// fog layers broadcast across the color channels of B.
pub fn compose(clean: &LightField, rain: &LightField, fog: &LightField, params: &SynthParams) -> Result<LightField> {
    params.validate()?;
    let aligned = |lf: &LightField| {
        lf.nu == clean.nu && lf.nv == clean.nv && lf.h == clean.h && lf.w == clean.w && lf.c == 1
    };
    if !aligned(rain) || !aligned(fog) {
        return Err(Error::shape(
            "rain and fog layers must be 1-channel and match the clean field extents".to_string(),
        ));
    }
    let mut out = LightField::zeros(clean.nu, clean.nv, clean.c, clean.h, clean.w)?;
    let plane = clean.h * clean.w;
    for u in 0..clean.nu {
        for v in 0..clean.nv {
            let b = clean.view(u, v)?;
            let r = rain.view(u, v)?;
            let a = fog.view(u, v)?;
            let dst = out.view_mut(u, v)?;
            for c in 0..clean.c {
                for i in 0..plane {
                    let val = b[c * plane + i]
                        + params.alpha * r[i]
                        + (1.0 - params.alpha) * params.a0 * a[i];
                    dst[c * plane + i] = val.clamp(0.0, 1.0);
                }
            }
        }
    }
    Ok(out)
}

/// Smooth 3-channel background: a few seeded low-frequency waves per
/// channel, sampled with a small global parallax shift per view.
pub fn gen_clean(nu: usize, nv: usize, h: usize, w: usize, seed: u64) -> Result<LightField> {
    let mut rng = stream(seed, "clean");
    let mut waves = Vec::new();
    for _ in 0..3 {
        let mut ch = Vec::new();
        for _ in 0..3 {
            ch.push((
                uniform(&mut rng, 0.5, 2.5) * std::f64::consts::PI / w.max(1) as f64,
                uniform(&mut rng, 0.5, 2.5) * std::f64::consts::PI / h.max(1) as f64,
                uniform(&mut rng, 0.0, std::f64::consts::TAU),
                uniform(&mut rng, 0.08, 0.22),
            ));
        }
        waves.push(ch);
    }
    let base: Vec<f64> = (0..3).map(|_| uniform(&mut rng, 0.3, 0.6)).collect();
    let bg_disp = uniform(&mut rng, 0.2, 0.6);
    let (uc, vc) = (nu / 2, nv / 2);
    let mut lf = LightField::zeros(nu, nv, 3, h, w)?;
    for u in 0..nu {
        for v in 0..nv {
            let sx = bg_disp * (v as f64 - vc as f64);
            let sy = bg_disp * (u as f64 - uc as f64);
            let view = lf.view_mut(u, v)?;
            for c in 0..3 {
                for y in 0..h {
                    for x in 0..w {
                        let (px, py) = (x as f64 + sx, y as f64 + sy);
                        let mut val = base[c];
                        for &(fx, fy, ph, amp) in &waves[c] {
                            val += amp * (fx * px + fy * py + ph).sin();
                        }
                        view[(c * h + y) * w + x] = val.clamp(0.0, 1.0);
                    }
                }
            }
        }
    }
    Ok(lf)
}

/// Smooth normalized depth: a vertical ramp plus seeded low-frequency
/// waves, rescaled to [0,1], identical across views.
pub fn gen_depth(nu: usize, nv: usize, h: usize, w: usize, seed: u64) -> Result<LightField> {
    let mut rng = stream(seed, "depth");
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                uniform(&mut rng, 0.5, 2.0) * std::f64::consts::PI / w.max(1) as f64,
                uniform(&mut rng, 0.5, 2.0) * std::f64::consts::PI / h.max(1) as f64,
                uniform(&mut rng, 0.0, std::f64::consts::TAU),
                uniform(&mut rng, 0.05, 0.2),
            )
        })
        .collect();
    let mut plane = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut val = if h > 1 { y as f64 / (h - 1) as f64 } else { 0.0 };
            for &(fx, fy, ph, amp) in &waves {
                val += amp * (fx * x as f64 + fy * y as f64 + ph).sin();
            }
            plane[y * w + x] = val;
        }
    }
    let lo = plane.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = plane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    for p in plane.iter_mut() {
        *p = (*p - lo) / span;
    }
    let mut lf = LightField::zeros(nu, nv, 1, h, w)?;
    for u in 0..nu {
        for v in 0..nv {
            lf.view_mut(u, v)?.copy_from_slice(&plane);
        }
    }
    Ok(lf)
}

/// Runs the full degradation chain and keeps every intermediate.
pub fn synth_scene(params: &SynthParams, clean: &LightField, depth: &LightField) -> Result<RainScene> {
    params.validate()?;
    if depth.nu != clean.nu || depth.nv != clean.nv || depth.h != clean.h || depth.w != clean.w {
        return Err(Error::shape("clean and depth sources must share extents".to_string()));
    }
    if depth.c != 1 || clean.c != 3 {
        return Err(Error::shape(format!(
            "expected 3-channel clean and 1-channel depth, got {} and {}",
            clean.c, depth.c
        )));
    }
    let streaks = sample_streaks(params, clean.h, clean.w)?;
    let static_streaks = rasterize_streaks(&streaks, clean.nu, clean.nv, clean.h, clean.w)?;
    let blurred = motion_blur(&static_streaks, params.blur_length, params.blur_angle)?;
    let (transmission, fog) = depth_to_fog(depth, params.beta)?;
    let rainy = compose(clean, &blurred, &fog, params)?;
    Ok(RainScene {
        clean: clean.clone(),
        static_streaks,
        blurred_streaks: blurred,
        depth: depth.clone(),
        transmission,
        fog,
        rainy,
        params: params.clone(),
    })
}

/// Generates one procedural scene from a master seed.
pub fn gen_scene(params: &SynthParams, nu: usize, nv: usize, h: usize, w: usize) -> Result<RainScene> {
    let clean = gen_clean(nu, nv, h, w, derive_seed(params.rng_seed, "scene-clean"))?;
    let depth = gen_depth(nu, nv, h, w, derive_seed(params.rng_seed, "scene-depth"))?;
    synth_scene(params, &clean, &depth)
}

pub(crate) fn fmt_f64(v: f64) -> String {
    // Round-trippable decimal form for the manifest.
    let s = format!("{v}");
    if s.parse::<f64>() == Ok(v) {
        s
    } else {
        format!("{v:e}")
    }
}

/// Serializes params as sorted key=value lines.
pub fn params_to_manifest(p: &SynthParams) -> String {
    let mut out = String::new();
    let pairs: Vec<(&str, String)> = vec![
        ("alpha", fmt_f64(p.alpha)),
        ("angle_max", fmt_f64(p.angle_max)),
        ("angle_min", fmt_f64(p.angle_min)),
        ("a0", fmt_f64(p.a0)),
        ("beta", fmt_f64(p.beta)),
        ("blur_angle", fmt_f64(p.blur_angle)),
        ("blur_length", p.blur_length.to_string()),
        ("disparity_max", fmt_f64(p.disparity_max)),
        ("disparity_min", fmt_f64(p.disparity_min)),
        ("length_max", fmt_f64(p.length_max)),
        ("length_min", fmt_f64(p.length_min)),
        ("opacity_max", fmt_f64(p.opacity_max)),
        ("opacity_min", fmt_f64(p.opacity_min)),
        ("rng_seed", p.rng_seed.to_string()),
        ("streak_count", p.streak_count.to_string()),
        ("width_max", fmt_f64(p.width_max)),
        ("width_min", fmt_f64(p.width_min)),
    ];
    for (k, v) in pairs {
        out.push_str(k);
        out.push('=');
        out.push_str(&v);
        out.push('\n');
    }
    out
}

/// Parses a manifest produced by [`params_to_manifest`]. Unknown keys are
/// rejected so typos fail loudly.
pub fn params_from_manifest(text: &str) -> Result<SynthParams> {
    let mut p = SynthParams::default();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, val) = line
            .split_once('=')
            .ok_or_else(|| Error::format(format!("manifest line {}: missing '='", ln + 1)))?;
        let (key, val) = (key.trim(), val.trim());
        let bad = |e: std::num::ParseFloatError| Error::format(format!("manifest {key}: {e}"));
        let bad_int = |e: std::num::ParseIntError| Error::format(format!("manifest {key}: {e}"));
        match key {
            "alpha" => p.alpha = val.parse().map_err(bad)?,
            "beta" => p.beta = val.parse().map_err(bad)?,
            "a0" => p.a0 = val.parse().map_err(bad)?,
            "streak_count" => p.streak_count = val.parse().map_err(bad_int)?,
            "length_min" => p.length_min = val.parse().map_err(bad)?,
            "length_max" => p.length_max = val.parse().map_err(bad)?,
            "width_min" => p.width_min = val.parse().map_err(bad)?,
            "width_max" => p.width_max = val.parse().map_err(bad)?,
            "angle_min" => p.angle_min = val.parse().map_err(bad)?,
            "angle_max" => p.angle_max = val.parse().map_err(bad)?,
            "opacity_min" => p.opacity_min = val.parse().map_err(bad)?,
            "opacity_max" => p.opacity_max = val.parse().map_err(bad)?,
            "disparity_min" => p.disparity_min = val.parse().map_err(bad)?,
            "disparity_max" => p.disparity_max = val.parse().map_err(bad)?,
            "blur_length" => p.blur_length = val.parse().map_err(bad_int)?,
            "blur_angle" => p.blur_angle = val.parse().map_err(bad)?,
            "rng_seed" => p.rng_seed = val.parse().map_err(bad_int)?,
            other => return Err(Error::format(format!("manifest: unknown key '{other}'"))),
        }
    }
    p.validate()?;
    Ok(p)
}
