//! Command implementations behind the `lfrain` binary: dataset synthesis,
//! the resumable staged training schedule, whole-field restoration dumps,
//! view-wise evaluation, the ablation sweep, and the regression self-check.
//! Every command is a deterministic function of (config, input dirs, seed);
//! rerunning one with the same inputs reproduces its outputs byte for byte.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::blocks::ConvMode;
use crate::config::{GpMode, RunConfig};
use crate::depth::{fog_tensor, DepthNet};
use crate::detector::{train_stage1, train_stage2, RainDetector};
use crate::error::{Error, Result};
use crate::gp::{gp_posterior, gp_variances, reference, FeatureBank, GpConfig, VAR_EPS};
use crate::lightfield::{
    from_epi_units, psnr, read_lfi, ssim, write_lfi, EpiUnitStack, LightField, PatchSpec,
};
use crate::params::ParamStore;
use crate::restorer::{train_joint, Restoration, Restorer};
use crate::rng::{derive_seed, stream, uniform};
use crate::synth::{
    depth_to_fog, fmt_f64, gen_scene, params_from_manifest, params_to_manifest, RainScene,
};
use crate::tensor::DiffTensor;

// ---------------------------------------------------------------------------
// Scene persistence

/// Writes one scene bundle: `input/ gt/ rain/ depth/ fog/` view grids plus
/// the synthesis manifest.
pub fn save_scene(scene: &RainScene, dir: &Path) -> Result<()> {
    write_lfi(&scene.rainy, &dir.join("input"))?;
    write_lfi(&scene.clean, &dir.join("gt"))?;
    write_lfi(&scene.blurred_streaks, &dir.join("rain"))?;
    write_lfi(&scene.depth, &dir.join("depth"))?;
    write_lfi(&scene.fog, &dir.join("fog"))?;
    std::fs::write(dir.join("manifest.txt"), params_to_manifest(&scene.params))?;
    Ok(())
}

/// Reads a scene bundle back. The pre-blur streak layer is not persisted
/// (nothing downstream consumes it), so it loads as zeros; transmission is
/// recomputed from the stored depth.
pub fn load_scene(dir: &Path) -> Result<RainScene> {
    let manifest = std::fs::read_to_string(dir.join("manifest.txt"))
        .map_err(|e| Error::format(format!("{}: {e}", dir.join("manifest.txt").display())))?;
    let params = params_from_manifest(&manifest)?;
    let rainy = read_lfi(&dir.join("input"))?;
    let clean = read_lfi(&dir.join("gt"))?;
    let blurred_streaks = read_lfi(&dir.join("rain"))?;
    let depth = read_lfi(&dir.join("depth"))?;
    let fog = read_lfi(&dir.join("fog"))?;
    for (name, lf, c) in [
        ("input", &rainy, 3),
        ("gt", &clean, 3),
        ("rain", &blurred_streaks, 1),
        ("depth", &depth, 1),
        ("fog", &fog, 1),
    ] {
        if lf.c != c {
            return Err(Error::format(format!(
                "{}: expected {c} channels, got {}",
                dir.join(name).display(),
                lf.c
            )));
        }
        if (lf.nu, lf.nv, lf.h, lf.w) != (rainy.nu, rainy.nv, rainy.h, rainy.w) {
            return Err(Error::format(format!(
                "{}: view grid {}x{}x{}x{} disagrees with input",
                dir.join(name).display(),
                lf.nu,
                lf.nv,
                lf.h,
                lf.w
            )));
        }
    }
    let (transmission, _) = depth_to_fog(&depth, params.beta)?;
    let static_streaks = LightField::zeros(rainy.nu, rainy.nv, 1, rainy.h, rainy.w)?;
    Ok(RainScene { clean, static_streaks, blurred_streaks, depth, transmission, fog, rainy, params })
}

/// Loads every scene listed in `dir/manifest.txt` (or, absent a manifest,
/// every `scene_*` subdirectory in name order).
pub fn load_scenes(dir: &Path) -> Result<Vec<RainScene>> {
    if !dir.is_dir() {
        return Err(Error::contract(format!(
            "training data directory '{}' not found; run the synth command first",
            dir.display()
        )));
    }
    let manifest = dir.join("manifest.txt");
    let names: Vec<String> = if manifest.is_file() {
        std::fs::read_to_string(&manifest)?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(str::to_string)
            .collect()
    } else {
        let mut names: Vec<String> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_dir())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|n| n.starts_with("scene_"))
            .collect();
        names.sort();
        names
    };
    if names.is_empty() {
        return Err(Error::contract(format!(
            "no scenes found under '{}'; run the synth command first",
            dir.display()
        )));
    }
    names.iter().map(|n| load_scene(&dir.join(n))).collect()
}

/// Loads unpaired rainy fields for the unsupervised phase: each subdirectory
/// of `dir` is a view grid, or a bundle whose `input/` holds one.
pub fn load_real_fields(dir: &Path) -> Result<Vec<LightField>> {
    if !dir.is_dir() {
        return Err(Error::contract(format!(
            "real-domain directory '{}' not found",
            dir.display()
        )));
    }
    let mut subs: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    subs.sort();
    let fields: Vec<LightField> = subs
        .iter()
        .map(|p| {
            let inner = p.join("input");
            read_lfi(if inner.is_dir() { &inner } else { p })
        })
        .collect::<Result<_>>()?;
    if fields.is_empty() {
        return Err(Error::contract(format!(
            "no view grids found under '{}'",
            dir.display()
        )));
    }
    Ok(fields)
}

// ---------------------------------------------------------------------------
// synth

/// Generates `count` scenes into `out/scene_{i:04}` and writes the dataset
/// manifest. `count = 0` still produces the (empty) manifest.
pub fn cmd_synth(cfg: &RunConfig, count: usize, out: &Path) -> Result<Vec<String>> {
    cfg.validate()?;
    std::fs::create_dir_all(out)?;
    let mut names = Vec::with_capacity(count);
    for i in 0..count {
        let params = cfg.scene_params(i);
        let scene = gen_scene(&params, cfg.views_u, cfg.views_v, cfg.height, cfg.width)?;
        let name = format!("scene_{i:04}");
        save_scene(&scene, &out.join(&name))?;
        names.push(name);
    }
    let mut manifest = names.join("\n");
    if !names.is_empty() {
        manifest.push('\n');
    }
    std::fs::write(out.join("manifest.txt"), manifest)?;
    Ok(names)
}

// ---------------------------------------------------------------------------
// train

/// What one `train` invocation did for a single stage.
#[derive(Clone, Debug)]
pub struct StageRun {
    pub stage: &'static str,
    pub ran: usize,
    pub done: usize,
    pub total: usize,
    pub skipped: Option<String>,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub stages: Vec<StageRun>,
    pub checkpoint: PathBuf,
    pub loss_csv: PathBuf,
}

const LOSS_HEADER: &str = "step,stage,L_s,L_r,L_g,L_gan,L_total";

fn append_loss_rows(
    path: &Path,
    stage: &str,
    start: usize,
    rows: &[[Option<f64>; 5]],
) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut text = if path.is_file() {
        String::new()
    } else {
        format!("{LOSS_HEADER}\n")
    };
    for (i, cols) in rows.iter().enumerate() {
        text.push_str(&format!("{},{stage}", start + i));
        for c in cols {
            text.push(',');
            if let Some(v) = c {
                text.push_str(&fmt_f64(*v));
            }
        }
        text.push('\n');
    }
    use std::io::Write;
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    f.write_all(text.as_bytes())?;
    Ok(())
}

fn get_progress(store: &ParamStore, stage: &str) -> usize {
    store
        .get(&format!("meta.progress.{stage}"))
        .map(|p| p.vals[0] as usize)
        .unwrap_or(0)
}

fn set_progress(store: &mut ParamStore, stage: &str, done: usize) -> Result<()> {
    let name = format!("meta.progress.{stage}");
    if store.contains(&name) {
        store.set_vals(&name, vec![done as f64])
    } else {
        store.insert(&name, vec![1], vec![done as f64])
    }
}

fn bank_paths(ckpt_dir: &Path) -> [PathBuf; 3] {
    [1, 2, 3].map(|k| ckpt_dir.join(format!("bank_{k}.bin")))
}

fn load_banks(cfg: &RunConfig, ckpt_dir: &Path) -> Result<[FeatureBank; 3]> {
    let d = 3 * cfg.patch * cfg.patch;
    let paths = bank_paths(ckpt_dir);
    let mut out = Vec::with_capacity(3);
    for p in &paths {
        out.push(if p.is_file() {
            FeatureBank::load(p, cfg.bank_cap)?
        } else {
            FeatureBank::new(d, cfg.bank_cap)?
        });
    }
    Ok(out.try_into().expect("three banks"))
}

fn save_banks(banks: &[FeatureBank; 3], ckpt_dir: &Path) -> Result<()> {
    for (bank, p) in banks.iter().zip(bank_paths(ckpt_dir).iter()) {
        bank.save(p)?;
    }
    Ok(())
}

/// Runs the stage schedule depth -> stage1 -> stage2 -> joint, checkpointing
/// every `save_every` steps (0 = at stage boundaries) and resuming from
/// whatever `meta.progress.*` records. The unsupervised stage is skipped when
/// no real-domain data is configured or the regression mode is off.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let scenes = load_scenes(Path::new(&cfg.data_dir))?;
    let ckpt_dir = PathBuf::from(&cfg.ckpt_dir);
    std::fs::create_dir_all(&ckpt_dir)?;
    let ckpt = ckpt_dir.join("model.ck");
    let csv = ckpt_dir.join("loss.csv");
    let mut store = if ckpt.is_file() { ParamStore::load(&ckpt)? } else { ParamStore::new() };
    let mut banks = load_banks(cfg, &ckpt_dir)?;
    let mut stages = Vec::new();

    let chunk_of = |done: usize, total: usize| {
        if cfg.save_every == 0 {
            total - done
        } else {
            cfg.save_every.min(total - done)
        }
    };

    // Depth pretraining; its weights stay frozen from here on.
    {
        let total = cfg.depth_steps;
        let mut done = get_progress(&store, "depth");
        let before = done;
        while done < total {
            let n = chunk_of(done, total);
            let sc = cfg.stage_cfg("depth", n, done);
            let hist = crate::depth::train_depth(&mut store, &scenes, &sc, &cfg.depth_cfg())?;
            let rows: Vec<[Option<f64>; 5]> =
                hist.iter().map(|&l| [None, None, None, None, Some(l)]).collect();
            append_loss_rows(&csv, "depth", done, &rows)?;
            done += n;
            set_progress(&mut store, "depth", done)?;
            if done == total {
                store.remove_prefix("opt.");
            }
            store.save(&ckpt)?;
        }
        stages.push(StageRun { stage: "depth", ran: done - before, done, total, skipped: None });
    }

    // Supervised detector stage; fills the per-scale feature banks.
    {
        let total = cfg.stage1_steps;
        let mut done = get_progress(&store, "stage1");
        let before = done;
        while done < total {
            let n = chunk_of(done, total);
            let sc = cfg.stage_cfg("stage1", n, done);
            let hist = train_stage1(&mut store, &scenes, &mut banks, &sc)?;
            let rows: Vec<[Option<f64>; 5]> =
                hist.iter().map(|&l| [Some(l), None, None, None, Some(l)]).collect();
            append_loss_rows(&csv, "stage1", done, &rows)?;
            done += n;
            set_progress(&mut store, "stage1", done)?;
            if done == total {
                store.remove_prefix("opt.");
            }
            store.save(&ckpt)?;
            save_banks(&banks, &ckpt_dir)?;
        }
        stages.push(StageRun { stage: "stage1", ran: done - before, done, total, skipped: None });
    }

    // Unsupervised adaptation on unpaired real fields, if configured.
    {
        let total = cfg.stage2_steps;
        let skip = if cfg.gp_mode == GpMode::Off {
            Some("regression mode is off".to_string())
        } else if cfg.real_dir.is_empty() {
            Some("no real-domain data configured".to_string())
        } else {
            None
        };
        match skip {
            Some(reason) => {
                stages.push(StageRun {
                    stage: "stage2",
                    ran: 0,
                    done: 0,
                    total,
                    skipped: Some(reason),
                });
            }
            None => {
                let reals = load_real_fields(Path::new(&cfg.real_dir))?;
                let mut done = get_progress(&store, "stage2");
                let before = done;
                while done < total {
                    let n = chunk_of(done, total);
                    let sc = cfg.stage2_cfg(n, done);
                    let hist = train_stage2(&mut store, &reals, &banks, &sc)?;
                    let rows: Vec<[Option<f64>; 5]> =
                        hist.iter().map(|&l| [None, Some(l), None, None, Some(l)]).collect();
                    append_loss_rows(&csv, "stage2", done, &rows)?;
                    done += n;
                    set_progress(&mut store, "stage2", done)?;
                    if done == total {
                        store.remove_prefix("opt.");
                    }
                    store.save(&ckpt)?;
                }
                stages.push(StageRun {
                    stage: "stage2",
                    ran: done - before,
                    done,
                    total,
                    skipped: None,
                });
            }
        }
    }

    // Joint adversarial refinement of detector + restorer.
    {
        let total = cfg.joint_steps;
        let mut done = get_progress(&store, "joint");
        let before = done;
        while done < total {
            let n = chunk_of(done, total);
            let jc = cfg.joint_cfg(n, done);
            let hist = train_joint(&mut store, &scenes, &jc)?;
            let rows: Vec<[Option<f64>; 5]> = hist
                .iter()
                .map(|s| [Some(s.l_s), None, Some(s.l_g), Some(s.l_gan), Some(s.l_total)])
                .collect();
            append_loss_rows(&csv, "joint", done, &rows)?;
            done += n;
            set_progress(&mut store, "joint", done)?;
            if done == total {
                store.remove_prefix("opt.");
            }
            store.save(&ckpt)?;
        }
        stages.push(StageRun { stage: "joint", ran: done - before, done, total, skipped: None });
    }

    store.save(&ckpt)?;
    save_banks(&banks, &ckpt_dir)?;
    Ok(TrainReport { stages, checkpoint: ckpt, loss_csv: csv })
}

// ---------------------------------------------------------------------------
// derain

/// Full restoration products of one field.
pub struct DerainProducts {
    pub derained: LightField,
    pub rain: LightField,
    pub depth: LightField,
    pub fog: LightField,
}

/// Errors unless every inference tensor implied by `cfg` exists in `store`
/// with matching dims; names the first offender.
fn check_widths(store: &ParamStore, cfg: &RunConfig) -> Result<()> {
    let mut expect = ParamStore::new();
    RainDetector::init(&mut expect, &cfg.detector_cfg(), 0)?;
    DepthNet::init(&mut expect, &cfg.depth_cfg(), 0)?;
    Restorer::init(&mut expect, &cfg.restorer_cfg(), 0)?;
    for name in expect.names().map(str::to_string).collect::<Vec<_>>() {
        let want = &expect.get(&name)?.dims;
        let got = match store.get(&name) {
            Ok(p) => &p.dims,
            Err(_) => {
                return Err(Error::contract(format!(
                    "checkpoint is missing tensor '{name}' required by the configured widths"
                )))
            }
        };
        if got != want {
            return Err(Error::contract(format!(
                "checkpoint tensor '{name}' has shape {got:?} but the config implies {want:?}"
            )));
        }
    }
    Ok(())
}

/// Untracked full-field generator pass: detect rain, estimate depth, derive
/// fog (zeroed under the ablation), restore.
pub fn run_generator(store: &ParamStore, cfg: &RunConfig, lf: &LightField) -> Result<DerainProducts> {
    let det = RainDetector::new(cfg.detector_cfg())?;
    let dep = DepthNet::new(cfg.depth_cfg())?;
    let rest = Restorer::new(cfg.restorer_cfg())?;
    let ctx = crate::params::ParamCtx::frozen(store);
    let x = crate::detector::stack_tensor(lf, &PatchSpec::full(lf), "derain")?;
    let detection = det.detect(&ctx, &x)?;
    let dmap = dep.estimate(&ctx, &x, &detection.rain)?;
    let fog = if cfg.fog_input {
        fog_tensor(&dmap, cfg.synth.beta)?
    } else {
        DiffTensor::from_vec(vec![0.0; dmap.values().len()], dmap.shape().dims())?
    };
    let restored: Restoration = rest.restore(&ctx, &x, &detection.rain, &fog)?;
    let to_lf = |t: &DiffTensor, source: &str| -> Result<LightField> {
        from_epi_units(&EpiUnitStack::from_tensor(t, source, (0, 0, 0, 0))?)
    };
    Ok(DerainProducts {
        derained: to_lf(&restored.output, "derained")?,
        rain: to_lf(&detection.rain, "rain")?,
        depth: to_lf(&dmap, "depth")?,
        fog: to_lf(&fog, "fog")?,
    })
}

/// Restores the field under `scene` (a view grid, or a bundle with `input/`)
/// and writes `derained/ rain/ depth/ fog/` plus a scale manifest.
pub fn cmd_derain(
    cfg: &RunConfig,
    checkpoint: &Path,
    scene: &Path,
    out: &Path,
) -> Result<DerainProducts> {
    cfg.validate()?;
    if !checkpoint.is_file() {
        return Err(Error::contract(format!(
            "checkpoint '{}' not found",
            checkpoint.display()
        )));
    }
    let store = ParamStore::load(checkpoint)?;
    check_widths(&store, cfg)?;
    let inner = scene.join("input");
    let lf = read_lfi(if inner.is_dir() { &inner } else { scene })?;
    let prod = run_generator(&store, cfg, &lf)?;
    write_lfi(&prod.derained, &out.join("derained"))?;
    write_lfi(&prod.rain, &out.join("rain"))?;
    // Estimated depth is unbounded above; store it normalized and record
    // the scale so the values can be recovered.
    let depth_scale = prod.depth.data().iter().cloned().fold(0.0f64, f64::max).max(1e-12);
    let scaled = LightField::new(
        prod.depth.nu,
        prod.depth.nv,
        1,
        prod.depth.h,
        prod.depth.w,
        prod.depth.data().iter().map(|v| v / depth_scale).collect(),
    )?;
    write_lfi(&scaled, &out.join("depth"))?;
    write_lfi(&prod.fog, &out.join("fog"))?;
    std::fs::write(
        out.join("manifest.txt"),
        format!(
            "beta = {}\ndepth_scale = {}\nfog_input = {}\n",
            fmt_f64(cfg.synth.beta),
            fmt_f64(depth_scale),
            cfg.fog_input
        ),
    )?;
    Ok(prod)
}

// ---------------------------------------------------------------------------
// eval

#[derive(Clone, Debug)]
pub struct EvalSummary {
    pub pairs: usize,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

fn is_view_dir(p: &Path) -> bool {
    p.join("view_0_0.png").is_file()
}

/// Pairs of (scene name, gt view dir, test view dir) implied by two paths:
/// either both are view grids, or both are roots with matching subdirectories.
fn eval_pairs(gt: &Path, test: &Path) -> Result<Vec<(String, PathBuf, PathBuf)>> {
    for (label, p) in [("gt", gt), ("test", test)] {
        if !p.is_dir() {
            return Err(Error::contract(format!(
                "{label} path '{}' is not a directory",
                p.display()
            )));
        }
    }
    match (is_view_dir(gt), is_view_dir(test)) {
        (true, true) => {
            let name = gt
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| "pair".to_string());
            Ok(vec![(name, gt.to_path_buf(), test.to_path_buf())])
        }
        (false, false) => {
            let list = |root: &Path| -> Result<Vec<String>> {
                let mut names: Vec<String> = std::fs::read_dir(root)?
                    .filter_map(|e| e.ok())
                    .filter(|e| e.path().is_dir())
                    .map(|e| e.file_name().to_string_lossy().into_owned())
                    .collect();
                names.sort();
                Ok(names)
            };
            let gn = list(gt)?;
            let tn = list(test)?;
            if gn.is_empty() {
                return Err(Error::contract(format!(
                    "no evaluation pairs: '{}' holds no view grids or scene directories",
                    gt.display()
                )));
            }
            for name in &gn {
                if !tn.contains(name) {
                    return Err(Error::contract(format!(
                        "scene '{name}' exists under '{}' but not under '{}'",
                        gt.display(),
                        test.display()
                    )));
                }
            }
            for name in &tn {
                if !gn.contains(name) {
                    return Err(Error::contract(format!(
                        "scene '{name}' exists under '{}' but not under '{}'",
                        test.display(),
                        gt.display()
                    )));
                }
            }
            Ok(gn.into_iter().map(|n| (n.clone(), gt.join(&n), test.join(&n))).collect())
        }
        _ => Err(Error::contract(
            "gt and test must both be view directories or both be scene roots".to_string(),
        )),
    }
}

/// Compares two fields (or matching scene roots) view by view and writes the
/// metrics table: one row per view, `center` and `mean` rows per scene, and
/// an `all,mean` row averaging the per-scene means.
pub fn cmd_eval(gt: &Path, test: &Path, out_csv: &Path) -> Result<EvalSummary> {
    let pairs = eval_pairs(gt, test)?;
    let mut text = String::from("scene,view_u,view_v,psnr_db,ssim\n");
    let mut scene_means = Vec::new();
    for (name, gdir, tdir) in &pairs {
        let ga = read_lfi(gdir)?;
        let ta = read_lfi(tdir)?;
        if (ga.nu, ga.nv) != (ta.nu, ta.nv) {
            return Err(Error::contract(format!(
                "scene '{name}': view grids differ, {}x{} vs {}x{}",
                ga.nu, ga.nv, ta.nu, ta.nv
            )));
        }
        if (ga.c, ga.h, ga.w) != (ta.c, ta.h, ta.w) {
            return Err(Error::contract(format!(
                "scene '{name}': view shapes differ, {}x{}x{} vs {}x{}x{}",
                ga.c, ga.h, ga.w, ta.c, ta.h, ta.w
            )));
        }
        let (mut sp, mut ss) = (0.0, 0.0);
        let mut center = (0.0, 0.0);
        for u in 0..ga.nu {
            for v in 0..ga.nv {
                let p = psnr(ga.view(u, v)?, ta.view(u, v)?, 1.0)?;
                let s = ssim(ga.view(u, v)?, ta.view(u, v)?, ga.c, ga.h, ga.w, 1.0)?;
                text.push_str(&format!("{name},{u},{v},{p:.6},{s:.6}\n"));
                sp += p;
                ss += s;
                if (u, v) == ga.center() {
                    center = (p, s);
                }
            }
        }
        let n = (ga.nu * ga.nv) as f64;
        text.push_str(&format!("{name},center,center,{:.6},{:.6}\n", center.0, center.1));
        text.push_str(&format!("{name},mean,mean,{:.6},{:.6}\n", sp / n, ss / n));
        scene_means.push((sp / n, ss / n));
    }
    let k = scene_means.len() as f64;
    let mp = scene_means.iter().map(|m| m.0).sum::<f64>() / k;
    let ms = scene_means.iter().map(|m| m.1).sum::<f64>() / k;
    text.push_str(&format!("all,mean,mean,{mp:.6},{ms:.6}\n"));
    if let Some(parent) = out_csv.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(out_csv, text)?;
    Ok(EvalSummary { pairs: pairs.len(), mean_psnr: mp, mean_ssim: ms })
}

// ---------------------------------------------------------------------------
// ablate

#[derive(Clone, Debug)]
pub struct AblateRow {
    pub group: &'static str,
    pub setting: String,
    pub psnr_db: Option<f64>,
    pub ssim: Option<f64>,
    pub final_loss: Option<f64>,
}

fn center_view_metrics(a: &LightField, b: &LightField) -> Result<(f64, f64)> {
    let (cu, cv) = a.center();
    Ok((
        psnr(a.view(cu, cv)?, b.view(cu, cv)?, 1.0)?,
        ssim(a.view(cu, cv)?, b.view(cu, cv)?, a.c, a.h, a.w, 1.0)?,
    ))
}

/// Trains the full schedule once per convolution mode and measures held-out
/// center-view quality, then reruns the unsupervised stage once per
/// regression mode from a shared supervised warmup and records its final
/// loss. The last scene of the dataset is the held-out one.
pub fn cmd_ablate(cfg: &RunConfig, out_csv: &Path) -> Result<Vec<AblateRow>> {
    cfg.validate()?;
    let scenes = load_scenes(Path::new(&cfg.data_dir))?;
    if scenes.len() < 2 {
        return Err(Error::contract(format!(
            "the ablation sweep needs at least 2 scenes (train + held-out), found {}",
            scenes.len()
        )));
    }
    let (train, held) = scenes.split_at(scenes.len() - 1);
    let held = &held[0];
    let mut rows = Vec::new();

    for mode in [ConvMode::C2d, ConvMode::C3d, ConvMode::C4d] {
        let mut c = cfg.clone();
        c.conv_mode = mode;
        let mut store = ParamStore::new();
        crate::depth::train_depth(
            &mut store,
            train,
            &c.stage_cfg("depth", c.depth_steps, 0),
            &c.depth_cfg(),
        )?;
        store.remove_prefix("opt.");
        let d = 3 * c.patch * c.patch;
        let mut banks = [
            FeatureBank::new(d, c.bank_cap)?,
            FeatureBank::new(d, c.bank_cap)?,
            FeatureBank::new(d, c.bank_cap)?,
        ];
        let h1 = train_stage1(&mut store, train, &mut banks, &c.stage_cfg("stage1", c.stage1_steps, 0))?;
        store.remove_prefix("opt.");
        let hj = train_joint(&mut store, train, &c.joint_cfg(c.joint_steps, 0))?;
        let prod = run_generator(&store, &c, &held.rainy)?;
        let (p, s) = center_view_metrics(&held.clean, &prod.derained)?;
        let final_loss = hj.last().map(|r| r.l_total).or_else(|| h1.last().copied());
        rows.push(AblateRow {
            group: "conv_mode",
            setting: mode.as_str().to_string(),
            psnr_db: Some(p),
            ssim: Some(s),
            final_loss,
        });
    }

    // Shared supervised warmup, then one unsupervised pass per mode on the
    // held-out rainy field standing in for real-domain data.
    {
        let c = cfg.clone();
        let mut warm = ParamStore::new();
        let d = 3 * c.patch * c.patch;
        let mut banks = [
            FeatureBank::new(d, c.bank_cap)?,
            FeatureBank::new(d, c.bank_cap)?,
            FeatureBank::new(d, c.bank_cap)?,
        ];
        train_stage1(&mut warm, train, &mut banks, &c.stage_cfg("stage1", c.stage1_steps, 0))?;
        warm.remove_prefix("opt.");
        let reals = [held.rainy.clone()];
        for mode in [GpMode::Off, GpMode::Plain, GpMode::Guided] {
            let final_loss = if mode == GpMode::Off {
                None
            } else {
                let mut c2 = c.clone();
                c2.gp_mode = mode;
                let mut store = warm.clone();
                let h2 =
                    train_stage2(&mut store, &reals, &banks, &c2.stage2_cfg(c2.stage2_steps, 0))?;
                h2.last().copied()
            };
            rows.push(AblateRow {
                group: "gp_mode",
                setting: mode.as_str().to_string(),
                psnr_db: None,
                ssim: None,
                final_loss,
            });
        }
    }

    let mut text = String::from("ablation,setting,psnr_db,ssim,final_loss\n");
    for r in &rows {
        let cell = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        text.push_str(&format!(
            "{},{},{},{},{}\n",
            r.group,
            r.setting,
            cell(r.psnr_db),
            cell(r.ssim),
            cell(r.final_loss)
        ));
    }
    if let Some(parent) = out_csv.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(out_csv, text)?;
    Ok(rows)
}

// ---------------------------------------------------------------------------
// gp-check

#[derive(Clone, Debug)]
pub struct GpCheckReport {
    pub instances: usize,
    pub max_mean_dev: f64,
    pub max_var_dev: f64,
    pub example_mean_err: f64,
    pub example_var_err: f64,
}

/// Compares the production posterior path against the dense-inverse oracle
/// on random instances plus the frozen 2x2 worked example. Deviations above
/// 1e-8 (or a worked-example miss) are a numeric failure.
pub fn cmd_gp_check(seed: u64, instances: usize) -> Result<GpCheckReport> {
    let mut rng = stream(seed, "gp-check");
    let mut max_mean_dev = 0.0f64;
    let mut max_var_dev = 0.0f64;
    for i in 0..instances {
        let d = 1 + (uniform(&mut rng, 0.0, 1.0) * 16.0) as usize % 16;
        let n = 1 + (uniform(&mut rng, 0.0, 1.0) * 16.0) as usize % 16;
        let draw = |rng: &mut _| -> Vec<f64> {
            let mut v: Vec<f64> = (0..d).map(|_| uniform(rng, -1.0, 1.0)).collect();
            // The cosine kernel rejects near-zero vectors.
            if v.iter().map(|x| x * x).sum::<f64>() < 1e-6 {
                v[0] += 0.5;
            }
            v
        };
        let bank: Vec<Vec<f64>> = (0..n).map(|_| draw(&mut rng)).collect();
        let q = draw(&mut rng);
        let refs: Vec<&[f64]> = bank.iter().map(|v| v.as_slice()).collect();
        let gcfg = GpConfig { n_near: n, n_far: n, ..GpConfig::default() };
        let mean = gp_posterior(&q, &refs, &gcfg)?;
        let (vn, _) = gp_variances(&q, &refs, &refs, &gcfg)?;
        let (want_mean, want_var_raw) = reference::posterior(&q, &refs, gcfg.sigma2())?;
        for (a, b) in mean.iter().zip(want_mean.iter()) {
            max_mean_dev = max_mean_dev.max((a - b).abs());
        }
        let want_var = want_var_raw.clamp(VAR_EPS, 1.0 - VAR_EPS);
        max_var_dev = max_var_dev.max((vn - want_var).abs());
        if max_mean_dev > 1e-8 || max_var_dev > 1e-8 {
            return Err(Error::numeric(format!(
                "posterior deviates from the dense oracle at instance {i}: mean {max_mean_dev:e}, variance {max_var_dev:e}"
            )));
        }
    }
    // Orthonormal 2x2 bank with the query on the diagonal: both mean
    // components equal (1/sqrt(2))/1.1 and the variance is 1.1 - 1/1.1.
    let b0 = [1.0, 0.0];
    let b1 = [0.0, 1.0];
    let q = [1.0 / 2.0f64.sqrt(), 1.0 / 2.0f64.sqrt()];
    let gcfg = GpConfig { n_near: 2, n_far: 2, ..GpConfig::default() };
    let mean = gp_posterior(&q, &[&b0, &b1], &gcfg)?;
    let (vn, _) = gp_variances(&q, &[&b0, &b1], &[&b0, &b1], &gcfg)?;
    let want_mean = (1.0 / 2.0f64.sqrt()) / 1.1;
    let want_var = 1.1 - 1.0 / 1.1;
    let example_mean_err =
        mean.iter().map(|m| (m - want_mean).abs()).fold(0.0, f64::max);
    let example_var_err = (vn - want_var).abs();
    if example_mean_err > 1e-10 || example_var_err > 1e-10 {
        return Err(Error::numeric(format!(
            "worked example off: mean err {example_mean_err:e}, variance err {example_var_err:e}"
        )));
    }
    Ok(GpCheckReport { instances, max_mean_dev, max_var_dev, example_mean_err, example_var_err })
}

// ---------------------------------------------------------------------------
// Argument surface

#[derive(Parser, Debug)]
#[command(name = "lfrain", version, about = "Light-field rain removal pipeline")]
pub struct Cli {
    /// Config file; built-in defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed override.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Subcommand, Debug)]
pub enum Cmd {
    /// Generate synthetic rainy scene bundles plus a dataset manifest.
    Synth {
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the staged training schedule, resuming from checkpoints.
    Train,
    /// Restore one rainy field with a trained checkpoint.
    Derain {
        #[arg(long)]
        checkpoint: PathBuf,
        /// A view grid directory, or a scene bundle holding `input/`.
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare two view grids (or matching scene roots) view by view.
    Eval {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        test: PathBuf,
        /// Metrics table destination.
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep the convolution and regression modes and tabulate outcomes.
    Ablate {
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare the regression path against its dense oracle.
    GpCheck {
        #[arg(long, default_value_t = 100)]
        instances: usize,
    },
}

fn dispatch(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    match cli.cmd {
        Cmd::Synth { count, out } => {
            let names = cmd_synth(&cfg, count, &out)?;
            println!("wrote {} scene(s) under {}", names.len(), out.display());
        }
        Cmd::Train => {
            let report = cmd_train(&cfg)?;
            for s in &report.stages {
                match &s.skipped {
                    Some(reason) => println!("{}: skipped ({reason})", s.stage),
                    None => println!("{}: ran {} step(s), {}/{} done", s.stage, s.ran, s.done, s.total),
                }
            }
            println!("checkpoint: {}", report.checkpoint.display());
            println!("losses: {}", report.loss_csv.display());
        }
        Cmd::Derain { checkpoint, scene, out } => {
            let prod = cmd_derain(&cfg, &checkpoint, &scene, &out)?;
            println!(
                "restored {}x{} views of {}x{} into {}",
                prod.derained.nu,
                prod.derained.nv,
                prod.derained.h,
                prod.derained.w,
                out.display()
            );
        }
        Cmd::Eval { gt, test, out } => {
            let summary = cmd_eval(&gt, &test, &out)?;
            println!(
                "{} pair(s): mean psnr {:.4} dB, mean ssim {:.4} -> {}",
                summary.pairs,
                summary.mean_psnr,
                summary.mean_ssim,
                out.display()
            );
        }
        Cmd::Ablate { out } => {
            let rows = cmd_ablate(&cfg, &out)?;
            for r in &rows {
                let fmt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
                println!(
                    "{} = {}: psnr {} ssim {} final loss {}",
                    r.group,
                    r.setting,
                    fmt(r.psnr_db),
                    fmt(r.ssim),
                    fmt(r.final_loss)
                );
            }
            println!("table: {}", out.display());
        }
        Cmd::GpCheck { instances } => {
            let seed = cfg.seed;
            let r = cmd_gp_check(derive_seed(seed, "gp-check"), instances)?;
            println!(
                "gp-check: {} instances, max mean deviation {:.3e}, max variance deviation {:.3e}",
                r.instances, r.max_mean_dev, r.max_var_dev
            );
            println!(
                "worked example: mean err {:.3e}, variance err {:.3e}",
                r.example_mean_err, r.example_var_err
            );
        }
    }
    Ok(())
}

pub fn run(cli: Cli) -> i32 {
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Binary entry: parses argv, maps usage errors to exit 1 (help and version
/// requests to 0), contract/format failures to 1, numeric failures to 2.
pub fn run_from_args<I>(args: I) -> i32
where
    I: IntoIterator<Item = String>,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(cli),
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            code
        }
    }
}
