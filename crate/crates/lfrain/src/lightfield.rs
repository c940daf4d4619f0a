//! Light-field containers, the unit-stack view used by the 4D networks,
//! image-quality metrics, and the on-disk view-grid format.
//!
//! On disk a light field is a directory of 8-bit PNGs named
//! `view_{u}_{v}.png` forming a contiguous U x V grid; in memory values are
//! f64 in [0,1] laid out [U, V, C, H, W].

use crate::error::{Error, Result};
use crate::tensor::DiffTensor;
use std::path::Path;

/// Dense sub-view grid: `data[u][v]` is one [C, H, W] view.
#[derive(Clone, Debug)]
pub struct LightField {
    pub nu: usize,
    pub nv: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    data: Vec<f64>,
}

impl LightField {
    pub fn new(nu: usize, nv: usize, c: usize, h: usize, w: usize, data: Vec<f64>) -> Result<LightField> {
        let need = nu * nv * c * h * w;
        if nu == 0 || nv == 0 || c == 0 || h == 0 || w == 0 {
            return Err(Error::shape("light field extents must be positive".to_string()));
        }
        if data.len() != need {
            return Err(Error::shape(format!(
                "light field data length {} does not match {nu}x{nv}x{c}x{h}x{w}",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::numeric(format!("non-finite light field sample {bad}")));
        }
        Ok(LightField { nu, nv, c, h, w, data })
    }

    pub fn zeros(nu: usize, nv: usize, c: usize, h: usize, w: usize) -> Result<LightField> {
        LightField::new(nu, nv, c, h, w, vec![0.0; nu * nv * c * h * w])
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn view(&self, u: usize, v: usize) -> Result<&[f64]> {
        if u >= self.nu || v >= self.nv {
            return Err(Error::shape(format!(
                "view ({u},{v}) out of range for {}x{} grid",
                self.nu, self.nv
            )));
        }
        let vol = self.c * self.h * self.w;
        let off = (u * self.nv + v) * vol;
        Ok(&self.data[off..off + vol])
    }

    pub fn view_mut(&mut self, u: usize, v: usize) -> Result<&mut [f64]> {
        if u >= self.nu || v >= self.nv {
            return Err(Error::shape(format!(
                "view ({u},{v}) out of range for {}x{} grid",
                self.nu, self.nv
            )));
        }
        let vol = self.c * self.h * self.w;
        let off = (u * self.nv + v) * vol;
        Ok(&mut self.data[off..off + vol])
    }

    /// Central view coordinates (floor of the grid midpoint).
    pub fn center(&self) -> (usize, usize) {
        (self.nu / 2, self.nv / 2)
    }
}

/// A spatial patch plus the angular sub-range it is cut from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchSpec {
    pub y: usize,
    pub x: usize,
    pub h: usize,
    pub w: usize,
    pub u0: usize,
    pub v0: usize,
    pub nu: usize,
    pub nv: usize,
}

impl PatchSpec {
    /// Whole-field patch (all views, full spatial extent).
    pub fn full(lf: &LightField) -> PatchSpec {
        PatchSpec {
            y: 0,
            x: 0,
            h: lf.h,
            w: lf.w,
            u0: 0,
            v0: 0,
            nu: lf.nu,
            nv: lf.nv,
        }
    }
}

/// Row-of-views stack: `data` is [S, C, V, h, w] where unit s collects the
/// V views of grid row u0+s over one spatial crop. This is the arrangement
/// the 4D convolution path consumes (channel and unit axes swap on entry).
#[derive(Clone, Debug)]
pub struct EpiUnitStack {
    pub s: usize,
    pub c: usize,
    pub v: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
    /// Identifier of the source field (scene name or path).
    pub source: String,
    /// (row0, col0, y, x) crop origin inside the source field.
    pub origin: (usize, usize, usize, usize),
}

impl EpiUnitStack {
    pub fn to_tensor(&self) -> Result<DiffTensor> {
        DiffTensor::from_vec(self.data.clone(), &[self.s, self.c, self.v, self.h, self.w])
    }

    pub fn from_tensor(t: &DiffTensor, source: &str, origin: (usize, usize, usize, usize)) -> Result<EpiUnitStack> {
        if t.shape().rank() != 5 {
            return Err(Error::shape(format!(
                "unit stack tensor needs rank 5, got {}",
                t.shape()
            )));
        }
        let d = t.shape().dims();
        Ok(EpiUnitStack {
            s: d[0],
            c: d[1],
            v: d[2],
            h: d[3],
            w: d[4],
            data: t.values().to_vec(),
            source: source.to_string(),
            origin,
        })
    }
}

/// Rearranges a patch of the field into the unit-stack layout:
/// out[s, c, v, y, x] = lf[u0+s, v0+v, c, py+y, px+x].
pub fn to_epi_units(lf: &LightField, patch: &PatchSpec, source: &str) -> Result<EpiUnitStack> {
    if patch.u0 + patch.nu > lf.nu || patch.v0 + patch.nv > lf.nv {
        return Err(Error::shape(format!(
            "angular range {}+{} x {}+{} exceeds {}x{} grid",
            patch.u0, patch.nu, patch.v0, patch.nv, lf.nu, lf.nv
        )));
    }
    if patch.y + patch.h > lf.h || patch.x + patch.w > lf.w {
        return Err(Error::shape(format!(
            "spatial crop {}+{} x {}+{} exceeds {}x{} views",
            patch.y, patch.h, patch.x, patch.w, lf.h, lf.w
        )));
    }
    if patch.nu == 0 || patch.nv == 0 || patch.h == 0 || patch.w == 0 {
        return Err(Error::shape("empty patch".to_string()));
    }
    let (s_n, c_n, v_n, h_n, w_n) = (patch.nu, lf.c, patch.nv, patch.h, patch.w);
    let mut data = vec![0.0; s_n * c_n * v_n * h_n * w_n];
    for s in 0..s_n {
        for v in 0..v_n {
            let view = lf.view(patch.u0 + s, patch.v0 + v)?;
            for c in 0..c_n {
                for y in 0..h_n {
                    let src = &view[(c * lf.h + patch.y + y) * lf.w + patch.x..][..w_n];
                    let dst_off = ((((s * c_n + c) * v_n + v) * h_n + y) * w_n) as usize;
                    data[dst_off..dst_off + w_n].copy_from_slice(src);
                }
            }
        }
    }
    Ok(EpiUnitStack {
        s: s_n,
        c: c_n,
        v: v_n,
        h: h_n,
        w: w_n,
        data,
        source: source.to_string(),
        origin: (patch.u0, patch.v0, patch.y, patch.x),
    })
}

/// Inverse of [`to_epi_units`]: rebuilds the sub-view grid of the crop.
pub fn from_epi_units(stack: &EpiUnitStack) -> Result<LightField> {
    let (s_n, c_n, v_n, h_n, w_n) = (stack.s, stack.c, stack.v, stack.h, stack.w);
    let mut lf = LightField::zeros(s_n, v_n, c_n, h_n, w_n)?;
    for s in 0..s_n {
        for v in 0..v_n {
            let view = lf.view_mut(s, v)?;
            for c in 0..c_n {
                for y in 0..h_n {
                    let src_off = (((s * c_n + c) * v_n + v) * h_n + y) * w_n;
                    view[(c * h_n + y) * w_n..(c * h_n + y) * w_n + w_n]
                        .copy_from_slice(&stack.data[src_off..src_off + w_n]);
                }
            }
        }
    }
    Ok(lf)
}

/// Peak signal-to-noise ratio in dB over two equal-length sample slices,
/// capped at 99 dB for identical inputs. Symmetric in its arguments.
pub fn psnr(a: &[f64], b: &[f64], peak: f64) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape(format!(
            "psnr needs equal nonempty lengths, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if !(peak > 0.0) {
        return Err(Error::domain(format!("peak must be positive, got {peak}")));
    }
    let mse: f64 = a
        .iter()
        .zip(b.iter())
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(99.0);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(99.0))
}

/// Structural similarity with uniform 8x8 windows at stride 1.
/// Multichannel input is converted to luma first; `c` must be 1 or 3.
pub fn ssim(a: &[f64], b: &[f64], c: usize, h: usize, w: usize, peak: f64) -> Result<f64> {
    const WIN: usize = 8;
    if a.len() != b.len() || a.len() != c * h * w {
        return Err(Error::shape(format!(
            "ssim needs two {c}x{h}x{w} images, got lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    if !(peak > 0.0) {
        return Err(Error::domain(format!("peak must be positive, got {peak}")));
    }
    if h < WIN || w < WIN {
        return Err(Error::shape(format!(
            "ssim window {WIN}x{WIN} larger than image {h}x{w}"
        )));
    }
    let gray = |img: &[f64]| -> Result<Vec<f64>> {
        match c {
            1 => Ok(img.to_vec()),
            3 => {
                let plane = h * w;
                let mut g = vec![0.0; plane];
                for i in 0..plane {
                    g[i] = 0.299 * img[i] + 0.587 * img[plane + i] + 0.114 * img[2 * plane + i];
                }
                Ok(g)
            }
            _ => Err(Error::contract(format!("ssim supports 1 or 3 channels, got {c}"))),
        }
    };
    let ga = gray(a)?;
    let gb = gray(b)?;
    let c1 = (0.01 * peak) * (0.01 * peak);
    let c2 = (0.03 * peak) * (0.03 * peak);
    let n = (WIN * WIN) as f64;
    let mut acc = 0.0;
    let mut count = 0usize;
    for y0 in 0..=(h - WIN) {
        for x0 in 0..=(w - WIN) {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for dy in 0..WIN {
                let ra = &ga[(y0 + dy) * w + x0..(y0 + dy) * w + x0 + WIN];
                let rb = &gb[(y0 + dy) * w + x0..(y0 + dy) * w + x0 + WIN];
                for dx in 0..WIN {
                    let (x, y) = (ra[dx], rb[dx]);
                    sa += x;
                    sb += y;
                    saa += x * x;
                    sbb += y * y;
                    sab += x * y;
                }
            }
            let (ma, mb) = (sa / n, sb / n);
            let va = saa / n - ma * ma;
            let vb = sbb / n - mb * mb;
            let cov = sab / n - ma * mb;
            let s = ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            acc += s;
            count += 1;
        }
    }
    Ok(acc / count as f64)
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a light field as `view_{u}_{v}.png` files (8-bit, RGB for 3
/// channels, grayscale for 1) under `dir`, creating it if needed.
pub fn write_lfi(lf: &LightField, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let plane = lf.h * lf.w;
    for u in 0..lf.nu {
        for v in 0..lf.nv {
            let view = lf.view(u, v)?;
            let path = dir.join(format!("view_{u}_{v}.png"));
            match lf.c {
                3 => {
                    let mut img = image::RgbImage::new(lf.w as u32, lf.h as u32);
                    for y in 0..lf.h {
                        for x in 0..lf.w {
                            let px = image::Rgb([
                                to_u8(view[y * lf.w + x]),
                                to_u8(view[plane + y * lf.w + x]),
                                to_u8(view[2 * plane + y * lf.w + x]),
                            ]);
                            img.put_pixel(x as u32, y as u32, px);
                        }
                    }
                    img.save(&path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
                }
                1 => {
                    write_map(view, lf.h, lf.w, &path)?;
                }
                other => {
                    return Err(Error::contract(format!(
                        "PNG export supports 1 or 3 channels, got {other}"
                    )))
                }
            }
        }
    }
    Ok(())
}

/// Reads a `view_{u}_{v}.png` grid directory back into a light field.
/// The grid must be contiguous from (0,0) and all views the same size.
pub fn read_lfi(dir: &Path) -> Result<LightField> {
    let mut nu = 0;
    while dir.join(format!("view_{nu}_0.png")).exists() {
        nu += 1;
    }
    let mut nv = 0;
    while dir.join(format!("view_0_{nv}.png")).exists() {
        nv += 1;
    }
    if nu == 0 || nv == 0 {
        return Err(Error::format(format!(
            "no view_0_0.png grid found in {}",
            dir.display()
        )));
    }
    let mut data: Vec<f64> = Vec::new();
    let (mut c_n, mut h_n, mut w_n) = (0usize, 0usize, 0usize);
    for u in 0..nu {
        for v in 0..nv {
            let path = dir.join(format!("view_{u}_{v}.png"));
            let img = image::open(&path)
                .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
            let (c, h, w, pixels): (usize, usize, usize, Vec<f64>) = match img {
                image::DynamicImage::ImageLuma8(g) => {
                    let (wd, ht) = (g.width() as usize, g.height() as usize);
                    let px = g.into_raw().into_iter().map(|p| p as f64 / 255.0).collect();
                    (1, ht, wd, px)
                }
                other => {
                    let rgb = other.to_rgb8();
                    let (wd, ht) = (rgb.width() as usize, rgb.height() as usize);
                    let raw = rgb.into_raw();
                    // Interleaved RGB -> planar [3, H, W].
                    let mut px = vec![0.0; 3 * ht * wd];
                    for i in 0..ht * wd {
                        for ch in 0..3 {
                            px[ch * ht * wd + i] = raw[3 * i + ch] as f64 / 255.0;
                        }
                    }
                    (3, ht, wd, px)
                }
            };
            if u == 0 && v == 0 {
                (c_n, h_n, w_n) = (c, h, w);
            } else if (c, h, w) != (c_n, h_n, w_n) {
                return Err(Error::format(format!(
                    "view ({u},{v}) is {c}x{h}x{w}, expected {c_n}x{h_n}x{w_n}"
                )));
            }
            data.extend_from_slice(&pixels);
        }
    }
    LightField::new(nu, nv, c_n, h_n, w_n, data)
}

/// Writes one [H, W] map as an 8-bit grayscale PNG.
pub fn write_map(map: &[f64], h: usize, w: usize, path: &Path) -> Result<()> {
    if map.len() != h * w {
        return Err(Error::shape(format!(
            "map length {} does not match {h}x{w}",
            map.len()
        )));
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut img = image::GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            img.put_pixel(x as u32, y as u32, image::Luma([to_u8(map[y * w + x])]));
        }
    }
    img.save(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Reads an 8-bit grayscale PNG into ([H, W] samples, h, w).
pub fn read_map(path: &Path) -> Result<(Vec<f64>, usize, usize)> {
    let img = image::open(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok((img.into_raw().into_iter().map(|p| p as f64 / 255.0).collect(), h, w))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp_field(nu: usize, nv: usize, c: usize, h: usize, w: usize) -> LightField {
        let n = nu * nv * c * h * w;
        let data: Vec<f64> = (0..n).map(|i| (i % 251) as f64 / 250.0).collect();
        LightField::new(nu, nv, c, h, w, data).unwrap()
    }

    #[test]
    fn epi_units_index_identity() {
        let lf = ramp_field(3, 4, 2, 6, 5);
        let patch = PatchSpec { y: 1, x: 2, h: 3, w: 3, u0: 1, v0: 1, nu: 2, nv: 3 };
        let st = to_epi_units(&lf, &patch, "t").unwrap();
        // out[s, c, v, y, x] == lf[u0+s, v0+v, c, py+y, px+x]
        for s in 0..2 {
            for c in 0..2 {
                for v in 0..3 {
                    for y in 0..3 {
                        for x in 0..3 {
                            let got = st.data[((((s * 2 + c) * 3 + v) * 3 + y) * 3) + x];
                            let view = lf.view(1 + s, 1 + v).unwrap();
                            let want = view[(c * 6 + 1 + y) * 5 + 2 + x];
                            assert_eq!(got, want);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn epi_units_roundtrip() {
        let lf = ramp_field(3, 3, 3, 8, 8);
        let patch = PatchSpec::full(&lf);
        let st = to_epi_units(&lf, &patch, "t").unwrap();
        let back = from_epi_units(&st).unwrap();
        assert_eq!(back.data(), lf.data());
    }

    #[test]
    fn psnr_identical_is_capped() {
        let a = vec![0.25; 64];
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), 99.0);
    }

    #[test]
    fn psnr_known_mse() {
        // mse = 0.01 at peak 1 -> 20 dB.
        let a = vec![0.0; 16];
        let b = vec![0.1; 16];
        let got = psnr(&a, &b, 1.0).unwrap();
        assert!((got - 20.0).abs() < 1e-9, "{got}");
    }

    #[test]
    fn psnr_is_symmetric() {
        let a: Vec<f64> = (0..32).map(|i| i as f64 / 31.0).collect();
        let b: Vec<f64> = (0..32).map(|i| (31 - i) as f64 / 31.0).collect();
        assert_eq!(psnr(&a, &b, 1.0).unwrap(), psnr(&b, &a, 1.0).unwrap());
    }

    #[test]
    fn ssim_identical_is_one() {
        let a: Vec<f64> = (0..100).map(|i| (i % 13) as f64 / 12.0).collect();
        let s = ssim(&a, &a, 1, 10, 10, 1.0).unwrap();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_constant_pair_closed_form() {
        // Constant a vs constant b: variance terms vanish and the C2 factors
        // cancel, leaving (2ab + C1)/(a^2 + b^2 + C1).
        let a = vec![0.25; 64];
        let b = vec![0.75; 64];
        let c1 = 0.01f64 * 0.01;
        let want = (2.0 * 0.25 * 0.75 + c1) / (0.25 * 0.25 + 0.75 * 0.75 + c1);
        let got = ssim(&a, &b, 1, 8, 8, 1.0).unwrap();
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = vec![0.0; 49];
        assert!(ssim(&a, &a, 1, 7, 7, 1.0).is_err());
    }

    #[test]
    fn png_roundtrip_is_exact_on_quantized_values() {
        let dir = tempfile::tempdir().unwrap();
        // Values already on the 8-bit lattice survive the roundtrip exactly.
        let n = 2 * 2 * 3 * 4 * 4;
        let data: Vec<f64> = (0..n).map(|i| ((i * 7) % 256) as f64 / 255.0).collect();
        let lf = LightField::new(2, 2, 3, 4, 4, data).unwrap();
        write_lfi(&lf, dir.path()).unwrap();
        let back = read_lfi(dir.path()).unwrap();
        assert_eq!(back.nu, 2);
        assert_eq!(back.c, 3);
        for (a, b) in lf.data().iter().zip(back.data().iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn read_missing_grid_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        match read_lfi(dir.path()) {
            Err(Error::Format(_)) => {}
            other => panic!("expected format error, got {other:?}"),
        }
    }
}
