//! Gaussian-process pseudo supervision: cosine-kernel posteriors over banks
//! of stored feature vectors, nearest/farthest bank selection, scale-to-scale
//! guidance, and the unsupervised loss assembly. Posterior targets are
//! computed off the autodiff tape and treated as constants.

use crate::error::{Error, Result};
use crate::percept::FeatureNet;
use crate::tensor::DiffTensor;
use nalgebra::{DMatrix, DVector};
use std::io::{Read, Write};
use std::path::Path;

/// Clamp bound keeping both log terms of the unsupervised loss finite.
pub const VAR_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kernel {
    /// Normalized dot product; k(x,x) = 1 bounds the posterior variance.
    Cosine,
}

#[derive(Clone, Debug)]
pub struct GpConfig {
    /// Observation noise standard deviation; its square regularizes the
    /// Gram solve.
    pub sigma_eps: f64,
    /// Nearest-bank size.
    pub n_near: usize,
    /// Farthest-bank size.
    pub n_far: usize,
    pub kernel: Kernel,
}

impl Default for GpConfig {
    fn default() -> GpConfig {
        GpConfig {
            sigma_eps: 0.1f64.sqrt(),
            n_near: 16,
            n_far: 16,
            kernel: Kernel::Cosine,
        }
    }
}

impl GpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_eps > 0.0) {
            return Err(Error::domain(format!(
                "sigma_eps must be positive, got {}",
                self.sigma_eps
            )));
        }
        if self.n_near == 0 || self.n_far == 0 {
            return Err(Error::domain("bank selection sizes must be at least 1".to_string()));
        }
        Ok(())
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma_eps * self.sigma_eps
    }
}

/// FIFO store of feature vectors for one scale.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBank {
    d: usize,
    cap: usize,
    vecs: Vec<Vec<f64>>,
}

impl FeatureBank {
    pub fn new(d: usize, cap: usize) -> Result<FeatureBank> {
        if d == 0 || cap == 0 {
            return Err(Error::domain("bank dimension and capacity must be positive".to_string()));
        }
        Ok(FeatureBank { d, cap, vecs: Vec::new() })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn cap(&self) -> usize {
        self.cap
    }

    pub fn len(&self) -> usize {
        self.vecs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vecs.is_empty()
    }

    pub fn get(&self, i: usize) -> &[f64] {
        &self.vecs[i]
    }

    /// Appends a vector, evicting the oldest once at capacity.
    pub fn push(&mut self, v: Vec<f64>) -> Result<()> {
        if v.len() != self.d {
            return Err(Error::shape(format!(
                "bank stores length-{} vectors, got {}",
                self.d,
                v.len()
            )));
        }
        if let Some(bad) = v.iter().find(|x| !x.is_finite()) {
            return Err(Error::numeric(format!("non-finite bank entry {bad}")));
        }
        if self.vecs.len() == self.cap {
            self.vecs.remove(0);
        }
        self.vecs.push(v);
        Ok(())
    }

    /// Writes header (d, count as u64 little-endian) then row-major f64
    /// little-endian vectors.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&(self.d as u64).to_le_bytes())?;
        f.write_all(&(self.vecs.len() as u64).to_le_bytes())?;
        for v in &self.vecs {
            for x in v {
                f.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Reads a file produced by [`save`]; `cap` restores the FIFO limit.
    pub fn load(path: &Path, cap: usize) -> Result<FeatureBank> {
        let mut f = std::fs::File::open(path)?;
        let mut hdr = [0u8; 16];
        f.read_exact(&mut hdr)
            .map_err(|_| Error::format(format!("{}: truncated bank header", path.display())))?;
        let d = u64::from_le_bytes(hdr[0..8].try_into().unwrap()) as usize;
        let n = u64::from_le_bytes(hdr[8..16].try_into().unwrap()) as usize;
        if d == 0 || n > cap {
            return Err(Error::format(format!(
                "{}: bank header d={d} count={n} exceeds capacity {cap}",
                path.display()
            )));
        }
        let mut bank = FeatureBank::new(d, cap)?;
        let mut buf = vec![0u8; d * 8];
        for _ in 0..n {
            f.read_exact(&mut buf)
                .map_err(|_| Error::format(format!("{}: truncated bank body", path.display())))?;
            let v: Vec<f64> = buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            bank.push(v)?;
        }
        Ok(bank)
    }
}

/// Normalized dot product; zero-norm inputs are a domain error so the
/// value is always in [-1, 1] with k(x,x) = 1.
pub fn kernel_eval(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::shape(format!(
            "kernel needs equal nonempty lengths, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let (mut dot, mut nx, mut ny) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y.iter()) {
        dot += a * b;
        nx += a * a;
        ny += b * b;
    }
    if nx == 0.0 || ny == 0.0 {
        return Err(Error::domain("kernel input has zero norm".to_string()));
    }
    Ok(dot / (nx.sqrt() * ny.sqrt()))
}

/// Ranks the bank by cosine similarity to the query. Returns
/// (nearest n_near indices, farthest n_far indices); ties break by
/// ascending bank index.
pub fn select_banks(f_r: &[f64], bank: &FeatureBank, cfg: &GpConfig) -> Result<(Vec<usize>, Vec<usize>)> {
    cfg.validate()?;
    if bank.len() < cfg.n_near.max(cfg.n_far) {
        return Err(Error::contract(format!(
            "bank holds {} vectors, need at least {}",
            bank.len(),
            cfg.n_near.max(cfg.n_far)
        )));
    }
    let mut sims = Vec::with_capacity(bank.len());
    for i in 0..bank.len() {
        sims.push((kernel_eval(f_r, bank.get(i))?, i));
    }
    let mut near = sims.clone();
    // Descending similarity, ascending index on ties.
    near.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let mut far = sims;
    far.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    Ok((
        near[..cfg.n_near].iter().map(|&(_, i)| i).collect(),
        far[..cfg.n_far].iter().map(|&(_, i)| i).collect(),
    ))
}

fn gram_solve(f_r: &[f64], vecs: &[&[f64]], sigma2: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = vecs.len();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            k[(i, j)] = kernel_eval(vecs[i], vecs[j])?;
        }
        k[(i, i)] += sigma2;
    }
    let kv = DVector::from_fn(n, |i, _| kernel_eval(f_r, vecs[i]).unwrap());
    let chol = k
        .clone()
        .cholesky()
        .ok_or_else(|| Error::numeric("regularized Gram matrix is not positive definite"))?;
    let w = chol.solve(&kv);
    Ok((w.iter().cloned().collect(), kv.iter().cloned().collect()))
}

/// Posterior mean under the zero-mean convention: a weighted combination of
/// the selected bank vectors with weights (K + sigma^2 I)^{-1} k.
pub fn gp_posterior(f_r: &[f64], near: &[&[f64]], cfg: &GpConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if near.is_empty() {
        return Err(Error::contract("posterior needs a nonempty bank".to_string()));
    }
    let (w, _) = gram_solve(f_r, near, cfg.sigma2())?;
    let d = f_r.len();
    let mut out = vec![0.0; d];
    for (wi, v) in w.iter().zip(near.iter()) {
        if v.len() != d {
            return Err(Error::shape("bank vector length differs from query".to_string()));
        }
        for (o, x) in out.iter_mut().zip(v.iter()) {
            *o += wi * x;
        }
    }
    Ok(out)
}

fn variance_against(f_r: &[f64], vecs: &[&[f64]], cfg: &GpConfig) -> Result<f64> {
    let (w, kv) = gram_solve(f_r, vecs, cfg.sigma2())?;
    let explained: f64 = w.iter().zip(kv.iter()).map(|(a, b)| a * b).sum();
    let raw = (1.0 + cfg.sigma2()) - explained;
    Ok(raw.clamp(VAR_EPS, 1.0 - VAR_EPS))
}

/// Posterior variances against the nearest and farthest banks, clamped to
/// [VAR_EPS, 1 - VAR_EPS] so the log terms stay finite.
pub fn gp_variances(f_r: &[f64], near: &[&[f64]], far: &[&[f64]], cfg: &GpConfig) -> Result<(f64, f64)> {
    cfg.validate()?;
    if near.is_empty() || far.is_empty() {
        return Err(Error::contract("variance needs nonempty banks".to_string()));
    }
    Ok((variance_against(f_r, near, cfg)?, variance_against(f_r, far, cfg)?))
}

/// Posterior bundle for one query feature.
#[derive(Clone, Debug)]
pub struct GpPosterior {
    pub pseudo_gt: Vec<f64>,
    pub var_near: f64,
    pub var_far: f64,
}

/// Full query path: select banks, posterior mean from the nearest set,
/// variances from both sets.
pub fn gp_infer(f_r: &[f64], bank: &FeatureBank, cfg: &GpConfig) -> Result<GpPosterior> {
    let (ni, fi) = select_banks(f_r, bank, cfg)?;
    let near: Vec<&[f64]> = ni.iter().map(|&i| bank.get(i)).collect();
    let far: Vec<&[f64]> = fi.iter().map(|&i| bank.get(i)).collect();
    let pseudo_gt = gp_posterior(f_r, &near, cfg)?;
    let (var_near, var_far) = gp_variances(f_r, &near, &far, cfg)?;
    Ok(GpPosterior { pseudo_gt, var_near, var_far })
}

/// Blends the previous scale's pseudo target into the current query:
/// omega*prev + (1-omega)*curr.
pub fn guide_query(pseudo_prev: &[f64], f_curr: &[f64], omega: f64) -> Result<Vec<f64>> {
    if pseudo_prev.len() != f_curr.len() {
        return Err(Error::shape(format!(
            "guide lengths differ: {} vs {}",
            pseudo_prev.len(),
            f_curr.len()
        )));
    }
    if !(0.0..=1.0).contains(&omega) {
        return Err(Error::domain(format!("omega must be in [0,1], got {omega}")));
    }
    Ok(pseudo_prev
        .iter()
        .zip(f_curr.iter())
        .map(|(p, c)| omega * p + (1.0 - omega) * c)
        .collect())
}

/// Carries the previous scale's pseudo target across the scale chain.
#[derive(Clone, Debug, Default)]
pub struct GuideState {
    pub omega: f64,
    prev: Option<Vec<f64>>,
}

impl GuideState {
    pub fn new(omega: f64) -> Result<GuideState> {
        if !(0.0..=1.0).contains(&omega) {
            return Err(Error::domain(format!("omega must be in [0,1], got {omega}")));
        }
        Ok(GuideState { omega, prev: None })
    }

    /// First scale passes through unguided; later scales blend.
    pub fn query(&self, f_curr: &[f64]) -> Result<Vec<f64>> {
        match &self.prev {
            None => Ok(f_curr.to_vec()),
            Some(p) => guide_query(p, f_curr, self.omega),
        }
    }

    pub fn update(&mut self, pseudo_gt: Vec<f64>) {
        self.prev = Some(pseudo_gt);
    }

    pub fn reset(&mut self) {
        self.prev = None;
    }
}

/// Weights of the unsupervised loss terms.
#[derive(Clone, Copy, Debug)]
pub struct GpLossWeights {
    pub lambda_gp: f64,
    pub lambda_p_real: f64,
}

impl Default for GpLossWeights {
    fn default() -> GpLossWeights {
        GpLossWeights { lambda_gp: 0.015, lambda_p_real: 0.04 }
    }
}

/// Per-query unsupervised loss. `f_r` is the live [3, h, w] feature map;
/// the posterior is a constant target. Value:
/// lambda_gp*(|f_r - pseudo|_2 + log var_near + log(1 - var_far))
/// + lambda_p_real*|phi(f_r) - phi(pseudo)|_2^2.
pub fn gp_loss(
    f_r: &DiffTensor,
    posterior: &GpPosterior,
    phi: &FeatureNet,
    weights: &GpLossWeights,
) -> Result<DiffTensor> {
    if posterior.pseudo_gt.len() != f_r.shape().numel() {
        return Err(Error::shape(format!(
            "pseudo target length {} does not match feature {}",
            posterior.pseudo_gt.len(),
            f_r.shape()
        )));
    }
    let vn = posterior.var_near.clamp(VAR_EPS, 1.0 - VAR_EPS);
    let vf = posterior.var_far.clamp(VAR_EPS, 1.0 - VAR_EPS);
    let pseudo = DiffTensor::from_vec(posterior.pseudo_gt.clone(), f_r.shape().dims())?;
    let dist = f_r.sub(&pseudo)?.l2_norm()?;
    let logs = DiffTensor::scalar(vn.ln() + (1.0 - vf).ln());
    let gp_term = dist.add(&logs)?.scale(weights.lambda_gp)?;
    let perc = phi.dist2(f_r, &pseudo)?.scale(weights.lambda_p_real)?;
    gp_term.add(&perc)
}

/// Mean of per-patch per-scale losses: L_r = (1/(N_u*N_b)) sum of terms.
pub fn unsup_loss_aggregate(losses: &[DiffTensor]) -> Result<DiffTensor> {
    if losses.is_empty() {
        return Err(Error::domain("cannot aggregate an empty loss set".to_string()));
    }
    let mut acc = losses[0].clone();
    for l in &losses[1..] {
        acc = acc.add(l)?;
    }
    acc.scale(1.0 / losses.len() as f64)
}

/// Dense linear-algebra oracle kept deliberately independent of the main
/// path: explicit Gauss-Jordan inverse instead of a Cholesky solve.
pub mod reference {
    use super::kernel_eval;
    use crate::error::{Error, Result};

    /// Inverts via Gauss-Jordan elimination with partial pivoting.
    pub fn invert(a: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let n = a.len();
        let mut m: Vec<Vec<f64>> = a
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let mut r = row.clone();
                r.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
                r
            })
            .collect();
        for col in 0..n {
            let pivot = (col..n)
                .max_by(|&i, &j| m[i][col].abs().partial_cmp(&m[j][col].abs()).unwrap())
                .unwrap();
            if m[pivot][col].abs() < 1e-300 {
                return Err(Error::numeric("singular matrix in reference inverse"));
            }
            m.swap(col, pivot);
            let p = m[col][col];
            for x in m[col].iter_mut() {
                *x /= p;
            }
            for row in 0..n {
                if row != col {
                    let f = m[row][col];
                    if f != 0.0 {
                        for j in 0..2 * n {
                            m[row][j] -= f * m[col][j];
                        }
                    }
                }
            }
        }
        Ok(m.into_iter().map(|r| r[n..].to_vec()).collect())
    }

    /// Posterior mean and raw (unclamped) variance through the explicit
    /// inverse: pseudo = k^T (K + s2 I)^{-1} F, var = (1 + s2) - k^T w.
    pub fn posterior(f_r: &[f64], vecs: &[&[f64]], sigma2: f64) -> Result<(Vec<f64>, f64)> {
        let n = vecs.len();
        let mut gram = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                gram[i][j] = kernel_eval(vecs[i], vecs[j])?;
            }
            gram[i][i] += sigma2;
        }
        let inv = invert(&gram)?;
        let kv: Vec<f64> = vecs
            .iter()
            .map(|v| kernel_eval(f_r, v))
            .collect::<Result<Vec<f64>>>()?;
        let w: Vec<f64> = (0..n)
            .map(|i| (0..n).map(|j| inv[i][j] * kv[j]).sum())
            .collect();
        let d = f_r.len();
        let mut pseudo = vec![0.0; d];
        for (wi, v) in w.iter().zip(vecs.iter()) {
            for (o, x) in pseudo.iter_mut().zip(v.iter()) {
                *o += wi * x;
            }
        }
        let explained: f64 = w.iter().zip(kv.iter()).map(|(a, b)| a * b).sum();
        Ok((pseudo, (1.0 + sigma2) - explained))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::percept::default_feature_net;
    use crate::rng::{stream, uniform};

    fn unit2(x: f64, y: f64) -> Vec<f64> {
        vec![x, y]
    }

    #[test]
    fn kernel_identities() {
        let x = vec![1.0, 0.0];
        assert!((kernel_eval(&x, &x).unwrap() - 1.0).abs() < 1e-15);
        assert!((kernel_eval(&x, &[0.0, 1.0]).unwrap()).abs() < 1e-15);
        let got = kernel_eval(&x, &[1.0, 1.0]).unwrap();
        assert!((got - 1.0 / 2.0f64.sqrt()).abs() < 1e-12);
        assert!(kernel_eval(&x, &[0.0, 0.0]).is_err());
    }

    #[test]
    fn bank_selection_examples() {
        let mut bank = FeatureBank::new(2, 8).unwrap();
        bank.push(unit2(1.0, 0.0)).unwrap();
        bank.push(unit2(0.0, 1.0)).unwrap();
        bank.push(unit2(-1.0, 0.0)).unwrap();
        let cfg = GpConfig { n_near: 1, n_far: 1, ..GpConfig::default() };
        let (near, far) = select_banks(&unit2(0.9, 0.1), &bank, &cfg).unwrap();
        assert_eq!(near, vec![0]);
        assert_eq!(far, vec![2]);
        // A query equal to a bank vector ranks that vector first.
        let (near, _) = select_banks(&unit2(0.0, 1.0), &bank, &cfg).unwrap();
        assert_eq!(near, vec![1]);
        let small = GpConfig { n_near: 4, n_far: 1, ..GpConfig::default() };
        assert!(select_banks(&unit2(1.0, 0.0), &bank, &small).is_err());
    }

    #[test]
    fn posterior_worked_example() {
        // Orthonormal bank, query on the diagonal, sigma^2 = 0.1:
        // weights are (1/sqrt(2))/1.1 each.
        let b0 = unit2(1.0, 0.0);
        let b1 = unit2(0.0, 1.0);
        let q = unit2(1.0 / 2.0f64.sqrt(), 1.0 / 2.0f64.sqrt());
        let cfg = GpConfig { n_near: 2, n_far: 2, ..GpConfig::default() };
        let pseudo = gp_posterior(&q, &[&b0, &b1], &cfg).unwrap();
        let want = (1.0 / 2.0f64.sqrt()) / 1.1;
        assert!((pseudo[0] - want).abs() < 1e-12, "{}", pseudo[0]);
        assert!((pseudo[1] - want).abs() < 1e-12);
        // Five-decimal presentation of the same constant.
        assert!((pseudo[0] - 0.64282).abs() < 1e-5);
    }

    #[test]
    fn variance_worked_example_and_orthogonal_clamp() {
        let b0 = unit2(1.0, 0.0);
        let b1 = unit2(0.0, 1.0);
        let q = unit2(1.0 / 2.0f64.sqrt(), 1.0 / 2.0f64.sqrt());
        let cfg = GpConfig { n_near: 2, n_far: 2, ..GpConfig::default() };
        let (vn, _) = gp_variances(&q, &[&b0, &b1], &[&b0, &b1], &cfg).unwrap();
        assert!((vn - (1.1 - 1.0 / 1.1)).abs() < 1e-12, "{vn}");
        assert!((vn - 0.19091).abs() < 1e-5);
        // No correlation: variance saturates at 1 + sigma^2, clamped below 1.
        let q3 = vec![0.0, 0.0, 1.0];
        let b3a = vec![1.0, 0.0, 0.0];
        let b3b = vec![0.0, 1.0, 0.0];
        let (vn, _) = gp_variances(&q3, &[&b3a, &b3b], &[&b3a, &b3b], &cfg).unwrap();
        assert_eq!(vn, 1.0 - VAR_EPS);
    }

    #[test]
    fn interpolation_at_tiny_noise() {
        let mut rng = stream(5, "gp-interp");
        let d = 6;
        let bank: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..d).map(|_| uniform(&mut rng, -1.0, 1.0)).collect())
            .collect();
        let refs: Vec<&[f64]> = bank.iter().map(|v| v.as_slice()).collect();
        let cfg = GpConfig { sigma_eps: 1e-4, n_near: 4, n_far: 4, ..GpConfig::default() };
        let pseudo = gp_posterior(&bank[2], &refs, &cfg).unwrap();
        // Cosine kernel recovers the member up to its norm; compare directions.
        let got = kernel_eval(&pseudo, &bank[2]).unwrap();
        assert!(got > 1.0 - 1e-3, "{got}");
    }

    #[test]
    fn variance_monotone_in_bank_growth() {
        let mut rng = stream(9, "gp-mono");
        let d = 5;
        let vecs: Vec<Vec<f64>> = (0..8)
            .map(|_| (0..d).map(|_| uniform(&mut rng, -1.0, 1.0)).collect())
            .collect();
        let q: Vec<f64> = (0..d).map(|_| uniform(&mut rng, -1.0, 1.0)).collect();
        let cfg = GpConfig::default();
        let mut prev = f64::INFINITY;
        for n in 1..=8 {
            let refs: Vec<&[f64]> = vecs[..n].iter().map(|v| v.as_slice()).collect();
            let v = variance_against(&q, &refs, &cfg).unwrap();
            assert!(v <= prev + 1e-12, "n={n}: {v} > {prev}");
            prev = v;
        }
    }

    #[test]
    fn posterior_matches_reference_oracle() {
        let mut rng = stream(13, "gp-oracle");
        let cfg = GpConfig::default();
        for case in 0..20 {
            let d = 2 + (case % 5);
            let n = 1 + (case % 6);
            let bank: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..d).map(|_| uniform(&mut rng, -1.0, 1.0)).collect())
                .collect();
            let q: Vec<f64> = (0..d).map(|_| uniform(&mut rng, -1.0, 1.0)).collect();
            let refs: Vec<&[f64]> = bank.iter().map(|v| v.as_slice()).collect();
            let pseudo = gp_posterior(&q, &refs, &cfg).unwrap();
            let (want_pseudo, want_var) = reference::posterior(&q, &refs, cfg.sigma2()).unwrap();
            for (a, b) in pseudo.iter().zip(want_pseudo.iter()) {
                assert!((a - b).abs() < 1e-8, "case {case}");
            }
            let got_var = variance_against(&q, &refs, &cfg).unwrap();
            let want_var = want_var.clamp(VAR_EPS, 1.0 - VAR_EPS);
            assert!((got_var - want_var).abs() < 1e-8, "case {case}");
        }
    }

    #[test]
    fn guide_blending() {
        assert_eq!(guide_query(&[2.0, 0.0], &[0.0, 2.0], 0.5).unwrap(), vec![1.0, 1.0]);
        assert_eq!(guide_query(&[2.0, 0.0], &[0.0, 2.0], 0.0).unwrap(), vec![0.0, 2.0]);
        assert_eq!(guide_query(&[2.0, 0.0], &[0.0, 2.0], 1.0).unwrap(), vec![2.0, 0.0]);
        assert!(guide_query(&[1.0], &[1.0, 2.0], 0.5).is_err());
        let mut state = GuideState::new(0.5).unwrap();
        assert_eq!(state.query(&[3.0, 3.0]).unwrap(), vec![3.0, 3.0]);
        state.update(vec![1.0, 1.0]);
        assert_eq!(state.query(&[3.0, 3.0]).unwrap(), vec![2.0, 2.0]);
    }

    #[test]
    fn aggregate_examples() {
        let c = DiffTensor::scalar(0.7);
        let out = unsup_loss_aggregate(&[c.clone(), c.clone(), c]).unwrap();
        assert!((out.item().unwrap() - 0.7).abs() < 1e-15);
        let ts: Vec<DiffTensor> = (1..=6).map(|i| DiffTensor::scalar(i as f64)).collect();
        assert!((unsup_loss_aggregate(&ts).unwrap().item().unwrap() - 3.5).abs() < 1e-15);
        assert!(unsup_loss_aggregate(&[]).is_err());
    }

    #[test]
    fn gp_loss_at_target_reduces_to_log_terms() {
        let phi = default_feature_net().unwrap();
        let n = 3 * 8 * 8;
        let vals: Vec<f64> = (0..n).map(|i| (i % 9) as f64 / 8.0).collect();
        let f = DiffTensor::from_vec(vals.clone(), &[3, 8, 8]).unwrap();
        let post = GpPosterior { pseudo_gt: vals, var_near: 0.5, var_far: 0.5 };
        let w = GpLossWeights::default();
        let loss = gp_loss(&f, &post, &phi, &w).unwrap().item().unwrap();
        let want = w.lambda_gp * (0.5f64.ln() + 0.5f64.ln());
        assert!((loss - want).abs() < 1e-12, "{loss} vs {want}");
    }

    #[test]
    fn gp_loss_grows_with_distance() {
        let phi = default_feature_net().unwrap();
        let n = 3 * 8 * 8;
        let target: Vec<f64> = vec![0.5; n];
        let post = GpPosterior { pseudo_gt: target.clone(), var_near: 0.5, var_far: 0.5 };
        let w = GpLossWeights::default();
        let near = DiffTensor::from_vec(vec![0.52; n], &[3, 8, 8]).unwrap();
        let far = DiffTensor::from_vec(vec![0.7; n], &[3, 8, 8]).unwrap();
        let ln = gp_loss(&near, &post, &phi, &w).unwrap().item().unwrap();
        let lf = gp_loss(&far, &post, &phi, &w).unwrap().item().unwrap();
        assert!(lf > ln);
    }

    #[test]
    fn bank_fifo_and_roundtrip() {
        let mut bank = FeatureBank::new(3, 2).unwrap();
        bank.push(vec![1.0, 0.0, 0.0]).unwrap();
        bank.push(vec![0.0, 1.0, 0.0]).unwrap();
        bank.push(vec![0.0, 0.0, 1.0]).unwrap();
        assert_eq!(bank.len(), 2);
        assert_eq!(bank.get(0), &[0.0, 1.0, 0.0]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bank_1.bin");
        bank.save(&path).unwrap();
        let back = FeatureBank::load(&path, 2).unwrap();
        assert_eq!(bank, back);
        assert!(bank.push(vec![1.0]).is_err());
    }
}
