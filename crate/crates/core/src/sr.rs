//! Super-resolution with a trained coupled dictionary.
//!
//! The Y channel is bicubic-upscaled, cut into patches, and each patch's
//! sparse code is inferred against the LR half of the dictionary. The HR half
//! then synthesises the output patch from the same code. An optional
//! back-projection pass pulls the result towards consistency with the
//! observed LR image. Chroma is bicubic only.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gibbs::{sample_local_codes, LocalScheme};
use crate::image::{ImagePlane, YCbCrImage};
use crate::model::{axpy, dot, LocalState, PosteriorEstimate};
use crate::patches::{extract_patches, reassemble, PatchMatrix};
use crate::resample::{reduction_operator, resize_bicubic, Resampler};
use crate::rng::derive_seed;
use crate::vb::{local_entry, ElementMoments};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CodeInference {
    #[default]
    Vb,
    Gibbs,
}

/// How `(ν, θ)` become a point code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CodeMode {
    /// `[ν > 0.5]·θ`.
    #[default]
    Hard,
    /// `ν·θ`.
    Soft,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SrConfig {
    pub sr_ratio: usize,
    pub patch_size: usize,
    pub stride: usize,
    pub code_inference: CodeInference,
    /// VB local passes, or Gibbs sweeps averaged, after a 3-sweep Gibbs start.
    pub code_iters: usize,
    pub code_mode: CodeMode,
    pub postprocess: bool,
    pub postprocess_c: f64,
    pub postprocess_iters: usize,
    pub postprocess_step: f64,
    /// Use `c‖f(X) - f(X̂)‖²` as the fidelity term instead of `c‖X - X̂‖²`.
    pub literal_objective: bool,
    pub seed: u64,
}

impl Default for SrConfig {
    fn default() -> Self {
        Self {
            sr_ratio: 2,
            patch_size: 8,
            stride: 2,
            code_inference: CodeInference::Vb,
            code_iters: 10,
            code_mode: CodeMode::Hard,
            postprocess: true,
            postprocess_c: 1.0,
            postprocess_iters: 20,
            postprocess_step: 0.1,
            literal_objective: false,
            seed: 0,
        }
    }
}

impl SrConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sr_ratio < 2 {
            return Err(Error::InvalidParameter(format!(
                "sr_ratio must be >= 2, got {}",
                self.sr_ratio
            )));
        }
        if self.patch_size == 0 || self.stride == 0 || self.stride > self.patch_size {
            return Err(Error::InvalidParameter(format!(
                "stride {} must lie in [1, patch_size = {}]",
                self.stride, self.patch_size
            )));
        }
        if !(self.postprocess_c >= 0.0 && self.postprocess_c.is_finite()) {
            return Err(Error::InvalidParameter("postprocess_c must be >= 0".into()));
        }
        if !(self.postprocess_step > 0.0 && self.postprocess_step.is_finite()) {
            return Err(Error::InvalidParameter("postprocess_step must be positive".into()));
        }
        Ok(())
    }
}

/// LR half of the dictionary, `P × K` column-major.
fn lr_dictionary(est: &PosteriorEstimate) -> Vec<f64> {
    let (p, dim) = (est.p(), est.global.dim());
    (0..est.k())
        .flat_map(|k| est.global.phi[k * dim..k * dim + p].iter().copied())
        .collect()
}

/// Local beliefs for LR-only patches with every global frozen at its point
/// estimate. Patches must already be centered.
pub fn infer_codes_lr(lr_patches: &PatchMatrix, est: &PosteriorEstimate, cfg: &SrConfig) -> Result<LocalState> {
    let (p, k) = (est.p(), est.k());
    if lr_patches.dim() != p {
        return Err(Error::Dimension(format!(
            "patches have dimension {} but the model's LR half has {p}",
            lr_patches.dim()
        )));
    }
    let dict = lr_dictionary(est);
    let pi = est.pi_hat();
    let (gamma, alpha) = (est.gamma_hat(), est.alpha_hat());
    let n = lr_patches.count();
    if n == 0 {
        return Ok(LocalState::inactive(0, k, 1.0 / alpha));
    }
    let seed = derive_seed(cfg.seed, 0x5352);
    match cfg.code_inference {
        CodeInference::Vb => {
            let init = sample_local_codes(
                lr_patches,
                dict.clone(),
                pi.clone(),
                gamma,
                alpha,
                LocalScheme::Blocked,
                3,
                seed,
            )?;
            let mut l = init.local_beliefs();
            let moments: Vec<ElementMoments> = (0..k)
                .map(|kk| {
                    let col = &dict[kk * p..(kk + 1) * p];
                    let sq = dot(col, col);
                    ElementMoments {
                        mean_sq: sq,
                        e_dd: sq,
                        prior_logit: pi[kk].ln() - (-pi[kk]).ln_1p(),
                    }
                })
                .collect();
            l.nu.par_chunks_mut(k)
                .zip(l.theta.par_chunks_mut(k))
                .zip(l.theta_var.par_chunks_mut(k))
                .zip(lr_patches.data().par_chunks(p))
                .enumerate()
                .try_for_each(|(i, (((nu, th), tv), x))| {
                    let mut r = x.to_vec();
                    for kk in 0..k {
                        axpy(-th[kk] * nu[kk], &dict[kk * p..(kk + 1) * p], &mut r);
                    }
                    for _ in 0..cfg.code_iters {
                        for kk in 0..k {
                            let col = &dict[kk * p..(kk + 1) * p];
                            if !local_entry(
                                col,
                                moments[kk],
                                gamma,
                                alpha,
                                &mut r,
                                &mut nu[kk],
                                &mut th[kk],
                                &mut tv[kk],
                            ) {
                                return Err(Error::NonFinite { patch: i, element: kk });
                            }
                        }
                    }
                    Ok(())
                })?;
            Ok(l)
        }
        CodeInference::Gibbs => {
            let mut st = sample_local_codes(lr_patches, dict, pi, gamma, alpha, LocalScheme::Blocked, 3, seed)?;
            let sweeps = cfg.code_iters.max(1);
            let mut on = vec![0.0; n * k];
            let mut weight = vec![0.0; n * k];
            for _ in 0..sweeps {
                st.sample_locals();
                st.sweeps += 1;
                for j in 0..n * k {
                    if st.z[j] {
                        on[j] += 1.0;
                        weight[j] += st.s[j];
                    }
                }
            }
            let theta: Vec<f64> = on
                .iter()
                .zip(&weight)
                .map(|(&c, &w)| if c > 0.0 { w / c } else { 0.0 })
                .collect();
            Ok(LocalState {
                n,
                k,
                nu: on.iter().map(|c| c / sweeps as f64).collect(),
                theta,
                theta_var: vec![1.0 / alpha; n * k],
            })
        }
    }
}

/// Point code of patch `i`.
pub fn point_code(codes: &LocalState, i: usize, mode: CodeMode) -> Vec<f64> {
    let r = i * codes.k..(i + 1) * codes.k;
    codes.nu[r.clone()]
        .iter()
        .zip(&codes.theta[r])
        .map(|(&nu, &th)| match mode {
            CodeMode::Hard => {
                if nu > 0.5 {
                    th
                } else {
                    0.0
                }
            }
            CodeMode::Soft => nu * th,
        })
        .collect()
}

/// HR patches `D_h·w_j + mean_j` for every code.
pub fn synthesize_hr(
    codes: &LocalState,
    est: &PosteriorEstimate,
    means: &[f64],
    mode: CodeMode,
) -> Result<PatchMatrix> {
    let (p, k, dim) = (est.p(), est.k(), est.global.dim());
    if codes.k != k {
        return Err(Error::Dimension(format!(
            "codes have K = {}, model has K = {k}",
            codes.k
        )));
    }
    if means.len() != codes.n {
        return Err(Error::Dimension(format!("{} means for {} codes", means.len(), codes.n)));
    }
    let mut data = vec![0.0; p * codes.n];
    data.par_chunks_mut(p).enumerate().for_each(|(i, out)| {
        out.fill(means[i]);
        for (kk, w) in point_code(codes, i, mode).into_iter().enumerate() {
            if w != 0.0 {
                axpy(w, &est.global.phi[kk * dim + p..(kk + 1) * dim], out);
            }
        }
    });
    PatchMatrix::from_columns(p, data)
}

/// Objective and gradient of the back-projection problem.
pub struct BackProjection {
    op: Resampler,
    lr: Vec<f64>,
    anchor: Vec<f64>,
    anchor_lr: Vec<f64>,
    c: f64,
    literal: bool,
}

impl BackProjection {
    pub fn new(hr_est: &ImagePlane, lr_obs: &ImagePlane, c: f64, literal: bool) -> Result<Self> {
        let (w, h) = (hr_est.width(), hr_est.height());
        let (lw, lh) = (lr_obs.width(), lr_obs.height());
        if lw == 0 || lh == 0 || w % lw != 0 || h % lh != 0 || w / lw != h / lh {
            return Err(Error::Dimension(format!(
                "LR image {lw}x{lh} is not an integer reduction of {w}x{h}"
            )));
        }
        let op = reduction_operator(w, h, w / lw);
        let anchor_lr = op.apply(hr_est.data());
        Ok(Self {
            op,
            lr: lr_obs.data().to_vec(),
            anchor: hr_est.data().to_vec(),
            anchor_lr,
            c,
            literal,
        })
    }

    /// `‖f(X) - L‖² + c‖X - X̂‖²`, or `c‖f(X) - f(X̂)‖²` as the second term in literal mode.
    pub fn objective(&self, x: &[f64]) -> f64 {
        let fx = self.op.apply(x);
        let data: f64 = fx.iter().zip(&self.lr).map(|(a, b)| (a - b) * (a - b)).sum();
        let prior: f64 = if self.literal {
            fx.iter().zip(&self.anchor_lr).map(|(a, b)| (a - b) * (a - b)).sum()
        } else {
            x.iter().zip(&self.anchor).map(|(a, b)| (a - b) * (a - b)).sum()
        };
        data + self.c * prior
    }

    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let fx = self.op.apply(x);
        let mut back: Vec<f64> = fx
            .iter()
            .zip(&self.lr)
            .zip(&self.anchor_lr)
            .map(|((a, l), m)| {
                let mut v = 2.0 * (a - l);
                if self.literal {
                    v += 2.0 * self.c * (a - m);
                }
                v
            })
            .collect();
        back = self.op.apply_adjoint(&back);
        if !self.literal {
            for ((g, xi), a) in back.iter_mut().zip(x).zip(&self.anchor) {
                *g += 2.0 * self.c * (xi - a);
            }
        }
        back
    }
}

/// Gradient descent from `hr_est`; the step halves whenever it would raise
/// the objective. Returns the result and the objective after each accepted step
/// (the first entry is the starting value).
pub fn back_project_traced(hr_est: &ImagePlane, lr_obs: &ImagePlane, cfg: &SrConfig) -> Result<(ImagePlane, Vec<f64>)> {
    let bp = BackProjection::new(hr_est, lr_obs, cfg.postprocess_c, cfg.literal_objective)?;
    let mut x = hr_est.data().to_vec();
    let mut obj = bp.objective(&x);
    let mut trace = vec![obj];
    let mut step = cfg.postprocess_step;
    for _ in 0..cfg.postprocess_iters {
        let g = bp.gradient(&x);
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged { objective: obj });
        }
        let mut accepted = false;
        for _ in 0..60 {
            let cand: Vec<f64> = x.iter().zip(&g).map(|(a, b)| a - step * b).collect();
            let c = bp.objective(&cand);
            if c.is_nan() {
                return Err(Error::Diverged { objective: c });
            }
            if c <= obj {
                x = cand;
                obj = c;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
        trace.push(obj);
    }
    Ok((ImagePlane::new(hr_est.width(), hr_est.height(), x)?, trace))
}

/// Back-projection post-process; the result is clamped to [0, 255].
pub fn back_project(hr_est: &ImagePlane, lr_obs: &ImagePlane, cfg: &SrConfig) -> Result<ImagePlane> {
    Ok(back_project_traced(hr_est, lr_obs, cfg)?.0.clamped())
}

/// Super-resolves the luma plane alone.
pub fn super_resolve_luma(lr: &ImagePlane, est: &PosteriorEstimate, cfg: &SrConfig) -> Result<ImagePlane> {
    cfg.validate()?;
    check_model(est, cfg)?;
    let (w, h) = (lr.width() * cfg.sr_ratio, lr.height() * cfg.sr_ratio);
    let up = resize_bicubic(lr, w, h)?;
    let mut patches = extract_patches(&up, cfg.patch_size, cfg.stride)?;
    let means = patches.center_columns();
    let codes = infer_codes_lr(&patches, est, cfg)?;
    let synth = synthesize_hr(&codes, est, &means, cfg.code_mode)?;
    let placed = PatchMatrix::new(
        synth.dim(),
        synth.data().to_vec(),
        patches.coords().to_vec(),
        cfg.patch_size,
        cfg.stride,
    )?;
    let hr = reassemble(&placed, w, h)?;
    if cfg.postprocess && cfg.postprocess_iters > 0 {
        back_project(&hr, lr, cfg)
    } else {
        Ok(hr)
    }
}

fn check_model(est: &PosteriorEstimate, cfg: &SrConfig) -> Result<()> {
    if est.p() != cfg.patch_size * cfg.patch_size {
        return Err(Error::Dimension(format!(
            "model patch dimension {} does not match patch size {}",
            est.p(),
            cfg.patch_size
        )));
    }
    if est.meta.sr_ratio != 0 && est.meta.sr_ratio != cfg.sr_ratio {
        return Err(Error::InvalidParameter(format!(
            "model was trained for ratio {}, asked for {}",
            est.meta.sr_ratio, cfg.sr_ratio
        )));
    }
    Ok(())
}

pub fn super_resolve(lr: &YCbCrImage, est: &PosteriorEstimate, cfg: &SrConfig) -> Result<YCbCrImage> {
    let y = super_resolve_luma(&lr.y, est, cfg)?;
    let (w, h) = (y.width(), y.height());
    let cb = resize_bicubic(&lr.cb, w, h)?;
    let cr = resize_bicubic(&lr.cr, w, h)?;
    YCbCrImage::new(y, cb, cr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{GlobalVariationalState, Hyperparameters, ModelMetadata, Provenance};

    fn estimate(p: usize, k: usize, phi: Vec<f64>, gamma: f64, alpha: f64, pi: f64) -> PosteriorEstimate {
        let global = GlobalVariationalState {
            p,
            k,
            tau1: vec![pi * 1000.0; k],
            tau2: vec![(1.0 - pi) * 1000.0; k],
            phi,
            phi_var: vec![1e-6; k],
            lambda1: gamma * 100.0,
            lambda2: 100.0,
            eps1: alpha * 100.0,
            eps2: 100.0,
        };
        let meta = ModelMetadata {
            patch_size: 0,
            sr_ratio: 0,
            hyperparameters: Hyperparameters::default().with_k(k),
            provenance: Provenance {
                method: "test".into(),
                seed: 0,
                n_patches: 0,
                iterations: 0,
            },
        };
        PosteriorEstimate::new(global, meta).unwrap()
    }

    /// Orthonormal LR halves (unit vectors), HR halves = 2 × LR halves.
    fn orthogonal_model(gamma: f64, alpha: f64) -> PosteriorEstimate {
        let (p, k) = (4, 3);
        let mut phi = vec![0.0; 2 * p * k];
        for kk in 0..k {
            phi[kk * 2 * p + kk] = 1.0;
            phi[kk * 2 * p + p + kk] = 2.0;
        }
        estimate(p, k, phi, gamma, alpha, 0.3)
    }

    #[test]
    fn zero_patch_gives_zero_code() {
        let est = orthogonal_model(1e4, 1.0);
        let x = PatchMatrix::from_columns(4, vec![0.0; 4]).unwrap();
        let l = infer_codes_lr(&x, &est, &SrConfig::default()).unwrap();
        for i in 0..3 {
            assert!((l.nu[i] * l.theta[i]).abs() < 1e-6);
        }
        let hr = synthesize_hr(&l, &est, &[0.0], CodeMode::Soft).unwrap();
        assert!(hr.data().iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn code_concentrates_on_matching_column() {
        let est = orthogonal_model(1e6, 1.0);
        let x = PatchMatrix::from_columns(4, vec![0.0, 1.0, 0.0, 0.0]).unwrap();
        let l = infer_codes_lr(&x, &est, &SrConfig::default()).unwrap();
        let w = point_code(&l, 0, CodeMode::Hard);
        assert!((w[1] - 1.0).abs() < 1e-3, "{w:?}");
        assert!(w[0].abs() < 1e-3 && w[2].abs() < 1e-3);
        let hr = synthesize_hr(&l, &est, &[5.0], CodeMode::Hard).unwrap();
        assert!((hr.column(0)[1] - 7.0).abs() < 2e-3);
        assert!((hr.column(0)[0] - 5.0).abs() < 1e-9);
    }

    #[test]
    fn strong_weight_prior_forces_zero_weights() {
        let est = orthogonal_model(1.0, 1e9);
        let x = PatchMatrix::from_columns(4, vec![3.0, -2.0, 1.0, 0.5]).unwrap();
        let l = infer_codes_lr(&x, &est, &SrConfig::default()).unwrap();
        assert!(l.theta.iter().all(|t| t.abs() < 1e-6));
    }

    #[test]
    fn gibbs_mode_recovers_matching_column() {
        let est = orthogonal_model(1e6, 1.0);
        let x = PatchMatrix::from_columns(4, vec![0.0, 0.0, 1.5, 0.0]).unwrap();
        let cfg = SrConfig {
            code_inference: CodeInference::Gibbs,
            code_iters: 20,
            ..SrConfig::default()
        };
        let l = infer_codes_lr(&x, &est, &cfg).unwrap();
        let w = point_code(&l, 0, CodeMode::Hard);
        assert!((w[2] - 1.5).abs() < 0.01, "{w:?}");
    }

    #[test]
    fn synthesis_is_linear_in_the_code() {
        let est = orthogonal_model(1.0, 1.0);
        let mk = |theta: Vec<f64>| LocalState {
            n: 1,
            k: 3,
            nu: vec![1.0; 3],
            theta,
            theta_var: vec![1.0; 3],
        };
        let a = synthesize_hr(&mk(vec![1.0, 0.0, 2.0]), &est, &[0.0], CodeMode::Soft).unwrap();
        let b = synthesize_hr(&mk(vec![0.0, -1.0, 0.5]), &est, &[0.0], CodeMode::Soft).unwrap();
        let ab = synthesize_hr(&mk(vec![2.0, 3.0, 2.5]), &est, &[0.0], CodeMode::Soft).unwrap();
        for j in 0..4 {
            let lin = 2.0 * a.column(0)[j] - 3.0 * b.column(0)[j];
            assert!((ab.column(0)[j] - lin).abs() < 1e-12);
        }
    }

    #[test]
    fn dimension_mismatch_names_both() {
        let est = orthogonal_model(1.0, 1.0);
        let x = PatchMatrix::from_columns(5, vec![0.0; 5]).unwrap();
        let msg = infer_codes_lr(&x, &est, &SrConfig::default()).unwrap_err().to_string();
        assert!(msg.contains('5') && msg.contains('4'), "{msg}");
    }

    #[test]
    fn zero_iterations_is_identity() {
        let hr = ImagePlane::from_fn(8, 8, |r, c| (r * 13 + c * 7) as f64);
        let lr = ImagePlane::filled(4, 4, 10.0);
        let cfg = SrConfig {
            postprocess_iters: 0,
            ..SrConfig::default()
        };
        let (out, trace) = back_project_traced(&hr, &lr, &cfg).unwrap();
        assert_eq!(out, hr);
        assert_eq!(trace.len(), 1);
    }

    #[test]
    fn ratio_one_without_anchor_converges_to_observation() {
        let hr = ImagePlane::from_fn(6, 6, |r, c| (r * 10 + c) as f64);
        let lr = ImagePlane::from_fn(6, 6, |r, c| 100.0 + (r as f64 - c as f64));
        let cfg = SrConfig {
            postprocess_c: 0.0,
            postprocess_iters: 200,
            postprocess_step: 0.25,
            ..SrConfig::default()
        };
        let (out, _) = back_project_traced(&hr, &lr, &cfg).unwrap();
        for (a, b) in out.data().iter().zip(lr.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn consistent_estimate_is_a_fixed_point() {
        let hr = ImagePlane::filled(8, 8, 42.0);
        let lr = ImagePlane::filled(4, 4, 42.0);
        let out = back_project(&hr, &lr, &SrConfig::default()).unwrap();
        for v in out.data() {
            assert!((v - 42.0).abs() < 1e-9);
        }
    }
}
