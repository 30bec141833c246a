//! Mean-field coordinate ascent.
//!
//! Global updates take a `scale` multiplier on every sum over patches so the
//! same code computes the stochastic intermediate parameters of online VB
//! (`scale = N_total / N_S`); batch VB always uses `scale = 1`.
//!
//! The engines keep a patch-major residual cache `r_i = x_i - Σ_k φ_k θ_ik ν_ik`
//! so that `E[x̃_{i(-k)}] = r_i + φ_k θ_ik ν_ik` costs O(2P).

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gibbs::gibbs_init;
use crate::model::{axpy, compute_elbo, dot, residuals, GlobalVariationalState, Hyperparameters, LocalState};
use crate::patches::PatchMatrix;

/// Which form of the update equations to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum UpdateRule {
    /// Expectations derived from the mean-field family (E[z²] = ν, E[s²] = θ² + Θ).
    #[default]
    Conjugate,
    /// Alternative forms: ν² in the dictionary precision, ν θ² φᵀφ in the
    /// noise-rate correction and θ² + Θ² in the weight-precision rate.
    Alternative,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VbOptions {
    /// Stop when the relative ELBO improvement of a sweep falls below this.
    pub tol: f64,
    pub max_sweeps: usize,
    /// Gibbs sweeps used to initialise.
    pub init_sweeps: usize,
    pub seed: u64,
    pub rule: UpdateRule,
}

impl Default for VbOptions {
    fn default() -> Self {
        Self {
            tol: 1e-5,
            max_sweeps: 200,
            init_sweeps: 5,
            seed: 0,
            rule: UpdateRule::Conjugate,
        }
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Per-element quantities the local update needs, frozen for one column.
#[derive(Debug, Clone, Copy)]
pub struct ElementMoments {
    /// φ_kᵀφ_k.
    pub mean_sq: f64,
    /// E[d_kᵀd_k].
    pub e_dd: f64,
    /// E[ln π_k] - E[ln(1 - π_k)].
    pub prior_logit: f64,
}

impl ElementMoments {
    pub fn from_global(g: &GlobalVariationalState, k: usize) -> Self {
        let (lp, lq) = g.e_ln_pi(k);
        Self {
            mean_sq: g.mean_sq(k),
            e_dd: g.e_dd(k),
            prior_logit: lp - lq,
        }
    }
}

/// Optimal `(ν, θ, Θ)` for one (patch, element) pair; updates the residual in place.
/// Returns `false` on a non-finite result.
#[allow(clippy::too_many_arguments)]
#[inline]
pub(crate) fn local_entry(
    col: &[f64],
    m: ElementMoments,
    e_gamma: f64,
    e_alpha: f64,
    resid: &mut [f64],
    nu: &mut f64,
    theta: &mut f64,
    theta_var: &mut f64,
) -> bool {
    let w_old = *theta * *nu;
    let proj = dot(col, resid) + m.mean_sq * w_old;
    let s2 = *theta * *theta + *theta_var;
    let logit = m.prior_logit - 0.5 * e_gamma * (s2 * m.e_dd - 2.0 * *theta * proj);
    let new_nu = sigmoid(logit);
    let new_var = 1.0 / (e_alpha + e_gamma * new_nu * m.e_dd);
    let new_theta = e_gamma * new_var * new_nu * proj;
    if !(new_nu.is_finite() && new_var.is_finite() && new_theta.is_finite()) {
        return false;
    }
    let w_new = new_theta * new_nu;
    if w_new != w_old {
        axpy(w_old - w_new, col, resid);
    }
    *nu = new_nu;
    *theta = new_theta;
    *theta_var = new_var;
    true
}

/// Updates `(ν_ik, θ_ik, Θ_ik)` for every patch at fixed `k`.
pub fn update_local_column(k: usize, g: &GlobalVariationalState, l: &mut LocalState, resid: &mut [f64]) -> Result<()> {
    let m = ElementMoments::from_global(g, k);
    let (e_gamma, e_alpha) = (g.e_gamma(), g.e_alpha());
    let col = g.phi_col(k);
    let kk = l.k;
    let dim = g.dim();
    l.nu.par_chunks_mut(kk)
        .zip(l.theta.par_chunks_mut(kk))
        .zip(l.theta_var.par_chunks_mut(kk))
        .zip(resid.par_chunks_mut(dim))
        .enumerate()
        .try_for_each(|(i, (((nu, th), tv), r))| {
            if local_entry(col, m, e_gamma, e_alpha, r, &mut nu[k], &mut th[k], &mut tv[k]) {
                Ok(())
            } else {
                Err(Error::NonFinite { patch: i, element: k })
            }
        })
}

/// Updates every `(ν_ik, θ_ik, Θ_ik)` of patch `i` in order of `k`, with the
/// expected residual recomputed from scratch.
pub fn update_local(i: usize, g: &GlobalVariationalState, l: &mut LocalState, x: &PatchMatrix) -> Result<()> {
    let mut r = x.column(i).to_vec();
    for (k, w) in l.mean_code(i).collect::<Vec<_>>().into_iter().enumerate() {
        if w != 0.0 {
            axpy(-w, g.phi_col(k), &mut r);
        }
    }
    let (e_gamma, e_alpha) = (g.e_gamma(), g.e_alpha());
    for k in 0..g.k {
        let m = ElementMoments::from_global(g, k);
        let j = l.idx(i, k);
        let (mut nu, mut th, mut tv) = (l.nu[j], l.theta[j], l.theta_var[j]);
        if !local_entry(g.phi_col(k), m, e_gamma, e_alpha, &mut r, &mut nu, &mut th, &mut tv) {
            return Err(Error::NonFinite { patch: i, element: k });
        }
        l.nu[j] = nu;
        l.theta[j] = th;
        l.theta_var[j] = tv;
    }
    Ok(())
}

/// One pass of local updates over every patch and element with globals frozen.
pub fn local_pass(g: &GlobalVariationalState, l: &mut LocalState, resid: &mut [f64]) -> Result<()> {
    let kk = g.k;
    let dim = g.dim();
    let moments: Vec<ElementMoments> = (0..kk).map(|k| ElementMoments::from_global(g, k)).collect();
    let (e_gamma, e_alpha) = (g.e_gamma(), g.e_alpha());
    l.nu.par_chunks_mut(kk)
        .zip(l.theta.par_chunks_mut(kk))
        .zip(l.theta_var.par_chunks_mut(kk))
        .zip(resid.par_chunks_mut(dim))
        .enumerate()
        .try_for_each(|(i, (((nu, th), tv), r))| {
            for k in 0..kk {
                if !local_entry(
                    g.phi_col(k),
                    moments[k],
                    e_gamma,
                    e_alpha,
                    r,
                    &mut nu[k],
                    &mut th[k],
                    &mut tv[k],
                ) {
                    return Err(Error::NonFinite { patch: i, element: k });
                }
            }
            Ok(())
        })
}

/// Dictionary element `k`: Φ_k = (2P + E[γ]·scale·Σ_i m_z (θ²+Θ))⁻¹ and
/// φ_k = E[γ]·Φ_k·scale·Σ_i θν E[x̃_{i(-k)}]. Keeps `resid` consistent.
pub fn update_dictionary(
    k: usize,
    g: &mut GlobalVariationalState,
    l: &LocalState,
    resid: &mut [f64],
    scale: f64,
    rule: UpdateRule,
) -> Result<()> {
    let dim = g.dim();
    let kk = l.k;
    let e_gamma = g.e_gamma();
    let old = g.phi_col(k).to_vec();
    let mut acc = vec![0.0; dim];
    let mut stat = 0.0;
    let mut w_sq = 0.0;
    for (i, r) in resid.chunks_exact(dim).enumerate() {
        let j = i * kk + k;
        let (nu, th, tv) = (l.nu[j], l.theta[j], l.theta_var[j]);
        let m_z = match rule {
            UpdateRule::Conjugate => nu,
            UpdateRule::Alternative => nu * nu,
        };
        stat += m_z * (th * th + tv);
        let w = th * nu;
        if w != 0.0 {
            axpy(w, r, &mut acc);
            w_sq += w * w;
        }
    }
    // Σ w_i x̃_i = Σ w_i r_i + φ_old Σ w_i²
    axpy(w_sq, &old, &mut acc);
    let prec = dim as f64 + e_gamma * scale * stat;
    let var = 1.0 / prec;
    if !(var > 0.0 && var.is_finite()) {
        return Err(Error::Numerical(format!("dictionary precision {prec} for element {k}")));
    }
    let coef = e_gamma * var * scale;
    let new: Vec<f64> = acc.iter().map(|a| coef * a).collect();
    if new.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("non-finite dictionary mean for element {k}")));
    }
    let delta: Vec<f64> = old.iter().zip(&new).map(|(o, n)| o - n).collect();
    resid.par_chunks_mut(dim).enumerate().for_each(|(i, r)| {
        let j = i * kk + k;
        let w = l.theta[j] * l.nu[j];
        if w != 0.0 {
            axpy(w, &delta, r);
        }
    });
    g.phi_col_mut(k).copy_from_slice(&new);
    g.phi_var[k] = var;
    Ok(())
}

/// τ_k1 = c0η0 + scale·Σν, τ_k2 = c0(1-η0) + scale·(N - Σν).
pub fn update_pi(g: &mut GlobalVariationalState, l: &LocalState, h: &Hyperparameters, scale: f64) {
    let (a0, b0) = h.beta_prior();
    for k in 0..g.k {
        let used: f64 = (0..l.n).map(|i| l.nu[i * l.k + k]).sum();
        g.tau1[k] = a0 + scale * used;
        g.tau2[k] = b0 + scale * (l.n as f64 - used);
    }
}

/// λ1 = c + scale·N·P, λ2 = d + ½·scale·Σ_i E‖x_i - D(s_i ⊙ z_i)‖².
pub fn update_gamma(
    g: &mut GlobalVariationalState,
    l: &LocalState,
    resid: &[f64],
    h: &Hyperparameters,
    scale: f64,
    rule: UpdateRule,
) -> Result<()> {
    let dim = g.dim();
    let kk = g.k;
    let mean_sq: Vec<f64> = (0..kk).map(|k| g.mean_sq(k)).collect();
    let e_dd: Vec<f64> = (0..kk).map(|k| g.e_dd(k)).collect();
    let per_patch: Vec<f64> = resid
        .par_chunks(dim)
        .enumerate()
        .map(|(i, r)| {
            let mut err = dot(r, r);
            for k in 0..kk {
                let j = i * kk + k;
                let (nu, th, tv) = (l.nu[j], l.theta[j], l.theta_var[j]);
                let mean_part = match rule {
                    UpdateRule::Conjugate => nu * nu,
                    UpdateRule::Alternative => nu,
                };
                err += nu * (th * th + tv) * e_dd[k] - mean_part * th * th * mean_sq[k];
            }
            err
        })
        .collect();
    let total: f64 = per_patch.iter().sum();
    let lambda2 = h.d + 0.5 * scale * total;
    if !(lambda2 > 0.0 && lambda2.is_finite()) {
        return Err(Error::Numerical(format!(
            "noise rate lambda2 = {lambda2} is not positive (update-order bug?)"
        )));
    }
    g.lambda1 = h.c + 0.5 * scale * (l.n * dim) as f64;
    g.lambda2 = lambda2;
    Ok(())
}

/// ε1 = e + ½·scale·N·K, ε2 = f + ½·scale·Σ_ik E[s_ik²].
pub fn update_alpha(g: &mut GlobalVariationalState, l: &LocalState, h: &Hyperparameters, scale: f64, rule: UpdateRule) {
    let second: f64 = l
        .theta
        .iter()
        .zip(&l.theta_var)
        .map(|(t, v)| match rule {
            UpdateRule::Conjugate => t * t + v,
            UpdateRule::Alternative => t * t + v * v,
        })
        .sum();
    g.eps1 = h.e + 0.5 * scale * (l.n * l.k) as f64;
    g.eps2 = h.f + 0.5 * scale * second;
}

/// All global updates in sequence: dictionary columns in order, then τ, λ, ε.
pub fn update_globals(
    g: &mut GlobalVariationalState,
    l: &LocalState,
    resid: &mut [f64],
    h: &Hyperparameters,
    scale: f64,
    rule: UpdateRule,
) -> Result<()> {
    for k in 0..g.k {
        update_dictionary(k, g, l, resid, scale, rule)?;
    }
    update_pi(g, l, h, scale);
    update_gamma(g, l, resid, h, scale, rule)?;
    update_alpha(g, l, h, scale, rule);
    Ok(())
}

/// One batch sweep: for each k the locals of every patch then dictionary k;
/// then τ, λ and ε.
pub fn vb_sweep(
    g: &mut GlobalVariationalState,
    l: &mut LocalState,
    resid: &mut [f64],
    h: &Hyperparameters,
    rule: UpdateRule,
) -> Result<()> {
    for k in 0..g.k {
        update_local_column(k, g, l, resid)?;
        update_dictionary(k, g, l, resid, 1.0, rule)?;
    }
    update_pi(g, l, h, 1.0);
    update_gamma(g, l, resid, h, 1.0, rule)?;
    update_alpha(g, l, h, 1.0, rule);
    Ok(())
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ElboTrace {
    /// `elbo[0]` is the bound at initialisation; `elbo[t]` after sweep `t`.
    pub elbo: Vec<f64>,
    pub used_elements: Vec<usize>,
}

impl ElboTrace {
    /// CSV with columns `sweep,elbo,used_elements`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "sweep,elbo,used_elements")?;
        for (t, (e, u)) in self.elbo.iter().zip(&self.used_elements).enumerate() {
            writeln!(out, "{t},{e},{u}")?;
        }
        out.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct BatchVbRun {
    pub global: GlobalVariationalState,
    pub local: LocalState,
    pub trace: ElboTrace,
    pub converged: bool,
}

/// Coordinate ascent from a Gibbs initialisation until the relative ELBO
/// improvement drops below `opts.tol` or `opts.max_sweeps` is reached.
pub fn run_batch_vb(x: &PatchMatrix, h: &Hyperparameters, opts: &VbOptions) -> Result<BatchVbRun> {
    if x.is_empty() {
        return Err(Error::InvalidParameter("no patches to fit".into()));
    }
    let (mut g, mut l) = gibbs_init(x, h, opts.init_sweeps.max(1), opts.seed)?;
    run_batch_vb_from(x, h, opts, &mut g, &mut l).map(|(trace, converged)| BatchVbRun {
        global: g,
        local: l,
        trace,
        converged,
    })
}

/// Coordinate ascent from a given starting point.
pub fn run_batch_vb_from(
    x: &PatchMatrix,
    h: &Hyperparameters,
    opts: &VbOptions,
    g: &mut GlobalVariationalState,
    l: &mut LocalState,
) -> Result<(ElboTrace, bool)> {
    let mut resid = residuals(g, l, x);
    let mut trace = ElboTrace::default();
    let mut prev = compute_elbo(g, l, x, h)?;
    trace.elbo.push(prev);
    trace.used_elements.push(l.used_elements());
    let mut converged = false;
    for sweep in 0..opts.max_sweeps {
        vb_sweep(g, l, &mut resid, h, opts.rule)?;
        let cur = compute_elbo(g, l, x, h)?;
        trace.elbo.push(cur);
        trace.used_elements.push(l.used_elements());
        let rel = (cur - prev) / prev.abs().max(f64::MIN_POSITIVE);
        log::debug!(
            "vb sweep {}: elbo {cur:.6e} rel {rel:.3e} used {}",
            sweep + 1,
            l.used_elements()
        );
        if rel < -1e-8 && opts.rule == UpdateRule::Conjugate {
            log::warn!("ELBO decreased by {rel:.3e} (relative) in sweep {}", sweep + 1);
        }
        prev = cur;
        if rel.abs() < opts.tol {
            converged = true;
            break;
        }
    }
    Ok((trace, converged))
}
