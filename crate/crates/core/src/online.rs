//! Online variational inference with mini-batches.
//!
//! Each step fits the local beliefs of one mini-batch against the current
//! globals, computes the globals that batch alone would imply if the whole
//! dataset consisted of `N_total / N_S` copies of it, and blends the two in
//! natural-parameter space with weight `ρ_t = (ρ0 + t)^(-κ)`.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::gibbs::{gibbs_init, sample_local_codes, LocalScheme};
use crate::model::{compute_elbo_scaled, local_bound, residuals, GlobalVariationalState, Hyperparameters, LocalState};
use crate::patches::PatchMatrix;
use crate::rng::{derive_seed, substream, GLOBAL_STREAM};
use crate::vb::{local_pass, update_globals, UpdateRule};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LearningSchedule {
    rho0: f64,
    kappa: f64,
    batch_size: usize,
    n_total: usize,
}

impl LearningSchedule {
    /// `kappa` must lie in (0.5, 1] so that Σρ diverges while Σρ² converges.
    pub fn new(rho0: f64, kappa: f64, batch_size: usize, n_total: usize) -> Result<Self> {
        if !(kappa > 0.5 && kappa <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "forgetting rate kappa must lie in (0.5, 1], got {kappa}"
            )));
        }
        if !(rho0 >= 0.0 && rho0.is_finite()) {
            return Err(Error::InvalidParameter(format!("delay rho0 must be >= 0, got {rho0}")));
        }
        if batch_size == 0 || n_total == 0 {
            return Err(Error::InvalidParameter(
                "batch size and dataset size must be >= 1".into(),
            ));
        }
        Ok(Self {
            rho0,
            kappa,
            batch_size,
            n_total,
        })
    }

    pub fn rho0(&self) -> f64 {
        self.rho0
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn n_total(&self) -> usize {
        self.n_total
    }

    /// ρ_t = (ρ0 + t)^(-κ), for t >= 1.
    pub fn step_size(&self, t: u64) -> Result<f64> {
        if t == 0 {
            return Err(Error::InvalidParameter("iterations are counted from t = 1".into()));
        }
        Ok((self.rho0 + t as f64).powf(-self.kappa))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OnlineOptions {
    /// Local Gibbs sweeps initialising each batch.
    pub init_sweeps: usize,
    pub max_local_iters: usize,
    pub local_tol: f64,
    pub passes: usize,
    pub seed: u64,
    pub rule: UpdateRule,
}

impl Default for OnlineOptions {
    fn default() -> Self {
        Self {
            init_sweeps: 5,
            max_local_iters: 30,
            local_tol: 1e-4,
            passes: 1,
            seed: 0,
            rule: UpdateRule::Conjugate,
        }
    }
}

/// Local beliefs for a batch: a few Gibbs sweeps with the globals frozen at
/// their point estimates, then coordinate ascent until the local bound settles.
pub fn fit_batch_locals(
    g: &GlobalVariationalState,
    batch: &PatchMatrix,
    opts: &OnlineOptions,
    seed: u64,
) -> Result<(LocalState, usize)> {
    let pi: Vec<f64> = g.tau1.iter().zip(&g.tau2).map(|(a, b)| a / (a + b)).collect();
    let mut l = if opts.init_sweeps > 0 {
        let st = sample_local_codes(
            batch,
            g.phi.clone(),
            pi,
            g.e_gamma(),
            g.e_alpha(),
            LocalScheme::Blocked,
            opts.init_sweeps,
            seed,
        )?;
        st.local_beliefs()
    } else {
        LocalState::inactive(batch.count(), g.k, 1.0 / g.e_alpha())
    };
    let mut resid = residuals(g, &l, batch);
    let mut prev = local_bound(g, &l, batch)?;
    let mut iters = 0;
    while iters < opts.max_local_iters {
        local_pass(g, &mut l, &mut resid)?;
        iters += 1;
        let cur = local_bound(g, &l, batch)?;
        let rel = (cur - prev) / prev.abs().max(f64::MIN_POSITIVE);
        prev = cur;
        if rel.abs() < opts.local_tol {
            break;
        }
    }
    Ok((l, iters))
}

/// Globals implied by one batch as though it were replicated `scale` times.
pub fn intermediate_globals(
    g: &GlobalVariationalState,
    l: &LocalState,
    batch: &PatchMatrix,
    h: &Hyperparameters,
    scale: f64,
    rule: UpdateRule,
) -> Result<GlobalVariationalState> {
    let mut fitted = g.clone();
    let mut resid = residuals(g, l, batch);
    update_globals(&mut fitted, l, &mut resid, h, scale, rule)?;
    Ok(fitted)
}

/// `(1-ρ)·current + ρ·fitted` on natural parameters: Beta and Gamma shape/rate
/// pairs directly, Gaussians through precision and precision-weighted mean.
pub fn blend(current: &GlobalVariationalState, fitted: &GlobalVariationalState, rho: f64) -> GlobalVariationalState {
    if rho == 0.0 {
        return current.clone();
    }
    let mix = |a: f64, b: f64| (1.0 - rho) * a + rho * b;
    let dim = current.dim();
    let mut out = current.clone();
    for k in 0..current.k {
        out.tau1[k] = mix(current.tau1[k], fitted.tau1[k]);
        out.tau2[k] = mix(current.tau2[k], fitted.tau2[k]);
        let (pa, pb) = (1.0 / current.phi_var[k], 1.0 / fitted.phi_var[k]);
        let prec = mix(pa, pb);
        out.phi_var[k] = 1.0 / prec;
        let (ca, cb) = (current.phi_col(k), fitted.phi_col(k));
        let col = &mut out.phi[k * dim..(k + 1) * dim];
        for ((o, a), b) in col.iter_mut().zip(ca).zip(cb) {
            *o = mix(pa * a, pb * b) / prec;
        }
    }
    out.lambda1 = mix(current.lambda1, fitted.lambda1);
    out.lambda2 = mix(current.lambda2, fitted.lambda2);
    out.eps1 = mix(current.eps1, fitted.eps1);
    out.eps2 = mix(current.eps2, fitted.eps2);
    out
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub global: GlobalVariationalState,
    pub local: LocalState,
    pub rho: f64,
    pub local_iters: usize,
}

/// One stochastic natural-gradient step on `batch` at iteration `t`.
pub fn online_step(
    g: &GlobalVariationalState,
    batch: &PatchMatrix,
    t: u64,
    sched: &LearningSchedule,
    h: &Hyperparameters,
    opts: &OnlineOptions,
) -> Result<StepOutput> {
    let rho = sched.step_size(t)?;
    online_step_with_rho(g, batch, t, rho, sched.n_total(), h, opts)
}

/// [`online_step`] with an explicit step size.
pub fn online_step_with_rho(
    g: &GlobalVariationalState,
    batch: &PatchMatrix,
    t: u64,
    rho: f64,
    n_total: usize,
    h: &Hyperparameters,
    opts: &OnlineOptions,
) -> Result<StepOutput> {
    if batch.is_empty() {
        return Err(Error::InvalidParameter("empty mini-batch".into()));
    }
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::InvalidParameter(format!("step size {rho} outside [0, 1]")));
    }
    let (local, local_iters) = fit_batch_locals(g, batch, opts, derive_seed(opts.seed, t))?;
    let scale = n_total as f64 / batch.count() as f64;
    let fitted = intermediate_globals(g, &local, batch, h, scale, opts.rule)?;
    let global = blend(g, &fitted, rho);
    global.validate()?;
    Ok(StepOutput {
        global,
        local,
        rho,
        local_iters,
    })
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct OnlineTrace {
    pub t: Vec<u64>,
    pub rho: Vec<f64>,
    pub elbo_estimate: Vec<f64>,
    pub used_elements: Vec<usize>,
    pub heldout_psnr: Vec<Option<f64>>,
}

impl OnlineTrace {
    /// CSV with columns `t,rho,elbo_batch_estimate,used_elements,heldout_psnr_optional`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "t,rho,elbo_batch_estimate,used_elements,heldout_psnr_optional")?;
        for j in 0..self.t.len() {
            let psnr = self.heldout_psnr[j].map(|v| v.to_string()).unwrap_or_default();
            writeln!(
                out,
                "{},{},{},{},{}",
                self.t[j], self.rho[j], self.elbo_estimate[j], self.used_elements[j], psnr
            )?;
        }
        out.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct OnlineRun {
    pub global: GlobalVariationalState,
    pub trace: OnlineTrace,
}

/// Held-out metric evaluated after each step (e.g. PSNR of a validation image).
pub type HeldoutMetric<'a> = &'a (dyn Fn(&GlobalVariationalState) -> Result<f64> + Sync);

/// Shuffled passes over `data` in batches of `sched.batch_size()`.
///
/// The final batch of a pass may be smaller; its statistics are scaled by
/// `N_total / |batch|` like any other.
pub fn run_online_vb(
    data: &PatchMatrix,
    h: &Hyperparameters,
    sched: &LearningSchedule,
    opts: &OnlineOptions,
    heldout: Option<HeldoutMetric<'_>>,
) -> Result<OnlineRun> {
    if data.is_empty() {
        return Err(Error::InvalidParameter("no patches to fit".into()));
    }
    let mut order: Vec<usize> = (0..data.count()).collect();
    let mut t: u64 = 0;
    let mut trace = OnlineTrace::default();
    let mut global: Option<GlobalVariationalState> = None;
    for pass in 0..opts.passes.max(1) {
        order.shuffle(&mut substream(opts.seed, pass as u64, GLOBAL_STREAM));
        for chunk in order.chunks(sched.batch_size()) {
            let mut idx = chunk.to_vec();
            idx.sort_unstable();
            let batch = data.select(&idx);
            let g = match global.take() {
                Some(g) => g,
                None => gibbs_init(&batch, h, opts.init_sweeps.max(1), derive_seed(opts.seed, u64::MAX))?.0,
            };
            t += 1;
            let step = online_step(&g, &batch, t, sched, h, opts)?;
            let scale = sched.n_total() as f64 / batch.count() as f64;
            let elbo = compute_elbo_scaled(&step.global, &step.local, &batch, h, scale)?;
            let psnr = match heldout {
                Some(f) => Some(f(&step.global)?),
                None => None,
            };
            log::debug!(
                "online step {t}: rho {:.4} elbo~ {elbo:.6e} used {} local iters {}",
                step.rho,
                step.local.used_elements(),
                step.local_iters
            );
            trace.t.push(t);
            trace.rho.push(step.rho);
            trace.elbo_estimate.push(elbo);
            trace.used_elements.push(step.local.used_elements());
            trace.heldout_psnr.push(psnr);
            global = Some(step.global);
        }
    }
    Ok(OnlineRun {
        global: global.expect("at least one batch"),
        trace,
    })
}
