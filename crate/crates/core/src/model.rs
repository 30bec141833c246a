//! The coupled beta-Bernoulli factor model: parameter containers, the forward
//! sampler and the variational lower bound.
//!
//! Each coupled observation `x_i` (length `2P`, LR half on top) is
//! `D (s_i ⊙ z_i) + noise` with
//!
//! * `π_k ~ Beta(c0·η0, c0·(1-η0))`, `z_ik ~ Bernoulli(π_k)`
//! * `s_ik ~ N(0, 1/α)`, `α ~ Gamma(e, f)`
//! * `d_k ~ N(0, (2P)⁻¹ I)`
//! * noise `~ N(0, γ⁻¹ I)`, `γ ~ Gamma(c, d)`
//!
//! Gamma distributions are shape/rate throughout.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Bernoulli, Beta, Distribution, Gamma};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::error::{Error, Result};
use crate::patches::PatchMatrix;
use crate::rng::{substream, GLOBAL_STREAM};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    /// Beta-process concentration.
    pub c0: f64,
    /// Beta-process mean usage probability.
    pub eta0: f64,
    /// Gamma shape/rate for the noise precision.
    pub c: f64,
    pub d: f64,
    /// Gamma shape/rate for the weight precision.
    pub e: f64,
    pub f: f64,
    /// Truncation level.
    pub k: usize,
}

impl Default for Hyperparameters {
    fn default() -> Self {
        Self {
            c0: 2.0,
            eta0: 0.5,
            c: 1e-6,
            d: 1e-6,
            e: 1e-6,
            f: 1e-6,
            k: 512,
        }
    }
}

impl Hyperparameters {
    pub fn with_k(mut self, k: usize) -> Self {
        self.k = k;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("c0", self.c0),
            ("c", self.c),
            ("d", self.d),
            ("e", self.e),
            ("f", self.f),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.eta0 > 0.0 && self.eta0 < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "eta0 must lie in (0, 1), got {}",
                self.eta0
            )));
        }
        if self.k == 0 {
            return Err(Error::InvalidParameter("truncation level K must be >= 1".into()));
        }
        Ok(())
    }

    /// Prior Beta shapes for every π_k.
    pub fn beta_prior(&self) -> (f64, f64) {
        (self.c0 * self.eta0, self.c0 * (1.0 - self.eta0))
    }
}

/// A `dim × K` column-major dictionary whose columns stack an LR half over an
/// HR half (`dim = 2P`).
#[derive(Debug, Clone, PartialEq)]
pub struct CoupledDictionary {
    p: usize,
    k: usize,
    data: Vec<f64>,
}

impl CoupledDictionary {
    pub fn new(p: usize, k: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != 2 * p * k || p == 0 || k == 0 {
            return Err(Error::Dimension(format!(
                "dictionary data has {} values, expected 2*{p}*{k}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("dictionary has non-finite entries".into()));
        }
        Ok(Self { p, k, data })
    }

    pub fn zeros(p: usize, k: usize) -> Self {
        Self {
            p,
            k,
            data: vec![0.0; 2 * p * k],
        }
    }

    /// Single-scale patch dimension.
    pub fn p(&self) -> usize {
        self.p
    }

    pub fn dim(&self) -> usize {
        2 * self.p
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn column(&self, k: usize) -> &[f64] {
        let dim = self.dim();
        &self.data[k * dim..(k + 1) * dim]
    }

    pub fn column_mut(&mut self, k: usize) -> &mut [f64] {
        let dim = self.dim();
        &mut self.data[k * dim..(k + 1) * dim]
    }

    pub fn lr_half(&self, k: usize) -> &[f64] {
        &self.column(k)[..self.p]
    }

    pub fn hr_half(&self, k: usize) -> &[f64] {
        &self.column(k)[self.p..]
    }

    /// Contiguous `P × K` matrix of LR halves.
    pub fn lr_matrix(&self) -> Vec<f64> {
        (0..self.k).flat_map(|k| self.lr_half(k).iter().copied()).collect()
    }

    /// Contiguous `P × K` matrix of HR halves.
    pub fn hr_matrix(&self) -> Vec<f64> {
        (0..self.k).flat_map(|k| self.hr_half(k).iter().copied()).collect()
    }
}

/// Per-patch variational beliefs over the sparse code, patch-major
/// (`index = i * K + k`).
#[derive(Debug, Clone, PartialEq)]
pub struct LocalState {
    pub n: usize,
    pub k: usize,
    /// E[z_ik].
    pub nu: Vec<f64>,
    /// Mean of s_ik.
    pub theta: Vec<f64>,
    /// Variance of s_ik.
    pub theta_var: Vec<f64>,
}

impl LocalState {
    /// Everything switched off, weights at the given prior variance.
    pub fn inactive(n: usize, k: usize, prior_var: f64) -> Self {
        Self {
            n,
            k,
            nu: vec![0.0; n * k],
            theta: vec![0.0; n * k],
            theta_var: vec![prior_var; n * k],
        }
    }

    #[inline]
    pub fn idx(&self, i: usize, k: usize) -> usize {
        i * self.k + k
    }

    /// E[s_ik z_ik] for patch `i`, all k.
    pub fn mean_code(&self, i: usize) -> impl Iterator<Item = f64> + '_ {
        let r = i * self.k..(i + 1) * self.k;
        self.theta[r.clone()].iter().zip(&self.nu[r]).map(|(t, n)| t * n)
    }

    pub fn validate(&self) -> Result<()> {
        let len = self.n * self.k;
        if self.nu.len() != len || self.theta.len() != len || self.theta_var.len() != len {
            return Err(Error::Dimension("local state arrays do not match N×K".into()));
        }
        if self.nu.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Numerical("responsibility outside [0, 1]".into()));
        }
        if self.theta_var.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::Numerical("non-positive weight variance".into()));
        }
        Ok(())
    }

    /// Elements whose expected usage count is at least one patch.
    pub fn used_elements(&self) -> usize {
        (0..self.k)
            .filter(|&k| (0..self.n).map(|i| self.nu[i * self.k + k]).sum::<f64>() >= 1.0)
            .count()
    }

    /// Concatenates the patches of several local states with equal K.
    pub fn concat(parts: &[LocalState]) -> LocalState {
        let k = parts.first().map(|p| p.k).unwrap_or(0);
        let mut out = LocalState {
            n: 0,
            k,
            nu: Vec::new(),
            theta: Vec::new(),
            theta_var: Vec::new(),
        };
        for p in parts {
            assert_eq!(p.k, k, "concatenating local states with different K");
            out.n += p.n;
            out.nu.extend_from_slice(&p.nu);
            out.theta.extend_from_slice(&p.theta);
            out.theta_var.extend_from_slice(&p.theta_var);
        }
        out
    }
}

/// Variational posteriors over the global variables.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalVariationalState {
    /// Single-scale patch dimension; dictionary columns have length `2p`.
    pub p: usize,
    pub k: usize,
    /// Beta(τ1, τ2) over π_k.
    pub tau1: Vec<f64>,
    pub tau2: Vec<f64>,
    /// Dictionary means, `2p × K` column-major.
    pub phi: Vec<f64>,
    /// Isotropic per-column dictionary variance.
    pub phi_var: Vec<f64>,
    /// Gamma(λ1, λ2) over γ.
    pub lambda1: f64,
    pub lambda2: f64,
    /// Gamma(ε1, ε2) over α.
    pub eps1: f64,
    pub eps2: f64,
}

impl GlobalVariationalState {
    pub fn dim(&self) -> usize {
        2 * self.p
    }

    pub fn phi_col(&self, k: usize) -> &[f64] {
        let dim = self.dim();
        &self.phi[k * dim..(k + 1) * dim]
    }

    pub fn phi_col_mut(&mut self, k: usize) -> &mut [f64] {
        let dim = self.dim();
        &mut self.phi[k * dim..(k + 1) * dim]
    }

    pub fn e_gamma(&self) -> f64 {
        self.lambda1 / self.lambda2
    }

    pub fn e_alpha(&self) -> f64 {
        self.eps1 / self.eps2
    }

    /// φ_kᵀφ_k.
    pub fn mean_sq(&self, k: usize) -> f64 {
        dot(self.phi_col(k), self.phi_col(k))
    }

    /// E[d_kᵀd_k] = φ_kᵀφ_k + 2P·Φ_k.
    pub fn e_dd(&self, k: usize) -> f64 {
        self.mean_sq(k) + self.dim() as f64 * self.phi_var[k]
    }

    /// (E[ln π_k], E[ln(1 - π_k)]).
    pub fn e_ln_pi(&self, k: usize) -> (f64, f64) {
        let total = digamma(self.tau1[k] + self.tau2[k]);
        (digamma(self.tau1[k]) - total, digamma(self.tau2[k]) - total)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.k;
        if self.tau1.len() != k || self.tau2.len() != k || self.phi_var.len() != k || self.phi.len() != self.dim() * k {
            return Err(Error::Dimension("global state arrays do not match K".into()));
        }
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !self.tau1.iter().chain(&self.tau2).all(|&v| positive(v)) {
            return Err(Error::Numerical("non-positive Beta shape".into()));
        }
        if !self.phi_var.iter().all(|&v| positive(v)) {
            return Err(Error::Numerical("non-positive dictionary variance".into()));
        }
        if ![self.lambda1, self.lambda2, self.eps1, self.eps2]
            .into_iter()
            .all(positive)
        {
            return Err(Error::Numerical("non-positive gamma parameter".into()));
        }
        if self.phi.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite dictionary mean".into()));
        }
        Ok(())
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Training provenance stored with a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub method: String,
    pub seed: u64,
    pub n_patches: usize,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMetadata {
    pub patch_size: usize,
    pub sr_ratio: usize,
    pub hyperparameters: Hyperparameters,
    pub provenance: Provenance,
}

/// Point estimates consumed at super-resolution time, kept together with the
/// distribution parameters they were derived from.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorEstimate {
    pub global: GlobalVariationalState,
    pub meta: ModelMetadata,
}

impl PosteriorEstimate {
    pub fn new(global: GlobalVariationalState, meta: ModelMetadata) -> Result<Self> {
        global.validate()?;
        if meta.patch_size * meta.patch_size != global.p && meta.patch_size != 0 {
            return Err(Error::Dimension(format!(
                "patch size {} does not match dictionary half-dimension {}",
                meta.patch_size, global.p
            )));
        }
        Ok(Self { global, meta })
    }

    /// Posterior-mean dictionary.
    pub fn dictionary(&self) -> CoupledDictionary {
        CoupledDictionary::new(self.global.p, self.global.k, self.global.phi.clone()).expect("validated global state")
    }

    pub fn pi_hat(&self) -> Vec<f64> {
        self.global
            .tau1
            .iter()
            .zip(&self.global.tau2)
            .map(|(a, b)| a / (a + b))
            .collect()
    }

    pub fn gamma_hat(&self) -> f64 {
        self.global.e_gamma()
    }

    pub fn alpha_hat(&self) -> f64 {
        self.global.e_alpha()
    }

    pub fn k(&self) -> usize {
        self.global.k
    }

    pub fn p(&self) -> usize {
        self.global.p
    }
}

/// Optional fixed values replacing prior draws in [`sample_generative`].
#[derive(Debug, Clone, Default)]
pub struct GenerativeOverrides {
    pub gamma: Option<f64>,
    pub alpha: Option<f64>,
    pub pi: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct GenerativeSample {
    pub dictionary: CoupledDictionary,
    pub pi: Vec<f64>,
    /// Patch-major N×K indicators.
    pub z: Vec<bool>,
    /// Patch-major N×K weights.
    pub s: Vec<f64>,
    pub gamma: f64,
    pub alpha: f64,
    pub patches: PatchMatrix,
}

/// Beta draw that tolerates vanishing shapes (mass collapses onto 0 or 1).
pub(crate) fn sample_beta<R: Rng + ?Sized>(a: f64, b: f64, rng: &mut R) -> f64 {
    let v = match Beta::new(a, b) {
        Ok(beta) => beta.sample(rng),
        Err(_) => f64::NAN,
    };
    if v.is_finite() {
        return v;
    }
    let ga = Gamma::new(a, 1.0).map(|g| g.sample(rng)).unwrap_or(0.0);
    let gb = Gamma::new(b, 1.0).map(|g| g.sample(rng)).unwrap_or(0.0);
    if ga + gb > 0.0 {
        ga / (ga + gb)
    } else if a >= b {
        1.0
    } else {
        0.0
    }
}

/// Gamma(shape, rate) draw.
pub(crate) fn sample_gamma<R: Rng + ?Sized>(shape: f64, rate: f64, rng: &mut R) -> Result<f64> {
    let g = Gamma::new(shape, 1.0 / rate).map_err(|e| Error::Numerical(format!("gamma({shape}, {rate}): {e}")))?;
    Ok(g.sample(rng))
}

pub(crate) fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rand_distr::StandardNormal.sample(rng)
}

/// Forward draw from the full generative model.
///
/// `p` is the single-scale patch dimension; observations have length `2p`.
pub fn sample_generative(
    h: &Hyperparameters,
    p: usize,
    n: usize,
    seed: u64,
    overrides: &GenerativeOverrides,
) -> Result<GenerativeSample> {
    h.validate()?;
    if p == 0 || n == 0 {
        return Err(Error::InvalidParameter("P and N must be >= 1".into()));
    }
    let k = h.k;
    let dim = 2 * p;
    let mut rng = substream(seed, 0, GLOBAL_STREAM);

    let pi = match &overrides.pi {
        Some(pi) if pi.len() == k => pi.clone(),
        Some(pi) => {
            return Err(Error::Dimension(format!(
                "pi override has {} entries, K = {k}",
                pi.len()
            )))
        }
        None => {
            let (a, b) = h.beta_prior();
            (0..k).map(|_| sample_beta(a, b, &mut rng)).collect()
        }
    };
    let alpha = match overrides.alpha {
        Some(a) => a,
        None => sample_gamma(h.e, h.f, &mut rng)?,
    };
    let gamma = match overrides.gamma {
        Some(g) => g,
        None => sample_gamma(h.c, h.d, &mut rng)?,
    };

    let d_sd = (1.0 / dim as f64).sqrt();
    let dict_data: Vec<f64> = (0..dim * k).map(|_| d_sd * std_normal(&mut rng)).collect();
    let dictionary = CoupledDictionary { p, k, data: dict_data };

    let bern: Vec<Bernoulli> = pi
        .iter()
        .map(|&q| Bernoulli::new(q.clamp(0.0, 1.0)).expect("clamped probability"))
        .collect();
    let s_sd = (1.0 / alpha).sqrt();
    let noise_sd = (1.0 / gamma).sqrt();
    let mut z = Vec::with_capacity(n * k);
    let mut s = Vec::with_capacity(n * k);
    let mut x = vec![0.0; n * dim];
    for i in 0..n {
        let xi = &mut x[i * dim..(i + 1) * dim];
        for kk in 0..k {
            let zi = bern[kk].sample(&mut rng);
            let si = s_sd * std_normal(&mut rng);
            z.push(zi);
            s.push(si);
            if zi {
                axpy(si, dictionary.column(kk), xi);
            }
        }
        for v in xi.iter_mut() {
            *v += noise_sd * std_normal(&mut rng);
        }
    }
    Ok(GenerativeSample {
        dictionary,
        pi,
        z,
        s,
        gamma,
        alpha,
        patches: PatchMatrix::from_columns(dim, x)?,
    })
}

/// `x_i - Σ_j φ_j θ_ij ν_ij` for every patch, patch-major.
pub fn residuals(g: &GlobalVariationalState, l: &LocalState, x: &PatchMatrix) -> Vec<f64> {
    let dim = g.dim();
    let mut out = x.data().to_vec();
    out.par_chunks_mut(dim).enumerate().for_each(|(i, r)| {
        for (k, w) in l.mean_code(i).enumerate() {
            if w != 0.0 {
                axpy(-w, g.phi_col(k), r);
            }
        }
    });
    out
}

/// E_q[x̃_{i(-k)}]: the expected reconstruction error of patch `i` leaving out element `k`.
pub fn expected_residual(i: usize, k: usize, g: &GlobalVariationalState, l: &LocalState, x: &PatchMatrix) -> Vec<f64> {
    let mut r = x.column(i).to_vec();
    for (j, w) in l.mean_code(i).enumerate() {
        if j != k && w != 0.0 {
            axpy(-w, g.phi_col(j), &mut r);
        }
    }
    r
}

fn xlogx(v: f64) -> f64 {
    if v > 0.0 {
        v * v.ln()
    } else {
        0.0
    }
}

fn ln_beta(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

fn gamma_entropy(shape: f64, rate: f64) -> f64 {
    shape - rate.ln() + ln_gamma(shape) + (1.0 - shape) * digamma(shape)
}

fn beta_entropy(a: f64, b: f64) -> f64 {
    ln_beta(a, b) - (a - 1.0) * digamma(a) - (b - 1.0) * digamma(b) + (a + b - 2.0) * digamma(a + b)
}

fn gamma_log_prior(shape: f64, rate: f64, e_x: f64, e_ln_x: f64) -> f64 {
    shape * rate.ln() - ln_gamma(shape) + (shape - 1.0) * e_ln_x - rate * e_x
}

/// The evidence lower bound.
pub fn compute_elbo(g: &GlobalVariationalState, l: &LocalState, x: &PatchMatrix, h: &Hyperparameters) -> Result<f64> {
    compute_elbo_scaled(g, l, x, h, 1.0)
}

/// Lower bound with the per-patch terms weighted by `scale` (online VB uses
/// `N_total / N_S` to estimate the full-data bound from a mini-batch).
pub fn compute_elbo_scaled(
    g: &GlobalVariationalState,
    l: &LocalState,
    x: &PatchMatrix,
    h: &Hyperparameters,
    scale: f64,
) -> Result<f64> {
    let local = local_bound(g, l, x)?;
    let total = global_bound(g, h)? + scale * local;
    if !total.is_finite() {
        return Err(Error::Numerical("ELBO is not finite".into()));
    }
    Ok(total)
}

/// Sum over patches of the bound terms that involve local variables: the
/// indicator and weight priors, their entropies and the likelihood.
pub fn local_bound(g: &GlobalVariationalState, l: &LocalState, x: &PatchMatrix) -> Result<f64> {
    g.validate()?;
    if l.n != x.count() || l.k != g.k || x.dim() != g.dim() {
        return Err(Error::Dimension(format!(
            "ELBO inputs disagree: locals {}x{}, data {}x{}, dictionary {}x{}",
            l.n,
            l.k,
            x.count(),
            x.dim(),
            g.dim(),
            g.k
        )));
    }
    if l.theta_var.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::Numerical("non-positive weight variance".into()));
    }
    let k = g.k;
    let dim = g.dim() as f64;
    let ln2pi = (2.0 * PI).ln();
    let e_gamma = g.e_gamma();
    let e_ln_gamma = digamma(g.lambda1) - g.lambda2.ln();
    let e_alpha = g.e_alpha();
    let e_ln_alpha = digamma(g.eps1) - g.eps2.ln();
    let ln_pi: Vec<(f64, f64)> = (0..k).map(|kk| g.e_ln_pi(kk)).collect();
    let mean_sq: Vec<f64> = (0..k).map(|kk| g.mean_sq(kk)).collect();
    let e_dd: Vec<f64> = (0..k).map(|kk| g.e_dd(kk)).collect();

    let resid = residuals(g, l, x);
    let per_patch: Vec<f64> = resid
        .par_chunks(g.dim())
        .enumerate()
        .map(|(i, r)| {
            let mut acc = 0.0;
            let mut err = dot(r, r);
            for kk in 0..k {
                let j = i * k + kk;
                let (nu, th, tv) = (l.nu[j], l.theta[j], l.theta_var[j]);
                let s2 = th * th + tv;
                let (lp, lq) = ln_pi[kk];
                // indicator prior + Bernoulli entropy
                acc += nu * lp + (1.0 - nu) * lq - xlogx(nu) - xlogx(1.0 - nu);
                // weight prior + Gaussian entropy
                acc += 0.5 * (e_ln_alpha - ln2pi - e_alpha * s2) + 0.5 * (ln2pi + 1.0 + tv.ln());
                err += nu * s2 * e_dd[kk] - nu * nu * th * th * mean_sq[kk];
            }
            acc + 0.5 * dim * (e_ln_gamma - ln2pi) - 0.5 * e_gamma * err
        })
        .collect();
    Ok(per_patch.iter().sum())
}

/// Bound terms that involve only global variables.
pub fn global_bound(g: &GlobalVariationalState, h: &Hyperparameters) -> Result<f64> {
    g.validate()?;
    let dim = g.dim() as f64;
    let ln2pi = (2.0 * PI).ln();
    let e_gamma = g.e_gamma();
    let e_ln_gamma = digamma(g.lambda1) - g.lambda2.ln();
    let e_alpha = g.e_alpha();
    let e_ln_alpha = digamma(g.eps1) - g.eps2.ln();
    let (a0, b0) = h.beta_prior();
    let mut global = 0.0;
    for kk in 0..g.k {
        let (lp, lq) = g.e_ln_pi(kk);
        global += -ln_beta(a0, b0) + (a0 - 1.0) * lp + (b0 - 1.0) * lq;
        global += beta_entropy(g.tau1[kk], g.tau2[kk]);
        // dictionary prior N(0, dim⁻¹ I) + entropy
        global += 0.5 * dim * (dim.ln() - ln2pi) - 0.5 * dim * g.e_dd(kk);
        global += 0.5 * dim * (ln2pi + 1.0 + g.phi_var[kk].ln());
    }
    global += gamma_log_prior(h.e, h.f, e_alpha, e_ln_alpha) + gamma_entropy(g.eps1, g.eps2);
    global += gamma_log_prior(h.c, h.d, e_gamma, e_ln_gamma) + gamma_entropy(g.lambda1, g.lambda2);
    Ok(global)
}
