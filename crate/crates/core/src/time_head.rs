//! Inter-event time distribution: asymmetric log-Laplace mixture (and the
//! log-normal mixture used for comparison), as plain functions and as
//! graph heads on the hidden state.
//!
//! All densities are handled in `y = ln τ` space, where each component is
//! an asymmetric Laplace with knot `β̂`, left exponent `λ̂γ̂` and right
//! exponent `λ̂/γ̂`.

use amtpp_autodiff::{logsumexp, Graph, ParamId, ParamStore, Var};
use rand::distr::Open01;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{AmtppError, Result};
use crate::init::{glorot, zeros};

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

fn check_tau(tau: f64) -> Result<f64> {
    if tau > 0.0 && tau.is_finite() {
        Ok(tau.ln())
    } else {
        Err(AmtppError::Tensor(amtpp_autodiff::TensorError::Domain {
            op: "tau-log-likelihood",
            detail: format!("tau must be positive and finite, got {tau}"),
        }))
    }
}

/// Log density of one asymmetric Laplace component at `y`.
pub fn al_log_density(y: f64, beta_hat: f64, lambda_hat: f64, gamma_hat: f64) -> Result<f64> {
    if !(lambda_hat > 0.0 && gamma_hat > 0.0) {
        return Err(AmtppError::Tensor(amtpp_autodiff::TensorError::Domain {
            op: "al-log-density",
            detail: format!("lambda_hat={lambda_hat}, gamma_hat={gamma_hat} must be positive"),
        }));
    }
    Ok(al_log_density_unchecked(y, beta_hat, lambda_hat, gamma_hat))
}

fn al_log_density_unchecked(y: f64, b: f64, l: f64, g: f64) -> f64 {
    let log_c = l.ln() - (g + 1.0 / g).ln();
    let z = y - b;
    if z < 0.0 {
        log_c + l * g * z
    } else {
        log_c - (l / g) * z
    }
}

/// Mixture weights and log-space parameters of `K` asymmetric Laplace
/// components.
#[derive(Clone, Debug, PartialEq)]
pub struct AllMixtureParams {
    pub w: Vec<f64>,
    pub beta_hat: Vec<f64>,
    pub lambda_hat: Vec<f64>,
    pub gamma_hat: Vec<f64>,
}

impl AllMixtureParams {
    pub fn new(w: Vec<f64>, beta_hat: Vec<f64>, lambda_hat: Vec<f64>, gamma_hat: Vec<f64>) -> Result<Self> {
        let k = w.len();
        if k == 0 || beta_hat.len() != k || lambda_hat.len() != k || gamma_hat.len() != k {
            return Err(AmtppError::Data("mixture parameter lengths differ".into()));
        }
        if w.iter().any(|v| !(*v >= 0.0)) || (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(AmtppError::Data(format!("mixture weights are not a simplex: {w:?}")));
        }
        if lambda_hat.iter().chain(&gamma_hat).any(|v| !(*v > 0.0 && v.is_finite())) || beta_hat.iter().any(|b| !b.is_finite()) {
            return Err(AmtppError::Data("lambda_hat and gamma_hat must be positive, beta_hat finite".into()));
        }
        Ok(Self {
            w,
            beta_hat,
            lambda_hat,
            gamma_hat,
        })
    }

    pub fn single(beta_hat: f64, lambda_hat: f64, gamma_hat: f64) -> Result<Self> {
        Self::new(vec![1.0], vec![beta_hat], vec![lambda_hat], vec![gamma_hat])
    }

    pub fn components(&self) -> usize {
        self.w.len()
    }

    /// Probability that component `k` falls left of its knot: `1/(1+γ̂²)`.
    pub fn left_mass(&self, k: usize) -> f64 {
        1.0 / (1.0 + self.gamma_hat[k] * self.gamma_hat[k])
    }

    /// Mixture log density of `y = ln τ`.
    pub fn log_density_y(&self, y: f64) -> f64 {
        let terms: Vec<f64> = (0..self.components())
            .map(|k| self.w[k].ln() + al_log_density_unchecked(y, self.beta_hat[k], self.lambda_hat[k], self.gamma_hat[k]))
            .collect();
        logsumexp(&terms).unwrap_or(f64::NEG_INFINITY)
    }

    /// `ln p(τ) = ln p_Y(ln τ) − ln τ`.
    pub fn tau_log_likelihood(&self, tau: f64) -> Result<f64> {
        let y = check_tau(tau)?;
        Ok(self.log_density_y(y) - y)
    }

    pub fn component_cdf_y(&self, k: usize, y: f64) -> f64 {
        let (b, l, g) = (self.beta_hat[k], self.lambda_hat[k], self.gamma_hat[k]);
        let p_l = self.left_mass(k);
        if y < b {
            p_l * (l * g * (y - b)).exp()
        } else {
            1.0 - (1.0 - p_l) * (-(l / g) * (y - b)).exp()
        }
    }

    pub fn cdf_y(&self, y: f64) -> f64 {
        (0..self.components()).map(|k| self.w[k] * self.component_cdf_y(k, y)).sum()
    }

    pub fn tau_cdf(&self, tau: f64) -> Result<f64> {
        Ok(self.cdf_y(check_tau(tau)?))
    }

    /// Inverse CDF of component `k` in `y` space at `u ∈ (0, 1)`.
    pub fn component_quantile_y(&self, k: usize, u: f64) -> f64 {
        let (b, l, g) = (self.beta_hat[k], self.lambda_hat[k], self.gamma_hat[k]);
        let p_l = self.left_mass(k);
        if u < p_l {
            b + (u / p_l).ln() / (l * g)
        } else {
            b - (g / l) * ((1.0 - u) / (1.0 - p_l)).ln()
        }
    }

    pub fn sample_tau(&self, rng: &mut ChaCha8Rng) -> f64 {
        let k = pick(&self.w, rng.random::<f64>());
        let u: f64 = rng.sample(Open01);
        self.component_quantile_y(k, u).exp()
    }

    /// `τ` with `tau_cdf(τ) = p`, by bisection in `y`.
    pub fn quantile(&self, p: f64) -> f64 {
        let lo = (0..self.components()).map(|k| self.component_quantile_y(k, p.clamp(1e-300, 1.0))).fold(f64::INFINITY, f64::min);
        let hi = (0..self.components()).map(|k| self.component_quantile_y(k, p)).fold(f64::NEG_INFINITY, f64::max);
        bisect(|y| self.cdf_y(y), p, lo, hi).exp()
    }
}

/// Log-normal mixture: in `y` space each component is `N(μ, σ²)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LogNormalMixtureParams {
    pub w: Vec<f64>,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl LogNormalMixtureParams {
    pub fn new(w: Vec<f64>, mu: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        let k = w.len();
        if k == 0 || mu.len() != k || sigma.len() != k {
            return Err(AmtppError::Data("mixture parameter lengths differ".into()));
        }
        if w.iter().any(|v| !(*v >= 0.0)) || (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(AmtppError::Data(format!("mixture weights are not a simplex: {w:?}")));
        }
        if sigma.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(AmtppError::Data("sigma must be positive".into()));
        }
        Ok(Self { w, mu, sigma })
    }

    pub fn components(&self) -> usize {
        self.w.len()
    }

    pub fn log_density_y(&self, y: f64) -> f64 {
        let terms: Vec<f64> = (0..self.components())
            .map(|k| {
                let z = (y - self.mu[k]) / self.sigma[k];
                self.w[k].ln() - self.sigma[k].ln() - LN_SQRT_2PI - 0.5 * z * z
            })
            .collect();
        logsumexp(&terms).unwrap_or(f64::NEG_INFINITY)
    }

    pub fn tau_log_likelihood(&self, tau: f64) -> Result<f64> {
        let y = check_tau(tau)?;
        Ok(self.log_density_y(y) - y)
    }

    pub fn cdf_y(&self, y: f64) -> f64 {
        (0..self.components())
            .map(|k| self.w[k] * 0.5 * (1.0 + libm::erf((y - self.mu[k]) / (self.sigma[k] * std::f64::consts::SQRT_2))))
            .sum()
    }

    pub fn tau_cdf(&self, tau: f64) -> Result<f64> {
        Ok(self.cdf_y(check_tau(tau)?))
    }

    pub fn sample_tau(&self, rng: &mut ChaCha8Rng) -> f64 {
        let k = pick(&self.w, rng.random::<f64>());
        let z: f64 = rng.sample(rand_distr::StandardNormal);
        (self.mu[k] + self.sigma[k] * z).exp()
    }

    pub fn quantile(&self, p: f64) -> f64 {
        let lo = (0..self.components()).map(|k| self.mu[k] - 40.0 * self.sigma[k]).fold(f64::INFINITY, f64::min);
        let hi = (0..self.components()).map(|k| self.mu[k] + 40.0 * self.sigma[k]).fold(f64::NEG_INFINITY, f64::max);
        bisect(|y| self.cdf_y(y), p, lo, hi).exp()
    }
}

/// Index drawn from the (possibly unnormalized) weights `w` at `u ∈ [0, 1)`.
pub(crate) fn pick(w: &[f64], u: f64) -> usize {
    let target = u * w.iter().sum::<f64>();
    let mut acc = 0.0;
    for (k, wk) in w.iter().enumerate() {
        acc += wk;
        if target < acc && *wk > 0.0 {
            return k;
        }
    }
    // round-off left `target` past the end; never land on a zero weight
    w.iter().rposition(|v| *v > 0.0).unwrap_or(w.len() - 1)
}

fn bisect(f: impl Fn(f64) -> f64, target: f64, mut lo: f64, mut hi: f64) -> f64 {
    if !(lo <= hi) {
        std::mem::swap(&mut lo, &mut hi);
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-13 * (1.0 + mid.abs()) {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// Either time distribution, as emitted for one prediction step.
#[derive(Clone, Debug, PartialEq)]
pub enum TimeDistribution {
    AsymmetricLogLaplace(AllMixtureParams),
    LogNormal(LogNormalMixtureParams),
}

impl TimeDistribution {
    pub fn tau_log_likelihood(&self, tau: f64) -> Result<f64> {
        match self {
            Self::AsymmetricLogLaplace(p) => p.tau_log_likelihood(tau),
            Self::LogNormal(p) => p.tau_log_likelihood(tau),
        }
    }

    pub fn tau_cdf(&self, tau: f64) -> Result<f64> {
        match self {
            Self::AsymmetricLogLaplace(p) => p.tau_cdf(tau),
            Self::LogNormal(p) => p.tau_cdf(tau),
        }
    }

    pub fn sample_tau(&self, rng: &mut ChaCha8Rng) -> f64 {
        match self {
            Self::AsymmetricLogLaplace(p) => p.sample_tau(rng),
            Self::LogNormal(p) => p.sample_tau(rng),
        }
    }

    pub fn quantile(&self, p: f64) -> f64 {
        match self {
            Self::AsymmetricLogLaplace(m) => m.quantile(p),
            Self::LogNormal(m) => m.quantile(p),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TimeHeadKind {
    AsymmetricLogLaplace,
    LogNormal,
}

impl TimeHeadKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::AsymmetricLogLaplace => "all",
            Self::LogNormal => "lognormal",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "all" => Some(Self::AsymmetricLogLaplace),
            "lognormal" => Some(Self::LogNormal),
            _ => None,
        }
    }
}

/// Mixture parameters on the graph, each `[..., K]`.
#[derive(Clone, Copy, Debug)]
pub struct MixtureVars {
    pub log_w: Var,
    /// `β̂` (or `μ` for the log-normal head).
    pub loc: Var,
    /// `ln λ̂` (or `ln σ`).
    pub ln_rate: Var,
    /// `ln γ̂`; absent for the log-normal head.
    pub ln_shape: Option<Var>,
}

/// MDN heads mapping a hidden state to mixture parameters.
#[derive(Clone, Debug)]
pub struct TimeHead {
    pub kind: TimeHeadKind,
    pub components: usize,
    pub unconstrained_beta: bool,
    w: (ParamId, ParamId),
    loc: (ParamId, ParamId),
    rate: (ParamId, ParamId),
    shape: Option<(ParamId, ParamId)>,
}

impl TimeHead {
    pub fn register(
        store: &mut ParamStore,
        input: usize,
        components: usize,
        kind: TimeHeadKind,
        unconstrained_beta: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let mut pair = |name: &str, store: &mut ParamStore| -> Result<(ParamId, ParamId)> {
            Ok((
                glorot(store, &format!("time.{name}.weight"), input, components, rng)?,
                zeros(store, &format!("time.{name}.bias"), vec![components])?,
            ))
        };
        let w = pair("w", store)?;
        let (loc, rate, shape) = match kind {
            TimeHeadKind::AsymmetricLogLaplace => (pair("beta", store)?, pair("lambda", store)?, Some(pair("gamma", store)?)),
            TimeHeadKind::LogNormal => (pair("mu", store)?, pair("sigma", store)?, None),
        };
        Ok(Self {
            kind,
            components,
            unconstrained_beta,
            w,
            loc,
            rate,
            shape,
        })
    }

    fn affine(g: &mut Graph, store: &ParamStore, h: Var, (w, b): (ParamId, ParamId)) -> Result<Var> {
        let (w, b) = (g.param(store, w), g.param(store, b));
        let z = g.matmul(h, w)?;
        Ok(g.add(z, b)?)
    }

    /// `h` is `[..., c]` with at least two axes.
    pub fn mixture(&self, g: &mut Graph, store: &ParamStore, h: Var) -> Result<MixtureVars> {
        let w_logits = Self::affine(g, store, h, self.w)?;
        let log_w = g.log_softmax(w_logits)?;
        let loc_pre = Self::affine(g, store, h, self.loc)?;
        let loc = match self.kind {
            TimeHeadKind::AsymmetricLogLaplace if !self.unconstrained_beta => g.exp(loc_pre),
            _ => loc_pre,
        };
        let ln_rate = Self::affine(g, store, h, self.rate)?;
        let ln_shape = match self.shape {
            Some(p) => Some(Self::affine(g, store, h, p)?),
            None => None,
        };
        Ok(MixtureVars {
            log_w,
            loc,
            ln_rate,
            ln_shape,
        })
    }

    /// Width of the parameter block appended to the hidden state for the
    /// OD head.
    pub fn context_width(&self) -> usize {
        match self.kind {
            TimeHeadKind::AsymmetricLogLaplace => 4 * self.components,
            TimeHeadKind::LogNormal => 3 * self.components,
        }
    }

    /// `[w, β̂·beta_scale, λ̂, γ̂]` (or `[w, μ·beta_scale, σ]`).
    pub fn context_parts(&self, g: &mut Graph, mix: &MixtureVars, beta_scale: f64) -> Vec<Var> {
        let w = g.exp(mix.log_w);
        let loc = if beta_scale == 1.0 { mix.loc } else { g.scale(mix.loc, beta_scale) };
        let rate = g.exp(mix.ln_rate);
        let mut parts = vec![w, loc, rate];
        if let Some(s) = mix.ln_shape {
            parts.push(g.exp(s));
        }
        parts
    }

    /// `ln p(τ)` for `y = ln τ` of shape `[..., 1]`; result drops the last
    /// axis.
    pub fn log_likelihood(&self, g: &mut Graph, mix: &MixtureVars, y: Var) -> Result<Var> {
        let diff = g.sub(y, mix.loc)?;
        let comp = match mix.ln_shape {
            Some(ln_g) => {
                let ln_l = mix.ln_rate;
                let left_ln = g.add(ln_l, ln_g)?;
                let right_ln = g.sub(ln_l, ln_g)?;
                let left_rate = g.exp(left_ln);
                let right_rate = g.exp(right_ln);
                let left = g.mul(left_rate, diff)?;
                let right_pos = g.mul(right_rate, diff)?;
                let right = g.neg(right_pos);
                let below: Vec<bool> = g.data(diff).iter().map(|z| *z < 0.0).collect();
                let branch = g.select(&below, left, right)?;
                let gam = g.exp(ln_g);
                let neg_ln_g = g.neg(ln_g);
                let inv_gam = g.exp(neg_ln_g);
                let sum = g.add(gam, inv_gam)?;
                let ln_sum = g.ln(sum)?;
                let log_c = g.sub(ln_l, ln_sum)?;
                g.add(log_c, branch)?
            }
            None => {
                let ln_s = mix.ln_rate;
                let neg_ln_s = g.neg(ln_s);
                let inv_s = g.exp(neg_ln_s);
                let z = g.mul(diff, inv_s)?;
                let z2 = g.mul(z, z)?;
                let quad = g.scale(z2, -0.5);
                let lead = g.sub(quad, ln_s)?;
                g.add_scalar(lead, -LN_SQRT_2PI)
            }
        };
        let joint = g.add(mix.log_w, comp)?;
        let lse = g.logsumexp(joint)?;
        let shape = g.shape(lse).to_vec();
        let y_flat = g.reshape(y, shape)?;
        Ok(g.sub(lse, y_flat)?)
    }

    /// Plain parameters of one flattened row of the mixture vars.
    pub fn distribution(&self, g: &Graph, mix: &MixtureVars, row: usize) -> Result<TimeDistribution> {
        let k = self.components;
        let take = |v: Var| g.data(v)[row * k..(row + 1) * k].to_vec();
        let w: Vec<f64> = take(mix.log_w).into_iter().map(f64::exp).collect();
        let total: f64 = w.iter().sum();
        let w = w.into_iter().map(|v| v / total).collect();
        let rate = take(mix.ln_rate).into_iter().map(f64::exp).collect();
        Ok(match mix.ln_shape {
            Some(s) => TimeDistribution::AsymmetricLogLaplace(AllMixtureParams::new(w, take(mix.loc), rate, take(s).into_iter().map(f64::exp).collect())?),
            None => TimeDistribution::LogNormal(LogNormalMixtureParams::new(w, take(mix.loc), rate)?),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn knot_value() {
        let v = al_log_density(0.3, 0.3, 2.5, 1.0).unwrap();
        assert!((v - (2.5f64 / 2.0).ln()).abs() < 1e-15);
    }

    #[test]
    fn unit_component_at_tau_one() {
        let p = AllMixtureParams::single(0.0, 1.0, 1.0).unwrap();
        assert!((p.tau_log_likelihood(1.0).unwrap() - 0.5f64.ln()).abs() < 1e-15);
        assert!(p.tau_log_likelihood(0.0).is_err());
        assert!(p.tau_log_likelihood(-1.0).is_err());
    }

    #[test]
    fn lognormal_at_median() {
        let p = LogNormalMixtureParams::new(vec![1.0], vec![0.0], vec![1.0]).unwrap();
        assert!((p.tau_log_likelihood(1.0).unwrap() + 0.918939).abs() < 1e-6);
    }

    #[test]
    fn domain_errors() {
        assert!(al_log_density(0.0, 0.0, 0.0, 1.0).is_err());
        assert!(al_log_density(0.0, 0.0, 1.0, -1.0).is_err());
    }

    #[test]
    fn quantile_at_left_mass_is_knot() {
        let p = AllMixtureParams::single(2.0, 1.5, 0.7).unwrap();
        let pl = p.left_mass(0);
        assert!((p.component_quantile_y(0, pl) - 2.0).abs() < 1e-15);
        assert!((p.quantile(pl).ln() - 2.0).abs() < 1e-9);
    }
}
