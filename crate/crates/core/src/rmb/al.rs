//! Asymmetric Laplace distribution and its exponential–normal mixture.
//!
//! `y = μ + ζW + η√(σW)·Z` with `W ~ Exp(mean σ)` and `Z ~ N(0,1)` has the
//! AL(μ, σ, τ) density `τ(1−τ)/σ · exp(−ρ_τ(y−μ)/σ)`, where
//! `ζ = (1−2τ)/(τ(1−τ))` and `η² = 2/(τ(1−τ))`.

use rand::Rng;
use rand_distr::{Distribution, Exp1};

use crate::error::{GcmError, Result};
use crate::random::std_normal;

/// `(ζ, η²)` for quantile level `tau`.
pub fn al_params(tau: f64) -> Result<(f64, f64)> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(GcmError::InvalidParameter(format!("tau {tau} not in (0,1)")));
    }
    let v = tau * (1.0 - tau);
    Ok(((1.0 - 2.0 * tau) / v, 2.0 / v))
}

fn check_sigma(sigma: f64) -> Result<()> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(GcmError::InvalidParameter(format!("AL scale {sigma} must be positive")));
    }
    Ok(())
}

pub fn al_mixture_draw<R: Rng + ?Sized>(mu: f64, sigma: f64, tau: f64, rng: &mut R) -> Result<f64> {
    check_sigma(sigma)?;
    let (zeta, eta2) = al_params(tau)?;
    let w = sigma * <Exp1 as Distribution<f64>>::sample(&Exp1, rng);
    Ok(mu + zeta * w + (eta2 * sigma * w).sqrt() * std_normal(rng))
}

/// Median (τ = 1/2) mixture draw returning the latent `W` alongside `y`.
#[inline]
pub(crate) fn median_draw_with_latent<R: Rng + ?Sized>(mu: f64, sigma: f64, rng: &mut R) -> (f64, f64) {
    let w = (sigma * <Exp1 as Distribution<f64>>::sample(&Exp1, rng)).max(f64::MIN_POSITIVE);
    (mu + (8.0 * sigma * w).sqrt() * std_normal(rng), w)
}

fn check_loss(u: f64, tau: f64) -> f64 {
    if u < 0.0 {
        u * (tau - 1.0)
    } else {
        u * tau
    }
}

pub fn al_density(y: f64, mu: f64, sigma: f64, tau: f64) -> Result<f64> {
    check_sigma(sigma)?;
    al_params(tau)?;
    Ok(tau * (1.0 - tau) / sigma * (-check_loss(y - mu, tau) / sigma).exp())
}

pub fn al_cdf(y: f64, mu: f64, sigma: f64, tau: f64) -> Result<f64> {
    check_sigma(sigma)?;
    al_params(tau)?;
    let u = y - mu;
    Ok(if u < 0.0 { tau * ((1.0 - tau) * u / sigma).exp() } else { 1.0 - (1.0 - tau) * (-tau * u / sigma).exp() })
}
