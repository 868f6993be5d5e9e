//! Random variate generators not covered by `rand_distr`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, Gamma, StandardNormal};

use crate::error::{GcmError, Result};
use crate::linalg;

/// Reproducible RNG used everywhere in the crate.
pub type GcmRng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> GcmRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Parameters below this are floored when sampling a GIG variate.
pub const GIG_FLOOR: f64 = 1e-12;

pub fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn unif_open<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    // (0, 1): logs of zero are never taken.
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            return u;
        }
    }
}

/// Generalized inverse Gaussian with density proportional to
/// `x^(λ-1) exp(-(χ/x + ψx)/2)` on `x > 0`.
///
/// Uses the three regimes of Hörmann & Leydold (2014): ratio-of-uniforms with
/// mode shift, ratio-of-uniforms without shift, and a piecewise hat for the
/// small-λ, small-ω corner. Negative λ is sampled via `1/GIG(-λ, ψ, χ)`.
pub fn sample_gig<R: Rng + ?Sized>(lambda: f64, chi: f64, psi: f64, rng: &mut R) -> Result<f64> {
    if !(lambda.is_finite() && chi.is_finite() && psi.is_finite()) || chi < 0.0 || psi < 0.0 {
        return Err(GcmError::InvalidParameter(format!("GIG({lambda}, {chi}, {psi})")));
    }
    if chi == 0.0 && psi == 0.0 {
        return Err(GcmError::InvalidParameter("GIG needs chi > 0 or psi > 0".into()));
    }
    if chi == 0.0 {
        // Gamma(λ, rate ψ/2).
        if lambda <= 0.0 {
            return Err(GcmError::InvalidParameter("GIG with chi = 0 needs lambda > 0".into()));
        }
        let g = Gamma::new(lambda, 2.0 / psi).map_err(|e| GcmError::InvalidParameter(e.to_string()))?;
        return Ok(g.sample(rng).max(f64::MIN_POSITIVE));
    }
    if psi == 0.0 {
        if lambda >= 0.0 {
            return Err(GcmError::InvalidParameter("GIG with psi = 0 needs lambda < 0".into()));
        }
        let g = Gamma::new(-lambda, 2.0 / chi).map_err(|e| GcmError::InvalidParameter(e.to_string()))?;
        return Ok(1.0 / g.sample(rng).max(f64::MIN_POSITIVE));
    }
    let alpha = (chi / psi).sqrt();
    let omega = (chi * psi).sqrt();
    let lam = lambda.abs();
    let x = if lam > 2.0 || omega > 3.0 {
        rou_shift(lam, omega, rng)
    } else if lam >= 1.0 - 2.25 * omega * omega || omega > 0.2 {
        rou_noshift(lam, omega, rng)
    } else {
        concave_hat(lam, omega, rng)
    };
    Ok(if lambda < 0.0 { alpha / x } else { alpha * x })
}

fn gig_mode(lambda: f64, omega: f64) -> f64 {
    if lambda >= 1.0 {
        ((lambda - 1.0) + ((lambda - 1.0).powi(2) + omega * omega).sqrt()) / omega
    } else {
        // Same root, rationalised to avoid cancellation.
        omega / (((1.0 - lambda).powi(2) + omega * omega).sqrt() + (1.0 - lambda))
    }
}

fn rou_noshift<R: Rng + ?Sized>(lambda: f64, omega: f64, rng: &mut R) -> f64 {
    let t = 0.5 * (lambda - 1.0);
    let s = 0.25 * omega;
    let xm = gig_mode(lambda, omega);
    let nc = t * xm.ln() - s * (xm + 1.0 / xm);
    let ym = ((lambda + 1.0) + ((lambda + 1.0).powi(2) + omega * omega).sqrt()) / omega;
    let um = (0.5 * (lambda + 1.0) * ym.ln() - s * (ym + 1.0 / ym) - nc).exp();
    loop {
        let u = um * unif_open(rng);
        let v = unif_open(rng);
        let x = u / v;
        if v.ln() <= t * x.ln() - s * (x + 1.0 / x) - nc {
            return x;
        }
    }
}

fn rou_shift<R: Rng + ?Sized>(lambda: f64, omega: f64, rng: &mut R) -> f64 {
    let t = 0.5 * (lambda - 1.0);
    let s = 0.25 * omega;
    let xm = gig_mode(lambda, omega);
    let nc = t * xm.ln() - s * (xm + 1.0 / xm);
    // Extremes of (x - xm) sqrt(f(x)) are roots of x^3 + a x^2 + b x + c.
    let a = -(2.0 * (lambda + 1.0) / omega + xm);
    let b = 2.0 * (lambda - 1.0) * xm / omega - 1.0;
    let c = xm;
    let p = b - a * a / 3.0;
    let q = 2.0 * a * a * a / 27.0 - a * b / 3.0 + c;
    let fi = (-q / (2.0 * (-(p * p * p) / 27.0).sqrt())).clamp(-1.0, 1.0).acos();
    let fak = 2.0 * (-p / 3.0).sqrt();
    let y1 = fak * (fi / 3.0).cos() - a / 3.0;
    let y2 = fak * (fi / 3.0 + 4.0 / 3.0 * std::f64::consts::PI).cos() - a / 3.0;
    let uplus = (y1 - xm) * (t * y1.ln() - s * (y1 + 1.0 / y1) - nc).exp();
    let uminus = (y2 - xm) * (t * y2.ln() - s * (y2 + 1.0 / y2) - nc).exp();
    loop {
        let u = uminus + unif_open(rng) * (uplus - uminus);
        let v = unif_open(rng);
        let x = u / v + xm;
        if x > 0.0 && v.ln() <= t * x.ln() - s * (x + 1.0 / x) - nc {
            return x;
        }
    }
}

fn concave_hat<R: Rng + ?Sized>(lambda: f64, omega: f64, rng: &mut R) -> f64 {
    let xm = gig_mode(lambda, omega);
    let x0 = omega / (1.0 - lambda);
    let k0 = ((lambda - 1.0) * xm.ln() - 0.5 * omega * (xm + 1.0 / xm)).exp();
    let a0 = k0 * x0;
    let (k1, a1, k2, a2);
    if x0 >= 2.0 / omega {
        k1 = 0.0;
        a1 = 0.0;
        k2 = x0.powf(lambda - 1.0);
        a2 = k2 * 2.0 * (-omega * x0 / 2.0).exp() / omega;
    } else {
        k1 = (-omega).exp();
        a1 = if lambda == 0.0 {
            k1 * (2.0 / (omega * omega)).ln()
        } else {
            k1 / lambda * ((2.0 / omega).powf(lambda) - x0.powf(lambda))
        };
        k2 = (2.0 / omega).powf(lambda - 1.0);
        a2 = k2 * 2.0 * (-1.0f64).exp() / omega;
    }
    let total = a0 + a1 + a2;
    loop {
        let mut v = total * unif_open(rng);
        let (x, hx);
        if v <= a0 {
            x = x0 * v / a0;
            hx = k0;
        } else {
            v -= a0;
            if v <= a1 {
                if lambda == 0.0 {
                    x = omega * (omega.exp() * v).exp();
                    hx = k1 / x;
                } else {
                    x = (x0.powf(lambda) + lambda / k1 * v).powf(1.0 / lambda);
                    hx = k1 * x.powf(lambda - 1.0);
                }
            } else {
                v -= a1;
                let lo = x0.max(2.0 / omega);
                x = -2.0 / omega * ((-omega / 2.0 * lo).exp() - omega / (2.0 * k2) * v).ln();
                hx = k2 * (-omega / 2.0 * x).exp();
            }
        }
        if !(x.is_finite() && x > 0.0) {
            continue;
        }
        let u = unif_open(rng) * hx;
        if u.ln() <= (lambda - 1.0) * x.ln() - omega / 2.0 * (x + 1.0 / x) {
            return x;
        }
    }
}

/// Inverse Gaussian with the given mean and shape (Michael, Schucany & Haas).
pub fn sample_inverse_gaussian<R: Rng + ?Sized>(mean: f64, shape: f64, rng: &mut R) -> f64 {
    let z = std_normal(rng);
    let my = mean * z * z;
    // Smaller root of the quadratic, written without cancellation.
    let s = (my * my + 4.0 * shape * my).sqrt();
    let x = 4.0 * shape * mean * my / ((my + s) * (my + s));
    let x = if my == 0.0 { mean } else { x };
    if unif_open(rng) * (mean + x) <= mean {
        x
    } else {
        mean * mean / x
    }
}

/// GIG with λ = 1/2, sampled as the reciprocal of an inverse Gaussian:
/// `1/X ~ IG(√(ψ/χ), ψ)`. `chi` is floored at [`GIG_FLOOR`].
pub fn sample_gig_half<R: Rng + ?Sized>(chi: f64, psi: f64, rng: &mut R) -> f64 {
    let chi = chi.max(GIG_FLOOR);
    let x = sample_inverse_gaussian((psi / chi).sqrt(), psi, rng);
    (1.0 / x).max(f64::MIN_POSITIVE)
}

/// Inverse gamma with density proportional to `x^(-shape-1) exp(-scale/x)`.
pub fn sample_inv_gamma<R: Rng + ?Sized>(shape: f64, scale: f64, rng: &mut R) -> Result<f64> {
    let g = Gamma::new(shape, 1.0 / scale).map_err(|e| GcmError::InvalidParameter(format!("inverse gamma: {e}")))?;
    Ok(1.0 / g.sample(rng).max(f64::MIN_POSITIVE))
}

/// Draw from N(mean, cov) given the lower Cholesky factor of `cov`.
pub fn sample_mvn_chol<R: Rng + ?Sized>(mean: &DVector<f64>, chol_l: &DMatrix<f64>, rng: &mut R) -> DVector<f64> {
    let z = DVector::from_fn(mean.len(), |_, _| std_normal(rng));
    mean + chol_l * z
}

/// Draw from N(P⁻¹ b, P⁻¹) given a precision matrix `P` and vector `b`.
pub fn sample_mvn_precision<R: Rng + ?Sized>(
    precision: &DMatrix<f64>,
    b: &DVector<f64>,
    rng: &mut R,
) -> Result<DVector<f64>> {
    let chol = linalg::cholesky(precision, "posterior precision")?;
    let mean = chol.solve(b);
    let z = DVector::from_fn(b.len(), |_, _| std_normal(rng));
    // With P = LL', x = L'^{-1} z has covariance P^{-1}.
    let x = chol
        .l()
        .transpose()
        .solve_upper_triangular(&z)
        .ok_or_else(|| GcmError::NotPositiveDefinite("posterior precision".into()))?;
    Ok(mean + x)
}

/// Inverse-Wishart with density proportional to
/// `|X|^(-(df+q+1)/2) exp(-tr(scale X⁻¹)/2)`; mean `scale / (df - q - 1)`.
pub fn sample_inv_wishart<R: Rng + ?Sized>(scale: &DMatrix<f64>, df: f64, rng: &mut R) -> Result<DMatrix<f64>> {
    let q = scale.nrows();
    if df <= q as f64 - 1.0 {
        return Err(GcmError::InvalidParameter(format!("inverse-Wishart df {df} too small for dimension {q}")));
    }
    // X⁻¹ ~ Wishart(scale⁻¹, df) via the Bartlett decomposition.
    let scale_inv = linalg::cholesky(scale, "inverse-Wishart scale")?.inverse();
    let l = linalg::cholesky(&scale_inv, "inverse-Wishart scale inverse")?.l();
    let mut a = DMatrix::zeros(q, q);
    for i in 0..q {
        let chi = ChiSquared::new(df - i as f64).map_err(|e| GcmError::InvalidParameter(e.to_string()))?;
        a[(i, i)] = chi.sample(rng).sqrt();
        for j in 0..i {
            a[(i, j)] = std_normal(rng);
        }
    }
    let la = l * a;
    let wishart = &la * la.transpose();
    let mut x = linalg::cholesky(&wishart, "Wishart draw")?.inverse();
    linalg::symmetrize(&mut x);
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mean_var(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
        (m, v)
    }

    #[test]
    fn gig_half_matches_closed_form_mean() {
        // For λ = 1/2 the Bessel ratio is 1 + 1/ω.
        let mut rng = rng_from_seed(1);
        for &(chi, psi) in &[(0.01f64, 2.0f64), (0.5, 2.0), (4.0, 1.0), (50.0, 3.0), (1e-6, 4.0)] {
            let omega = (chi * psi).sqrt();
            let expect = (chi / psi).sqrt() * (1.0 + 1.0 / omega);
            let xs: Vec<f64> = (0..200_000).map(|_| sample_gig(0.5, chi, psi, &mut rng).unwrap()).collect();
            let (m, v) = mean_var(&xs);
            let se = (v / xs.len() as f64).sqrt();
            assert!((m - expect).abs() < 5.0 * se, "chi={chi} psi={psi}: {m} vs {expect} (se {se})");
        }
    }

    #[test]
    fn gig_half_fast_path_matches_closed_form_mean() {
        let mut rng = rng_from_seed(6);
        for &(chi, psi) in &[(0.01, 2.0), (4.0, 1.0), (50.0, 3.0), (1e-14, 4.0)] {
            let chi_f = f64::max(chi, GIG_FLOOR);
            let omega = (chi_f * psi).sqrt();
            let expect = (chi_f / psi).sqrt() * (1.0 + 1.0 / omega);
            let xs: Vec<f64> = (0..200_000).map(|_| sample_gig_half(chi, psi, &mut rng)).collect();
            let (m, v) = mean_var(&xs);
            let se = (v / xs.len() as f64).sqrt();
            assert!((m - expect).abs() < 5.0 * se, "chi={chi} psi={psi}: {m} vs {expect} (se {se})");
        }
    }

    #[test]
    fn gig_degenerate_parameters() {
        let mut rng = rng_from_seed(2);
        assert!(sample_gig(0.5, -1.0, 1.0, &mut rng).is_err());
        assert!(sample_gig(0.5, 0.0, 0.0, &mut rng).is_err());
        // chi = 0 reduces to a gamma with mean 2λ/ψ.
        let xs: Vec<f64> = (0..100_000).map(|_| sample_gig(2.0, 0.0, 4.0, &mut rng).unwrap()).collect();
        let (m, _) = mean_var(&xs);
        assert!((m - 1.0).abs() < 0.02);
        assert!(xs.iter().all(|&x| x > 0.0));
    }

    #[test]
    fn inv_gamma_mean() {
        let mut rng = rng_from_seed(3);
        let xs: Vec<f64> = (0..200_000).map(|_| sample_inv_gamma(5.0, 8.0, &mut rng).unwrap()).collect();
        let (m, _) = mean_var(&xs);
        assert!((m - 2.0).abs() < 0.02, "{m}");
    }

    #[test]
    fn inv_wishart_mean() {
        let mut rng = rng_from_seed(4);
        let scale = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let df = 8.0;
        let n = 100_000;
        let mut acc = DMatrix::zeros(2, 2);
        for _ in 0..n {
            acc += sample_inv_wishart(&scale, df, &mut rng).unwrap();
        }
        acc /= n as f64;
        let expect = &scale / (df - 3.0);
        for i in 0..2 {
            for j in 0..2 {
                assert!((acc[(i, j)] - expect[(i, j)]).abs() < 0.01, "{acc} vs {expect}");
            }
        }
    }

    #[test]
    fn mvn_precision_moments() {
        let mut rng = rng_from_seed(5);
        let p = DMatrix::from_row_slice(2, 2, &[2.0, 0.6, 0.6, 1.0]);
        let b = DVector::from_vec(vec![1.0, -1.0]);
        let cov = p.clone().try_inverse().unwrap();
        let mean = &cov * &b;
        let n = 200_000;
        let draws: Vec<DVector<f64>> = (0..n).map(|_| sample_mvn_precision(&p, &b, &mut rng).unwrap()).collect();
        let m = draws.iter().fold(DVector::zeros(2), |a, d| a + d) / n as f64;
        let c = draws.iter().fold(DMatrix::zeros(2, 2), |a, d| a + (d - &m) * (d - &m).transpose()) / n as f64;
        assert!((m - mean).amax() < 0.01);
        assert!((c - cov).amax() < 0.01);
    }
}
