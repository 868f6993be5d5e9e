//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use gcm::data::LongitudinalDataset;
use gcm::rmb::{AugmentedState, RmbPriors, SelectionParams, SelectionScope};
use gcm::GrowthModelSpec;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Exp1, Gamma, StandardNormal};

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

pub fn var(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() - 1) as f64
}

pub fn median(x: &[f64]) -> f64 {
    let mut s = x.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Kolmogorov survival function `Q(λ) = 2 Σ (−1)^{k−1} e^{−2k²λ²}`.
pub fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut s = 0.0;
    for k in 1..200 {
        let term = (-2.0 * (k * k) as f64 * lambda * lambda).exp();
        s += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * s).clamp(0.0, 1.0)
}

/// One-sample KS statistic and asymptotic p-value.
pub fn ks_one_sample<F: Fn(f64) -> f64>(sample: &[f64], cdf: F) -> (f64, f64) {
    let mut s = sample.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in s.iter().enumerate() {
        let f = cdf(x);
        d = d.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n);
    }
    let sn = n.sqrt();
    (d, kolmogorov_q((sn + 0.12 + 0.11 / sn) * d))
}

pub fn ks_two_sample(a: &[f64], b: &[f64]) -> (f64, f64) {
    let mut x = a.to_vec();
    let mut y = b.to_vec();
    x.sort_by(f64::total_cmp);
    y.sort_by(f64::total_cmp);
    let (n, m) = (x.len(), y.len());
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < n && j < m {
        let v = x[i].min(y[j]);
        while i < n && x[i] <= v {
            i += 1;
        }
        while j < m && y[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
    }
    let ne = (n * m) as f64 / (n + m) as f64;
    let sn = ne.sqrt();
    (d, kolmogorov_q((sn + 0.12 + 0.11 / sn) * d))
}

/// Composite Simpson rule on `[a, b]` with `n` (even) panels.
pub fn simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for k in 1..n {
        let x = a + k as f64 * h;
        s += if k % 2 == 1 { 4.0 } else { 2.0 } * f(x);
    }
    s * h / 3.0
}

/// `K_ν(z) = ∫₀^∞ exp(−z cosh t) cosh(νt) dt`.
pub fn bessel_k(nu: f64, z: f64) -> f64 {
    // The integrand is negligible once z cosh t exceeds z + 50.
    let upper = ((50.0 / z) + 1.0).acosh() + 1.0;
    simpson(|t| (-z * t.cosh()).exp() * (nu * t).cosh(), 0.0, upper, 20_000)
}

/// GIG(λ, χ, ψ) density via the Bessel normalizer.
pub fn gig_density(x: f64, lambda: f64, chi: f64, psi: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let omega = (chi * psi).sqrt();
    let norm = (psi / chi).powf(lambda / 2.0) / (2.0 * bessel_k(lambda, omega));
    norm * x.powf(lambda - 1.0) * (-(chi / x + psi * x) / 2.0).exp()
}

/// CDF tabulated by the trapezoid-midpoint rule on a log grid over
/// `[lo, hi]`; returns an interpolating closure.
pub fn gig_cdf_table(lambda: f64, chi: f64, psi: f64, lo: f64, hi: f64) -> impl Fn(f64) -> f64 {
    let n = 200_000;
    let (a, b) = (lo.ln(), hi.ln());
    let h = (b - a) / n as f64;
    let g = |u: f64| gig_density(u.exp(), lambda, chi, psi) * u.exp();
    let mut cum = vec![0.0; n + 1];
    for k in 1..=n {
        let u0 = a + (k - 1) as f64 * h;
        cum[k] = cum[k - 1] + h / 6.0 * (g(u0) + 4.0 * g(u0 + 0.5 * h) + g(u0 + h));
    }
    move |x: f64| {
        if x <= lo {
            0.0
        } else if x >= hi {
            1.0
        } else {
            let p = (x.ln() - a) / h;
            let k = (p.floor() as usize).min(n - 1);
            let f = p - k as f64;
            cum[k] * (1.0 - f) + cum[k + 1] * f
        }
    }
}

/// Literal per-subject observed-data log-likelihood: builds each subject's
/// covariance elementwise and evaluates the normal density with an LU solve.
pub fn naive_loglik(
    loadings: &[[f64; 2]],
    beta: [f64; 2],
    psi: [[f64; 2]; 2],
    sigma2: f64,
    data: &LongitudinalDataset,
) -> f64 {
    let mut total = 0.0;
    for i in 0..data.n_subjects() {
        let obs: Vec<usize> = (0..data.n_occasions()).filter(|&t| data.is_observed(i, t)).collect();
        let p = obs.len();
        let mut s = DMatrix::zeros(p, p);
        let mut diff = DVector::zeros(p);
        for (a, &t) in obs.iter().enumerate() {
            let mu_t = loadings[t][0] * beta[0] + loadings[t][1] * beta[1];
            diff[a] = data.get(i, t).unwrap() - mu_t;
            for (b, &u) in obs.iter().enumerate() {
                let mut c = 0.0;
                for j in 0..2 {
                    for k in 0..2 {
                        c += loadings[t][j] * psi[j][k] * loadings[u][k];
                    }
                }
                if a == b {
                    c += sigma2;
                }
                s[(a, b)] = c;
            }
        }
        let lu = s.clone().lu();
        let det = lu.determinant();
        let sol = lu.solve(&diff).unwrap();
        let quad = diff.dot(&sol);
        total += -0.5 * p as f64 * (2.0 * std::f64::consts::PI).ln() - 0.5 * det.ln() - 0.5 * quad;
    }
    total
}

pub fn linear_loadings(t: usize) -> Vec<[f64; 2]> {
    (0..t).map(|k| [1.0, k as f64]).collect()
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Wishart(S⁻¹, ν) by summing ν outer products, inverted to IW(S, ν).
/// Integer df only; deliberately not the Bartlett construction.
pub fn inv_wishart_by_sums<R: Rng + ?Sized>(scale: &DMatrix<f64>, df: usize, rng: &mut R) -> DMatrix<f64> {
    let q = scale.nrows();
    let cov = scale.clone().try_inverse().unwrap();
    let l = cov.cholesky().unwrap().l();
    let mut w = DMatrix::zeros(q, q);
    for _ in 0..df {
        let z = DVector::from_fn(q, |_, _| normal(rng));
        let x = &l * z;
        w += &x * x.transpose();
    }
    w.try_inverse().unwrap()
}

pub fn inv_gamma<R: Rng + ?Sized>(shape: f64, scale: f64, rng: &mut R) -> f64 {
    1.0 / Gamma::new(shape, 1.0 / scale).unwrap().sample(rng)
}

/// Proper priors with finite moments, for joint-distribution tests.
pub fn test_priors() -> RmbPriors {
    RmbPriors {
        beta_mean: 0.0,
        beta_var: 1.0,
        psi_scale: DMatrix::identity(2, 2) * 6.0,
        psi_df: 9.0,
        sigma_shape: 6.0,
        sigma_scale: 3.0,
        alpha_mean: 0.0,
        alpha_var: 0.25,
    }
}

/// One draw from the joint prior of parameters, latents, outcomes and (in
/// selection mode) missingness, simulated forward without the sampler.
pub struct ForwardDraw {
    pub state: AugmentedState,
    pub data: LongitudinalDataset,
}

pub fn forward_draw<R: Rng + ?Sized>(
    spec: &GrowthModelSpec,
    priors: &RmbPriors,
    n: usize,
    selection: Option<SelectionScope>,
    mcar_prob: f64,
    rng: &mut R,
) -> ForwardDraw {
    let t = spec.n_occasions();
    let q = spec.n_effects();
    let beta = DVector::from_fn(q, |_, _| priors.beta_mean + priors.beta_var.sqrt() * normal(rng));
    let psi = inv_wishart_by_sums(&priors.psi_scale, priors.psi_df as usize, rng);
    let sigma = inv_gamma(priors.sigma_shape, priors.sigma_scale, rng);
    let lpsi = psi.clone().cholesky().unwrap().l();
    let mut u = DMatrix::zeros(n, q);
    for i in 0..n {
        let z = DVector::from_fn(q, |_, _| normal(rng));
        u.set_row(i, &(&lpsi * z).transpose());
    }
    let lam = spec.loadings();
    let mut y = DMatrix::zeros(n, t);
    let mut w = DMatrix::zeros(n, t);
    for i in 0..n {
        for k in 0..t {
            let mu: f64 = (0..q).map(|j| lam[(k, j)] * (beta[j] + u[(i, j)])).sum();
            let e: f64 = Exp1.sample(rng);
            w[(i, k)] = sigma * e;
            y[(i, k)] = mu + (8.0 * sigma * w[(i, k)]).sqrt() * normal(rng);
        }
    }
    let alpha = selection.map(|_| SelectionParams {
        alpha0: priors.alpha_mean + priors.alpha_var.sqrt() * normal(rng),
        alpha1: priors.alpha_mean + priors.alpha_var.sqrt() * normal(rng),
        alpha2: priors.alpha_mean + priors.alpha_var.sqrt() * normal(rng),
    });
    let mut mask = vec![true; n * t];
    for i in 0..n {
        for k in 1..t {
            let missing = match (selection, &alpha) {
                (Some(SelectionScope::AtRisk), Some(a)) => {
                    // Monotone dropout: once missing, stays missing.
                    if !mask[i * t + k - 1] {
                        true
                    } else {
                        let eta = a.alpha0 + a.alpha1 * y[(i, k - 1)] + a.alpha2 * y[(i, k)];
                        rng.random::<f64>() < 1.0 / (1.0 + (-eta).exp())
                    }
                }
                (Some(SelectionScope::AllOccasions), Some(a)) => {
                    let eta = a.alpha0 + a.alpha1 * y[(i, k - 1)] + a.alpha2 * y[(i, k)];
                    rng.random::<f64>() < 1.0 / (1.0 + (-eta).exp())
                }
                _ => rng.random::<f64>() < mcar_prob,
            };
            mask[i * t + k] = !missing;
        }
    }
    let values = DMatrix::from_fn(n, t, |i, k| if mask[i * t + k] { y[(i, k)] } else { 0.0 });
    let ids = (0..n).map(|i| format!("s{i}")).collect();
    let data = LongitudinalDataset::new(values, mask, ids).unwrap();
    ForwardDraw { state: AugmentedState { beta, u, psi, sigma, w, y, alpha }, data }
}

/// `∫ expit(a + b y) AL(y; μ, σ, ½) dy` by brute-force Simpson over y.
pub fn missing_prob_brute(a: f64, b: f64, mu: f64, sigma: f64) -> f64 {
    let half = 80.0 * sigma;
    simpson(
        |y| {
            let p = 1.0 / (1.0 + (-(a + b * y)).exp());
            p * (-(y - mu).abs() / (2.0 * sigma)).exp() / (4.0 * sigma)
        },
        mu - half,
        mu + half,
        200_000,
    )
}
