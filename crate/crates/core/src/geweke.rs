//! Geweke's convergence diagnostic with AR spectral estimates at frequency zero.

use crate::error::{GcmError, Result};

/// Band inside which a chain is taken as converged.
pub const GEWEKE_CRITICAL: f64 = 1.96;

/// Default window fractions.
pub const FIRST_FRAC: f64 = 0.1;
pub const LAST_FRAC: f64 = 0.5;

pub const MIN_CHAIN_LEN: usize = 100;

/// `(mean_first − mean_last) / √(se²_first + se²_last)`.
pub fn geweke_z(chain: &[f64], first_frac: f64, last_frac: f64) -> Result<f64> {
    if chain.len() < MIN_CHAIN_LEN {
        return Err(GcmError::InvalidParameter(format!("chain length {} below {MIN_CHAIN_LEN}", chain.len())));
    }
    if !(first_frac > 0.0 && last_frac > 0.0 && first_frac + last_frac <= 1.0) {
        return Err(GcmError::InvalidParameter(format!("window fractions {first_frac}, {last_frac}")));
    }
    if chain.iter().any(|v| !v.is_finite()) {
        return Err(GcmError::Degenerate("chain has non-finite values".into()));
    }
    let n = chain.len();
    let n_first = ((first_frac * n as f64).round() as usize).max(2);
    let n_last = ((last_frac * n as f64).round() as usize).max(2);
    let a = &chain[..n_first];
    let b = &chain[n - n_last..];
    let (ma, va) = mean_var_of_mean(a)?;
    let (mb, vb) = mean_var_of_mean(b)?;
    Ok((ma - mb) / (va + vb).sqrt())
}

fn mean_var_of_mean(x: &[f64]) -> Result<(f64, f64)> {
    let m = x.iter().sum::<f64>() / x.len() as f64;
    let s0 = spectrum0_ar(x)?;
    Ok((m, s0 / x.len() as f64))
}

/// Spectral density at zero from an AR(p) fit by Yule–Walker, with `p`
/// chosen by AIC up to `min(n − 1, 10·log10(n))`.
pub fn spectrum0_ar(x: &[f64]) -> Result<f64> {
    let n = x.len();
    let m = x.iter().sum::<f64>() / n as f64;
    let max_order = ((10.0 * (n as f64).log10()).floor() as usize).min(n - 1);
    let acov: Vec<f64> = (0..=max_order)
        .map(|k| (0..n - k).map(|i| (x[i] - m) * (x[i + k] - m)).sum::<f64>() / n as f64)
        .collect();
    if !(acov[0] > 1e-300) || acov[0] <= 1e-24 * m.abs().max(1.0).powi(2) {
        return Err(GcmError::Degenerate("constant chain window".into()));
    }
    // Levinson–Durbin, keeping the AIC-best order.
    let mut phi: Vec<f64> = Vec::new();
    let mut var = acov[0];
    let mut best = (n as f64 * var.ln(), 0usize, Vec::new(), var);
    for k in 1..=max_order {
        let num = acov[k] - phi.iter().enumerate().map(|(j, p)| p * acov[k - 1 - j]).sum::<f64>();
        let refl = num / var;
        if !refl.is_finite() || refl.abs() >= 1.0 {
            break;
        }
        let prev = phi.clone();
        phi.push(refl);
        for j in 0..k - 1 {
            phi[j] = prev[j] - refl * prev[k - 2 - j];
        }
        var *= 1.0 - refl * refl;
        let aic = n as f64 * var.ln() + 2.0 * k as f64;
        if aic < best.0 {
            best = (aic, k, phi.clone(), var);
        }
    }
    let (_, _, coefs, innov) = best;
    let denom = 1.0 - coefs.iter().sum::<f64>();
    Ok(innov / (denom * denom))
}

/// Effective sample size `n · var / S(0)`.
pub fn effective_size(x: &[f64]) -> Result<f64> {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
    Ok(n * var / spectrum0_ar(x)?)
}
