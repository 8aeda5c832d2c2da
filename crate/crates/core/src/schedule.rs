//! Forward-diffusion noise schedule.
//!
//! A schedule holds per-step retention factors `alpha_t = 1 - beta_t` and
//! their running products:
//!
//! ```text
//! alpha_bar(t) = prod_{k=1..t} alpha_k        (alpha_bar(0) = 1)
//! x_t = sqrt(alpha_bar(t)) * x_e + sqrt(1 - alpha_bar(t)) * eps
//! ```
//!
//! `t = 0` therefore returns the clean latent unchanged, which is the default
//! extraction point for downstream features.

use ndarray::ArrayD;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>, // alpha_bars[t] = alpha_bar(t), length alphas.len() + 1
}

impl NoiseSchedule {
    /// Build from explicit per-step alphas (each must lie in (0, 1]).
    pub fn from_alphas(alphas: Vec<f64>) -> Result<Self> {
        for (i, &a) in alphas.iter().enumerate() {
            if !(a > 0.0 && a <= 1.0) {
                return Err(Error::config(format!(
                    "schedule alpha[{i}] = {a} is outside (0, 1]"
                )));
            }
        }
        let mut alpha_bars = Vec::with_capacity(alphas.len() + 1);
        alpha_bars.push(1.0);
        let mut acc = 1.0;
        for &a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(NoiseSchedule { alphas, alpha_bars })
    }

    /// Linear beta ramp from `beta_start` to `beta_end` over `t_max` steps.
    pub fn linear(beta_start: f64, beta_end: f64, t_max: usize) -> Result<Self> {
        if t_max == 0 {
            return Err(Error::config("schedule length must be >= 1"));
        }
        for (label, b) in [("beta_start", beta_start), ("beta_end", beta_end)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::config(format!("{label} = {b} is outside (0, 1)")));
            }
        }
        let alphas = (0..t_max)
            .map(|i| {
                let frac = if t_max == 1 { 0.0 } else { i as f64 / (t_max - 1) as f64 };
                1.0 - (beta_start + (beta_end - beta_start) * frac)
            })
            .collect();
        Self::from_alphas(alphas)
    }

    /// Parse a schedule kind string, e.g. `"linear(0.0001,0.02)"`.
    pub fn parse(kind: &str, t_max: usize) -> Result<Self> {
        let kind = kind.trim();
        if let Some(rest) = kind.strip_prefix("linear(") {
            let inner = rest.strip_suffix(')').ok_or_else(|| {
                Error::config(format!("schedule '{kind}': missing closing parenthesis"))
            })?;
            let parts: Vec<&str> = inner.split(',').map(str::trim).collect();
            if parts.len() != 2 {
                return Err(Error::config(format!(
                    "schedule '{kind}': expected linear(beta_start,beta_end)"
                )));
            }
            let bs: f64 = parts[0]
                .parse()
                .map_err(|_| Error::config(format!("schedule '{kind}': bad beta_start")))?;
            let be: f64 = parts[1]
                .parse()
                .map_err(|_| Error::config(format!("schedule '{kind}': bad beta_end")))?;
            return Self::linear(bs, be, t_max);
        }
        Err(Error::config(format!(
            "unknown schedule kind '{kind}' (supported: linear(beta_start,beta_end))"
        )))
    }

    pub fn len(&self) -> usize {
        self.alphas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alphas.is_empty()
    }

    /// Cumulative retention `alpha_bar(t)`; valid for `t in 0..=len`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bars.get(t).copied().ok_or_else(|| {
            Error::config(format!(
                "timestep {t} exceeds schedule length {}",
                self.alphas.len()
            ))
        })
    }
}

/// Mix a clean latent with unit Gaussian noise at retention `alpha_bar`.
///
/// The `alpha_bar = 1` and `alpha_bar = 0` limits short-circuit to exact
/// copies of `x_e` / `eps` so the declared bitwise identities hold.
pub fn noisy_latent(x_e: &ArrayD<f64>, eps: &ArrayD<f64>, alpha_bar: f64) -> Result<ArrayD<f64>> {
    if x_e.shape() != eps.shape() {
        return Err(Error::shape(format!(
            "noisy_latent: x_e {:?} vs eps {:?}",
            x_e.shape(),
            eps.shape()
        )));
    }
    if !(0.0..=1.0).contains(&alpha_bar) {
        return Err(Error::config(format!(
            "alpha_bar = {alpha_bar} is outside [0, 1]"
        )));
    }
    if alpha_bar == 1.0 {
        return Ok(x_e.clone());
    }
    if alpha_bar == 0.0 {
        return Ok(eps.clone());
    }
    let sa = alpha_bar.sqrt();
    let sn = (1.0 - alpha_bar).sqrt();
    Ok(x_e * sa + eps * sn)
}
