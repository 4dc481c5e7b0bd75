use serde::{Deserialize, Serialize};

use super::DiffusionError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Cosine,
    Linear,
}

impl std::str::FromStr for ScheduleKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cosine" => Ok(ScheduleKind::Cosine),
            "linear" => Ok(ScheduleKind::Linear),
            _ => Err(format!("unknown schedule kind {s:?} (expected cosine or linear)")),
        }
    }
}

/// Offset of the cosine schedule.
const COSINE_S: f64 = 0.008;
/// Floor on the cumulative signal fraction at the last step.
const ALPHA_BAR_MIN: f64 = 1e-6;
const BETA_MIN: f64 = 0.1;
const BETA_MAX: f64 = 20.0;

/// Variance-preserving schedule: `x_t = alpha[t] x_0 + sigma[t] eps` with
/// `alpha^2 + sigma^2 = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    pub t: usize,
    pub alpha: Vec<f64>,
    pub sigma: Vec<f64>,
}

fn alpha_bar(kind: ScheduleKind, u: f64) -> f64 {
    match kind {
        ScheduleKind::Cosine => {
            let f = |u: f64| ((u + COSINE_S) / (1.0 + COSINE_S) * std::f64::consts::FRAC_PI_2).cos().powi(2);
            ALPHA_BAR_MIN + (1.0 - ALPHA_BAR_MIN) * f(u) / f(0.0)
        }
        // continuous-time VP-SDE with linear beta(u)
        ScheduleKind::Linear => (-(BETA_MIN * u + 0.5 * (BETA_MAX - BETA_MIN) * u * u)).exp(),
    }
}

pub fn make_schedule(t: usize, kind: ScheduleKind) -> Result<NoiseSchedule, DiffusionError> {
    if t == 0 {
        return Err(DiffusionError::InvalidSchedule("T must be at least 1".into()));
    }
    let mut alpha = Vec::with_capacity(t + 1);
    let mut sigma = Vec::with_capacity(t + 1);
    for i in 0..=t {
        if i == 0 {
            alpha.push(1.0);
            sigma.push(0.0);
            continue;
        }
        let ab = alpha_bar(kind, i as f64 / t as f64);
        alpha.push(ab.sqrt());
        sigma.push((1.0 - ab).sqrt());
    }
    Ok(NoiseSchedule {
        kind,
        t,
        alpha,
        sigma,
    })
}

impl NoiseSchedule {
    /// Timesteps visited by strided sampling, from `t` down to 0.
    pub fn strided(&self, steps: usize) -> Vec<usize> {
        let steps = steps.clamp(1, self.t);
        let mut out: Vec<usize> = (0..=steps).rev().map(|i| (i * self.t).div_ceil(steps)).collect();
        out.dedup();
        out
    }

    /// Mean coefficients and variance of `q(x_s | x_t, x_0)` for `s < t`:
    /// `mean = c_t * x_t + c_0 * x_0`.
    pub fn posterior(&self, t: usize, s: usize) -> (f64, f64, f64) {
        let (at, st) = (self.alpha[t], self.sigma[t]);
        let (as_, ss) = (self.alpha[s], self.sigma[s]);
        let a_ts = at / as_;
        let var_ts = st * st - a_ts * a_ts * ss * ss;
        let c_t = a_ts * ss * ss / (st * st);
        let c_0 = as_ * var_ts / (st * st);
        let var = var_ts * ss * ss / (st * st);
        (c_t, c_0, var.max(0.0))
    }
}

/// `alpha[t] x + sigma[t] eps` on the rows flagged in `noised`; other rows
/// pass through unchanged.
pub fn forward_noise(
    x: &[[f64; 8]],
    noised: &[bool],
    t: usize,
    eps: &[[f64; 8]],
    schedule: &NoiseSchedule,
) -> Result<Vec<[f64; 8]>, DiffusionError> {
    if x.len() != eps.len() || x.len() != noised.len() {
        return Err(DiffusionError::Shape(format!(
            "{} layouts, {} noise rows, {} flags",
            x.len(),
            eps.len(),
            noised.len()
        )));
    }
    if t > schedule.t {
        return Err(DiffusionError::InvalidSchedule(format!("timestep {t} > T = {}", schedule.t)));
    }
    let (a, s) = (schedule.alpha[t], schedule.sigma[t]);
    Ok(x
        .iter()
        .zip(eps)
        .zip(noised)
        .map(|((row, e), &n)| {
            if n {
                std::array::from_fn(|c| a * row[c] + s * e[c])
            } else {
                *row
            }
        })
        .collect())
}

/// KL divergence between the true posterior `q(x_{t-1} | x_t, x_0)` and the
/// model's `p(x_{t-1} | x_t)` built from `eps_hat`, per row, summed over
/// channels. At `t = 1` the model step is deterministic and the squared
/// error of the predicted `x_0` is returned instead.
pub fn kl_term(schedule: &NoiseSchedule, x0: &[f64], xt: &[f64], eps_hat: &[f64], t: usize) -> f64 {
    let (a, s) = (schedule.alpha[t], schedule.sigma[t]);
    let x0_hat: Vec<f64> = xt.iter().zip(eps_hat).map(|(x, e)| (x - s * e) / a).collect();
    let (c_t, c_0, var) = schedule.posterior(t, t - 1);
    if t == 1 || var == 0.0 {
        return x0.iter().zip(&x0_hat).map(|(a, b)| (a - b).powi(2)).sum();
    }
    x0.iter()
        .zip(&x0_hat)
        .zip(xt)
        .map(|((x, xh), xt)| {
            let mq = c_t * xt + c_0 * x;
            let mp = c_t * xt + c_0 * xh;
            (mq - mp).powi(2) / (2.0 * var)
        })
        .sum()
}
