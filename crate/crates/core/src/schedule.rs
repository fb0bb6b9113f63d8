//! Linear-beta DDPM schedule with deterministic DDIM stepping.
//!
//! Steps are indexed `1..=T`; index `0` denotes the clean signal, with
//! `alpha_bar(0) = 1`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Latent;

pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    steps: usize,
    beta_start: f64,
    beta_end: f64,
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

/// Serialized form; derived tables are recomputed on load.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    #[serde(rename = "T")]
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(Error::InvalidParameter(format!(
            "schedule needs at least 2 steps, got {steps}"
        )));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )));
    }
    let span = beta_end - beta_start;
    let beta: Vec<f64> = (0..steps)
        .map(|i| beta_start + span * i as f64 / (steps - 1) as f64)
        .collect();
    let alpha_bar = beta
        .iter()
        .scan(1.0, |acc, b| {
            *acc *= 1.0 - b;
            Some(*acc)
        })
        .collect();
    Ok(NoiseSchedule {
        steps,
        beta_start,
        beta_end,
        beta,
        alpha_bar,
    })
}

impl NoiseSchedule {
    pub fn from_config(cfg: &ScheduleConfig) -> Result<Self> {
        make_schedule(cfg.steps, cfg.beta_start, cfg.beta_end)
    }

    pub fn config(&self) -> ScheduleConfig {
        ScheduleConfig {
            steps: self.steps,
            beta_start: self.beta_start,
            beta_end: self.beta_end,
        }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    /// Cumulative products for steps `1..=T`.
    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// `alpha_bar(t)` for `t` in `0..=T`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        match t {
            0 => Ok(1.0),
            t if t <= self.steps => Ok(self.alpha_bar[t - 1]),
            t => Err(Error::InvalidStep(format!(
                "step {t} outside 0..={}",
                self.steps
            ))),
        }
    }
}

fn same_shape(a: &Latent, b: &Latent, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// `x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`, for `t` in `1..=T`.
pub fn forward_noise(x0: &Latent, t: usize, eps: &Latent, s: &NoiseSchedule) -> Result<Latent> {
    if t == 0 || t > s.steps {
        return Err(Error::InvalidStep(format!(
            "forward noising needs 1 <= t <= {}, got {t}",
            s.steps
        )));
    }
    noise_to(x0, t, eps, s)
}

/// Like [`forward_noise`] but also accepts `t = 0`, which returns `x0` itself.
pub(crate) fn noise_to(x0: &Latent, t: usize, eps: &Latent, s: &NoiseSchedule) -> Result<Latent> {
    same_shape(x0, eps, "forward noise")?;
    if t == 0 {
        return Ok(x0.clone());
    }
    let ab = s.alpha_bar(t)?;
    let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
    let mut out = x0.clone();
    out.zip_mut_with(eps, |x, &e| *x = sa * *x + sn * e);
    Ok(out)
}

/// Clean-signal estimate implied by a noise prediction at step `t`.
pub fn predict_x0(x_t: &Latent, eps_hat: &Latent, t: usize, s: &NoiseSchedule) -> Result<Latent> {
    same_shape(x_t, eps_hat, "x0 prediction")?;
    let ab = s.alpha_bar(t)?;
    let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
    let mut out = x_t.clone();
    out.zip_mut_with(eps_hat, |x, &e| *x = (*x - sn * e) / sa);
    Ok(out)
}

/// Deterministic (eta = 0) DDIM update from step `t` to `t_prev < t`.
pub fn ddim_step(
    x_t: &Latent,
    eps_hat: &Latent,
    t: usize,
    t_prev: usize,
    s: &NoiseSchedule,
) -> Result<Latent> {
    if t == 0 || t > s.steps || t_prev >= t {
        return Err(Error::InvalidStep(format!(
            "ddim step needs {} >= t > t_prev >= 0, got t={t}, t_prev={t_prev}",
            s.steps
        )));
    }
    let x0 = predict_x0(x_t, eps_hat, t, s)?;
    let ab_prev = s.alpha_bar(t_prev)?;
    let (sa, sn) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
    let mut out = x0;
    out.zip_mut_with(eps_hat, |x, &e| *x = sa * *x + sn * e);
    Ok(out)
}

/// Soft-anchoring coefficient `f = t / T`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct TimeRatio(f64);

impl TimeRatio {
    pub fn value(self) -> f64 {
        self.0
    }
}

pub fn time_ratio(t: usize, total: usize) -> Result<TimeRatio> {
    if t == 0 || t > total {
        return Err(Error::InvalidStep(format!(
            "time ratio needs 1 <= t <= {total}, got {t}"
        )));
    }
    Ok(TimeRatio(t as f64 / total as f64))
}
