//! Noise schedules, loss weightings and the forward diffusion map.
//!
//! The noise level follows the power interpolation
//! `sigma(t) = (sigma_min^(1/rho) + t (sigma_max^(1/rho) - sigma_min^(1/rho)))^rho`
//! on `t in [0, 1]`. With the default variance-exploding convention the
//! signal coefficient is `a_t = 1`; the variance-preserving variant maps the
//! same noise level `s` to `a_t = 1/sqrt(1+s^2)`, `sigma_t = s a_t`, which
//! leaves the signal-to-noise ratio `1/s^2` unchanged.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffmath::{Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SignalConvention {
    /// `a_t = 1`
    VarianceExploding,
    /// `a_t^2 + sigma_t^2 = 1`
    VariancePreserving,
}

/// Generator-path weighting `omega(t)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OmegaMode {
    /// `omega = sigma^4 / a^2`, so `omega a^2 / sigma^4 = 1`.
    Snr,
    /// As `Snr`, further divided per sample by
    /// `pixel_count * mean|f_phi - x_g|` (detached).
    Adaptive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
    /// Generator times are drawn from `[0, t_max / 1000]`.
    pub t_max: u32,
    pub sigma_init: f64,
    pub convention: SignalConvention,
    pub omega: OmegaMode,
    /// Log-normal proposal over noise levels for the fake-score path.
    pub p_mean: f64,
    pub p_std: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            sigma_min: 0.002,
            sigma_max: 80.0,
            rho: 7.0,
            t_max: 800,
            sigma_init: 2.5,
            convention: SignalConvention::VarianceExploding,
            omega: OmegaMode::Snr,
            p_mean: -1.2,
            p_std: 1.2,
        }
    }
}

/// One sampled time with its coefficients and weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeDraw {
    pub t: f64,
    pub a: f64,
    pub sigma: f64,
    /// Generator-path weight.
    pub omega: f64,
    /// Fake-score-path weight (signal-to-noise ratio).
    pub gamma: f64,
}

impl TimeDraw {
    /// `omega a^2 / sigma^4`, the prefactor of the generator loss.
    pub fn sid_prefactor(&self) -> f64 {
        self.omega * self.a * self.a / self.sigma.powi(4)
    }

    /// Noise level in the `x_t / a_t` frame.
    pub fn scaled_sigma(&self) -> f64 {
        self.sigma / self.a
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    cfg: ScheduleConfig,
    lo: f64,
    hi: f64,
}

pub fn make_schedule(cfg: &ScheduleConfig) -> Result<NoiseSchedule> {
    NoiseSchedule::new(cfg.clone())
}

impl NoiseSchedule {
    pub fn new(cfg: ScheduleConfig) -> Result<Self> {
        if !(cfg.sigma_min > 0.0 && cfg.sigma_min.is_finite()) {
            return Err(Error::config("schedule.sigma_min", "must be positive"));
        }
        if !(cfg.sigma_max > cfg.sigma_min && cfg.sigma_max.is_finite()) {
            return Err(Error::config("schedule.sigma_max", "must exceed sigma_min"));
        }
        if !(cfg.rho > 0.0 && cfg.rho.is_finite()) {
            return Err(Error::config("schedule.rho", "must be positive"));
        }
        if cfg.t_max > 1000 {
            return Err(Error::config("schedule.t_max", "must be at most 1000"));
        }
        if !(cfg.sigma_init > 0.0) {
            return Err(Error::config("schedule.sigma_init", "must be positive"));
        }
        if !(cfg.p_std > 0.0 && cfg.p_mean.is_finite()) {
            return Err(Error::config("schedule.p_std", "must be positive"));
        }
        let lo = cfg.sigma_min.powf(1.0 / cfg.rho);
        let hi = cfg.sigma_max.powf(1.0 / cfg.rho);
        Ok(Self { cfg, lo, hi })
    }

    pub fn config(&self) -> &ScheduleConfig {
        &self.cfg
    }

    pub fn sigma_init(&self) -> f64 {
        self.cfg.sigma_init
    }

    pub fn t_max(&self) -> u32 {
        self.cfg.t_max
    }

    /// Noise level of `x_t / a_t` at time `t`.
    pub fn noise_level(&self, t: f64) -> f64 {
        (self.lo + t * (self.hi - self.lo)).powf(self.cfg.rho)
    }

    /// Inverse of [`Self::noise_level`].
    pub fn time_of(&self, s: f64) -> f64 {
        (s.powf(1.0 / self.cfg.rho) - self.lo) / (self.hi - self.lo)
    }

    pub fn a(&self, t: f64) -> f64 {
        match self.cfg.convention {
            SignalConvention::VarianceExploding => 1.0,
            SignalConvention::VariancePreserving => {
                let s = self.noise_level(t);
                1.0 / (1.0 + s * s).sqrt()
            }
        }
    }

    pub fn sigma(&self, t: f64) -> f64 {
        self.noise_level(t) * self.a(t)
    }

    pub fn snr(&self, t: f64) -> f64 {
        let s = self.noise_level(t);
        1.0 / (s * s)
    }

    pub fn draw_at(&self, t: f64) -> TimeDraw {
        let a = self.a(t);
        let sigma = self.sigma(t);
        TimeDraw {
            t,
            a,
            sigma,
            omega: sigma.powi(4) / (a * a),
            gamma: a * a / (sigma * sigma),
        }
    }

    /// Draw whose scaled noise level is `s` (clamped to the schedule range).
    pub fn draw_at_noise(&self, s: f64) -> TimeDraw {
        let s = s.clamp(self.cfg.sigma_min, self.cfg.sigma_max);
        let t = self.time_of(s).clamp(0.0, 1.0);
        self.draw_at(t)
    }

    pub fn omega_mode(&self) -> OmegaMode {
        self.cfg.omega
    }
}

/// `t ~ Unif[0, t_max/1000]`.
pub fn sample_generator_time<R: Rng + ?Sized>(rng: &mut R, schedule: &NoiseSchedule) -> TimeDraw {
    let upper = schedule.t_max() as f64 / 1000.0;
    let u: f64 = rng.gen();
    schedule.draw_at(u * upper)
}

/// Noise level from the log-normal proposal, mapped back to `t`.
pub fn sample_fakescore_time<R: Rng + ?Sized>(rng: &mut R, schedule: &NoiseSchedule) -> TimeDraw {
    let z: f64 = rng.sample(StandardNormal);
    let cfg = schedule.config();
    schedule.draw_at_noise((cfg.p_mean + cfg.p_std * z).exp())
}

pub fn sample_generator_times<R: Rng + ?Sized>(
    rng: &mut R,
    schedule: &NoiseSchedule,
    n: usize,
) -> Vec<TimeDraw> {
    (0..n).map(|_| sample_generator_time(rng, schedule)).collect()
}

pub fn sample_fakescore_times<R: Rng + ?Sized>(
    rng: &mut R,
    schedule: &NoiseSchedule,
    n: usize,
) -> Vec<TimeDraw> {
    (0..n).map(|_| sample_fakescore_time(rng, schedule)).collect()
}

fn check_draws(n: usize, draws: &[TimeDraw]) -> Result<()> {
    if draws.len() != n {
        return Err(Error::Shape {
            op: "diffuse draws",
            left: vec![n],
            right: vec![draws.len()],
        });
    }
    Ok(())
}

/// `a_t x + sigma_t eps`, row `i` using `draws[i]`.
pub fn diffuse_tensor(x: &Tensor, draws: &[TimeDraw], eps: &Tensor) -> Result<Tensor> {
    x.check_same(eps, "diffuse")?;
    check_draws(x.rows(), draws)?;
    let mut out = x.clone();
    for (i, d) in draws.iter().enumerate() {
        let e = eps.row(i);
        for (o, ev) in out.row_mut(i).iter_mut().zip(e) {
            *o = d.a * *o + d.sigma * ev;
        }
    }
    Ok(out)
}

/// Differentiable forward diffusion; gradient flows through `x` only.
pub fn diffuse<'g>(x: Var<'g>, draws: &[TimeDraw], eps: &Tensor) -> Result<Var<'g>> {
    let shape = x.shape();
    if shape != eps.shape() {
        return Err(Error::Shape {
            op: "diffuse",
            left: shape,
            right: eps.shape().to_vec(),
        });
    }
    check_draws(shape[0], draws)?;
    let g = x.graph();
    let a = g.constant(Tensor::vector(draws.iter().map(|d| d.a).collect()));
    let s = g.constant(Tensor::vector(draws.iter().map(|d| d.sigma).collect()));
    let noise = g.constant(eps.clone()).scale_rows(s);
    Ok(x.scale_rows(a) + noise)
}
