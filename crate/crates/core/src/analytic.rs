//! Exact Gaussian-mixture data world.
//!
//! For `x_0 ~ sum_k pi_k N(mu_k, diag(s_k^2))` and `x_t = a x_0 + sigma eps`
//! the diffused marginal is `sum_k pi_k N(a mu_k, diag(a^2 s_k^2 + sigma^2))`,
//! so its score, the posterior mean `E[x_0 | x_t]` and their identity
//! `a E[x_0|x_t] - x_t = sigma^2 grad ln p(x_t)` are all closed form.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffmath::{Tensor, Var};
use crate::error::{Error, Result};
use crate::schedule::TimeDraw;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Diagonal-covariance Gaussian mixture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureModel {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<Vec<f64>>,
}

/// Per-component quantities at one diffused point.
struct Posterior {
    /// responsibilities
    r: Vec<f64>,
    /// component posterior means, `k x d`
    m: Vec<f64>,
    /// component scores `-(x - a mu_k) / v_k`, `k x d`
    g: Vec<f64>,
    /// shrinkage `a s_k^2 / v_k`, `k x d`
    c: Vec<f64>,
    log_density: f64,
}

impl MixtureModel {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, variances: Vec<Vec<f64>>) -> Result<Self> {
        let m = Self {
            weights,
            means,
            variances,
        };
        m.validate()?;
        Ok(m)
    }

    /// Single Gaussian with diagonal covariance.
    pub fn gaussian(mean: Vec<f64>, variance: Vec<f64>) -> Result<Self> {
        Self::new(vec![1.0], vec![mean], vec![variance])
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.weights.len();
        if k == 0 {
            return Err(Error::config("data.weights", "at least one component required"));
        }
        if self.means.len() != k || self.variances.len() != k {
            return Err(Error::config(
                "data.means",
                "weights, means and variances must have the same number of components",
            ));
        }
        let d = self.means[0].len();
        if d == 0 {
            return Err(Error::config("data.means", "dimension must be positive"));
        }
        if self.means.iter().chain(&self.variances).any(|v| v.len() != d) {
            return Err(Error::config("data.means", "all components must share one dimension"));
        }
        if self.weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::config("data.weights", "weights must be nonnegative"));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::config("data.weights", format!("weights sum to {total}, not 1")));
        }
        if self.variances.iter().flatten().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::config("data.variances", "variances must be positive"));
        }
        if self.means.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::config("data.means", "means must be finite"));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    /// Named presets.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "ring-8" => Ok(ring(8, 1.0, 0.08)),
            "grid-25" => Ok(grid(5, 0.5, 0.05)),
            "two-moons-gmm" => Ok(two_moons(8, 0.7, 0.08)),
            "gauss-2d" => Self::gaussian(vec![0.6, -0.4], vec![0.25, 1.44]),
            "patterns-8x8" => Ok(patterns_8x8()),
            other => Err(Error::config("data.preset", format!("unknown preset `{other}`"))),
        }
    }

    pub fn mean(&self) -> Vec<f64> {
        let d = self.dim();
        let mut out = vec![0.0; d];
        for (w, m) in self.weights.iter().zip(&self.means) {
            for (o, v) in out.iter_mut().zip(m) {
                *o += w * v;
            }
        }
        out
    }

    /// Root-mean-square per-coordinate standard deviation of the mixture.
    pub fn data_std(&self) -> f64 {
        let mu = self.mean();
        let d = self.dim() as f64;
        let mut var = 0.0;
        for ((w, m), v) in self.weights.iter().zip(&self.means).zip(&self.variances) {
            for j in 0..m.len() {
                var += w * (v[j] + (m[j] - mu[j]).powi(2));
            }
        }
        (var / d).sqrt()
    }

    fn posterior(&self, x: &[f64], a: f64, sigma: f64) -> Posterior {
        let k = self.components();
        let d = self.dim();
        let s2 = sigma * sigma;
        let mut logits = vec![f64::NEG_INFINITY; k];
        let mut m = vec![0.0; k * d];
        let mut g = vec![0.0; k * d];
        let mut c = vec![0.0; k * d];
        for comp in 0..k {
            let (mu, var) = (&self.means[comp], &self.variances[comp]);
            let mut ll = 0.0;
            for j in 0..d {
                let v = a * a * var[j] + s2;
                let diff = x[j] - a * mu[j];
                ll -= 0.5 * (LN_2PI + v.ln() + diff * diff / v);
                let shrink = a * var[j] / v;
                c[comp * d + j] = shrink;
                m[comp * d + j] = mu[j] + shrink * diff;
                g[comp * d + j] = -diff / v;
            }
            if self.weights[comp] > 0.0 {
                logits[comp] = self.weights[comp].ln() + ll;
            }
        }
        let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut r: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
        let z: f64 = r.iter().sum();
        r.iter_mut().for_each(|v| *v /= z);
        Posterior {
            r,
            m,
            g,
            c,
            log_density: top + z.ln(),
        }
    }

    /// `E[x_0 | x_t]` for one point.
    pub fn denoise_point(&self, x: &[f64], a: f64, sigma: f64) -> Vec<f64> {
        let p = self.posterior(x, a, sigma);
        let d = self.dim();
        let mut out = vec![0.0; d];
        for (comp, r) in p.r.iter().enumerate() {
            for j in 0..d {
                out[j] += r * p.m[comp * d + j];
            }
        }
        out
    }

    /// `grad ln p(x_t)` for one point.
    pub fn score_point(&self, x: &[f64], a: f64, sigma: f64) -> Vec<f64> {
        let p = self.posterior(x, a, sigma);
        let d = self.dim();
        let mut out = vec![0.0; d];
        for (comp, r) in p.r.iter().enumerate() {
            for j in 0..d {
                out[j] += r * p.g[comp * d + j];
            }
        }
        out
    }

    /// `ln p(x_t)` of the diffused mixture; `sigma = 0, a = 1` gives the data
    /// log-density.
    pub fn log_density_point(&self, x: &[f64], a: f64, sigma: f64) -> f64 {
        self.posterior(x, a, sigma).log_density
    }

    /// Component posterior means and responsibilities at one point.
    pub fn component_posteriors(&self, x: &[f64], a: f64, sigma: f64) -> (Vec<f64>, Vec<Vec<f64>>) {
        let p = self.posterior(x, a, sigma);
        let d = self.dim();
        let means = (0..self.components()).map(|k| p.m[k * d..(k + 1) * d].to_vec()).collect();
        (p.r, means)
    }
}

fn ring(k: usize, radius: f64, std: f64) -> MixtureModel {
    let means = (0..k)
        .map(|i| {
            let th = 2.0 * std::f64::consts::PI * i as f64 / k as f64;
            vec![radius * th.cos(), radius * th.sin()]
        })
        .collect();
    MixtureModel {
        weights: vec![1.0 / k as f64; k],
        means,
        variances: vec![vec![std * std; 2]; k],
    }
}

fn grid(side: usize, spacing: f64, std: f64) -> MixtureModel {
    let half = (side - 1) as f64 / 2.0;
    let mut means = Vec::new();
    for i in 0..side {
        for j in 0..side {
            means.push(vec![(i as f64 - half) * spacing, (j as f64 - half) * spacing]);
        }
    }
    let k = means.len();
    MixtureModel {
        weights: vec![1.0 / k as f64; k],
        means,
        variances: vec![vec![std * std; 2]; k],
    }
}

fn two_moons(per_moon: usize, scale: f64, std: f64) -> MixtureModel {
    let mut means = Vec::new();
    for i in 0..per_moon {
        let th = std::f64::consts::PI * i as f64 / (per_moon - 1) as f64;
        means.push(vec![scale * (th.cos() - 0.5), scale * (th.sin() - 0.25)]);
        means.push(vec![scale * (0.5 - th.cos()), scale * (0.25 - th.sin())]);
    }
    let k = means.len();
    MixtureModel {
        weights: vec![1.0 / k as f64; k],
        means,
        variances: vec![vec![std * std; 2]; k],
    }
}

/// Four 1x8x8 templates: horizontal bar, vertical bar, checkerboard, blob.
fn patterns_8x8() -> MixtureModel {
    let n = 8;
    let make = |f: &dyn Fn(usize, usize) -> f64| -> Vec<f64> {
        let mut v = Vec::with_capacity(n * n);
        for y in 0..n {
            for x in 0..n {
                v.push(f(y, x));
            }
        }
        v
    };
    let means = vec![
        make(&|y, _| if (3..5).contains(&y) { 0.5 } else { -0.5 }),
        make(&|_, x| if (3..5).contains(&x) { 0.5 } else { -0.5 }),
        make(&|y, x| if (y / 2 + x / 2) % 2 == 0 { 0.5 } else { -0.5 }),
        make(&|y, x| {
            let dy = y as f64 - 3.5;
            let dx = x as f64 - 3.5;
            if dy * dy + dx * dx < 6.0 {
                0.5
            } else {
                -0.5
            }
        }),
    ];
    MixtureModel {
        weights: vec![0.25; 4],
        means,
        variances: vec![vec![0.01; n * n]; 4],
    }
}

pub fn gmm_sample<R: Rng + ?Sized>(model: &MixtureModel, n: usize, rng: &mut R) -> Tensor {
    gmm_sample_labeled(model, n, rng).0
}

/// Samples together with the index of the component each came from.
pub fn gmm_sample_labeled<R: Rng + ?Sized>(
    model: &MixtureModel,
    n: usize,
    rng: &mut R,
) -> (Tensor, Vec<usize>) {
    let d = model.dim();
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut k = model.components() - 1;
        for (i, w) in model.weights.iter().enumerate() {
            acc += w;
            if u < acc && *w > 0.0 {
                k = i;
                break;
            }
        }
        while model.weights[k] == 0.0 && k > 0 {
            k -= 1;
        }
        labels.push(k);
        for j in 0..d {
            let z: f64 = rng.sample(StandardNormal);
            data.push(model.means[k][j] + model.variances[k][j].sqrt() * z);
        }
    }
    (Tensor::from_parts(vec![n, d], data), labels)
}

fn check_batch(model: &MixtureModel, x: &Tensor, draws: &[TimeDraw]) -> Result<()> {
    if x.row_len() != model.dim() || draws.len() != x.rows() {
        return Err(Error::Shape {
            op: "gmm",
            left: x.shape().to_vec(),
            right: vec![draws.len(), model.dim()],
        });
    }
    Ok(())
}

/// Exact posterior mean, row `i` at `draws[i]`.
pub fn gmm_denoiser(model: &MixtureModel, x: &Tensor, draws: &[TimeDraw]) -> Result<Tensor> {
    check_batch(model, x, draws)?;
    let mut out = x.clone();
    for (i, d) in draws.iter().enumerate() {
        let v = model.denoise_point(x.row(i), d.a, d.sigma);
        out.row_mut(i).copy_from_slice(&v);
    }
    Ok(out)
}

/// Exact diffused score, row `i` at `draws[i]`.
pub fn gmm_score(model: &MixtureModel, x: &Tensor, draws: &[TimeDraw]) -> Result<Tensor> {
    check_batch(model, x, draws)?;
    let mut out = x.clone();
    for (i, d) in draws.iter().enumerate() {
        let v = model.score_point(x.row(i), d.a, d.sigma);
        out.row_mut(i).copy_from_slice(&v);
    }
    Ok(out)
}

/// Differentiable posterior mean: gradients flow into `x`.
pub fn gmm_denoiser_var<'g>(model: &MixtureModel, x: Var<'g>, draws: &[TimeDraw]) -> Result<Var<'g>> {
    let xv = x.value();
    let out = gmm_denoiser(model, &xv, draws)?;
    let model = model.clone();
    let draws = draws.to_vec();
    Ok(x.graph().custom(
        "gmm_denoiser",
        &[x],
        out,
        Box::new(move |g, ins, _| {
            let x = ins[0];
            let d = model.dim();
            let k = model.components();
            let mut gx = Tensor::zeros(x.shape());
            for (i, dr) in draws.iter().enumerate() {
                let p = model.posterior(x.row(i), dr.a, dr.sigma);
                let u = g.row(i);
                let mut gbar = vec![0.0; d];
                for comp in 0..k {
                    for j in 0..d {
                        gbar[j] += p.r[comp] * p.g[comp * d + j];
                    }
                }
                let out = gx.row_mut(i);
                for comp in 0..k {
                    let rk = p.r[comp];
                    if rk == 0.0 {
                        continue;
                    }
                    let um: f64 = (0..d).map(|j| u[j] * p.m[comp * d + j]).sum();
                    for j in 0..d {
                        out[j] += rk * (p.c[comp * d + j] * u[j] + um * (p.g[comp * d + j] - gbar[j]));
                    }
                }
            }
            vec![gx]
        }),
    ))
}

/// Perturbs means by `strength * N(0, I)` and log-weights by
/// `strength * N(0, 1)`; variances are kept.
pub fn corrupt_teacher<R: Rng + ?Sized>(
    model: &MixtureModel,
    strength: f64,
    rng: &mut R,
) -> Result<MixtureModel> {
    if !(strength >= 0.0 && strength.is_finite()) {
        return Err(Error::config("teacher.strength", "must be nonnegative"));
    }
    if strength == 0.0 {
        return Ok(model.clone());
    }
    let means = model
        .means
        .iter()
        .map(|m| {
            m.iter()
                .map(|v| v + strength * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();
    let logw: Vec<f64> = model
        .weights
        .iter()
        .map(|w| w.ln() + strength * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let top = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let raw: Vec<f64> = logw.iter().map(|l| (l - top).exp()).collect();
    let z: f64 = raw.iter().sum();
    let mut weights: Vec<f64> = raw.iter().map(|w| w / z).collect();
    // renormalise once more so the sum is exactly representable within 1e-12
    let s: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= s);
    MixtureModel::new(weights, means, model.variances.clone())
}

/// Affine generator `x = W z + b`, inducing `N(b, W W^T)` for `z ~ N(0, I)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearGenerator {
    /// `d x m`, row-major
    pub w: Tensor,
    pub b: Vec<f64>,
}

impl LinearGenerator {
    pub fn new(w: Tensor, b: Vec<f64>) -> Result<Self> {
        if w.shape().len() != 2 || w.rows() != b.len() {
            return Err(Error::Shape {
                op: "linear generator",
                left: w.shape().to_vec(),
                right: vec![b.len()],
            });
        }
        if !w.all_finite() || b.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("linear generator must be finite".into()));
        }
        Ok(Self { w, b })
    }

    pub fn dim(&self) -> usize {
        self.b.len()
    }

    pub fn latent_dim(&self) -> usize {
        self.w.row_len()
    }

    /// `W W^T + 1e-9 I`
    pub fn covariance(&self) -> DMatrix<f64> {
        let (d, m) = (self.dim(), self.latent_dim());
        let w = DMatrix::from_row_slice(d, m, self.w.data());
        &w * w.transpose() + DMatrix::identity(d, d) * 1e-9
    }
}

/// Monte Carlo estimate with its standard error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub std_err: f64,
}

/// `E_{x_t ~ p_theta(x_t)} |grad ln p_data(x_t) - grad ln p_theta(x_t)|^2`
/// with both scores exact.
pub fn fisher_divergence_exact<R: Rng + ?Sized>(
    data: &MixtureModel,
    gen: &LinearGenerator,
    draw: &TimeDraw,
    n_mc: usize,
    rng: &mut R,
) -> Result<Estimate> {
    if n_mc < 100 {
        return Err(Error::Invalid(format!(
            "fisher divergence needs at least 100 Monte Carlo draws, got {n_mc}"
        )));
    }
    if gen.dim() != data.dim() {
        return Err(Error::Shape {
            op: "fisher_divergence_exact",
            left: vec![gen.dim()],
            right: vec![data.dim()],
        });
    }
    let d = gen.dim();
    let m = gen.latent_dim();
    let (a, s) = (draw.a, draw.sigma);
    let cov = gen.covariance() * (a * a) + DMatrix::identity(d, d) * (s * s);
    let chol = cov
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Invalid("generator covariance not positive definite".into()))?;
    let center = DVector::from_iterator(d, gen.b.iter().map(|v| a * v));
    let w = DMatrix::from_row_slice(d, m, gen.w.data());
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..n_mc {
        let z = DVector::from_fn(m, |_, _| rng.sample::<f64, _>(StandardNormal));
        let eps = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let xg = &w * z + DVector::from_column_slice(&gen.b);
        let xt = xg * a + eps * s;
        let gen_score = -chol.solve(&(&xt - &center));
        let data_score = data.score_point(xt.as_slice(), a, s);
        let diff: f64 = (0..d).map(|j| (data_score[j] - gen_score[j]).powi(2)).sum();
        sum += diff;
        sum_sq += diff * diff;
    }
    let n = n_mc as f64;
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0) * n / (n - 1.0);
    Ok(Estimate {
        value: mean,
        std_err: (var / n).sqrt(),
    })
}
