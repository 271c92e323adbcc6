//! Two-sample distances between point clouds.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffmath::Tensor;
use crate::error::{Error, Result};

fn check_pair(a: &Tensor, b: &Tensor, min: usize, op: &'static str) -> Result<()> {
    if a.rows() < min || b.rows() < min {
        return Err(Error::Invalid(format!(
            "{op} needs at least {min} samples per set, got {} and {}",
            a.rows(),
            b.rows()
        )));
    }
    if a.row_len() != b.row_len() {
        return Err(Error::Shape {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn mean_pair_distance(a: &Tensor, b: &Tensor) -> f64 {
    let d = a.row_len();
    let (ad, bd) = (a.data(), b.data());
    let mut total = 0.0;
    for i in 0..a.rows() {
        let x = &ad[i * d..(i + 1) * d];
        let mut row = 0.0;
        for j in 0..b.rows() {
            let y = &bd[j * d..(j + 1) * d];
            let mut s = 0.0;
            for k in 0..d {
                let t = x[k] - y[k];
                s += t * t;
            }
            row += s.sqrt();
        }
        total += row;
    }
    total / (a.rows() * b.rows()) as f64
}

/// `mean_pair_distance(a, a)` from the pairs above the diagonal.
fn mean_self_distance(a: &Tensor) -> f64 {
    let d = a.row_len();
    let ad = a.data();
    let n = a.rows();
    let mut total = 0.0;
    for i in 0..n {
        let x = &ad[i * d..(i + 1) * d];
        let mut row = 0.0;
        for j in i + 1..n {
            let y = &ad[j * d..(j + 1) * d];
            let mut s = 0.0;
            for k in 0..d {
                let t = x[k] - y[k];
                s += t * t;
            }
            row += s.sqrt();
        }
        total += row;
    }
    2.0 * total / (n * n) as f64
}

/// `2 E|A - B| - E|A - A'| - E|B - B'|` as a V-statistic (all pairs,
/// including coincident ones), so identical sets give exactly zero.
pub fn energy_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_pair(a, b, 100, "energy_distance")?;
    if a.data() == b.data() {
        return Ok(0.0);
    }
    let ab = mean_pair_distance(a, b);
    let (aa, bb) = (mean_self_distance(a), mean_self_distance(b));
    Ok((2.0 * ab - (aa + bb)).max(0.0))
}

/// Sliced 2-Wasserstein distance over `n_proj` seeded random directions.
/// Both sets must have the same size.
pub fn sliced_wasserstein(a: &Tensor, b: &Tensor, n_proj: usize, seed: u64) -> Result<f64> {
    check_pair(a, b, 2, "sliced_wasserstein")?;
    if a.rows() != b.rows() {
        return Err(Error::Invalid("sliced_wasserstein needs equal sample counts".into()));
    }
    let d = a.row_len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..n_proj {
        let mut dir: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let n = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        dir.iter_mut().for_each(|v| *v /= n);
        let proj = |t: &Tensor| -> Vec<f64> {
            let mut p: Vec<f64> = (0..t.rows())
                .map(|i| t.row(i).iter().zip(&dir).map(|(x, w)| x * w).sum())
                .collect();
            p.sort_by(f64::total_cmp);
            p
        };
        let (pa, pb) = (proj(a), proj(b));
        total += pa.iter().zip(&pb).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / pa.len() as f64;
    }
    Ok((total / n_proj as f64).sqrt())
}

/// Frozen random Fourier featurizer `sqrt(2/D) cos(W x + c)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Featurizer {
    w: DMatrix<f64>,
    c: DVector<f64>,
}

impl Featurizer {
    pub fn new(input_dim: usize, features: usize, bandwidth: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = DMatrix::from_fn(features, input_dim, |_, _| rng.sample::<f64, _>(StandardNormal) / bandwidth);
        let c = DVector::from_fn(features, |_, _| rng.gen_range(0.0..std::f64::consts::TAU));
        Self { w, c }
    }

    pub fn features(&self) -> usize {
        self.c.len()
    }

    pub fn apply(&self, x: &Tensor) -> DMatrix<f64> {
        let n = x.rows();
        let xm = DMatrix::from_row_slice(n, x.row_len(), x.data());
        let scale = (2.0 / self.features() as f64).sqrt();
        let mut f = xm * self.w.transpose();
        for mut row in f.row_iter_mut() {
            for (v, c) in row.iter_mut().zip(self.c.iter()) {
                *v = scale * (*v + c).cos();
            }
        }
        f
    }
}

/// Sample mean and (biased) covariance of the rows of `f`.
pub fn moments(f: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = f.nrows() as f64;
    let mu = f.row_mean().transpose();
    let mut centered = f.clone();
    for mut row in centered.row_iter_mut() {
        row -= mu.transpose();
    }
    let cov = centered.transpose() * &centered / n;
    (mu, cov)
}

fn sqrtm_psd(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let scale = eig.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-300);
    if eig.eigenvalues.iter().any(|v| *v < -1e-8 * scale || !v.is_finite()) {
        return None;
    }
    let root = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    Some(&eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose())
}

/// Fréchet distance between two Gaussians, plus whether the `1e-6 I`
/// fallback was needed.
pub fn frechet_from_moments(
    mu_a: &DVector<f64>,
    cov_a: &DMatrix<f64>,
    mu_b: &DVector<f64>,
    cov_b: &DMatrix<f64>,
) -> (f64, bool) {
    let mean_term = (mu_a - mu_b).norm_squared();
    let attempt = |ca: &DMatrix<f64>, cb: &DMatrix<f64>| -> Option<f64> {
        let sa = sqrtm_psd(ca)?;
        let inner = &sa * cb * &sa;
        let root = sqrtm_psd(&inner)?;
        Some(ca.trace() + cb.trace() - 2.0 * root.trace())
    };
    if let Some(t) = attempt(cov_a, cov_b) {
        return ((mean_term + t).max(0.0), false);
    }
    let k = cov_a.nrows();
    let jitter = DMatrix::identity(k, k) * 1e-6;
    let t = attempt(&(cov_a + &jitter), &(cov_b + &jitter)).unwrap_or(f64::NAN);
    ((mean_term + t).max(0.0), true)
}

/// Fréchet distance between Gaussian fits in a random-feature space.
pub fn frechet_feature_distance(a: &Tensor, b: &Tensor, featurizer: &Featurizer) -> Result<(f64, bool)> {
    check_pair(a, b, 2, "frechet_feature_distance")?;
    let k = featurizer.features();
    if k * 10 > a.rows().min(b.rows()) {
        return Err(Error::Invalid(format!(
            "feature dimension {k} exceeds a tenth of the smaller sample count"
        )));
    }
    let (ma, ca) = moments(&featurizer.apply(a));
    let (mb, cb) = moments(&featurizer.apply(b));
    Ok(frechet_from_moments(&ma, &ca, &mb, &cb))
}

/// All three distances for one pair of sample sets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub energy_distance: f64,
    pub sliced_wasserstein: f64,
    pub frechet_feature_distance: f64,
    /// Whether the Fréchet computation needed diagonal jitter.
    pub frechet_jitter: bool,
    pub n_samples: usize,
    pub seed: u64,
}

pub fn metric_report(a: &Tensor, b: &Tensor, seed: u64) -> Result<MetricReport> {
    let n = a.rows().min(b.rows());
    let featurizer = Featurizer::new(a.row_len(), (n / 10).min(32).max(1), 1.0, seed);
    let (fd, jitter) = frechet_feature_distance(a, b, &featurizer)?;
    Ok(MetricReport {
        energy_distance: energy_distance(a, b)?,
        sliced_wasserstein: sliced_wasserstein(a, b, 64, seed)?,
        frechet_feature_distance: fd,
        frechet_jitter: jitter,
        n_samples: n,
        seed,
    })
}
