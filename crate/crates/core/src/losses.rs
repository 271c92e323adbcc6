//! Training objectives. Every loss is a batch sum with explicit per-sample
//! prefactors; none hides a mean over samples.

use serde::{Deserialize, Serialize};

use crate::diffmath::{Tensor, Var};
use crate::error::{Error, Result};
use crate::schedule::{OmegaMode, TimeDraw};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub alpha: f64,
    pub lambda_sid: f64,
    pub lambda_adv_gen: f64,
    pub lambda_adv_fake: f64,
    /// Stage flag `b`: halves the SiD term and enables the adversarial one.
    pub stage_b: u8,
    /// Samples per fakeness pool (emulated per-device batch).
    pub pool_group: usize,
    /// `C * W * H` of the data space.
    pub pixel_count: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            lambda_sid: 100.0,
            lambda_adv_gen: 0.01,
            lambda_adv_fake: 1.0,
            stage_b: 0,
            pool_group: 32,
            pixel_count: 1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("loss.lambda_sid", self.lambda_sid),
            ("loss.lambda_adv_gen", self.lambda_adv_gen),
            ("loss.lambda_adv_fake", self.lambda_adv_fake),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(key, "must be a nonnegative finite number"));
            }
        }
        if !self.alpha.is_finite() {
            return Err(Error::config("loss.alpha", "must be finite"));
        }
        if self.stage_b > 1 {
            return Err(Error::config("loss.stage_b", "must be 0 or 1"));
        }
        if self.pool_group == 0 {
            return Err(Error::config("loss.pool_group", "must be positive"));
        }
        if self.pixel_count == 0 {
            return Err(Error::config("loss.pixel_count", "must be positive"));
        }
        Ok(())
    }
}

/// How the fake-score loss combines with the logvar head.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LogvarForm {
    /// `gamma / e^u * (|f - x|^2 + u + lambda L)`
    Printed,
    /// `gamma (|f - x|^2 + lambda L) / e^u + u`
    #[default]
    Canonical,
}

fn same_shape(a: &Var<'_>, b: &Var<'_>, op: &'static str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op,
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(())
}

fn weighted_sum<'g>(per_sample: Var<'g>, w: &[f64]) -> Result<Var<'g>> {
    if per_sample.shape() != [w.len()] {
        return Err(Error::Shape {
            op: "per-sample weights",
            left: per_sample.shape(),
            right: vec![w.len()],
        });
    }
    let c = per_sample.graph().constant(Tensor::vector(w.to_vec()));
    Ok((per_sample * c).sum())
}

/// Per-sample generator prefactor `omega a^2 / sigma^4`, with the adaptive
/// normaliser `1 / (pixel_count * mean|f_phi - x_g|)` when selected. Values
/// only, so it never carries gradient.
pub fn generator_prefactors(
    f_phi: &Tensor,
    x_g: &Tensor,
    draws: &[TimeDraw],
    mode: OmegaMode,
) -> Result<Vec<f64>> {
    f_phi.check_same(x_g, "generator_prefactors")?;
    if draws.len() != f_phi.rows() {
        return Err(Error::Shape {
            op: "generator_prefactors",
            left: f_phi.shape().to_vec(),
            right: vec![draws.len()],
        });
    }
    Ok(draws
        .iter()
        .enumerate()
        .map(|(i, d)| {
            let base = d.sid_prefactor();
            match mode {
                OmegaMode::Snr => base,
                OmegaMode::Adaptive => {
                    let (a, b) = (f_phi.row(i), x_g.row(i));
                    let p = a.len() as f64;
                    let mad = a.iter().zip(b).map(|(u, v)| (u - v).abs()).sum::<f64>() / p;
                    base / (p * mad.max(1e-12))
                }
            }
        })
        .collect())
}

/// `-alpha |d|^2 + d^T (f_phi - x_g)` per sample, `d = f_phi - f_psi`,
/// weighted by `prefactor` and summed.
pub fn sid_loss_eq6<'g>(
    f_phi: Var<'g>,
    f_psi: Var<'g>,
    x_g: Var<'g>,
    alpha: f64,
    prefactor: &[f64],
) -> Result<Var<'g>> {
    same_shape(&f_phi, &f_psi, "sid_loss")?;
    same_shape(&f_phi, &x_g, "sid_loss")?;
    let d = f_phi - f_psi;
    let per = (d * d).sum_rows().scale(-alpha) + (d * (f_phi - x_g)).sum_rows();
    weighted_sum(per, prefactor)
}

/// `(1 - alpha) |d|^2 + d^T (f_psi - x_g)`, algebraically equal to
/// [`sid_loss_eq6`].
pub fn sid_loss_alg1<'g>(
    f_phi: Var<'g>,
    f_psi: Var<'g>,
    x_g: Var<'g>,
    alpha: f64,
    prefactor: &[f64],
) -> Result<Var<'g>> {
    same_shape(&f_phi, &f_psi, "sid_loss")?;
    same_shape(&f_phi, &x_g, "sid_loss")?;
    let d = f_phi - f_psi;
    let per = (d * d).sum_rows().scale(1.0 - alpha) + (d * (f_psi - x_g)).sum_rows();
    weighted_sum(per, prefactor)
}

/// SiD generator loss. Both algebraic forms are evaluated and must agree to
/// `1e-9` relative to the magnitude of their terms.
pub fn sid_generator_loss<'g>(
    f_phi: Var<'g>,
    f_psi: Var<'g>,
    x_g: Var<'g>,
    alpha: f64,
    prefactor: &[f64],
) -> Result<Var<'g>> {
    let a = sid_loss_eq6(f_phi, f_psi, x_g, alpha, prefactor)?;
    let b = sid_loss_alg1(f_phi, f_psi, x_g, alpha, prefactor)?;
    let scale = sid_term_scale(&f_phi.value(), &f_psi.value(), &x_g.value(), alpha, prefactor);
    if (a.item() - b.item()).abs() > 1e-9 * scale.max(f64::MIN_POSITIVE) {
        return Err(Error::Invalid(format!(
            "SiD loss forms disagree: {} vs {}",
            a.item(),
            b.item()
        )));
    }
    a.ensure_finite()
}

/// Sum of absolute term magnitudes, the natural scale for comparing the two
/// SiD forms under cancellation.
pub fn sid_term_scale(f_phi: &Tensor, f_psi: &Tensor, x_g: &Tensor, alpha: f64, prefactor: &[f64]) -> f64 {
    let mut s = 0.0;
    for (i, p) in prefactor.iter().enumerate() {
        let (a, b, x) = (f_phi.row(i), f_psi.row(i), x_g.row(i));
        let dd: f64 = a.iter().zip(b).map(|(u, v)| (u - v).powi(2)).sum();
        let d1: f64 = (0..a.len()).map(|j| ((a[j] - b[j]) * (a[j] - x[j])).abs()).sum();
        let d2: f64 = (0..a.len()).map(|j| ((a[j] - b[j]) * (b[j] - x[j])).abs()).sum();
        s += p.abs() * (dd * (alpha.abs() + (1.0 - alpha).abs()) + d1 + d2);
    }
    s
}

/// Group-pooled `ln D`: for each group of `group` consecutive samples, the
/// mean over samples and map positions of `log_sigmoid(logits)`, broadcast
/// back to every member. `logits` is `[n, positions]`; output `[n]`.
pub fn pooled_fakeness<'g>(logits: Var<'g>, group: usize) -> Result<Var<'g>> {
    let n = logits.shape()[0];
    if group == 0 || n % group != 0 {
        return Err(Error::config(
            "loss.pool_group",
            format!("batch of {n} is not divisible into groups of {group}"),
        ));
    }
    Ok(logits.log_sigmoid().mean_rows().group_mean(group))
}

/// Generator objective with its two contributions reported separately.
pub struct GeneratorLoss<'g> {
    pub total: Var<'g>,
    /// `(1/2)^b lambda_sid * SiD`
    pub sid: f64,
    /// `b/2 lambda_adv pixel_count * sum_i prefactor_i / 2 * (-pooled_i)`
    pub adv: f64,
}

/// SiDA generator loss. The adversarial term uses the non-saturating
/// `-ln D(x_t)`, so decreasing it makes fakes look real.
pub fn sida_generator_loss<'g>(
    f_phi: Var<'g>,
    f_psi: Var<'g>,
    x_g: Var<'g>,
    disc_logits: Option<Var<'g>>,
    w: &LossWeights,
    prefactor: &[f64],
) -> Result<GeneratorLoss<'g>> {
    let half_b = if w.stage_b == 1 { 0.5 } else { 1.0 };
    let sid = sid_generator_loss(f_phi, f_psi, x_g, w.alpha, prefactor)?.scale(half_b * w.lambda_sid);
    if w.stage_b == 0 {
        return Ok(GeneratorLoss {
            sid: sid.item(),
            adv: 0.0,
            total: sid,
        });
    }
    let logits = disc_logits.ok_or_else(|| {
        Error::Stage("adversarial stage requires discriminator logits".into())
    })?;
    let fake = -pooled_fakeness(logits, w.pool_group)?;
    let coef: Vec<f64> = prefactor.iter().map(|p| p / 2.0).collect();
    let adv = weighted_sum(fake, &coef)?.scale(0.5 * w.lambda_adv_gen * w.pixel_count as f64);
    Ok(GeneratorLoss {
        sid: sid.item(),
        adv: adv.item(),
        total: (sid + adv).ensure_finite()?,
    })
}

/// `sum_i gamma_i |f_psi - x_g|^2`.
pub fn fake_score_denoise_loss<'g>(f_psi: Var<'g>, x_g: Var<'g>, draws: &[TimeDraw]) -> Result<Var<'g>> {
    same_shape(&f_psi, &x_g, "fake_score_denoise_loss")?;
    let r = f_psi - x_g;
    let gamma: Vec<f64> = draws.iter().map(|d| d.gamma).collect();
    weighted_sum((r * r).sum_rows(), &gamma)
}

/// Per-sample squared residual `|f_psi - x_g|^2`, shape `[n]`.
fn residuals<'g>(f_psi: Var<'g>, x_g: Var<'g>) -> Result<Var<'g>> {
    same_shape(&f_psi, &x_g, "fake_score_loss")?;
    let r = f_psi - x_g;
    Ok((r * r).sum_rows())
}

/// Minimisation form of the discriminator objective,
/// `(1 / (2 n P)) sum [softplus(-real) + softplus(fake)]`, i.e. the
/// negated `mean ln D(y_t) + ln(1 - D(x_t))` with the pairwise 1/2.
pub fn discriminator_loss<'g>(real_logits: Var<'g>, fake_logits: Var<'g>) -> Result<Var<'g>> {
    same_shape(&real_logits, &fake_logits, "discriminator_loss")?;
    let n: usize = real_logits.shape().iter().product();
    let s = (-real_logits).softplus().sum() + fake_logits.softplus().sum();
    Ok(s.scale(1.0 / (2.0 * n as f64)))
}

/// [`discriminator_loss`] evaluated per pooling group and broadcast to the
/// group's members, shape `[n]`.
pub fn discriminator_loss_grouped<'g>(real_logits: Var<'g>, fake_logits: Var<'g>, group: usize) -> Result<Var<'g>> {
    same_shape(&real_logits, &fake_logits, "discriminator_loss")?;
    let n = real_logits.shape()[0];
    if group == 0 || n % group != 0 {
        return Err(Error::config(
            "loss.pool_group",
            format!("batch of {n} is not divisible into groups of {group}"),
        ));
    }
    let per = ((-real_logits).softplus().mean_rows() + fake_logits.softplus().mean_rows()).scale(0.5);
    Ok(per.group_mean(group))
}

/// Fake-score objective with its parts reported separately.
pub struct FakeScoreLoss<'g> {
    pub total: Var<'g>,
    /// `sum_i gamma_i |f_psi - x_g|^2`
    pub denoise: f64,
    /// Mean over groups of the discriminator loss, 0 when disabled.
    pub disc: f64,
}

struct DiscTerm<'g> {
    per_sample: Option<Var<'g>>,
    mean: f64,
}

fn disc_term<'g>(
    real: Option<Var<'g>>,
    fake: Option<Var<'g>>,
    w: &LossWeights,
) -> Result<DiscTerm<'g>> {
    match (real, fake) {
        (Some(r), Some(f)) => {
            let per = discriminator_loss_grouped(r, f, w.pool_group)?;
            let n = per.shape()[0] as f64;
            let mean = per.value().sum() / n;
            Ok(DiscTerm {
                per_sample: Some(per.scale(w.lambda_adv_fake)),
                mean,
            })
        }
        (None, None) => Ok(DiscTerm { per_sample: None, mean: 0.0 }),
        _ => Err(Error::Invalid("real and fake logits must be supplied together".into())),
    }
}

/// `sum_i gamma_i (|f_psi - x_g|^2 + lambda_adv_fake L_disc)`, with `L_disc`
/// pooled per group. Without logits only the denoising part remains.
pub fn sida_fakescore_loss<'g>(
    f_psi: Var<'g>,
    x_g: Var<'g>,
    real_logits: Option<Var<'g>>,
    fake_logits: Option<Var<'g>>,
    w: &LossWeights,
    draws: &[TimeDraw],
) -> Result<FakeScoreLoss<'g>> {
    let res = residuals(f_psi, x_g)?;
    let gamma: Vec<f64> = draws.iter().map(|d| d.gamma).collect();
    let denoise = weighted_sum(res, &gamma)?.item();
    let disc = disc_term(real_logits, fake_logits, w)?;
    let per = match disc.per_sample {
        Some(d) => res + d,
        None => res,
    };
    Ok(FakeScoreLoss {
        total: weighted_sum(per, &gamma)?.ensure_finite()?,
        denoise,
        disc: disc.mean,
    })
}

/// Fake-score loss with a learned per-sample log-variance `u`.
pub fn sida_fakescore_loss_logvar<'g>(
    f_psi: Var<'g>,
    x_g: Var<'g>,
    real_logits: Option<Var<'g>>,
    fake_logits: Option<Var<'g>>,
    logvar: Var<'g>,
    form: LogvarForm,
    w: &LossWeights,
    draws: &[TimeDraw],
) -> Result<FakeScoreLoss<'g>> {
    let logvar = logvar.ensure_finite()?;
    let res = residuals(f_psi, x_g)?;
    if logvar.shape() != res.shape() {
        return Err(Error::Shape {
            op: "logvar",
            left: logvar.shape(),
            right: res.shape(),
        });
    }
    let gamma: Vec<f64> = draws.iter().map(|d| d.gamma).collect();
    let denoise = weighted_sum(res, &gamma)?.item();
    let disc = disc_term(real_logits, fake_logits, w)?;
    let inner = match disc.per_sample {
        Some(d) => res + d,
        None => res,
    };
    let inv = (-logvar).exp();
    let total = match form {
        LogvarForm::Printed => weighted_sum((inner + logvar) * inv, &gamma)?,
        LogvarForm::Canonical => weighted_sum(inner * inv, &gamma)? + logvar.sum(),
    };
    Ok(FakeScoreLoss {
        total: total.ensure_finite()?,
        denoise,
        disc: disc.mean,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmath::Graph;

    fn unit_draw() -> TimeDraw {
        TimeDraw { t: 0.5, a: 1.0, sigma: 1.0, omega: 1.0, gamma: 1.0 }
    }

    fn row<'g>(g: &'g Graph, v: &[f64]) -> Var<'g> {
        g.constant(Tensor::new(vec![1, v.len()], v.to_vec()).unwrap())
    }

    #[test]
    fn sid_hand_cases() {
        let g = Graph::new();
        let (fp, fs, x) = (row(&g, &[1.0, 0.0]), row(&g, &[0.0, 0.0]), row(&g, &[0.0, 0.0]));
        assert_eq!(sid_generator_loss(fp, fs, x, 1.0, &[1.0]).unwrap().item(), 0.0);
        assert_eq!(sid_generator_loss(fp, fs, x, 0.0, &[1.0]).unwrap().item(), 1.0);
        assert_eq!(sid_generator_loss(fp, fp, x, 0.3, &[1.0]).unwrap().item(), 0.0);
    }

    #[test]
    fn pooled_fakeness_cases() {
        let g = Graph::new();
        let z = g.constant(Tensor::zeros(&[4, 3]));
        let p = pooled_fakeness(z, 2).unwrap().value();
        for v in p.data() {
            assert!((v - 0.5f64.ln()).abs() < 1e-15);
        }
        let l = g.constant(Tensor::new(vec![2, 1], vec![0.0, 800.0]).unwrap());
        let p = pooled_fakeness(l, 2).unwrap().value();
        assert!((p.data()[0] - 0.5f64.ln() / 2.0).abs() < 1e-12);
        let l = g.constant(Tensor::new(vec![2, 2], vec![0.0, 2.0, 1.0, 1.0]).unwrap());
        let single = pooled_fakeness(l, 1).unwrap().value();
        let ls = |x: f64| -(1.0 + (-x).exp()).ln();
        assert!((single.data()[0] - (ls(0.0) + ls(2.0)) / 2.0).abs() < 1e-15);
        assert!(pooled_fakeness(l, 3).is_err());
    }

    #[test]
    fn stage_flag_halves_sid_and_adds_adversarial() {
        let g = Graph::new();
        let (fp, fs, x) = (row(&g, &[0.7]), row(&g, &[0.1]), row(&g, &[-0.4]));
        let logits = g.constant(Tensor::zeros(&[1, 1]));
        let mut w = LossWeights { pool_group: 1, ..Default::default() };
        let l0 = sida_generator_loss(fp, fs, x, Some(logits), &w, &[1.0]).unwrap();
        let sid_raw = sid_generator_loss(fp, fs, x, 1.0, &[1.0]).unwrap().item();
        assert_eq!(l0.total.item(), 100.0 * sid_raw);
        assert_eq!(l0.adv, 0.0);
        w.stage_b = 1;
        let l1 = sida_generator_loss(fp, fs, x, Some(logits), &w, &[1.0]).unwrap();
        assert_eq!(l1.sid, l0.sid / 2.0);
        let expect = 0.5 * 100.0 * sid_raw + 0.5 * 0.01 * 0.5 * 1.0 * 2f64.ln();
        assert!((l1.total.item() - expect).abs() < 1e-12);
        assert!(sida_generator_loss(fp, fs, x, None, &w, &[1.0]).is_err());
    }

    #[test]
    fn denoise_and_discriminator_cases() {
        let g = Graph::new();
        let d = TimeDraw { gamma: 2.0, ..unit_draw() };
        let l = fake_score_denoise_loss(row(&g, &[1.0, 1.0]), row(&g, &[0.0, 0.0]), &[d]).unwrap();
        assert_eq!(l.item(), 4.0);
        let z = g.constant(Tensor::zeros(&[3, 2]));
        assert!((discriminator_loss(z, z).unwrap().item() - 2f64.ln()).abs() < 1e-15);
        let big = g.constant(Tensor::full(&[3, 2], 60.0));
        assert!(discriminator_loss(big, -big).unwrap().item() < 1e-25);
    }

    #[test]
    fn adversarial_weight_scales_exactly() {
        let g = Graph::new();
        let (f, x) = (row(&g, &[0.2]), row(&g, &[0.0]));
        let (r, fk) = (g.constant(Tensor::vector(vec![0.3]).reshape(&[1, 1]).unwrap()), g.constant(Tensor::vector(vec![-1.1]).reshape(&[1, 1]).unwrap()));
        let dr = [unit_draw()];
        let base = sida_fakescore_loss(f, x, None, None, &LossWeights::default(), &dr).unwrap().total.item();
        let off = LossWeights { lambda_adv_fake: 0.0, pool_group: 1, ..Default::default() };
        assert_eq!(sida_fakescore_loss(f, x, Some(r), Some(fk), &off, &dr).unwrap().total.item(), base);
        let w1 = LossWeights { lambda_adv_fake: 1.0, pool_group: 1, ..Default::default() };
        let w100 = LossWeights { lambda_adv_fake: 100.0, ..w1.clone() };
        let a1 = sida_fakescore_loss(f, x, Some(r), Some(fk), &w1, &dr).unwrap().total.item() - base;
        let a100 = sida_fakescore_loss(f, x, Some(r), Some(fk), &w100, &dr).unwrap().total.item() - base;
        assert!((a100 - 100.0 * a1).abs() < 1e-12 * a100.abs());
    }

    #[test]
    fn logvar_zero_reduces_to_plain_loss() {
        let g = Graph::new();
        let (f, x) = (row(&g, &[0.2, -0.3]), row(&g, &[0.0, 0.1]));
        let dr = [TimeDraw { gamma: 3.0, ..unit_draw() }];
        let w = LossWeights::default();
        let plain = sida_fakescore_loss(f, x, None, None, &w, &dr).unwrap().total.item();
        for form in [LogvarForm::Printed, LogvarForm::Canonical] {
            let lv = g.constant(Tensor::vector(vec![0.0]));
            let l = sida_fakescore_loss_logvar(f, x, None, None, lv, form, &w, &dr).unwrap();
            assert!((l.total.item() - plain).abs() < 1e-15);
        }
    }
}
