//! Magnitude-preserving layers, weight normalization and EMA.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffmath::{Bound, ParamSet, Tensor, Var};
use crate::error::{Error, Result};

/// Norm floor used inside the differentiated normalization.
pub const NORM_EPS: f64 = 1e-12;

/// `normalize(w) * gain / sqrt(fan_in)` per output row, differentiated
/// through. `normalize` rescales each row to unit root-mean-square.
pub fn traditional_weight_normalize_forward(w: &Tensor, gain: f64) -> Tensor {
    let k = w.row_len();
    let sk = (k as f64).sqrt();
    let mut out = w.clone();
    for i in 0..w.rows() {
        let norm = w.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        let r = NORM_EPS + norm / sk;
        out.row_mut(i).iter_mut().for_each(|v| *v = *v / r * gain / sk);
    }
    out
}

/// Tape version of [`traditional_weight_normalize_forward`] with a
/// learnable scalar gain.
pub fn effective_weight<'g>(w: Var<'g>, gain: Var<'g>) -> Var<'g> {
    let k = w.value().row_len();
    w.normalize_rows(NORM_EPS)
        .scale(1.0 / (k as f64).sqrt())
        .mul_scalar(gain)
}

/// `x W_eff^T + b` for the layer stored under `name`.
pub fn mp_linear<'g>(p: &Bound<'g>, name: &str, x: Var<'g>) -> Var<'g> {
    let w = effective_weight(p.var(&format!("{name}.w")), p.var(&format!("{name}.gain")));
    x.matmul_t(w).add_row(p.var(&format!("{name}.b")))
}

/// Same-padded convolution with an MP weight and per-channel bias.
pub fn mp_conv<'g>(p: &Bound<'g>, name: &str, x: Var<'g>, k: usize, stride: usize) -> Var<'g> {
    let w = effective_weight(p.var(&format!("{name}.w")), p.var(&format!("{name}.gain")));
    x.conv2d(w, k, stride).add_channel_bias(p.var(&format!("{name}.b")))
}

/// Registers an MP layer: standard normal weights, zero bias, `gain`.
pub fn init_layer<R: Rng + ?Sized>(
    params: &mut ParamSet,
    name: &str,
    out: usize,
    fan_in: usize,
    gain: f64,
    rng: &mut R,
) {
    params.insert(format!("{name}.w"), Tensor::randn(&[out, fan_in], rng));
    params.insert(format!("{name}.b"), Tensor::zeros(&[out]));
    params.insert(format!("{name}.gain"), Tensor::scalar(gain));
}

/// When the forced rescale of the raw weights happens.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ForcedNorm {
    #[default]
    Off,
    /// Rescale inside the differentiated training step.
    InPlace,
    /// Rescale as a separate step before the forward pass.
    PreHook,
}

/// Rescales every row of the named weights to norm `sqrt(fan_in)` outside
/// any tape. Returns the number of zero rows that were skipped.
pub fn forced_weight_normalize(params: &mut ParamSet, weights: &[String], mode: ForcedNorm) -> usize {
    if mode == ForcedNorm::Off {
        return 0;
    }
    let mut skipped = 0;
    for name in weights {
        let Some(w) = params.get_mut(name) else { continue };
        let k = w.row_len();
        let target = (k as f64).sqrt();
        for i in 0..w.rows() {
            let row = w.row_mut(i);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                skipped += 1;
                continue;
            }
            let c = target / norm;
            row.iter_mut().for_each(|v| *v *= c);
        }
    }
    skipped
}

/// `ema <- decay * ema + (1 - decay) * current`.
pub fn ema_update(ema: &mut ParamSet, current: &ParamSet, decay: f64) -> Result<()> {
    if !(0.0..1.0).contains(&decay) {
        return Err(Error::config("train.ema_decay", "must lie in [0, 1)"));
    }
    ema.check_compatible(current)?;
    for ((_, e), (_, c)) in ema.iter_mut().zip(current.iter()) {
        for (ev, cv) in e.data_mut().iter_mut().zip(c.data()) {
            *ev = decay * *ev + (1.0 - decay) * cv;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmath::{self, fd};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn forced_normalization_arithmetic() {
        let mut p = ParamSet::new();
        p.insert("l.w", Tensor::new(vec![1, 2], vec![3.0, 4.0]).unwrap());
        let names = vec!["l.w".to_string()];
        let before = p.clone();
        assert_eq!(forced_weight_normalize(&mut p, &names, ForcedNorm::Off), 0);
        assert_eq!(p, before);
        forced_weight_normalize(&mut p, &names, ForcedNorm::PreHook);
        let r = p.get("l.w").unwrap().data();
        let s2 = 2f64.sqrt();
        assert!((r[0] - 3.0 * s2 / 5.0).abs() < 1e-15 && (r[1] - 4.0 * s2 / 5.0).abs() < 1e-15);
    }

    #[test]
    fn zero_rows_are_skipped_and_counted() {
        let mut p = ParamSet::new();
        p.insert("l.w", Tensor::new(vec![2, 2], vec![0.0, 0.0, 1.0, 0.0]).unwrap());
        let n = forced_weight_normalize(&mut p, &["l.w".to_string()], ForcedNorm::PreHook);
        assert_eq!(n, 1);
        assert_eq!(p.get("l.w").unwrap().data(), &[0.0, 0.0, 2f64.sqrt(), 0.0]);
    }

    #[test]
    fn traditional_normalization_formula_and_scale_invariance() {
        let w = Tensor::new(vec![1, 4], vec![1.0, -1.0, 1.0, 1.0]).unwrap();
        let e = traditional_weight_normalize_forward(&w, 1.0);
        for v in e.data() {
            assert!((v.abs() - 0.5).abs() < 1e-12);
        }
        let e10 = traditional_weight_normalize_forward(&w.scaled(10.0), 1.0);
        assert!(e.max_abs_diff(&e10) < 1e-11);
    }

    #[test]
    fn normalized_weight_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = ParamSet::new();
        init_layer(&mut p, "l", 3, 4, 1.3, &mut rng);
        let x = Tensor::randn(&[5, 4], &mut rng);
        let loss = diffmath::objective(|g, b| {
            let y = mp_linear(b, "l", g.constant(x.clone()));
            Ok(y.sin().sum())
        });
        let (_, grads) = diffmath::grad(&p, loss).unwrap();
        let num = fd::central_gradient(&p, 1e-5, |q| diffmath::value(q, loss)).unwrap();
        assert!(fd::max_relative_error(&grads, &num, 1e-6) < 1e-4);
    }

    #[test]
    fn ema_limits() {
        let mut ema: ParamSet = [("a".to_string(), Tensor::vector(vec![0.0]))].into_iter().collect();
        let cur: ParamSet = [("a".to_string(), Tensor::vector(vec![1.0]))].into_iter().collect();
        ema_update(&mut ema, &cur, 0.0).unwrap();
        assert_eq!(ema, cur);
        let mut ema: ParamSet = [("a".to_string(), Tensor::vector(vec![0.0]))].into_iter().collect();
        for _ in 0..500 {
            ema_update(&mut ema, &cur, 0.99).unwrap();
        }
        let gap = 1.0 - ema.get("a").unwrap().data()[0];
        assert!((gap - 0.99f64.powi(500)).abs() < 1e-12);
        let bad: ParamSet = [("a".to_string(), Tensor::vector(vec![1.0, 2.0]))].into_iter().collect();
        assert!(ema_update(&mut ema, &bad, 0.5).is_err());
    }
}
