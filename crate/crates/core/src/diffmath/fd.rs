//! Central finite differences, the independent check on reverse-mode
//! gradients. Only forward evaluations are used.

use super::ParamSet;
use crate::error::Result;

/// Central-difference gradient of `f` at `params` with step `h`.
pub fn central_gradient<F>(params: &ParamSet, h: f64, f: F) -> Result<ParamSet>
where
    F: Fn(&ParamSet) -> Result<f64>,
{
    let mut work = params.clone();
    let mut out = params.zeros_like();
    let names: Vec<String> = params.names().cloned().collect();
    for name in &names {
        let n = params.get(name).map_or(0, |t| t.len());
        for i in 0..n {
            let orig = params.get(name).expect("present").data()[i];
            work.get_mut(name).expect("present").data_mut()[i] = orig + h;
            let up = f(&work)?;
            work.get_mut(name).expect("present").data_mut()[i] = orig - h;
            let down = f(&work)?;
            work.get_mut(name).expect("present").data_mut()[i] = orig;
            out.get_mut(name).expect("present").data_mut()[i] = (up - down) / (2.0 * h);
        }
    }
    Ok(out)
}

/// Five-point stencil gradient, fourth order in `h`. Tolerates a larger step
/// than [`central_gradient`], which matters when the loss is large compared
/// with some of its partial derivatives.
pub fn five_point_gradient<F>(params: &ParamSet, h: f64, f: F) -> Result<ParamSet>
where
    F: Fn(&ParamSet) -> Result<f64>,
{
    let mut work = params.clone();
    let mut out = params.zeros_like();
    let names: Vec<String> = params.names().cloned().collect();
    for name in &names {
        let n = params.get(name).map_or(0, |t| t.len());
        for i in 0..n {
            let orig = params.get(name).expect("present").data()[i];
            let mut at = |dx: f64| -> Result<f64> {
                work.get_mut(name).expect("present").data_mut()[i] = orig + dx;
                f(&work)
            };
            let d = -at(2.0 * h)? + 8.0 * at(h)? - 8.0 * at(-h)? + at(-2.0 * h)?;
            work.get_mut(name).expect("present").data_mut()[i] = orig;
            out.get_mut(name).expect("present").data_mut()[i] = d / (12.0 * h);
        }
    }
    Ok(out)
}

/// Central-difference gradient of a function of a flat vector.
pub fn central_gradient_vec<F>(x: &[f64], h: f64, f: F) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut work = x.to_vec();
    (0..x.len())
        .map(|i| {
            work[i] = x[i] + h;
            let up = f(&work);
            work[i] = x[i] - h;
            let down = f(&work);
            work[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|, floor)` maximised over all entries.
pub fn max_relative_error(a: &ParamSet, b: &ParamSet, floor: f64) -> f64 {
    let mut worst = 0.0_f64;
    for ((_, ta), (_, tb)) in a.iter().zip(b.iter()) {
        worst = worst.max(relative_error(ta.data(), tb.data(), floor));
    }
    worst
}

pub fn relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}
