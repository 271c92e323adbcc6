//! Teachers `f_phi`: the exact mixture posterior mean, a corrupted mixture,
//! or a denoising network trained on data samples.

use rand::Rng;

use crate::analytic::{gmm_denoiser, gmm_denoiser_var, gmm_sample, MixtureModel};
use crate::diffmath::{self, ParamSet, Tensor, Var};
use crate::error::{Error, Result};
use crate::losses::fake_score_denoise_loss;
use crate::nets::{ReturnFlag, ScoreNet};
use crate::optim::{Adam, AdamConfig};
use crate::schedule::{diffuse, diffuse_tensor, sample_fakescore_times, NoiseSchedule};

/// A score network trained by denoising score matching.
#[derive(Clone, Debug, PartialEq)]
pub struct LearnedTeacher {
    pub net: ScoreNet,
    pub params: ParamSet,
    /// Samples consumed by pretraining.
    pub budget: usize,
    /// Final training loss per sample, averaged over the last tenth of steps.
    pub final_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Teacher {
    /// Exact or corrupted mixture posterior mean.
    Analytic(MixtureModel),
    Learned(LearnedTeacher),
}

/// `f_phi(x_t, t)`. Gradient flows through `x_t` only; the teacher has no
/// trainable parameters on the tape.
pub fn teacher_oracle<'g>(teacher: &Teacher, x_t: Var<'g>, draws: &[crate::schedule::TimeDraw]) -> Result<Var<'g>> {
    match teacher {
        Teacher::Analytic(m) => gmm_denoiser_var(m, x_t, draws),
        Teacher::Learned(t) => {
            let frozen = t.params.bind(x_t.graph(), false);
            let out = t.net.forward(&frozen, x_t, draws, ReturnFlag::Decoder)?;
            Ok(out.denoised.expect("decoder requested"))
        }
    }
}

/// Untaped teacher evaluation.
pub fn teacher_denoise(teacher: &Teacher, x_t: &Tensor, draws: &[crate::schedule::TimeDraw]) -> Result<Tensor> {
    match teacher {
        Teacher::Analytic(m) => gmm_denoiser(m, x_t, draws),
        Teacher::Learned(t) => t.net.denoise(&t.params, x_t, draws),
    }
}

/// Trains a denoiser on `budget` data samples in batches of `batch`.
pub fn pretrain_teacher<R: Rng + ?Sized>(
    net: &ScoreNet,
    data: &MixtureModel,
    schedule: &NoiseSchedule,
    budget: usize,
    batch: usize,
    lr: f64,
    rng: &mut R,
) -> Result<LearnedTeacher> {
    if budget < 1000 {
        return Err(Error::config("teacher.budget", "at least 1000 samples required"));
    }
    if batch == 0 || !(lr > 0.0) {
        return Err(Error::config("teacher.batch", "batch and learning rate must be positive"));
    }
    if net.shape.numel() != data.dim() {
        return Err(Error::config("teacher", "network and data dimensions differ"));
    }
    let mut params = net.init(rng)?;
    let mut opt = Adam::new(AdamConfig::default(), &params)?;
    let steps = budget.div_ceil(batch);
    let tail = (steps / 10).max(1);
    let mut tail_loss = 0.0;
    for step in 0..steps {
        let x0 = gmm_sample(data, batch, rng).reshape(&net.shape.batch(batch))?;
        let draws = sample_fakescore_times(rng, schedule, batch);
        let eps = Tensor::randn(x0.shape(), rng);
        let xt = diffuse_tensor(&x0, &draws, &eps)?;
        let (loss, grads) = diffmath::grad(&params, |g, p| {
            let out = net.forward(p, g.constant(xt.clone()), &draws, ReturnFlag::Decoder)?;
            Ok(fake_score_denoise_loss(out.denoised.expect("decoder"), g.constant(x0.clone()), &draws)?
                .scale(1.0 / batch as f64))
        })?;
        opt.step(&mut params, &grads, lr)?;
        if step >= steps - tail {
            tail_loss += loss / tail as f64;
        }
    }
    Ok(LearnedTeacher {
        net: net.clone(),
        params,
        budget,
        final_loss: tail_loss,
    })
}

/// Mean `|f_phi - f_phi*|^2` over diffused data draws at fake-score times:
/// the teacher bias.
pub fn denoising_gap<R: Rng + ?Sized>(
    teacher: &Teacher,
    exact: &MixtureModel,
    schedule: &NoiseSchedule,
    shape: &[usize],
    n: usize,
    rng: &mut R,
) -> Result<f64> {
    let mut full = shape.to_vec();
    full[0] = n;
    let x0 = gmm_sample(exact, n, rng).reshape(&full)?;
    let draws = sample_fakescore_times(rng, schedule, n);
    let eps = Tensor::randn(x0.shape(), rng);
    let xt = diffuse_tensor(&x0, &draws, &eps)?;
    let a = teacher_denoise(teacher, &xt, &draws)?;
    let b = gmm_denoiser(exact, &xt, &draws)?;
    Ok(a.data().iter().zip(b.data()).map(|(u, v)| (u - v).powi(2)).sum::<f64>() / n as f64)
}

/// Differentiable diffusion followed by the teacher, used by tests that
/// check gradients reach only `x_g`.
pub fn teacher_on_diffused<'g>(
    teacher: &Teacher,
    x_g: Var<'g>,
    draws: &[crate::schedule::TimeDraw],
    eps: &Tensor,
) -> Result<Var<'g>> {
    let xt = diffuse(x_g, draws, eps)?;
    teacher_oracle(teacher, xt, draws)
}

/// Copies teacher parameters for initialising a fake-score network of the
/// same architecture.
pub fn copy_into_scorenet(teacher: &LearnedTeacher, net: &ScoreNet) -> Result<ParamSet> {
    if &teacher.net != net {
        return Err(Error::config("teacher", "teacher and fake-score architectures differ"));
    }
    Ok(teacher.params.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmath::Graph;
    use crate::nets::DataShape;
    use crate::schedule::{make_schedule, ScheduleConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn analytic_oracle_delegates_bit_exactly() {
        let m = MixtureModel::preset("ring-8").unwrap();
        let s = make_schedule(&ScheduleConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::randn(&[5, 2], &mut rng);
        let draws = sample_fakescore_times(&mut rng, &s, 5);
        let t = Teacher::Analytic(m.clone());
        let g = Graph::new();
        let out = teacher_oracle(&t, g.input(x.clone()), &draws).unwrap().value();
        assert_eq!(out, gmm_denoiser(&m, &x, &draws).unwrap());
        assert_eq!(teacher_denoise(&t, &x, &draws).unwrap(), out);
    }

    #[test]
    fn learned_teacher_is_frozen_and_deterministic() {
        let m = MixtureModel::gaussian(vec![0.3, -0.2], vec![0.25, 0.25]).unwrap();
        let s = make_schedule(&ScheduleConfig::default()).unwrap();
        let net = ScoreNet { shape: DataShape::Vector(2), width: 16, sigma_data: 0.5, logvar: false };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = pretrain_teacher(&net, &m, &s, 1000, 50, 1e-2, &mut rng).unwrap();
        let x = Tensor::randn(&[4, 2], &mut rng);
        let draws = sample_fakescore_times(&mut rng, &s, 4);
        let teacher = Teacher::Learned(t);
        let a = teacher_denoise(&teacher, &x, &draws).unwrap();
        let b = teacher_denoise(&teacher, &x, &draws).unwrap();
        assert_eq!(a, b);
        let g = Graph::new();
        let xv = g.input(x.clone());
        let out = teacher_oracle(&teacher, xv, &draws).unwrap();
        let grads = g.backward(out.sum()).unwrap();
        assert!(grads.params().is_empty());
        assert!(grads.wrt(xv).norm() > 0.0);
    }

    #[test]
    fn small_budget_rejected() {
        let m = MixtureModel::preset("ring-8").unwrap();
        let s = make_schedule(&ScheduleConfig::default()).unwrap();
        let net = ScoreNet { shape: DataShape::Vector(2), width: 8, sigma_data: 0.5, logvar: false };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(pretrain_teacher(&net, &m, &s, 999, 10, 1e-3, &mut rng).is_err());
    }
}
