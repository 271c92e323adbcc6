//! The training loop: fake-score and generator updates, the three-stage
//! schedule, EMA, and warm starts from a SiD generator.

pub mod log;
pub mod run;

use std::cell::Cell;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::analytic::{corrupt_teacher, fisher_divergence_exact, gmm_sample, MixtureModel};
use crate::checkpoint::{Checkpoint, Header, Role};
use crate::config::{FakeAdvStart, Mode, RunConfig, TeacherMode};
use crate::diffmath::{self, Bound, Graph, ParamSet, Tensor};
use crate::error::{Error, Result};
use crate::eval::energy_distance;
use crate::losses::{
    generator_prefactors, sida_fakescore_loss, sida_fakescore_loss_logvar, sida_generator_loss, FakeScoreLoss,
    GeneratorLoss, LossWeights,
};
use crate::nets::{ema_update, forced_weight_normalize, DataShape, ForcedNorm, Generator, ReturnFlag, ScoreNet};
use crate::optim::{Adam, AdamConfig};
use crate::schedule::{
    diffuse, diffuse_tensor, sample_fakescore_times, sample_generator_times, NoiseSchedule, TimeDraw,
};
use crate::teacher::{pretrain_teacher, teacher_denoise, teacher_oracle, LearnedTeacher, Teacher};

pub use log::{MetricRow, COLUMNS};
pub use run::{run_training, run_training_in, RunSummary};

/// Everything derived from a validated config that stays fixed during a run.
#[derive(Clone, Debug)]
pub struct Setup {
    pub cfg: RunConfig,
    /// Real data distribution.
    pub data: MixtureModel,
    pub teacher: Teacher,
    pub schedule: NoiseSchedule,
    pub shape: DataShape,
    pub gen: Generator,
    pub net: ScoreNet,
    pub compat_hash: String,
    eval_real: Tensor,
    eval_latent: Tensor,
}

impl Setup {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let data = cfg.data.model()?;
        let shape = cfg.data.shape(data.dim())?;
        let schedule = NoiseSchedule::new(cfg.schedule.clone())?;
        let sigma_init = schedule.sigma_init();
        let gen = Generator {
            kind: cfg.nets.generator,
            shape,
            width: cfg.nets.gen_width,
            skip: cfg
                .nets
                .gen_skip
                .unwrap_or_else(|| teacher_skip(cfg.nets.sigma_data, sigma_init)),
            sigma_init,
        };
        let net = ScoreNet {
            shape,
            width: cfg.nets.score_width,
            sigma_data: cfg.nets.sigma_data,
            logvar: cfg.nets.logvar_enabled(),
        };
        net.validate()?;
        let compat_hash = cfg.compat_hash()?;
        let teacher = build_teacher(cfg, &data, &schedule, &net, &compat_hash)?;
        let n = cfg.eval.n_samples.max(cfg.eval.n_samples_during);
        let mut erng = ChaCha8Rng::seed_from_u64(cfg.eval.seed);
        let eval_real = gmm_sample(&data, n, &mut erng);
        let eval_latent = gen.sample_latent(n, &mut erng);
        Ok(Self {
            cfg: cfg.clone(),
            data,
            teacher,
            schedule,
            shape,
            gen,
            net,
            compat_hash,
            eval_real,
            eval_latent,
        })
    }

    pub fn batch(&self) -> usize {
        self.cfg.train.batch
    }

    fn weights(&self, stage_b: u8) -> LossWeights {
        let mut w = self.cfg.loss.weights(self.shape.numel());
        w.stage_b = stage_b;
        w
    }

    pub fn stage_b(&self, images_seen: u64) -> u8 {
        u8::from(self.cfg.mode.adversarial() && images_seen > self.cfg.train.n2)
    }

    fn fake_adversarial(&self, images_seen: u64) -> bool {
        self.cfg.mode.adversarial()
            && match self.cfg.loss.fake_adv_start {
                FakeAdvStart::Always => true,
                FakeAdvStart::Stage3 => images_seen > self.cfg.train.n2,
            }
    }

    /// Generated samples from fixed evaluation latents, flattened to rows.
    pub fn generate_eval(&self, theta: &ParamSet, n: usize) -> Result<Tensor> {
        let z = first_rows(&self.eval_latent, n)?.reshape(&self.shape.batch(n))?;
        let x = self.gen.generate(theta, &z)?;
        x.reshape(&[n, self.shape.numel()])
    }

    pub fn eval_real(&self, n: usize) -> Result<Tensor> {
        first_rows(&self.eval_real, n)
    }

    /// Energy distance between `n` generated and `n` real evaluation samples.
    pub fn energy(&self, theta: &ParamSet, n: usize) -> Result<f64> {
        energy_distance(&self.generate_eval(theta, n)?, &self.eval_real(n)?)
    }

    /// Exact Fisher divergence at the configured noise level; linear
    /// generators only.
    pub fn fisher(&self, theta: &ParamSet) -> Result<Option<f64>> {
        if self.gen.kind != crate::nets::GeneratorKind::Linear {
            return Ok(None);
        }
        let lin = self.gen.as_linear(theta)?;
        let draw = self.schedule.draw_at_noise(self.cfg.eval.fisher_sigma);
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.eval.seed ^ 0xF15E);
        let est = fisher_divergence_exact(&self.data, &lin, &draw, self.cfg.eval.fisher_mc, &mut rng)?;
        Ok(Some(est.value))
    }

    /// Mixture the teacher was built from, for analytic teachers.
    pub fn teacher_model(&self) -> Option<&MixtureModel> {
        match &self.teacher {
            Teacher::Analytic(m) => Some(m),
            Teacher::Learned(_) => None,
        }
    }
}

/// Skip coefficient of a preconditioned denoiser at `sigma_init`: the
/// generator starts as the teacher's skip path applied to pure noise.
pub fn teacher_skip(sigma_data: f64, sigma_init: f64) -> f64 {
    sigma_data * sigma_data / (sigma_init * sigma_init + sigma_data * sigma_data)
}

fn first_rows(t: &Tensor, n: usize) -> Result<Tensor> {
    let d = t.row_len();
    if n > t.rows() {
        return Err(Error::Invalid(format!("requested {n} rows of {}", t.rows())));
    }
    Tensor::new(vec![n, d], t.data()[..n * d].to_vec())
}

fn build_teacher(
    cfg: &RunConfig,
    data: &MixtureModel,
    schedule: &NoiseSchedule,
    net: &ScoreNet,
    compat_hash: &str,
) -> Result<Teacher> {
    let tc = &cfg.teacher;
    match tc.mode {
        TeacherMode::Exact => Ok(Teacher::Analytic(data.clone())),
        TeacherMode::Corrupted => {
            let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
            Ok(Teacher::Analytic(corrupt_teacher(data, tc.strength, &mut rng)?))
        }
        TeacherMode::Learned => {
            if let Some(path) = &tc.checkpoint {
                let ck = Checkpoint::load_expecting(path, compat_hash, &[Role::Teacher])?;
                net.init(&mut ChaCha8Rng::seed_from_u64(0))?.check_compatible(&ck.params)?;
                return Ok(Teacher::Learned(LearnedTeacher {
                    net: net.clone(),
                    params: ck.params,
                    budget: tc.budget,
                    final_loss: f64::NAN,
                }));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
            Ok(Teacher::Learned(pretrain_teacher(
                net, data, schedule, tc.budget, tc.batch, tc.lr, &mut rng,
            )?))
        }
    }
}

/// Mutable training state.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub theta: ParamSet,
    pub theta_ema: ParamSet,
    pub psi: ParamSet,
    pub opt_gen: Adam,
    pub opt_fake: Adam,
    pub images_seen: u64,
    pub stage_b: u8,
    pub gen_steps: u64,
    pub fake_steps: u64,
    /// Zero rows skipped by forced normalisation.
    pub norm_skips: usize,
    pub rng: ChaCha8Rng,
}

/// Losses of one fake-score step, as batch sums.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FakeStep {
    pub denoise: f64,
    /// Mean discriminator loss, when the adversarial term was active.
    pub disc: Option<f64>,
}

/// Losses of one generator step, as batch sums.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GenStep {
    pub sid: f64,
    pub adv: f64,
}

/// Fits `psi` to the teacher's denoiser on draws from the teacher's own
/// distribution; stands in for copying the teacher's weights.
pub fn prefit_fakescore(setup: &Setup, psi: &mut ParamSet, rng: &mut ChaCha8Rng) -> Result<()> {
    let tc = &setup.cfg.train;
    if tc.prefit_steps == 0 {
        return Ok(());
    }
    let source = match &setup.teacher {
        Teacher::Analytic(m) => m.clone(),
        Teacher::Learned(_) => setup.data.clone(),
    };
    let mut opt = Adam::new(AdamConfig::default(), psi)?;
    let b = setup.batch();
    let names = setup.net.mp_weights(psi);
    for _ in 0..tc.prefit_steps {
        forced_weight_normalize(psi, &names, setup.cfg.nets.forced_norm);
        let x0 = gmm_sample(&source, b, rng).reshape(&setup.shape.batch(b))?;
        let draws = sample_fakescore_times(rng, &setup.schedule, b);
        let eps = Tensor::randn(x0.shape(), rng);
        let xt = diffuse_tensor(&x0, &draws, &eps)?;
        let target = teacher_denoise(&setup.teacher, &xt, &draws)?;
        let (_, grads) = diffmath::grad(psi, |g, p| {
            let out = setup.net.forward(p, g.constant(xt.clone()), &draws, ReturnFlag::Decoder)?;
            let f = out.denoised.expect("decoder");
            let r = f - g.constant(target.clone());
            let sd2 = setup.net.sigma_data.powi(2);
            let lam = draws
                .iter()
                .map(|d| {
                    let s2 = d.scaled_sigma().powi(2);
                    (s2 + sd2) / (s2 * sd2)
                })
                .collect();
            let gamma = g.constant(Tensor::vector(lam));
            Ok(((r * r).sum_rows() * gamma).sum().scale(1.0 / b as f64))
        })?;
        opt.step(psi, &grads, tc.prefit_lr)?;
    }
    forced_weight_normalize(psi, &names, setup.cfg.nets.forced_norm);
    Ok(())
}

/// Mean `|f_psi - f_phi|^2` on `n` diffused draws from the exact data
/// distribution.
pub fn fakescore_teacher_gap(setup: &Setup, psi: &ParamSet, n: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0 = gmm_sample(&setup.data, n, &mut rng).reshape(&setup.shape.batch(n))?;
    let draws = sample_fakescore_times(&mut rng, &setup.schedule, n);
    let eps = Tensor::randn(x0.shape(), &mut rng);
    let xt = diffuse_tensor(&x0, &draws, &eps)?;
    let a = setup.net.denoise(psi, &xt, &draws)?;
    let b = teacher_denoise(&setup.teacher, &xt, &draws)?;
    let d = setup.shape.numel();
    let mut s = 0.0;
    for i in 0..draws.len() {
        s += (0..d).map(|j| (a.data()[i * d + j] - b.data()[i * d + j]).powi(2)).sum::<f64>();
    }
    Ok(s / n as f64)
}

/// Fresh state: generator and fake-score initialisation, then the fake-score
/// pre-fit (or a copy of the learned teacher).
pub fn init_state(setup: &Setup) -> Result<TrainState> {
    let cfg = &setup.cfg;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut theta = setup.gen.init(&mut rng)?;
    let mut psi = match &setup.teacher {
        Teacher::Learned(t) => crate::teacher::copy_into_scorenet(t, &setup.net)?,
        Teacher::Analytic(_) => {
            let mut psi = setup.net.init(&mut rng)?;
            prefit_fakescore(setup, &mut psi, &mut rng)?;
            psi
        }
    };
    let mut norm_skips = forced_weight_normalize(&mut theta, &setup.gen.mp_weights(), cfg.nets.forced_norm);
    let psi_names = setup.net.mp_weights(&psi);
    norm_skips += forced_weight_normalize(&mut psi, &psi_names, cfg.nets.forced_norm);
    Ok(TrainState {
        theta_ema: theta.clone(),
        opt_gen: Adam::new(cfg.train.adam, &theta)?,
        opt_fake: Adam::new(cfg.train.adam, &psi)?,
        theta,
        psi,
        images_seen: 0,
        stage_b: 0,
        gen_steps: 0,
        fake_steps: 0,
        norm_skips,
        rng,
    })
}

/// Fresh state with the generator (and its EMA) loaded from a SiD
/// generator checkpoint.
pub fn init_sid2a(setup: &Setup, sid_checkpoint: &Path) -> Result<TrainState> {
    let ck = Checkpoint::load_expecting(
        sid_checkpoint,
        &setup.compat_hash,
        &[Role::GeneratorEma, Role::Generator],
    )?;
    let mut state = init_state(setup)?;
    state.theta.check_compatible(&ck.params)?;
    state.theta = ck.params.clone();
    state.theta_ema = ck.params;
    state.opt_gen = Adam::new(setup.cfg.train.adam, &state.theta)?;
    Ok(state)
}

fn pre_hook(params: &mut ParamSet, names: &[String], mode: ForcedNorm) -> usize {
    forced_weight_normalize(params, names, mode)
}

/// Draws of one fake-score step.
#[derive(Clone, Debug)]
pub struct FakeBatch {
    /// Detached generator output.
    pub x_g: Tensor,
    pub draws: Vec<TimeDraw>,
    pub x_t: Tensor,
    /// Diffused real data with the same draws, for the discriminator.
    pub y_t: Option<Tensor>,
}

pub fn sample_fake_batch(setup: &Setup, state: &mut TrainState) -> Result<FakeBatch> {
    let b = setup.batch();
    let adv = setup.fake_adversarial(state.images_seen);
    let rng = &mut state.rng;
    let z = setup.gen.sample_latent(b, rng);
    let x_g = setup.gen.generate(&state.theta, &z)?;
    let draws = sample_fakescore_times(rng, &setup.schedule, b);
    let eps = Tensor::randn(x_g.shape(), rng);
    let x_t = diffuse_tensor(&x_g, &draws, &eps)?;
    let y_t = if adv {
        let y0 = gmm_sample(&setup.data, b, rng).reshape(&setup.shape.batch(b))?;
        let eps2 = Tensor::randn(y0.shape(), rng);
        Some(diffuse_tensor(&y0, &draws, &eps2)?)
    } else {
        None
    };
    Ok(FakeBatch { x_g, draws, x_t, y_t })
}

/// Fake-score objective on a fixed batch; adversarial when the batch
/// carries real samples.
pub fn fake_score_objective<'g>(
    setup: &Setup,
    g: &'g Graph,
    p: &Bound<'g>,
    batch: &FakeBatch,
    stage_b: u8,
) -> Result<FakeScoreLoss<'g>> {
    let net = &setup.net;
    let w = setup.weights(stage_b);
    let adv = batch.y_t.is_some();
    let flag = if adv { ReturnFlag::EncoderDecoder } else { ReturnFlag::Decoder };
    let out = net.forward(p, g.constant(batch.x_t.clone()), &batch.draws, flag)?;
    let real = match &batch.y_t {
        Some(y) => net.forward(p, g.constant(y.clone()), &batch.draws, ReturnFlag::Encoder)?.disc_logits,
        None => None,
    };
    let fake = if adv { out.disc_logits } else { None };
    let f_psi = out.denoised.expect("decoder");
    let xg = g.constant(batch.x_g.clone());
    match out.logvar {
        Some(u) => sida_fakescore_loss_logvar(f_psi, xg, real, fake, u, setup.cfg.nets.logvar_form, &w, &batch.draws),
        None => sida_fakescore_loss(f_psi, xg, real, fake, &w, &batch.draws),
    }
}

/// One Adam step on `psi` against the current (detached) generator.
pub fn train_step_fake(setup: &Setup, state: &mut TrainState) -> Result<FakeStep> {
    let names = setup.net.mp_weights(&state.psi);
    let mode = setup.cfg.nets.forced_norm;
    state.norm_skips += pre_hook(&mut state.psi, &names, mode);
    let batch = sample_fake_batch(setup, state)?;

    let record = Cell::new((0.0, 0.0));
    let stage_b = state.stage_b;
    let (_, grads) = diffmath::grad(&state.psi, |g, p| {
        let loss = fake_score_objective(setup, g, p, &batch, stage_b)?;
        record.set((loss.denoise, loss.disc));
        Ok(loss.total)
    })?;
    state.opt_fake.step(&mut state.psi, &grads, setup.cfg.train.lr_fake)?;
    state.norm_skips += pre_hook(&mut state.psi, &names, mode);
    state.fake_steps += 1;
    let (denoise, disc) = record.get();
    Ok(FakeStep {
        denoise,
        disc: batch.y_t.is_some().then_some(disc),
    })
}

/// Draws of one generator step.
#[derive(Clone, Debug)]
pub struct GenBatch {
    pub z: Tensor,
    pub draws: Vec<TimeDraw>,
    pub eps: Tensor,
}

pub fn sample_gen_batch(setup: &Setup, state: &mut TrainState) -> GenBatch {
    let b = setup.batch();
    let rng = &mut state.rng;
    let z = setup.gen.sample_latent(b, rng);
    let draws = sample_generator_times(rng, &setup.schedule, b);
    let eps = Tensor::randn(z.shape(), rng);
    GenBatch { z, draws, eps }
}

/// Generator objective on a fixed batch. The gradient reaches `theta`
/// through `x_g` and `x_t`; `psi` enters as constants.
pub fn generator_objective<'g>(
    setup: &Setup,
    g: &'g Graph,
    p: &Bound<'g>,
    psi: &ParamSet,
    batch: &GenBatch,
    stage_b: u8,
) -> Result<GeneratorLoss<'g>> {
    let w = setup.weights(stage_b);
    let x_g = setup.gen.forward(p, g.constant(batch.z.clone()))?;
    let x_t = diffuse(x_g, &batch.draws, &batch.eps)?;
    let f_phi = teacher_oracle(&setup.teacher, x_t, &batch.draws)?;
    let frozen = psi.bind(g, false);
    let flag = if stage_b == 1 { ReturnFlag::EncoderDecoder } else { ReturnFlag::Decoder };
    let out = setup.net.forward(&frozen, x_t, &batch.draws, flag)?;
    let pre = generator_prefactors(&f_phi.value(), &x_g.value(), &batch.draws, setup.schedule.omega_mode())?;
    let f_psi = out.denoised.expect("decoder");
    sida_generator_loss(f_phi, f_psi, x_g, out.disc_logits, &w, &pre)
}

/// One Adam step on `theta` with the SiD or SiDA generator loss; refuses
/// before `n1`.
pub fn train_step_generator(setup: &Setup, state: &mut TrainState) -> Result<GenStep> {
    if state.images_seen < setup.cfg.train.n1 {
        return Err(Error::Stage(format!(
            "generator step requested at images_seen={} < n1={}",
            state.images_seen, setup.cfg.train.n1
        )));
    }
    state.stage_b = setup.stage_b(state.images_seen);
    let names = setup.gen.mp_weights();
    let mode = setup.cfg.nets.forced_norm;
    state.norm_skips += pre_hook(&mut state.theta, &names, mode);
    let batch = sample_gen_batch(setup, state);

    let record = Cell::new((0.0, 0.0));
    let psi = &state.psi;
    let stage_b = state.stage_b;
    let (_, grads) = diffmath::grad(&state.theta, |g, p| {
        let loss = generator_objective(setup, g, p, psi, &batch, stage_b)?;
        record.set((loss.sid, loss.adv));
        Ok(loss.total)
    })?;
    state.opt_gen.step(&mut state.theta, &grads, setup.cfg.train.lr_gen)?;
    state.norm_skips += pre_hook(&mut state.theta, &names, mode);
    ema_update(&mut state.theta_ema, &state.theta, setup.cfg.train.ema_decay)?;
    state.gen_steps += 1;
    let (sid, adv) = record.get();
    Ok(GenStep { sid, adv })
}

/// Fake-score steps, then a generator step once `n1` is reached; advances
/// `images_seen` by one batch. Returns the log row (without evaluation
/// columns).
pub fn train_iteration(setup: &Setup, state: &mut TrainState) -> Result<MetricRow> {
    let start = state.images_seen;
    state.stage_b = setup.stage_b(start);
    let b = setup.batch() as f64;
    let mut denoise = 0.0;
    let mut disc = None;
    let k = setup.cfg.train.fake_steps;
    for _ in 0..k {
        let f = train_step_fake(setup, state)?;
        denoise += f.denoise / (b * k as f64);
        if let Some(d) = f.disc {
            *disc.get_or_insert(0.0) += d / k as f64;
        }
    }
    let gen = if start >= setup.cfg.train.n1 {
        Some(train_step_generator(setup, state)?)
    } else {
        None
    };
    state.images_seen += setup.batch() as u64;
    Ok(MetricRow {
        images_seen: start,
        stage_b: state.stage_b,
        loss_sid: gen.map(|g| g.sid / b),
        loss_adv_gen: gen.map(|g| g.adv / b),
        loss_denoise: Some(denoise),
        loss_disc: disc,
        ..Default::default()
    })
}

/// Checkpoint of one parameter set at the current counter.
pub fn checkpoint(setup: &Setup, state: &TrainState, params: &ParamSet, role: Role) -> Checkpoint {
    Checkpoint {
        header: Header {
            compat_hash: setup.compat_hash.clone(),
            images_seen: state.images_seen,
            stage_b: state.stage_b,
            role,
        },
        params: params.clone(),
    }
}

/// Runs `mode` checks that need the setup: `sid2a` needs a checkpoint.
pub fn initial_state(setup: &Setup) -> Result<TrainState> {
    match setup.cfg.mode {
        Mode::Sid2a => {
            let path = setup
                .cfg
                .resolve_sid_checkpoint()
                .ok_or_else(|| Error::config("train.sid_checkpoint", "mode sid2a needs a SiD generator checkpoint"))?;
            init_sid2a(setup, &path)
        }
        _ => init_state(setup),
    }
}
