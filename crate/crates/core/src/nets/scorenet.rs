//! Preconditioned denoising score network whose last encoder block doubles
//! as the discriminator.
//!
//! The channel mean of the encoder latent is the discriminator logit map, so
//! discrimination adds no parameters. Vector data has a `1 x 1` map; grid
//! data is downsampled twice, giving an `h/4 x w/4` map.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{init_layer, mp_conv, mp_linear};
use super::DataShape;
use crate::diffmath::{Bound, Graph, ParamSet, Tensor, Var};
use crate::error::{Error, Result};
use crate::schedule::TimeDraw;

const FOURIER: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReturnFlag {
    Decoder,
    Encoder,
    EncoderDecoder,
}

impl ReturnFlag {
    fn wants_decoder(self) -> bool {
        matches!(self, ReturnFlag::Decoder | ReturnFlag::EncoderDecoder)
    }

    fn wants_encoder(self) -> bool {
        matches!(self, ReturnFlag::Encoder | ReturnFlag::EncoderDecoder)
    }
}

/// Tape outputs of one forward pass.
pub struct ScoreNetOutput<'g> {
    /// Shaped like the input.
    pub denoised: Option<Var<'g>>,
    /// `[n, w' * h']` pre-sigmoid logits.
    pub disc_logits: Option<Var<'g>>,
    /// `[n]`, present when the logvar head is enabled.
    pub logvar: Option<Var<'g>>,
}

/// EDM-style preconditioning coefficients in the `x / a` frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Precond {
    pub c_skip: f64,
    pub c_out: f64,
    pub c_in: f64,
    pub c_noise: f64,
}

pub fn precond(draw: &TimeDraw, sigma_data: f64) -> Precond {
    let s = draw.scaled_sigma();
    let sd2 = sigma_data * sigma_data;
    let tot = s * s + sd2;
    Precond {
        c_skip: sd2 / tot,
        c_out: s * sigma_data / tot.sqrt(),
        c_in: 1.0 / tot.sqrt(),
        c_noise: s.ln() / 4.0,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreNet {
    pub shape: DataShape,
    pub width: usize,
    pub sigma_data: f64,
    pub logvar: bool,
}

impl ScoreNet {
    /// Discriminator map extent `w' * h'`.
    pub fn disc_positions(&self) -> usize {
        match self.shape {
            DataShape::Vector(_) => 1,
            DataShape::Grid { h, w, .. } => (h / 4) * (w / 4),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let DataShape::Grid { h, w, .. } = self.shape {
            if h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0 {
                return Err(Error::config("nets.data_shape", "grid sides must be positive multiples of 4"));
            }
        }
        if self.width == 0 {
            return Err(Error::config("nets.score_width", "must be positive"));
        }
        if !(self.sigma_data > 0.0) {
            return Err(Error::config("nets.sigma_data", "must be positive"));
        }
        Ok(())
    }

    /// Deterministic initial parameters; the output layer starts with zero
    /// gain so the untrained network returns `c_skip x`.
    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<ParamSet> {
        self.validate()?;
        let w = self.width;
        let mut p = ParamSet::new();
        init_layer(&mut p, "emb", w, 2 * FOURIER, 1.0, rng);
        match self.shape {
            DataShape::Vector(d) => {
                init_layer(&mut p, "enc1", w, d, 1.0, rng);
                init_layer(&mut p, "enc2", w, w, 1.0, rng);
                init_layer(&mut p, "dec1", w, w, 1.0, rng);
                init_layer(&mut p, "dec2", d, w, 0.0, rng);
            }
            DataShape::Grid { c, .. } => {
                init_layer(&mut p, "enc0", w, c * 9, 1.0, rng);
                init_layer(&mut p, "enc1", w, w * 9, 1.0, rng);
                init_layer(&mut p, "enc2", w, w * 9, 1.0, rng);
                init_layer(&mut p, "dec2", w, 2 * w * 9, 1.0, rng);
                init_layer(&mut p, "dec1", w, 2 * w * 9, 1.0, rng);
                init_layer(&mut p, "dec0", c, w * 9, 0.0, rng);
            }
        }
        if self.logvar {
            init_layer(&mut p, "logvar", 1, 2 * FOURIER, 0.0, rng);
        }
        Ok(p)
    }

    pub fn mp_weights(&self, params: &ParamSet) -> Vec<String> {
        params.names().filter(|n| n.ends_with(".w")).cloned().collect()
    }

    /// Parameters used only to produce the discriminator map; always empty.
    pub fn discriminator_only_params(&self) -> Vec<String> {
        Vec::new()
    }

    fn fourier(&self, draws: &[TimeDraw]) -> Tensor {
        let mut d = Vec::with_capacity(draws.len() * 2 * FOURIER);
        for dr in draws {
            let cn = precond(dr, self.sigma_data).c_noise;
            for j in 0..FOURIER {
                let f = 0.25 * 2f64.powf(j as f64 * 0.5);
                let ph = std::f64::consts::TAU * f * cn;
                d.push(ph.cos() * std::f64::consts::SQRT_2);
                d.push(ph.sin() * std::f64::consts::SQRT_2);
            }
        }
        Tensor::from_parts(vec![draws.len(), 2 * FOURIER], d)
    }

    /// Evaluates the network on `x_t` (row `i` at `draws[i]`).
    pub fn forward<'g>(
        &self,
        p: &Bound<'g>,
        x: Var<'g>,
        draws: &[TimeDraw],
        flag: ReturnFlag,
    ) -> Result<ScoreNetOutput<'g>> {
        let shape = x.shape();
        if shape[0] != draws.len() || shape[1..].iter().product::<usize>() != self.shape.numel() {
            return Err(Error::Shape {
                op: "scorenet",
                left: shape,
                right: self.shape.batch(draws.len()),
            });
        }
        let g = x.graph();
        let pc: Vec<Precond> = draws.iter().map(|d| precond(d, self.sigma_data)).collect();
        let col = |f: &dyn Fn(&Precond, &TimeDraw) -> f64| {
            g.constant(Tensor::vector(pc.iter().zip(draws).map(|(p, d)| f(p, d)).collect()))
        };
        let four = g.constant(self.fourier(draws));
        let temb = mp_linear(p, "emb", four).silu();
        let xin = x.scale_rows(col(&|p, d| p.c_in / d.a));

        let (latent, skips) = match self.shape {
            DataShape::Vector(_) => {
                let h = (mp_linear(p, "enc1", xin) + temb).silu();
                (mp_linear(p, "enc2", h), vec![])
            }
            DataShape::Grid { .. } => {
                let e0 = mp_conv(p, "enc0", xin, 3, 1).add_sample_channel(temb).silu();
                let e1 = mp_conv(p, "enc1", e0, 3, 2).silu();
                (mp_conv(p, "enc2", e1, 3, 2), vec![e0, e1])
            }
        };

        let disc_logits = if flag.wants_encoder() {
            let n = draws.len();
            let l = match self.shape {
                DataShape::Vector(_) => latent.reshape(&[n, self.width, 1]).mean_channels(),
                DataShape::Grid { .. } => latent.mean_channels(),
            };
            Some(l.ensure_finite()?)
        } else {
            None
        };

        let denoised = if flag.wants_decoder() {
            let f = match self.shape {
                DataShape::Vector(_) => {
                    let h = mp_linear(p, "dec1", latent.silu()).silu();
                    mp_linear(p, "dec2", h)
                }
                DataShape::Grid { .. } => {
                    let u = latent.silu().upsample2().concat_channels(skips[1]);
                    let u = mp_conv(p, "dec2", u, 3, 1).silu().upsample2().concat_channels(skips[0]);
                    let u = mp_conv(p, "dec1", u, 3, 1).silu();
                    mp_conv(p, "dec0", u, 3, 1)
                }
            };
            let f = f.reshape(&shape);
            let out = x.scale_rows(col(&|p, d| p.c_skip / d.a)) + f.scale_rows(col(&|p, _| p.c_out));
            Some(out.ensure_finite()?)
        } else {
            None
        };

        let logvar = if self.logvar {
            let n = draws.len();
            Some(mp_linear(p, "logvar", four).reshape(&[n]).ensure_finite()?)
        } else {
            None
        };

        Ok(ScoreNetOutput {
            denoised,
            disc_logits,
            logvar,
        })
    }

    /// Untaped denoised estimate.
    pub fn denoise(&self, params: &ParamSet, x: &Tensor, draws: &[TimeDraw]) -> Result<Tensor> {
        let g = Graph::new();
        let b = params.bind(&g, false);
        let out = self.forward(&b, g.constant(x.clone()), draws, ReturnFlag::Decoder)?;
        Ok(out.denoised.expect("decoder requested").value())
    }

    /// Untaped discriminator logits `[n, w' * h']`.
    pub fn disc_logits(&self, params: &ParamSet, x: &Tensor, draws: &[TimeDraw]) -> Result<Tensor> {
        let g = Graph::new();
        let b = params.bind(&g, false);
        let out = self.forward(&b, g.constant(x.clone()), draws, ReturnFlag::Encoder)?;
        Ok(out.disc_logits.expect("encoder requested").value())
    }
}
