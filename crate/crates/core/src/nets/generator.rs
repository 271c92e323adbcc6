//! One-step generators `x_g = G_theta(sigma_init z)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{init_layer, mp_conv, mp_linear};
use super::DataShape;
use crate::analytic::LinearGenerator;
use crate::diffmath::{Bound, Graph, ParamSet, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeneratorKind {
    /// `x = W u + b`
    Linear,
    /// Perceptron with three hidden layers (vector data) or three
    /// same-resolution convolutions (grid data).
    Mlp,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    pub kind: GeneratorKind,
    pub shape: DataShape,
    pub width: usize,
    /// Coefficient of the residual path `skip * u`.
    pub skip: f64,
    pub sigma_init: f64,
}

impl Generator {
    pub fn dim(&self) -> usize {
        self.shape.numel()
    }

    /// Deterministic initial parameters. The linear generator starts at
    /// `x = z`; the perceptron's output layer starts with zero gain, so the
    /// initial map is `skip * u`.
    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<ParamSet> {
        let d = self.dim();
        let mut p = ParamSet::new();
        match (self.kind, self.shape) {
            (GeneratorKind::Linear, DataShape::Vector(_)) => {
                let mut w = Tensor::zeros(&[d, d]);
                for i in 0..d {
                    w.data_mut()[i * d + i] = 1.0 / self.sigma_init;
                }
                p.insert("lin.w", w);
                p.insert("lin.b", Tensor::zeros(&[d]));
            }
            (GeneratorKind::Linear, DataShape::Grid { .. }) => {
                return Err(Error::config("nets.generator", "linear generator needs vector data"));
            }
            (GeneratorKind::Mlp, DataShape::Vector(_)) => {
                let w = self.width;
                init_layer(&mut p, "g1", w, d, 1.0, rng);
                init_layer(&mut p, "g2", w, w, 1.0, rng);
                init_layer(&mut p, "g3", w, w, 1.0, rng);
                init_layer(&mut p, "gout", d, w, 0.0, rng);
            }
            (GeneratorKind::Mlp, DataShape::Grid { c, .. }) => {
                let w = self.width;
                init_layer(&mut p, "g1", w, c * 9, 1.0, rng);
                init_layer(&mut p, "g2", w, w * 9, 1.0, rng);
                init_layer(&mut p, "g3", w, w * 9, 1.0, rng);
                init_layer(&mut p, "gout", c, w * 9, 0.0, rng);
            }
        }
        Ok(p)
    }

    /// Names of the raw magnitude-preserving weights.
    pub fn mp_weights(&self) -> Vec<String> {
        match self.kind {
            GeneratorKind::Linear => vec![],
            GeneratorKind::Mlp => ["g1", "g2", "g3", "gout"].iter().map(|n| format!("{n}.w")).collect(),
        }
    }

    /// `G_theta(sigma_init z)` on the tape; `z` is `[n, d]` (vector) or
    /// `[n, c, h, w]` (grid).
    pub fn forward<'g>(&self, p: &Bound<'g>, z: Var<'g>) -> Result<Var<'g>> {
        self.forward_scaled(p, z, self.sigma_init)
    }

    pub fn forward_scaled<'g>(&self, p: &Bound<'g>, z: Var<'g>, sigma_init: f64) -> Result<Var<'g>> {
        let u = z.scale(sigma_init);
        let out = match (self.kind, self.shape) {
            (GeneratorKind::Linear, _) => u.matmul_t(p.var("lin.w")).add_row(p.var("lin.b")),
            (GeneratorKind::Mlp, DataShape::Vector(_)) => {
                let h = mp_linear(p, "g1", u).silu();
                let h = mp_linear(p, "g2", h).silu();
                let h = mp_linear(p, "g3", h).silu();
                u.scale(self.skip) + mp_linear(p, "gout", h)
            }
            (GeneratorKind::Mlp, DataShape::Grid { .. }) => {
                let h = mp_conv(p, "g1", u, 3, 1).silu();
                let h = mp_conv(p, "g2", h, 3, 1).silu();
                let h = mp_conv(p, "g3", h, 3, 1).silu();
                u.scale(self.skip) + mp_conv(p, "gout", h, 3, 1)
            }
        };
        out.ensure_finite()
    }

    /// Untaped evaluation on a batch of latents.
    pub fn generate(&self, params: &ParamSet, z: &Tensor) -> Result<Tensor> {
        let g = Graph::new();
        let b = params.bind(&g, false);
        Ok(self.forward(&b, g.constant(z.clone()))?.value())
    }

    /// Latent batch shaped for this generator.
    pub fn sample_latent<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Tensor {
        Tensor::randn(&self.shape.batch(n), rng)
    }

    /// The induced Gaussian of a linear generator, folding `sigma_init`
    /// into the matrix.
    pub fn as_linear(&self, params: &ParamSet) -> Result<LinearGenerator> {
        if self.kind != GeneratorKind::Linear {
            return Err(Error::Invalid("not a linear generator".into()));
        }
        let w = params.get("lin.w").ok_or_else(|| Error::Invalid("missing lin.w".into()))?;
        let b = params.get("lin.b").ok_or_else(|| Error::Invalid("missing lin.b".into()))?;
        LinearGenerator::new(w.scaled(self.sigma_init), b.data().to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmath::fd;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mlp(skip: f64) -> Generator {
        Generator {
            kind: GeneratorKind::Mlp,
            shape: DataShape::Vector(2),
            width: 16,
            skip,
            sigma_init: 2.5,
        }
    }

    #[test]
    fn zero_output_gain_gives_constant_offset() {
        let gen = mlp(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = gen.init(&mut rng).unwrap();
        p.get_mut("gout.b").unwrap().data_mut().copy_from_slice(&[0.3, -0.7]);
        let z = Tensor::randn(&[5, 2], &mut rng);
        let x = gen.generate(&p, &z).unwrap();
        for i in 0..5 {
            assert_eq!(x.row(i), &[0.3, -0.7]);
        }
    }

    #[test]
    fn sigma_init_scales_the_input() {
        let gen = mlp(0.2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = gen.init(&mut rng).unwrap();
        *p.get_mut("gout.gain").unwrap() = Tensor::scalar(0.8);
        let z = Tensor::randn(&[4, 2], &mut rng);
        let a = gen.generate(&p, &z).unwrap();
        let one = Generator { sigma_init: 1.0, ..gen.clone() };
        let b = one.generate(&p, &z.scaled(2.5)).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn latent_jacobian_matches_finite_differences() {
        let gen = mlp(0.4);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = gen.init(&mut rng).unwrap();
        *p.get_mut("gout.gain").unwrap() = Tensor::scalar(1.0);
        let z = Tensor::randn(&[1, 2], &mut rng);
        for out in 0..2 {
            let g = Graph::new();
            let b = p.bind(&g, false);
            let zv = g.input(z.clone());
            let x = gen.forward(&b, zv).unwrap();
            let mut sel = Tensor::zeros(&[1, 2]);
            sel.data_mut()[out] = 1.0;
            let l = (x * g.constant(sel)).sum();
            let row = g.backward(l).unwrap().wrt(zv);
            let num = fd::central_gradient_vec(z.data(), 1e-6, |zz| {
                let t = Tensor::new(vec![1, 2], zz.to_vec()).unwrap();
                gen.generate(&p, &t).unwrap().data()[out]
            });
            assert!(fd::relative_error(row.data(), &num, 1e-6) < 1e-4);
        }
    }

    #[test]
    fn linear_generator_starts_at_identity() {
        let gen = Generator {
            kind: GeneratorKind::Linear,
            shape: DataShape::Vector(3),
            width: 0,
            skip: 0.0,
            sigma_init: 2.5,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = gen.init(&mut rng).unwrap();
        let z = Tensor::randn(&[4, 3], &mut rng);
        assert!(gen.generate(&p, &z).unwrap().max_abs_diff(&z) < 1e-15);
        let lin = gen.as_linear(&p).unwrap();
        assert!((lin.w.data()[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn conv_generator_preserves_shape() {
        let gen = Generator {
            kind: GeneratorKind::Mlp,
            shape: DataShape::Grid { c: 1, h: 8, w: 8 },
            width: 4,
            skip: 0.2,
            sigma_init: 2.5,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = gen.init(&mut rng).unwrap();
        let z = gen.sample_latent(3, &mut rng);
        assert_eq!(gen.generate(&p, &z).unwrap().shape(), &[3, 1, 8, 8]);
    }
}
