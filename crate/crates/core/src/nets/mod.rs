//! Generator and fake-score networks.

mod generator;
mod layers;
mod scorenet;

use serde::{Deserialize, Serialize};

pub use generator::{Generator, GeneratorKind};
pub use layers::{
    effective_weight, ema_update, forced_weight_normalize, init_layer, mp_conv, mp_linear,
    traditional_weight_normalize_forward, ForcedNorm, NORM_EPS,
};
pub use scorenet::{precond, Precond, ReturnFlag, ScoreNet, ScoreNetOutput};

/// Per-sample data layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataShape {
    Vector(usize),
    Grid { c: usize, h: usize, w: usize },
}

impl DataShape {
    /// `C * H * W`, or `d` for vectors.
    pub fn numel(&self) -> usize {
        match *self {
            DataShape::Vector(d) => d,
            DataShape::Grid { c, h, w } => c * h * w,
        }
    }

    /// Full tensor shape of a batch of `n`.
    pub fn batch(&self, n: usize) -> Vec<usize> {
        match *self {
            DataShape::Vector(d) => vec![n, d],
            DataShape::Grid { c, h, w } => vec![n, c, h, w],
        }
    }
}
