//! A minimal dense-tensor autodiff engine: a recording [`Tape`], the layer
//! types the emotion models are built from, softmax cross-entropy, and the
//! Adadelta optimizer.

pub mod checkpoint;
pub mod gradcheck;
mod layers;
mod loss;
mod optim;
mod param;
mod tape;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use layers::{BatchNorm, Conv2d, Dense};
pub use loss::{softmax, softmax_cross_entropy, CrossEntropy};
pub use optim::Adadelta;
pub use param::{glorot_uniform, ParamId, ParamStore, Parameter, RunningStats, StatsId};
pub use tape::{Tape, Var, BN_EPS, BN_MOMENTUM};

/// Whether batch norm and dropout use training or inference behaviour.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum LayerMode {
    Train,
    #[default]
    Eval,
}

/// The generator behind weight init, dropout masks and shuffling.
pub type SeededRng = ChaCha8Rng;

pub fn seed_rng(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}
