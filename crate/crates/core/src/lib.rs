//! Res-CR-Net style semantic segmentation on a self-contained autodiff engine.
//!
//! The network replaces the encoder/decoder of U-Net-like models with a stack
//! of residual blocks that never change spatial resolution:
//!
//! * a STEM block and `n` CONV RES blocks, each holding three parallel
//!   separable atrous convolutions with different dilation rates,
//! * a 1x1 projection to class width,
//! * `m` LSTM RES blocks whose residual path runs bidirectional
//!   convolutional LSTMs along rows and along columns,
//! * a per-pixel softmax.
//!
//! Training minimises one minus the Tanimoto coefficient with complement,
//! optionally weighted by a contour-aware pixel map, on geometrically
//! augmented image/mask pairs.
//!
//! Start with [`tape::Tape`] for the engine, [`layers::build_network`] for the
//! model, and [`trainer::train`] for the optimisation loop. The `examples/`
//! directory has one runnable program per capability.

pub mod augment;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod contour;
pub mod dataset;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod layers;
pub mod loss;
pub mod metrics;
pub mod optim;
pub mod palette;
pub mod synthetic;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::{Scalar, Tensor};

/// Seeded generator used for initialisation, dropout and augmentation.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Derives an independent stream seed from a base seed and a path of indices.
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    // splitmix64 finaliser folded over the path.
    let mix = |mut z: u64| {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    };
    path.iter().fold(mix(base), |acc, &p| mix(acc ^ mix(p)))
}
