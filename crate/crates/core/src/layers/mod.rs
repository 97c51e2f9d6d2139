//! Network building blocks and full-model assembly.

mod blocks;
mod config;
mod lstm;
mod network;
mod params;

pub use blocks::{ConvResBlock, StemBlock};
pub use config::{BranchMerge, NetworkConfig};
pub use lstm::{bidirectional_conv_lstm, conv_lstm_step, ConvLstmCell, ConvLstmState, LstmResBlock};
pub use network::{build_network, ResCrNet};
pub use params::{BoundParams, ParamStore};

use crate::Rng;

/// Whether a forward pass trains (dropout active) or infers.
#[derive(Debug)]
pub enum Phase<'a> {
    Train(&'a mut Rng),
    Infer,
}

impl Phase<'_> {
    pub fn rng(&mut self) -> Option<&mut Rng> {
        match self {
            Phase::Train(rng) => Some(rng),
            Phase::Infer => None,
        }
    }

    pub fn is_training(&self) -> bool {
        matches!(self, Phase::Train(_))
    }
}
