use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BranchMerge {
    Concat,
    Add,
}

/// Hyperparameters of the network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    /// Number of CONV RES blocks.
    pub n_conv_blocks: usize,
    /// Number of LSTM RES blocks.
    pub n_lstm_blocks: usize,
    pub filters_per_branch: usize,
    pub kernel_sizes: [usize; 3],
    pub dilation_rates: [usize; 3],
    pub branch_merge: BranchMerge,
    pub dropout_rate: f64,
    pub num_classes: usize,
    pub leaky_alpha: f64,
    pub input_channels: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            n_conv_blocks: 6,
            n_lstm_blocks: 1,
            filters_per_branch: 8,
            kernel_sizes: [3, 3, 3],
            dilation_rates: [1, 3, 5],
            branch_merge: BranchMerge::Concat,
            dropout_rate: 0.2,
            num_classes: 3,
            leaky_alpha: 0.3,
            input_channels: 1,
        }
    }
}

/// Side length of the gate kernels in the convolutional LSTM.
pub const LSTM_KERNEL: usize = 3;
/// Gates per LSTM cell: input, forget, candidate, output.
pub const LSTM_GATES: usize = 4;

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n_conv_blocks < 1 {
            return bad("n_conv_blocks must be >= 1".into());
        }
        if self.filters_per_branch < 1 {
            return bad("filters_per_branch must be >= 1".into());
        }
        if let Some(k) = self.kernel_sizes.iter().find(|k| **k % 2 == 0) {
            return bad(format!("kernel_sizes must be odd, got {k}"));
        }
        if self.dilation_rates.contains(&0) {
            return bad("dilation_rates must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate must be in [0,1), got {}", self.dropout_rate));
        }
        if self.num_classes < 2 {
            return bad("num_classes must be >= 2".into());
        }
        if !(self.leaky_alpha > 0.0 && self.leaky_alpha < 1.0) {
            return bad(format!("leaky_alpha must be in (0,1), got {}", self.leaky_alpha));
        }
        if self.input_channels < 1 {
            return bad("input_channels must be >= 1".into());
        }
        Ok(())
    }

    /// Channel count emitted by the STEM and every CONV RES block.
    pub fn feature_width(&self) -> usize {
        match self.branch_merge {
            BranchMerge::Concat => 3 * self.filters_per_branch,
            BranchMerge::Add => self.filters_per_branch,
        }
    }

    /// Largest spatial reach of any branch, `d * (k - 1) + 1`.
    pub fn max_receptive_extent(&self) -> usize {
        self.kernel_sizes
            .iter()
            .zip(&self.dilation_rates)
            .map(|(k, d)| d * (k - 1) + 1)
            .max()
            .unwrap_or(1)
            .max(LSTM_KERNEL)
    }

    /// Closed-form count of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        let f = self.filters_per_branch;
        let w = self.feature_width();
        let branches = |cin: usize| -> usize {
            self.kernel_sizes
                .iter()
                .map(|k| k * k * cin + cin * f + f)
                .sum()
        };
        let stem = branches(self.input_channels);
        // Block input width equals the residual width, so shortcuts are identity.
        let conv = self.n_conv_blocks * branches(w);
        let head = w * self.num_classes + self.num_classes;
        let cell = LSTM_KERNEL * LSTM_KERNEL * 2 * LSTM_GATES + LSTM_GATES;
        let lstm = self.n_lstm_blocks * 4 * cell;
        stem + conv + head + lstm
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        NetworkConfig::default().validate().unwrap();
    }

    #[test]
    fn rejects_invalid_values() {
        let base = NetworkConfig::default();
        for cfg in [
            NetworkConfig { n_conv_blocks: 0, ..base.clone() },
            NetworkConfig { kernel_sizes: [3, 4, 3], ..base.clone() },
            NetworkConfig { dilation_rates: [1, 0, 2], ..base.clone() },
            NetworkConfig { num_classes: 1, ..base.clone() },
            NetworkConfig { dropout_rate: 1.0, ..base.clone() },
            NetworkConfig { leaky_alpha: 0.0, ..base.clone() },
        ] {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
    }

    #[test]
    fn widths() {
        let cfg = NetworkConfig { filters_per_branch: 4, ..Default::default() };
        assert_eq!(cfg.feature_width(), 12);
        let add = NetworkConfig { branch_merge: BranchMerge::Add, ..cfg };
        assert_eq!(add.feature_width(), 4);
    }
}
