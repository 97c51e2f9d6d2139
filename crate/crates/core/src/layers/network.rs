use rand::SeedableRng;

use crate::error::{Error, Result};
use crate::layers::params::BoundParams;
use crate::layers::{ConvResBlock, LstmResBlock, NetworkConfig, ParamStore, Phase, StemBlock};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};
use crate::Rng;

const HEAD_WEIGHT: &str = "head.weight";
const HEAD_BIAS: &str = "head.bias";

/// The assembled network: STEM, `n` CONV RES blocks, a 1x1 projection to
/// class width, `m` LSTM RES blocks and a channel softmax.
#[derive(Clone, Debug, PartialEq)]
pub struct ResCrNet {
    config: NetworkConfig,
    params: ParamStore,
}

/// Builds a network with freshly initialised parameters.
pub fn build_network(cfg: &NetworkConfig, rng: &mut Rng) -> Result<ResCrNet> {
    cfg.validate()?;
    let net = ResCrNet {
        config: cfg.clone(),
        params: ParamStore::new(),
    };
    let mut params = ParamStore::new();
    net.stem().init(&mut params, rng);
    for block in net.conv_blocks() {
        block.init(&mut params, rng);
    }
    let (w, k) = (cfg.feature_width(), cfg.num_classes);
    params.glorot(HEAD_WEIGHT.into(), &[w, k], w, k, rng);
    params.insert(HEAD_BIAS, Tensor::zeros(&[k]));
    for block in net.lstm_blocks() {
        block.init(&mut params, rng);
    }
    Ok(ResCrNet { params, ..net })
}

impl ResCrNet {
    /// Convenience constructor seeding its own generator.
    pub fn seeded(cfg: &NetworkConfig, seed: u64) -> Result<Self> {
        build_network(cfg, &mut Rng::seed_from_u64(seed))
    }

    /// Reassembles a network from stored parameters, checking that every
    /// expected tensor is present with the right shape.
    pub fn from_parts(config: NetworkConfig, params: ParamStore) -> Result<Self> {
        let reference = Self::seeded(&config, 0)?;
        if reference.params.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                reference.params.len(),
                params.len()
            )));
        }
        for (name, t) in reference.params.iter() {
            let got = params
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            if got.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        // Keep the canonical ordering.
        let mut ordered = ParamStore::new();
        for name in reference.params.names() {
            ordered.insert(name, params.get(name).expect("checked above").clone());
        }
        Ok(Self {
            config,
            params: ordered,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.scalar_count()
    }

    pub fn stem(&self) -> StemBlock {
        StemBlock::new(&self.config)
    }

    pub fn conv_blocks(&self) -> Vec<ConvResBlock> {
        let w = self.config.feature_width();
        (0..self.config.n_conv_blocks)
            .map(|i| ConvResBlock::new(&format!("conv{i}"), w, &self.config))
            .collect()
    }

    pub fn lstm_blocks(&self) -> Vec<LstmResBlock> {
        (0..self.config.n_lstm_blocks)
            .map(|i| LstmResBlock::new(&format!("lstm{i}")))
            .collect()
    }

    /// Names of every residual-path parameter across CONV RES and LSTM RES
    /// blocks. Zeroing them turns each residual block into the identity.
    pub fn residual_param_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self
            .conv_blocks()
            .iter()
            .flat_map(ConvResBlock::residual_param_names)
            .collect();
        names.extend(self.lstm_blocks().iter().flat_map(LstmResBlock::param_names));
        names
    }

    /// Forward pass from `[B,H,W,Cin]` to class probabilities `[B,H,W,K]`.
    pub fn forward(&self, tape: &mut Tape, params: &BoundParams, x: Var, phase: &mut Phase) -> Result<Var> {
        let logits = self.forward_logits(tape, params, x, phase)?;
        tape.softmax_channels(logits)
    }

    /// Everything up to, but excluding, the final softmax.
    pub fn forward_logits(&self, tape: &mut Tape, params: &BoundParams, x: Var, phase: &mut Phase) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        if s.len() != 4 || s[3] != self.config.input_channels {
            return Err(Error::invalid(
                "forward",
                format!(
                    "expects [B,H,W,{}] input, got {s:?}",
                    self.config.input_channels
                ),
            ));
        }
        let mut h = self.stem().forward(tape, params, x)?;
        for block in self.conv_blocks() {
            h = block.forward(tape, params, h, phase)?;
        }
        let head = tape.pointwise_conv(h, params.get(HEAD_WEIGHT)?, Some(params.get(HEAD_BIAS)?))?;
        h = tape.leaky_relu(head, self.config.leaky_alpha as Scalar)?;
        for block in self.lstm_blocks() {
            h = block.forward(tape, params, h)?;
        }
        Ok(h)
    }

    /// Inference on a batch tensor, returning probabilities.
    pub fn predict_batch(&self, input: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape)?;
        let x = tape.constant(input.clone())?;
        let y = self.forward(&mut tape, &p, x, &mut Phase::Infer)?;
        Ok(tape.value(y).clone())
    }
}
