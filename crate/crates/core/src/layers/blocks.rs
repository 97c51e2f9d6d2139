use crate::error::{Error, Result};
use crate::layers::{BranchMerge, NetworkConfig, ParamStore, Phase};
use crate::layers::params::BoundParams;
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};
use crate::Rng;

/// Three parallel separable atrous branches, merged.
#[derive(Clone, Debug)]
struct Branches {
    prefix: String,
    in_width: usize,
    filters: usize,
    kernel_sizes: [usize; 3],
    dilations: [usize; 3],
    merge: BranchMerge,
    alpha: Scalar,
}

impl Branches {
    fn new(prefix: &str, in_width: usize, cfg: &NetworkConfig) -> Self {
        Self {
            prefix: prefix.to_string(),
            in_width,
            filters: cfg.filters_per_branch,
            kernel_sizes: cfg.kernel_sizes,
            dilations: cfg.dilation_rates,
            merge: cfg.branch_merge,
            alpha: cfg.leaky_alpha as Scalar,
        }
    }

    fn name(&self, branch: usize, part: &str) -> String {
        format!("{}.b{branch}.{part}", self.prefix)
    }

    fn out_width(&self) -> usize {
        match self.merge {
            BranchMerge::Concat => 3 * self.filters,
            BranchMerge::Add => self.filters,
        }
    }

    fn init(&self, store: &mut ParamStore, rng: &mut Rng) {
        let (c, f) = (self.in_width, self.filters);
        for (i, &k) in self.kernel_sizes.iter().enumerate() {
            store.glorot(self.name(i, "depthwise"), &[k, k, c], k * k, k * k, rng);
            store.glorot(self.name(i, "pointwise"), &[c, f], c, f, rng);
            store.insert(self.name(i, "bias"), Tensor::zeros(&[f]));
        }
    }

    fn forward(&self, tape: &mut Tape, params: &BoundParams, x: Var) -> Result<Var> {
        let mut outs = Vec::with_capacity(3);
        for (i, &d) in self.dilations.iter().enumerate() {
            let dw = params.get(&self.name(i, "depthwise"))?;
            let pw = params.get(&self.name(i, "pointwise"))?;
            let b = params.get(&self.name(i, "bias"))?;
            let y = tape.separable_atrous_conv(x, dw, pw, Some(b), d)?;
            outs.push(tape.leaky_relu(y, self.alpha)?);
        }
        match self.merge {
            BranchMerge::Concat => tape.concat_channels(&outs),
            BranchMerge::Add => {
                let s = tape.add(outs[0], outs[1])?;
                tape.add(s, outs[2])
            }
        }
    }
}

fn check_width(op: &'static str, tape: &Tape, x: Var, width: usize) -> Result<()> {
    let s = tape.shape(x);
    if s.len() != 4 || s[3] != width {
        return Err(Error::invalid(
            op,
            format!("expects [B,H,W,{width}] input, got {s:?}"),
        ));
    }
    Ok(())
}

/// Entry block: the triple-branch structure applied to the raw image,
/// without a shortcut.
#[derive(Clone, Debug)]
pub struct StemBlock {
    branches: Branches,
}

impl StemBlock {
    pub fn new(cfg: &NetworkConfig) -> Self {
        Self {
            branches: Branches::new("stem", cfg.input_channels, cfg),
        }
    }

    pub fn out_width(&self) -> usize {
        self.branches.out_width()
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) {
        self.branches.init(store, rng);
    }

    pub fn forward(&self, tape: &mut Tape, params: &BoundParams, x: Var) -> Result<Var> {
        check_width("stem_block", tape, x, self.branches.in_width)?;
        self.branches.forward(tape, params, x)
    }
}

/// Residual block over three separable atrous branches, followed by
/// spatial dropout.
#[derive(Clone, Debug)]
pub struct ConvResBlock {
    branches: Branches,
    dropout: Scalar,
}

impl ConvResBlock {
    /// `in_width` is the channel count of the block input. When it differs
    /// from the merged branch width the shortcut is a 1x1 projection.
    pub fn new(prefix: &str, in_width: usize, cfg: &NetworkConfig) -> Self {
        Self {
            branches: Branches::new(prefix, in_width, cfg),
            dropout: cfg.dropout_rate as Scalar,
        }
    }

    pub fn out_width(&self) -> usize {
        self.branches.out_width()
    }

    pub fn has_projection(&self) -> bool {
        self.branches.in_width != self.out_width()
    }

    fn shortcut_name(&self, part: &str) -> String {
        format!("{}.shortcut.{part}", self.branches.prefix)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) {
        self.branches.init(store, rng);
        if self.has_projection() {
            let (i, o) = (self.branches.in_width, self.out_width());
            store.glorot(self.shortcut_name("weight"), &[i, o], i, o, rng);
            store.insert(self.shortcut_name("bias"), Tensor::zeros(&[o]));
        }
    }

    /// Names of the residual-path parameters (the branches).
    pub fn residual_param_names(&self) -> Vec<String> {
        (0..3)
            .flat_map(|i| {
                ["depthwise", "pointwise", "bias"]
                    .into_iter()
                    .map(move |p| (i, p))
            })
            .map(|(i, p)| self.branches.name(i, p))
            .collect()
    }

    pub fn forward(&self, tape: &mut Tape, params: &BoundParams, x: Var, phase: &mut Phase) -> Result<Var> {
        check_width("conv_res_block", tape, x, self.branches.in_width)?;
        let residual = self.branches.forward(tape, params, x)?;
        let shortcut = if self.has_projection() {
            let w = params.get(&self.shortcut_name("weight"))?;
            let b = params.get(&self.shortcut_name("bias"))?;
            tape.pointwise_conv(x, w, Some(b))?
        } else {
            x
        };
        let y = tape.add(shortcut, residual)?;
        tape.spatial_dropout(y, self.dropout, phase.rng())
    }
}
