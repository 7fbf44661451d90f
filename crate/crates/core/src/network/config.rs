use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{BatchNormConfig, Padding, Precision};

/// Classification branch: mean-pool, one 3x3 conv, seven fully-connected
/// layers with a skip concatenation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchConfig {
    pub pool_kernel: (usize, usize),
    pub pool_stride: (usize, usize),
    pub branch_conv_out: usize,
    pub fc_widths: Vec<usize>,
    /// 1-based index of the fc layer whose output is re-used.
    pub skip_from: usize,
    /// The output of `skip_from` is concatenated with the output of this
    /// layer to form the input of the following layer.
    pub skip_to: usize,
}

impl BranchConfig {
    pub const FC_LAYERS: usize = 7;

    pub fn paper() -> Self {
        BranchConfig {
            pool_kernel: (8, 8),
            pool_stride: (8, 8),
            branch_conv_out: 32,
            fc_widths: vec![256, 128, 64, 64, 64, 32, 2],
            skip_from: 1,
            skip_to: 5,
        }
    }

    /// Desk-scale branch for `toy` models.
    pub fn toy() -> Self {
        BranchConfig {
            pool_kernel: (4, 4),
            pool_stride: (4, 4),
            branch_conv_out: 8,
            fc_widths: vec![32, 16, 16, 16, 16, 8, 2],
            skip_from: 1,
            skip_to: 5,
        }
    }

    /// Input width of fc layer `j` (1-based) given the flattened pool size.
    pub fn fc_input(&self, j: usize, flat: usize) -> usize {
        match j {
            1 => flat,
            j if j == self.skip_to + 1 => self.fc_widths[j - 2] + self.fc_widths[self.skip_from - 1],
            j => self.fc_widths[j - 2],
        }
    }

    fn validate(&self) -> Result<()> {
        if self.fc_widths.len() != Self::FC_LAYERS {
            return Err(Error::config(format!(
                "classification branch needs exactly {} fc layers, got {}",
                Self::FC_LAYERS,
                self.fc_widths.len()
            )));
        }
        if self.fc_widths[Self::FC_LAYERS - 1] != 2 {
            return Err(Error::config("final fc layer must have width 2 (absent/present)"));
        }
        if self.fc_widths.iter().any(|&w| w == 0) || self.branch_conv_out == 0 {
            return Err(Error::config("branch widths must be >= 1"));
        }
        if !(1 <= self.skip_from && self.skip_from < self.skip_to && self.skip_to < Self::FC_LAYERS) {
            return Err(Error::config(format!(
                "fc skip {} -> {} must satisfy 1 <= from < to < {}",
                self.skip_from,
                self.skip_to,
                Self::FC_LAYERS
            )));
        }
        Ok(())
    }
}

/// Full architecture description. Channel width at encoder level `l` is
/// `base_width * 2^l`; the bottleneck sits at level `depth`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_channels: usize,
    pub input_size: (usize, usize),
    pub depth: usize,
    pub base_width: usize,
    pub num_classes: usize,
    pub padding_mode: Padding,
    pub kernel_size: usize,
    pub decoder_kernel_size: usize,
    /// Convolutions per encoder level and in the bottleneck.
    pub encoder_convs: usize,
    /// Convolutions per decoder level, deepest level first.
    pub decoder_convs: Vec<usize>,
    pub branch: BranchConfig,
    pub num_branches: usize,
    #[serde(default)]
    pub batch_norm: BatchNormConfig,
    #[serde(default)]
    pub precision: Precision,
}

impl ModelConfig {
    /// Same-padding model with depth 2, base width 8.
    pub fn toy(input_channels: usize, size: usize, num_classes: usize) -> Self {
        ModelConfig {
            input_channels,
            input_size: (size, size),
            depth: 2,
            base_width: 8,
            num_classes,
            padding_mode: Padding::Same,
            kernel_size: 3,
            decoder_kernel_size: 3,
            encoder_convs: 2,
            decoder_convs: vec![2, 2],
            branch: BranchConfig::toy(),
            num_branches: Self::branches_for(num_classes),
            batch_norm: BatchNormConfig::default(),
            precision: Precision::F64,
        }
    }

    /// Valid-padding schedule whose second-to-last layer is 64 x 101 x 101
    /// for a 4 x 300 x 300 input. One schedule among many that reach these
    /// endpoints; the intermediate widths are not taken from any reference.
    pub fn paper_scale(num_classes: usize) -> Self {
        ModelConfig {
            input_channels: 4,
            input_size: (300, 300),
            depth: 3,
            base_width: 64,
            num_classes,
            padding_mode: Padding::Valid,
            kernel_size: 4,
            decoder_kernel_size: 2,
            encoder_convs: 4,
            decoder_convs: vec![3, 3, 1],
            branch: BranchConfig::paper(),
            num_branches: Self::branches_for(num_classes),
            batch_norm: BatchNormConfig::default(),
            precision: Precision::F64,
        }
    }

    pub fn branches_for(num_classes: usize) -> usize {
        if num_classes == 2 {
            1
        } else {
            num_classes.saturating_sub(1)
        }
    }

    pub fn width(&self, level: usize) -> usize {
        self.base_width << level
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::config("depth must be >= 1"));
        }
        if self.input_channels == 0 || self.base_width == 0 {
            return Err(Error::config("input channels and base width must be >= 1"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("need at least 2 classes"));
        }
        if self.num_branches != Self::branches_for(self.num_classes) {
            return Err(Error::config(format!(
                "{} classes require {} classification branches, config has {}",
                self.num_classes,
                Self::branches_for(self.num_classes),
                self.num_branches
            )));
        }
        if self.kernel_size == 0 || self.decoder_kernel_size == 0 || self.encoder_convs == 0 {
            return Err(Error::config("kernel sizes and conv counts must be >= 1"));
        }
        if self.decoder_convs.len() != self.depth || self.decoder_convs.contains(&0) {
            return Err(Error::config(format!(
                "decoder_convs needs {} entries >= 1, got {:?}",
                self.depth, self.decoder_convs
            )));
        }
        if self.padding_mode == Padding::Same {
            let m = 1 << self.depth;
            let (h, w) = self.input_size;
            if h % m != 0 || w % m != 0 {
                return Err(Error::config(format!("input {h}x{w} not divisible by 2^depth = {m}")));
            }
        }
        self.branch.validate()?;
        super::describe::shape_trace(self).map(|_| ())
    }
}
