use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ops::Dims;

/// Output head of the backbone.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Head {
    /// One independent sigmoid channel per class.
    Baseline { classes: usize },
    /// Single sigmoid channel whose class is chosen by the conditioning input
    /// concatenated at the bottleneck.
    Lcs,
}

impl Head {
    pub fn output_channels(&self) -> usize {
        match self {
            Head::Baseline { classes } => *classes,
            Head::Lcs => 1,
        }
    }

    pub fn is_lcs(&self) -> bool {
        matches!(self, Head::Lcs)
    }
}

/// Number of channels in the conditioning tensor: atlas image + atlas mask.
pub const COND_CHANNELS: usize = 2;

fn unit_gain() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub base_channels: usize,
    /// Resolution levels including the bottleneck; `num_levels - 1` poolings.
    pub num_levels: usize,
    pub kernel: [usize; 3],
    pub convs_per_level: usize,
    pub head: Head,
    pub input_grid: Dims,
    pub seed: u64,
    /// Constant factor applied to the mask channel of the conditioning tensor
    /// where it joins the bottleneck features. 1 is a plain concatenation.
    #[serde(default = "unit_gain")]
    pub mask_gain: f64,
}

impl ModelConfig {
    pub fn new(head: Head, input_grid: Dims) -> Self {
        ModelConfig {
            base_channels: 8,
            num_levels: 5,
            kernel: [3, 3, 3],
            convs_per_level: 1,
            head,
            input_grid,
            seed: 0,
            mask_gain: 1.0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_mask_gain(mut self, mask_gain: f64) -> Self {
        self.mask_gain = mask_gain;
        self
    }

    pub fn with_base_channels(mut self, base_channels: usize) -> Self {
        self.base_channels = base_channels;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 {
            return Err(Error::InvalidConfig("base_channels must be >= 1".into()));
        }
        if self.num_levels < 2 {
            return Err(Error::InvalidConfig("num_levels must be >= 2".into()));
        }
        if self.kernel != [3, 3, 3] {
            return Err(Error::InvalidConfig(format!(
                "only 3x3x3 kernels are supported, got {:?}",
                self.kernel
            )));
        }
        if self.convs_per_level != 1 {
            return Err(Error::InvalidConfig(
                "only one convolution per level is supported".into(),
            ));
        }
        if let Head::Baseline { classes } = self.head {
            if classes == 0 {
                return Err(Error::InvalidConfig(
                    "baseline head needs >= 1 class".into(),
                ));
            }
        }
        if !(self.mask_gain.is_finite() && self.mask_gain > 0.0) {
            return Err(Error::InvalidConfig(
                "mask_gain must be positive and finite".into(),
            ));
        }
        let f = self.downsample_factor();
        if self.input_grid.iter().any(|&d| d == 0 || d % f != 0) {
            return Err(Error::NotDivisible {
                dims: self.input_grid,
                factor: f,
            });
        }
        Ok(())
    }

    /// Total spatial reduction between the input and the bottleneck.
    pub fn downsample_factor(&self) -> usize {
        1 << (self.num_levels - 1)
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn level_dims(&self, level: usize) -> Dims {
        let f = 1 << level;
        [
            self.input_grid[0] / f,
            self.input_grid[1] / f,
            self.input_grid[2] / f,
        ]
    }

    pub fn bottleneck_dims(&self) -> Dims {
        self.level_dims(self.num_levels - 1)
    }

    pub fn output_channels(&self) -> usize {
        self.head.output_channels()
    }
}
