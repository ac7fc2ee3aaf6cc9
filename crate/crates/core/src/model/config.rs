use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// What the per-cluster scale in the attention module is the maximum of.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterMaxMode {
    /// Max of the feature map over (slot, time, depth).
    FeatureMap,
    /// Max over slots of the time/depth-averaged map.
    #[default]
    Pooled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// One of 9, 13, 17, 21.
    pub depth: usize,
    /// `(g, l, t, c)`
    pub input: [usize; 4],
    pub stem_kernel_t: usize,
    pub stem_stride_t: usize,
    /// Output depths of the four stages; the stem outputs `widths[0]`.
    pub widths: [usize; 4],
    /// Time extent of the `1 x 1 x n` convolution.
    pub time_kernel: usize,
    pub attention: bool,
    pub cluster_max: ClusterMaxMode,
    pub classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::table_one()
    }
}

impl ModelConfig {
    /// The 17-layer network on a 13 x 10 x 300 x 3 input.
    pub fn table_one() -> Self {
        ModelConfig {
            depth: 17,
            input: [13, 10, 300, 3],
            stem_kernel_t: 5,
            stem_stride_t: 2,
            widths: [64, 128, 256, 512],
            time_kernel: 3,
            attention: true,
            cluster_max: ClusterMaxMode::Pooled,
            classes: 2,
        }
    }

    /// Narrow depth-9 network for small synthetic runs.
    pub fn compact(input: [usize; 4]) -> Self {
        ModelConfig {
            depth: 9,
            input,
            widths: [8, 16, 32, 64],
            ..ModelConfig::table_one()
        }
    }

    pub fn blocks_per_stage(&self) -> Result<[usize; 4]> {
        match self.depth {
            9 => Ok([1, 1, 1, 1]),
            13 => Ok([1, 2, 2, 1]),
            17 => Ok([2, 2, 2, 2]),
            21 => Ok([2, 3, 3, 2]),
            d => Err(Error::Config(format!(
                "depth must be 9, 13, 17 or 21, got {d}"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.blocks_per_stage()?;
        if self.input.contains(&0) {
            return Err(Error::Config(format!(
                "input dims {:?} must be positive",
                self.input
            )));
        }
        if self.widths.contains(&0) || self.widths.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Config(format!(
                "stage widths {:?} must be positive and non-decreasing",
                self.widths
            )));
        }
        if self.stem_kernel_t % 2 == 0 || self.time_kernel % 2 == 0 {
            return Err(Error::Config("time kernels must have odd length".into()));
        }
        if self.stem_stride_t == 0 {
            return Err(Error::Config("stem stride must be positive".into()));
        }
        if self.classes < 2 {
            return Err(Error::Config("at least two classes are needed".into()));
        }
        Ok(())
    }

    pub fn g(&self) -> usize {
        self.input[0]
    }

    pub fn l(&self) -> usize {
        self.input[1]
    }
}
