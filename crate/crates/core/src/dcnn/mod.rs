//! The PSIC network.
//!
//! Layer map for radius `L` (side `M = 2L+1`) and `P` SH channels:
//!
//! 1. three 3-D composite convolutions of the input cube, ReLU, max-pool along
//!    x, y and z respectively → three `M×M×P` arrays;
//! 2. 2-D composite convolution(s), ReLU, max-pool along each remaining axis
//!    → six `M×P` arrays (see [`Layer2Wiring`]);
//! 3. six 1-D composite convolutions, ReLU, max-pool → six P-vectors;
//! 4. three pair-fusion FCLs (`2P → pair_width`, ReLU), one for the two vectors
//!    that descend from the same layer-1 branch;
//! 5. merge FCL (`3·pair_width → merge_width`, ReLU) with optional inverted
//!    dropout on its input;
//! 6. linear head to `(α, β)` and `γ = e^α / (e^α + e^β)`.

mod network;
pub mod ops;
mod params;

pub use network::{backward, backward_into, forward, forward_with_dropout, predict, ForwardCache};
pub use ops::{
    composite_conv, fcl, pool1, pool2, pool3, relu, softmax2, BiasVector, CompositeFilterBank, SpatialArray,
};
pub use params::{init_params, param_count, Gradients, NetworkParams, ParamBlock, ParamCount, ParamLayout};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sh::num_coeffs;

/// How layer 2 turns each pooled layer-1 branch into two pooled paths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Layer2Wiring {
    /// One 2-D convolution per branch, pooled along both remaining axes.
    #[default]
    SharedConv,
    /// A separate 2-D convolution for each pooling direction.
    PerDirectionConv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    /// Neighbourhood radius `L`; cubes have side `2L+1`.
    pub radius: usize,
    pub n_max: usize,
    /// Spatial filter side `J` (odd).
    pub filter_size: usize,
    pub wiring: Layer2Wiring,
    pub pair_width: usize,
    pub merge_width: usize,
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self::with_degree(6)
    }
}

impl NetworkConfig {
    /// Radius 1, 3-tap filters and FCL widths equal to the channel count.
    pub fn with_degree(n_max: usize) -> Self {
        let p = (n_max + 1) * (n_max + 2) / 2;
        Self {
            radius: 1,
            n_max,
            filter_size: 3,
            wiring: Layer2Wiring::SharedConv,
            pair_width: p,
            merge_width: p,
            seed: 0,
        }
    }

    pub fn side(&self) -> usize {
        2 * self.radius + 1
    }

    pub fn channels(&self) -> usize {
        (self.n_max + 1) * (self.n_max + 2) / 2
    }

    pub fn validate(&self) -> Result<()> {
        num_coeffs(self.n_max)?;
        if self.filter_size % 2 == 0 {
            return Err(Error::Config(format!("filter size must be odd, got {}", self.filter_size)));
        }
        if self.pair_width == 0 || self.merge_width == 0 {
            return Err(Error::Config("FCL widths must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
