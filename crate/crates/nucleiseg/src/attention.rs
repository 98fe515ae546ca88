//! Channel attention, spatial attention, and their sequential composition.
//!
//! Channel attention pools the feature map globally (avg and max), runs both
//! pooled vectors through one shared two-layer MLP, sums the results and
//! squashes them to per-channel weights in (0,1). Spatial attention reduces
//! across channels (avg and max), stacks the two planes and convolves them
//! down to a per-pixel weight plane. The composed module reweights the input
//! by channel first, then by position.

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nn::{Conv2d, Linear, ParamSet};
use crate::tensor::{concat_channels, PoolMode, Tensor};

pub struct ChannelAttention {
    fc1: Linear,
    fc2: Linear,
    pub reduction: usize,
}

impl ChannelAttention {
    pub fn new(rng: &mut ChaCha8Rng, channels: usize, reduction: usize) -> ChannelAttention {
        let hidden = (channels / reduction).max(1);
        ChannelAttention {
            fc1: Linear::new(rng, channels, hidden),
            fc2: Linear::new(rng, hidden, channels),
            reduction,
        }
    }

    /// N×C×H×W → N×C×1×1 weights in (0,1). Both pooled paths share the MLP.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c) = (x.shape()[0], x.shape()[1]);
        let avg = x.global_pool(PoolMode::Avg)?.reshape(&[n, c])?;
        let max = x.global_pool(PoolMode::Max)?.reshape(&[n, c])?;
        let avg_path = self.fc2.forward(&self.fc1.forward(&avg)?.relu())?;
        let max_path = self.fc2.forward(&self.fc1.forward(&max)?.relu())?;
        avg_path.add(&max_path)?.sigmoid().reshape(&[n, c, 1, 1])
    }

    pub fn collect(&self, prefix: &str, set: &mut ParamSet) {
        self.fc1.collect(&format!("{prefix}.fc1"), set);
        self.fc2.collect(&format!("{prefix}.fc2"), set);
    }
}

pub struct SpatialAttention {
    conv: Conv2d,
}

impl SpatialAttention {
    pub fn new(rng: &mut ChaCha8Rng, kernel: usize) -> SpatialAttention {
        assert!(kernel % 2 == 1, "spatial attention kernel must be odd");
        SpatialAttention {
            conv: Conv2d::new(rng, 2, 1, kernel, 1, kernel / 2, 1),
        }
    }

    /// N×C×H×W → N×1×H×W weights in (0,1).
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let avg = x.reduce_over_channels(PoolMode::Avg)?;
        let max = x.reduce_over_channels(PoolMode::Max)?;
        let stacked = concat_channels(&[avg, max])?;
        Ok(self.conv.forward(&stacked)?.sigmoid())
    }

    pub fn collect(&self, prefix: &str, set: &mut ParamSet) {
        self.conv.collect(&format!("{prefix}.conv"), set);
    }
}

/// Channel-then-spatial attention over a feature map; output shape equals
/// input shape.
pub struct Cbam {
    pub channel: ChannelAttention,
    pub spatial: SpatialAttention,
}

impl Cbam {
    pub fn new(rng: &mut ChaCha8Rng, channels: usize, reduction: usize, spatial_kernel: usize) -> Cbam {
        Cbam {
            channel: ChannelAttention::new(rng, channels, reduction),
            spatial: SpatialAttention::new(rng, spatial_kernel),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let fc = x.mul_broadcast(&self.channel.forward(x)?)?;
        fc.mul_broadcast(&self.spatial.forward(&fc)?)
    }

    pub fn collect(&self, prefix: &str, set: &mut ParamSet) {
        self.channel.collect(&format!("{prefix}.channel"), set);
        self.spatial.collect(&format!("{prefix}.spatial"), set);
    }
}
