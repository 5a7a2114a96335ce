//! The two reusable blocks of the restoration network.
//!
//! * [`SmoothedDilated`]: residual block whose inner path is a `(2d-1)×(2d-1)`
//!   smoothing convolution followed by a 3×3 convolution at dilation `d`, then
//!   instance norm and ReLU. The smoothing conv lets the dilated taps see the
//!   pixels they would otherwise skip.
//! * [`DualAttention`]: channel attention (shared two-layer MLP over global
//!   average and max pooled vectors) composed with spatial attention (k×k conv
//!   over channel-wise max and mean planes).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Conv2d, Dense, InstanceNorm};
use crate::tensor::{Binding, ConvSpec, Float, Graph, ParamStore, PoolKind, Var};

/// Kernel of the dilated convolution.
pub const DILATED_KERNEL: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SmoothedDilatedSpec {
    pub channels: usize,
    pub dilation: usize,
}

impl SmoothedDilatedSpec {
    pub fn new(channels: usize, dilation: usize) -> Result<Self> {
        if channels == 0 || dilation == 0 {
            return Err(Error::Config("smoothed dilated block needs positive channels and dilation".into()));
        }
        Ok(Self { channels, dilation })
    }

    /// Side of the smoothing kernel, always odd.
    pub fn smoothing_extent(&self) -> usize {
        2 * self.dilation - 1
    }
}

#[derive(Clone, Debug)]
pub struct SmoothedDilated {
    pub spec: SmoothedDilatedSpec,
    /// `None` when smoothing is ablated: the dilated conv sees `x` directly.
    pub smooth: Option<Conv2d>,
    pub dilated: Conv2d,
    pub norm: InstanceNorm,
}

impl SmoothedDilated {
    pub fn new<T: Float, R: Rng>(store: &mut ParamStore<T>, name: &str, spec: SmoothedDilatedSpec, use_smoothing: bool, rng: &mut R) -> Self {
        let c = spec.channels;
        let smooth = use_smoothing
            .then(|| Conv2d::new(store, &format!("{name}.smooth"), ConvSpec::same(c, c, spec.smoothing_extent(), 1), true, rng));
        let dilated = Conv2d::new(store, &format!("{name}.dilated"), ConvSpec::same(c, c, DILATED_KERNEL, spec.dilation), true, rng);
        let norm = InstanceNorm::new(store, &format!("{name}.norm"), c);
        Self {
            spec,
            smooth,
            dilated,
            norm,
        }
    }

    /// Linear part of the inner path: smoothing conv then dilated conv.
    pub fn inner_linear<T: Float>(&self, g: &mut Graph<T>, p: &Binding, x: Var) -> Result<Var> {
        let c = g.shape(x).get(1).copied().unwrap_or(0);
        if c != self.spec.channels {
            return Err(Error::shape(
                "smoothed_dilated",
                format!("input has {c} channels, block expects {}", self.spec.channels),
            ));
        }
        let h = match &self.smooth {
            Some(conv) => conv.forward(g, p, x)?,
            None => x,
        };
        self.dilated.forward(g, p, h)
    }

    /// `x + ReLU(IN(dilated(smooth(x))))`.
    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Binding, x: Var) -> Result<Var> {
        let y = self.inner_linear(g, p, x)?;
        let y = self.norm.forward(g, p, y)?;
        let y = g.relu(y);
        g.add(x, y)
    }
}

/// Which attention is applied first inside a dual attention module.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionOrder {
    #[default]
    ChannelFirst,
    SpatialFirst,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DualAttentionSpec {
    pub channels: usize,
    pub reduction: usize,
    pub spatial_kernel: usize,
}

impl DualAttentionSpec {
    pub fn new(channels: usize, reduction: usize, spatial_kernel: usize) -> Result<Self> {
        if channels == 0 || reduction == 0 || !channels.is_multiple_of(reduction) {
            return Err(Error::Config(format!(
                "dual attention: reduction {reduction} must divide channel count {channels}"
            )));
        }
        if spatial_kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("dual attention: spatial kernel {spatial_kernel} must be odd")));
        }
        Ok(Self {
            channels,
            reduction,
            spatial_kernel,
        })
    }
}

/// Shared-weight squeeze MLP `C -> C/r -> C`.
#[derive(Clone, Debug)]
pub struct ChannelAttention {
    pub fc1: Dense,
    pub fc2: Dense,
}

impl ChannelAttention {
    fn mlp<T: Float>(&self, g: &mut Graph<T>, p: &Binding, v: Var) -> Result<Var> {
        let h = self.fc1.forward(g, p, v)?;
        let h = g.relu(h);
        self.fc2.forward(g, p, h)
    }

    /// Per-channel gate `sigmoid(MLP(GAP x) + MLP(GMP x))`, shape `[N, C]`.
    pub fn gate<T: Float>(&self, g: &mut Graph<T>, p: &Binding, x: Var) -> Result<Var> {
        let avg = g.pool(x, PoolKind::GlobalAvg)?;
        let max = g.pool(x, PoolKind::GlobalMax)?;
        let a = self.mlp(g, p, avg)?;
        let m = self.mlp(g, p, max)?;
        let s = g.add(a, m)?;
        Ok(g.sigmoid(s))
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Binding, x: Var) -> Result<Var> {
        let v = self.gate(g, p, x)?;
        g.scale_channels(x, v)
    }
}

#[derive(Clone, Debug)]
pub struct SpatialAttention {
    pub conv: Conv2d,
}

impl SpatialAttention {
    /// Per-pixel gate `sigmoid(conv([max_c x, mean_c x]))`, shape `[N, 1, H, W]`.
    pub fn gate<T: Float>(&self, g: &mut Graph<T>, p: &Binding, x: Var) -> Result<Var> {
        let mx = g.pool(x, PoolKind::ChannelMax)?;
        let av = g.pool(x, PoolKind::ChannelAvg)?;
        let both = g.concat_channels(&[mx, av])?;
        let s = self.conv.forward(g, p, both)?;
        Ok(g.sigmoid(s))
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Binding, x: Var) -> Result<Var> {
        let s = self.gate(g, p, x)?;
        g.scale_spatial(x, s)
    }
}

#[derive(Clone, Debug)]
pub struct DualAttention {
    pub spec: DualAttentionSpec,
    pub channel: Option<ChannelAttention>,
    pub spatial: Option<SpatialAttention>,
    pub order: AttentionOrder,
}

impl DualAttention {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Float, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        spec: DualAttentionSpec,
        use_channel: bool,
        use_spatial: bool,
        order: AttentionOrder,
        rng: &mut R,
    ) -> Self {
        let c = spec.channels;
        let hidden = c / spec.reduction;
        let channel = use_channel.then(|| ChannelAttention {
            fc1: Dense::new(store, &format!("{name}.ca.fc1"), c, hidden, rng),
            fc2: Dense::new(store, &format!("{name}.ca.fc2"), hidden, c, rng),
        });
        let spatial = use_spatial.then(|| SpatialAttention {
            conv: Conv2d::new(store, &format!("{name}.sa.conv"), ConvSpec::same(2, 1, spec.spatial_kernel, 1), true, rng),
        });
        Self {
            spec,
            channel,
            spatial,
            order,
        }
    }

    fn check<T: Float>(&self, g: &Graph<T>, x: Var) -> Result<()> {
        let c = g.value(x).dims4("dual_attention")?.1;
        if c != self.spec.channels {
            return Err(Error::shape(
                "dual_attention",
                format!("input has {c} channels, block expects {}", self.spec.channels),
            ));
        }
        Ok(())
    }

    pub fn channel_attention<T: Float>(&self, g: &mut Graph<T>, p: &Binding, x: Var) -> Result<Var> {
        self.check(g, x)?;
        match &self.channel {
            Some(ca) => ca.forward(g, p, x),
            None => Ok(x),
        }
    }

    pub fn spatial_attention<T: Float>(&self, g: &mut Graph<T>, p: &Binding, x: Var) -> Result<Var> {
        self.check(g, x)?;
        match &self.spatial {
            Some(sa) => sa.forward(g, p, x),
            None => Ok(x),
        }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Binding, x: Var) -> Result<Var> {
        match self.order {
            AttentionOrder::ChannelFirst => {
                let y = self.channel_attention(g, p, x)?;
                self.spatial_attention(g, p, y)
            }
            AttentionOrder::SpatialFirst => {
                let y = self.spatial_attention(g, p, x)?;
                self.channel_attention(g, p, y)
            }
        }
    }
}
