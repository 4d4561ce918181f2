//! Layer-level building blocks: convolutions, channel maps, normalization,
//! and the sampling layers.
//!
//! A layer owns parameter handles (not values); `forward` binds against a
//! tape through the model's [`Bindings`] table.

use crate::error::Result;
use crate::params::{Bindings, Init, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{ConvSpec, PadMode, Tape, TensorId};
use rand::Rng;

pub const NORM_EPS: f64 = 1e-6;

/// 2-D convolution layer. `padding` defaults to "same" for odd kernels at
/// stride 1 via [`Conv2dLayer::same`].
pub struct Conv2dLayer {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: ConvSpec,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl Conv2dLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        spec: ConvSpec,
        with_bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let cin_per_group = if spec.depthwise { 1 } else { in_channels };
        let fan_in = cin_per_group * kernel * kernel;
        let weight = store.register(
            &format!("{name}.weight"),
            &[out_channels, cin_per_group, kernel, kernel],
            Init::FanInUniform { fan_in },
            rng,
        )?;
        let bias = if with_bias {
            Some(store.register(&format!("{name}.bias"), &[out_channels], Init::Zeros, rng)?)
        } else {
            None
        };
        Ok(Conv2dLayer { weight, bias, spec, in_channels, out_channels, kernel })
    }

    /// Stride-1 convolution preserving spatial extents (odd kernels).
    pub fn same<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Self::new(
            store,
            name,
            in_channels,
            out_channels,
            kernel,
            ConvSpec::unit(kernel / 2),
            true,
            rng,
        )
    }

    /// Stride-1 same-extent convolution with weight and bias all zero, so the
    /// layer starts as the constant-zero map. Used for the residual head:
    /// a freshly built model is then exactly the identity.
    pub fn same_zeroed<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let weight = store.register(
            &format!("{name}.weight"),
            &[out_channels, in_channels, kernel, kernel],
            Init::Zeros,
            rng,
        )?;
        let bias = Some(store.register(&format!("{name}.bias"), &[out_channels], Init::Zeros, rng)?);
        Ok(Conv2dLayer {
            weight,
            bias,
            spec: ConvSpec::unit(kernel / 2),
            in_channels,
            out_channels,
            kernel,
        })
    }

    /// Stride-1 depthwise convolution preserving spatial extents.
    pub fn depthwise<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        kernel: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Self::new(
            store,
            name,
            channels,
            channels,
            kernel,
            ConvSpec { stride: 1, padding: kernel / 2, depthwise: true, pad_mode: PadMode::Zero },
            true,
            rng,
        )
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        binds: &Bindings,
        x: TensorId,
    ) -> Result<TensorId> {
        tape.conv2d(x, binds.get(self.weight), self.bias.map(|b| binds.get(b)), self.spec)
    }
}

/// Pointwise channel map applied to matrix-shaped features `[C_in, cols]`:
/// `y = W x + b`. Parameter-identical to a 1x1 convolution; used where
/// features are already flattened (centroids, pixel matrices).
pub struct ChannelMap {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_features: usize,
    pub out_features: usize,
}

impl ChannelMap {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_features: usize,
        out_features: usize,
        with_bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let weight = store.register(
            &format!("{name}.weight"),
            &[out_features, in_features],
            Init::FanInUniform { fan_in: in_features },
            rng,
        )?;
        let bias = if with_bias {
            Some(store.register(&format!("{name}.bias"), &[out_features], Init::Zeros, rng)?)
        } else {
            None
        };
        Ok(ChannelMap { weight, bias, in_features, out_features })
    }

    /// Apply to `[in_features, cols]`, producing `[out_features, cols]`.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        binds: &Bindings,
        x: TensorId,
    ) -> Result<TensorId> {
        let mut y = tape.matmul(binds.get(self.weight), x)?;
        if let Some(b) = self.bias {
            let bcol = tape.reshape(binds.get(b), &[self.out_features, 1])?;
            y = tape.add(y, bcol)?;
        }
        Ok(y)
    }
}

/// Channel-wise layer normalization with learnable scale and shift.
pub struct NormLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub channels: usize,
}

impl NormLayer {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let gamma = store.register(&format!("{name}.gamma"), &[channels], Init::Ones, rng)?;
        let beta = store.register(&format!("{name}.beta"), &[channels], Init::Zeros, rng)?;
        Ok(NormLayer { gamma, beta, channels })
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        binds: &Bindings,
        x: TensorId,
    ) -> Result<TensorId> {
        tape.layer_norm(x, binds.get(self.gamma), binds.get(self.beta), NORM_EPS)
    }
}

/// Halves spatial extents and doubles channels with a stride-2 3x3 conv.
pub struct Downsample {
    pub conv: Conv2dLayer,
}

impl Downsample {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let conv = Conv2dLayer::new(
            store,
            name,
            channels,
            channels * 2,
            3,
            ConvSpec { stride: 2, padding: 1, depthwise: false, pad_mode: PadMode::Zero },
            true,
            rng,
        )?;
        Ok(Downsample { conv })
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        binds: &Bindings,
        x: TensorId,
    ) -> Result<TensorId> {
        self.conv.forward(tape, binds, x)
    }
}

/// Doubles spatial extents and halves channels: 1x1 conv to `2C` followed by
/// depth-to-space with factor 2 (`2C -> C/2` channels at `2H x 2W`).
pub struct Upsample {
    pub conv: Conv2dLayer,
}

impl Upsample {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let conv = Conv2dLayer::new(
            store,
            name,
            channels,
            channels * 2,
            1,
            ConvSpec::unit(0),
            true,
            rng,
        )?;
        Ok(Upsample { conv })
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        binds: &Bindings,
        x: TensorId,
    ) -> Result<TensorId> {
        let expanded = self.conv.forward(tape, binds, x)?;
        tape.pixel_shuffle(expanded, 2)
    }
}
