//! Residual convolutional feature extractor.
//!
//! A configurable stack of stages, each entered at stride 2 with a 1x1
//! projection on the skip path. The final feature map is kept at full
//! spatial resolution (no global pooling); downstream modules consume the
//! per-position feature vectors directly.

use crate::error::{Error, Result};
use crate::numerics::{Padding, Tensor, Var};
use crate::rng::{self, Rng};

/// Dropout rate applied after each stage when `use_dropout` is set.
pub const DROPOUT_RATE: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub input_height: usize,
    pub input_width: usize,
    pub input_channels: usize,
    /// Output channels per residual stage; one stage per entry.
    pub stage_channels: Vec<usize>,
    pub convs_per_stage: usize,
    pub use_dropout: bool,
}

impl Default for BackboneConfig {
    /// Desk-scale default: 3 stages of 2 convolutions, 32x32 inputs.
    fn default() -> Self {
        BackboneConfig {
            input_height: 32,
            input_width: 32,
            input_channels: 1,
            stage_channels: vec![16, 32, 64],
            convs_per_stage: 2,
            use_dropout: false,
        }
    }
}

/// Shape of the feature map a backbone produces.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeatureMapSpec {
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.is_empty() {
            return Err(Error::Input("stage_channels: need at least one stage".into()));
        }
        if self.stage_channels.iter().any(|&c| c == 0) {
            return Err(Error::Input("stage_channels: channels must be positive".into()));
        }
        if self.convs_per_stage == 0 {
            return Err(Error::Input("convs_per_stage must be positive".into()));
        }
        if self.input_height == 0 || self.input_width == 0 || self.input_channels == 0 {
            return Err(Error::Input("input dims must be positive".into()));
        }
        let spec = self.output_spec();
        if spec.h < 2 || spec.w < 2 {
            return Err(Error::Input(format!(
                "input {}x{} shrinks to {}x{} after {} stages; final map must be at least 2x2",
                self.input_height,
                self.input_width,
                spec.h,
                spec.w,
                self.stage_channels.len()
            )));
        }
        Ok(())
    }

    /// Output shape under the stride-2 ceiling-division halving schedule.
    pub fn output_spec(&self) -> FeatureMapSpec {
        let mut h = self.input_height;
        let mut w = self.input_width;
        for _ in &self.stage_channels {
            h = h.div_ceil(2);
            w = w.div_ceil(2);
        }
        FeatureMapSpec {
            h,
            w,
            c: *self.stage_channels.last().unwrap(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ConvParams<T> {
    /// `[kh, kw, cin, cout]`.
    pub weight: T,
    /// `[cout]`.
    pub bias: T,
}

#[derive(Clone, Debug)]
pub struct StageParams<T> {
    pub convs: Vec<ConvParams<T>>,
    /// 1x1 stride-2 projection on the skip path.
    pub skip: ConvParams<T>,
}

#[derive(Clone, Debug)]
pub struct BackboneParams<T> {
    pub stages: Vec<StageParams<T>>,
}

impl<T> ConvParams<T> {
    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> ConvParams<U> {
        ConvParams {
            weight: f(&self.weight),
            bias: f(&self.bias),
        }
    }

    fn visit(&self, path: &str, f: &mut impl FnMut(String, &T)) {
        f(format!("{path}/weight"), &self.weight);
        f(format!("{path}/bias"), &self.bias);
    }
}

impl<T> BackboneParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> BackboneParams<U> {
        BackboneParams {
            stages: self
                .stages
                .iter()
                .map(|s| StageParams {
                    convs: s.convs.iter().map(|c| c.map(f)).collect(),
                    skip: s.skip.map(f),
                })
                .collect(),
        }
    }

    /// Walk every parameter with a stable, path-like name.
    pub fn visit(&self, prefix: &str, f: &mut impl FnMut(String, &T)) {
        for (i, stage) in self.stages.iter().enumerate() {
            for (j, conv) in stage.convs.iter().enumerate() {
                conv.visit(&format!("{prefix}/stage{i}/conv{j}"), f);
            }
            stage.skip.visit(&format!("{prefix}/stage{i}/skip"), f);
        }
    }
}

/// Kaiming fan-in initialization: conv weights `N(0, sqrt(2/fan_in))`,
/// zero biases.
pub fn init(config: &BackboneConfig, rng: &mut Rng) -> BackboneParams<Tensor> {
    let kaiming = |kh: usize, kw: usize, cin: usize, cout: usize, rng: &mut Rng| {
        let std = (2.0 / (kh * kw * cin) as f64).sqrt();
        ConvParams {
            weight: Tensor::randn(&[kh, kw, cin, cout], std, rng).trained(),
            bias: Tensor::zeros(&[cout]).trained(),
        }
    };
    let mut stages = Vec::with_capacity(config.stage_channels.len());
    let mut cin = config.input_channels;
    for &cout in &config.stage_channels {
        let mut convs = Vec::with_capacity(config.convs_per_stage);
        let mut c = cin;
        for _ in 0..config.convs_per_stage {
            convs.push(kaiming(3, 3, c, cout, rng));
            c = cout;
        }
        let skip = kaiming(1, 1, cin, cout, rng);
        stages.push(StageParams { convs, skip });
        cin = cout;
    }
    BackboneParams { stages }
}

/// Forward pass for one image: `[H, W, Cin] -> [H', W', C_last]`.
///
/// Each stage applies its convolutions (the first at stride 2, same
/// padding), adds the projected skip, and finishes with a ReLU. Pass a
/// generator to enable inverted dropout after each stage; inference passes
/// `None`.
pub fn forward<'t>(
    config: &BackboneConfig,
    params: &BackboneParams<Var<'t>>,
    image: Var<'t>,
    mut dropout_rng: Option<&mut Rng>,
) -> Result<Var<'t>> {
    let shape = image.shape();
    let expect = [config.input_height, config.input_width, config.input_channels];
    if shape != expect {
        return Err(Error::dim(
            "backbone_forward",
            format!("image shape {shape:?} does not match configured {expect:?}"),
        ));
    }
    let mut x = image;
    for stage in &params.stages {
        let skip = x
            .conv2d(&stage.skip.weight, 2, Padding::Same)
            .add_channel_bias(&stage.skip.bias);
        let mut h = x;
        for (j, conv) in stage.convs.iter().enumerate() {
            let stride = if j == 0 { 2 } else { 1 };
            h = h.conv2d(&conv.weight, stride, Padding::Same)
                .add_channel_bias(&conv.bias);
            if j + 1 < stage.convs.len() {
                h = h.relu();
            }
        }
        x = h.add(&skip).relu();
        if config.use_dropout {
            if let Some(rng) = dropout_rng.as_deref_mut() {
                x = x.mul_const(&dropout_mask(&x.shape(), DROPOUT_RATE, rng));
            }
        }
    }
    Ok(x)
}

/// Inverted dropout mask: entries are `0` with probability `rate`, else
/// `1/(1-rate)`.
fn dropout_mask(shape: &[usize], rate: f64, rng: &mut Rng) -> Tensor {
    let keep = 1.0 - rate;
    Tensor::from_fn(shape, |_| {
        if rng::uniform(rng) < rate {
            0.0
        } else {
            1.0 / keep
        }
    })
}
