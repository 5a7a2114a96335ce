//! Degradation classifier with class activation maps, and the attentive
//! encoder-decoder restoration generator.
//!
//! Generator layout (`b` = base channels):
//!
//! ```text
//! [RGB | CAM] -> CNR(b) DA1 -> CNR(b) DA2 ----------------------------+
//!             -> CNR(2b, stride 2) DA3                                |
//!             -> 6 x [SD(d) DA], d = 2,2,2,4,4,4 -> DA10               |
//!             -> TConv(b, stride 2) IN ReLU -> (+) <-------------------+
//!             -> DA11 -> CNR(b) DA12 -> conv(3) -> sigmoid
//! ```
//!
//! CNR is conv + instance norm + ReLU, SD the smoothed dilated block and DA the
//! dual attention module.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{AttentionOrder, DualAttention, DualAttentionSpec, SmoothedDilated, SmoothedDilatedSpec};
use crate::error::{Error, Result};
use crate::image_io::{resize_plane, ImageRGB, ResizeKind};
use crate::layers::{Conv2d, ConvNormRelu, ConvTranspose2d, Dense, InstanceNorm};
use crate::synth::ClassLabel;
use crate::tensor::{Binding, ConvSpec, Float, Graph, ParamStore, PoolKind, Tensor, Var};

pub const CLASSIFIER_CONVS: usize = 7;
pub const CLASS_COUNT: usize = 3;
pub const DILATION_RATES: [usize; 6] = [2, 2, 2, 4, 4, 4];
pub const DUAL_ATTENTION_COUNT: usize = 12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub base_channels: usize,
    /// One stride per conv layer.
    pub strides: Vec<usize>,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            base_channels: 8,
            strides: vec![1, 2, 1, 2, 1, 2, 1],
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 {
            return Err(Error::Config("classifier: base_channels must be positive".into()));
        }
        if self.strides.len() != CLASSIFIER_CONVS || self.strides.contains(&0) {
            return Err(Error::Config(format!(
                "classifier: need {CLASSIFIER_CONVS} positive strides, got {:?}",
                self.strides
            )));
        }
        Ok(())
    }

    pub fn widths(&self) -> [usize; CLASSIFIER_CONVS] {
        let b = self.base_channels;
        [b, b, 2 * b, 2 * b, 4 * b, 4 * b, 4 * b]
    }
}

/// Seven conv + ReLU layers, global max pool, one dense layer to class logits.
#[derive(Clone, Debug)]
pub struct Classifier {
    pub config: ClassifierConfig,
    pub convs: Vec<Conv2d>,
    pub dense: Dense,
}

impl Classifier {
    pub fn new<T: Float, R: Rng>(config: &ClassifierConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut convs = Vec::with_capacity(CLASSIFIER_CONVS);
        let mut cin = 3;
        for (i, (&cout, &stride)) in config.widths().iter().zip(&config.strides).enumerate() {
            let spec = ConvSpec::same(cin, cout, 3, 1).with_stride(stride);
            convs.push(Conv2d::new(store, &format!("cls.conv{}", i + 1), spec, true, rng));
            cin = cout;
        }
        let dense = Dense::new(store, "cls.dense", cin, CLASS_COUNT, rng);
        Ok(Self {
            config: config.clone(),
            convs,
            dense,
        })
    }

    /// Returns `(logits [N, 3], final conv features [N, K, h, w])`.
    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Binding, x: Var) -> Result<(Var, Var)> {
        let mut h = x;
        for conv in &self.convs {
            let y = conv.forward(g, p, h)?;
            h = g.relu(y);
        }
        let pooled = g.pool(h, PoolKind::GlobalMax)?;
        let logits = self.dense.forward(g, p, pooled)?;
        Ok((logits, h))
    }

    /// Class probabilities for one image.
    pub fn classify<T: Float>(&self, store: &ParamStore<T>, image: &ImageRGB) -> Result<[f64; CLASS_COUNT]> {
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let x = g.constant(image.to_tensor());
        let (logits, _) = self.forward(&mut g, &p, x)?;
        let probs = g.softmax(logits);
        let d = g.value(probs).to_f64_vec();
        Ok([d[0], d[1], d[2]])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CamResult {
    pub probabilities: [f64; CLASS_COUNT],
    pub predicted_class: ClassLabel,
    /// Row-major H×W in `[0, 1]`, input resolution.
    pub attention: Vec<f32>,
}

/// `sum_k omega_k f_k(y, x)` over `K` feature planes of size `h`×`w`.
pub fn weighted_feature_sum(features: &[f64], h: usize, w: usize, omega: &[f64]) -> Result<Vec<f64>> {
    if features.len() != omega.len() * h * w {
        return Err(Error::shape(
            "cam",
            format!("{} feature values for {} weights of {h}x{w}", features.len(), omega.len()),
        ));
    }
    let plane = h * w;
    let mut raw = vec![0.0; plane];
    for (f, &wk) in features.chunks(plane).zip(omega) {
        for (r, &v) in raw.iter_mut().zip(f) {
            *r += wk * v;
        }
    }
    Ok(raw)
}

/// Resizes a raw map to `out_h`×`out_w`, clamps negatives and min-max normalizes.
/// A map with no spread becomes all zeros.
pub fn normalize_cam(raw: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f32> {
    let resized = resize_plane(raw, h, w, out_h, out_w, ResizeKind::Bilinear);
    let relu: Vec<f64> = resized.into_iter().map(|v| v.max(0.0)).collect();
    let lo = relu.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = relu.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi - lo > 1e-12) {
        return vec![0.0; relu.len()];
    }
    relu.iter().map(|&v| ((v - lo) / (hi - lo)) as f32).collect()
}

/// Class activation map of `image` for `target` (the predicted class when `None`).
pub fn compute_cam<T: Float>(
    classifier: &Classifier,
    store: &ParamStore<T>,
    image: &ImageRGB,
    target: Option<ClassLabel>,
) -> Result<CamResult> {
    let mut g = Graph::new();
    let p = store.bind(&mut g, false);
    let x = g.constant(image.to_tensor());
    let (logits, feats) = classifier.forward(&mut g, &p, x)?;
    let probs = g.softmax(logits);
    let pd = g.value(probs).to_f64_vec();
    let probabilities = [pd[0], pd[1], pd[2]];
    let best = (0..CLASS_COUNT).fold(0, |b, i| if probabilities[i] > probabilities[b] { i } else { b });
    let predicted_class = ClassLabel::from_index(best).expect("class index");
    let c = target.unwrap_or(predicted_class).index();

    let (_, k, h, w) = g.value(feats).dims4("cam")?;
    let dense_w = store.get(classifier.dense.weight).to_f64_vec();
    let omega = &dense_w[c * k..(c + 1) * k];
    let raw = weighted_feature_sum(&g.value(feats).to_f64_vec(), h, w, omega)?;
    Ok(CamResult {
        probabilities,
        predicted_class,
        attention: normalize_cam(&raw, h, w, image.height(), image.width()),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub base_channels: usize,
    pub reduction: usize,
    pub spatial_kernel: usize,
    pub attention_order: AttentionOrder,
    pub use_cam: bool,
    pub use_channel_attn: bool,
    pub use_spatial_attn: bool,
    pub use_smoothing: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            base_channels: 16,
            reduction: 4,
            spatial_kernel: 7,
            attention_order: AttentionOrder::ChannelFirst,
            use_cam: true,
            use_channel_attn: true,
            use_spatial_attn: true,
            use_smoothing: true,
        }
    }
}

impl GeneratorConfig {
    pub fn input_channels(&self) -> usize {
        if self.use_cam {
            4
        } else {
            3
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 {
            return Err(Error::Config("generator: base_channels must be positive".into()));
        }
        DualAttentionSpec::new(self.base_channels, self.reduction, self.spatial_kernel)?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("generator config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NonCam,
    NonCa,
    NonSa,
    NonSd,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Full, Variant::NonCam, Variant::NonCa, Variant::NonSa, Variant::NonSd];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NonCam => "non_cam",
            Variant::NonCa => "non_ca",
            Variant::NonSa => "non_sa",
            Variant::NonSd => "non_sd",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::UnknownVariant(s.to_string()))
    }
}

/// `base` with the component named by `variant` switched off.
pub fn build_ablation(base: &GeneratorConfig, variant: Variant) -> Result<GeneratorConfig> {
    base.validate()?;
    let mut cfg = base.clone();
    match variant {
        Variant::Full => {}
        Variant::NonCam => cfg.use_cam = false,
        Variant::NonCa => cfg.use_channel_attn = false,
        Variant::NonSa => cfg.use_spatial_attn = false,
        Variant::NonSd => cfg.use_smoothing = false,
    }
    Ok(cfg)
}

#[derive(Clone, Debug)]
pub struct Generator {
    pub config: GeneratorConfig,
    pub head: [ConvNormRelu; 2],
    pub down: ConvNormRelu,
    pub dilated: Vec<SmoothedDilated>,
    pub up: ConvTranspose2d,
    pub up_norm: InstanceNorm,
    pub tail: ConvNormRelu,
    pub out: Conv2d,
    /// In data-flow order, `DUAL_ATTENTION_COUNT` entries.
    pub attention: Vec<DualAttention>,
}

impl Generator {
    pub fn new<T: Float, R: Rng>(config: &GeneratorConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let b = config.base_channels;
        let da_spec = |c| DualAttentionSpec::new(c, config.reduction, config.spatial_kernel);
        let (narrow, wide) = (da_spec(b)?, da_spec(2 * b)?);
        let mut attention = Vec::with_capacity(DUAL_ATTENTION_COUNT);
        let mut da = |store: &mut ParamStore<T>, spec, rng: &mut R| {
            let name = format!("gen.da{}", attention.len() + 1);
            attention.push(DualAttention::new(
                store,
                &name,
                spec,
                config.use_channel_attn,
                config.use_spatial_attn,
                config.attention_order,
                rng,
            ));
        };

        let head0 = ConvNormRelu::new(store, "gen.head1", ConvSpec::same(config.input_channels(), b, 3, 1), rng);
        da(store, narrow, rng);
        let head1 = ConvNormRelu::new(store, "gen.head2", ConvSpec::same(b, b, 3, 1), rng);
        da(store, narrow, rng);
        let down = ConvNormRelu::new(store, "gen.down", ConvSpec::same(b, 2 * b, 3, 1).with_stride(2), rng);
        da(store, wide, rng);
        let mut dilated = Vec::with_capacity(DILATION_RATES.len());
        for (i, &d) in DILATION_RATES.iter().enumerate() {
            let spec = SmoothedDilatedSpec::new(2 * b, d)?;
            dilated.push(SmoothedDilated::new(store, &format!("gen.sd{}", i + 1), spec, config.use_smoothing, rng));
            da(store, wide, rng);
        }
        da(store, wide, rng);
        let up = ConvTranspose2d::new(store, "gen.up", 2 * b, b, 4, 2, 1, rng);
        let up_norm = InstanceNorm::new(store, "gen.up.norm", b);
        da(store, narrow, rng);
        let tail = ConvNormRelu::new(store, "gen.tail", ConvSpec::same(b, b, 3, 1), rng);
        da(store, narrow, rng);
        let out = Conv2d::new(store, "gen.out", ConvSpec::same(b, 3, 3, 1), true, rng);
        debug_assert_eq!(attention.len(), DUAL_ATTENTION_COUNT);
        Ok(Self {
            config: config.clone(),
            head: [head0, head1],
            down,
            dilated,
            up,
            up_norm,
            tail,
            out,
            attention,
        })
    }

    /// `x` is `[N, input_channels, H, W]` with even `H` and `W`; returns `[N, 3, H, W]` in `[0, 1]`.
    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Binding, x: Var) -> Result<Var> {
        let (_, c, h, w) = g.value(x).dims4("generator")?;
        if c != self.config.input_channels() {
            return Err(Error::shape(
                "generator",
                format!("input has {c} channels, expected {}", self.config.input_channels()),
            ));
        }
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape("generator", format!("extents must be even, got {h}x{w}")));
        }
        let att = &self.attention;
        let mut y = self.head[0].forward(g, p, x)?;
        y = att[0].forward(g, p, y)?;
        y = self.head[1].forward(g, p, y)?;
        let skip = att[1].forward(g, p, y)?;
        y = self.down.forward(g, p, skip)?;
        y = att[2].forward(g, p, y)?;
        for (i, block) in self.dilated.iter().enumerate() {
            y = block.forward(g, p, y)?;
            y = att[3 + i].forward(g, p, y)?;
        }
        y = att[9].forward(g, p, y)?;
        y = self.up.forward(g, p, y)?;
        y = self.up_norm.forward(g, p, y)?;
        y = g.relu(y);
        y = g.add(y, skip)?;
        y = att[10].forward(g, p, y)?;
        y = self.tail.forward(g, p, y)?;
        y = att[11].forward(g, p, y)?;
        y = self.out.forward(g, p, y)?;
        Ok(g.sigmoid(y))
    }

    /// Stacks images, and their attention maps when the generator uses them, into one batch.
    pub fn input_tensor<T: Float>(&self, images: &[&ImageRGB], cams: &[&[f32]]) -> Result<Tensor<T>> {
        let rgb = ImageRGB::batch_tensor::<T>(images)?;
        if !self.config.use_cam {
            return Ok(rgb);
        }
        let (n, _, h, w) = rgb.dims4("generator input")?;
        if cams.len() != n {
            return Err(Error::shape("generator input", format!("{n} images but {} attention maps", cams.len())));
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * 4 * plane);
        for (i, cam) in cams.iter().enumerate() {
            if cam.len() != plane {
                return Err(Error::shape(
                    "generator input",
                    format!("attention map has {} values, image is {h}x{w}", cam.len()),
                ));
            }
            data.extend_from_slice(&rgb.data()[i * 3 * plane..(i + 1) * 3 * plane]);
            data.extend(cam.iter().map(|&v| T::from_f64(v as f64)));
        }
        Tensor::new(vec![n, 4, h, w], data)
    }

    /// Restores one image; `cam` is ignored when the generator does not use it.
    pub fn restore<T: Float>(&self, store: &ParamStore<T>, image: &ImageRGB, cam: Option<&[f32]>) -> Result<ImageRGB> {
        let cams: Vec<&[f32]> = match (self.config.use_cam, cam) {
            (true, Some(c)) => vec![c],
            (true, None) => return Err(Error::Config("generator uses an attention map but none was given".into())),
            (false, _) => vec![],
        };
        let x = self.input_tensor::<T>(&[image], &cams)?;
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let xv = g.constant(x);
        let y = self.forward(&mut g, &p, xv)?;
        ImageRGB::from_tensor(g.value(y), 0)
    }
}
