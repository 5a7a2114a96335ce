//! Pixel and perceptual training objectives.
//!
//! The perceptual term compares activations of a small frozen feature network
//! with fixed seeded weights; an external checkpoint can replace them.

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::Conv2d;
use crate::tensor::{load_checkpoint, Binding, ConvSpec, Float, Graph, ParamStore, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 0.05,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be nonnegative, got lambda1 = {}, lambda2 = {}",
                self.lambda1, self.lambda2
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureNetSpec {
    /// Output channels of each conv; the last one is the compared layer.
    pub channels: Vec<usize>,
    /// 1-based conv indices that use stride 2.
    pub stride2_layers: Vec<usize>,
    pub seed: u64,
    /// Checkpoint with externally converted weights, names `feat.convN.{weight,bias}`.
    pub weights: Option<PathBuf>,
}

impl Default for FeatureNetSpec {
    fn default() -> Self {
        Self {
            channels: vec![8, 8, 16, 16, 32, 32, 32],
            stride2_layers: vec![3, 5],
            seed: 19,
            weights: None,
        }
    }
}

/// Frozen conv + ReLU stack; the output of its last conv is the feature map.
#[derive(Clone, Debug)]
pub struct FeatureNet {
    pub convs: Vec<Conv2d>,
}

impl FeatureNet {
    pub fn new<T: Float>(spec: &FeatureNetSpec) -> Result<(Self, ParamStore<T>)> {
        if spec.channels.is_empty() || spec.channels.contains(&0) {
            return Err(Error::Config("feature net needs at least one conv with positive width".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut store = ParamStore::new();
        let mut cin = 3;
        let convs = spec
            .channels
            .iter()
            .enumerate()
            .map(|(i, &cout)| {
                let stride = if spec.stride2_layers.contains(&(i + 1)) { 2 } else { 1 };
                let conv = Conv2d::new(&mut store, &format!("feat.conv{}", i + 1), ConvSpec::same(cin, cout, 3, 1).with_stride(stride), true, &mut rng);
                cin = cout;
                conv
            })
            .collect();
        if let Some(path) = &spec.weights {
            load_checkpoint(&mut store, path)?;
        }
        Ok((Self { convs }, store))
    }

    pub fn features<T: Float>(&self, g: &mut Graph<T>, p: &Binding, x: Var) -> Result<Var> {
        let mut h = x;
        for conv in &self.convs {
            let y = conv.forward(g, p, h)?;
            h = g.relu(y);
        }
        Ok(h)
    }
}

/// Mean squared difference over every element.
pub fn mse_loss<T: Float>(g: &mut Graph<T>, out: Var, gt: Var) -> Result<Var> {
    g.mse(out, gt)
}

/// Mean squared difference between feature maps, averaged over `n_x n_y n_c`
/// (and the batch). `p` should bind the feature net without gradients.
pub fn perceptual_loss<T: Float>(g: &mut Graph<T>, net: &FeatureNet, p: &Binding, out: Var, gt: Var) -> Result<Var> {
    if g.shape(out) != g.shape(gt) {
        return Err(Error::shape(
            "perceptual_loss",
            format!("{:?} vs {:?}", g.shape(out), g.shape(gt)),
        ));
    }
    let fo = net.features(g, p, out)?;
    let fg = net.features(g, p, gt)?;
    g.mse(fg, fo)
}

#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub mse: Var,
    pub perceptual: Var,
}

/// `lambda1 * mse + lambda2 * perceptual`.
pub fn total_loss<T: Float>(
    g: &mut Graph<T>,
    net: &FeatureNet,
    p: &Binding,
    out: Var,
    gt: Var,
    weights: &LossWeights,
) -> Result<LossTerms> {
    weights.validate()?;
    let mse = mse_loss(g, out, gt)?;
    let perceptual = perceptual_loss(g, net, p, out, gt)?;
    let a = g.scale(mse, T::from_f64(weights.lambda1));
    let b = g.scale(perceptual, T::from_f64(weights.lambda2));
    let total = g.add(a, b)?;
    Ok(LossTerms { total, mse, perceptual })
}
