//! Training loops for the classifier and the generator, and evaluation helpers.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{AugmentConfig, AugmentDraw};
use crate::error::{Error, Result};
use crate::image_io::ImageRGB;
use crate::losses::{total_loss, FeatureNet, LossWeights};
use crate::metrics::{psnr, ssim};
use crate::networks::{compute_cam, Classifier, Generator, CLASS_COUNT};
use crate::optim::{Adam, AdamConfig};
use crate::synth::ClassLabel;
use crate::tensor::{Graph, ParamStore, Tensor};

/// One ground-truth / degraded pair with its degradation class.
#[derive(Clone, Debug)]
pub struct Pair {
    pub id: String,
    pub degraded: ImageRGB,
    pub gt: ImageRGB,
    pub label: ClassLabel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub augment: AugmentConfig,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch_size: 8,
            lr: 1e-4,
            seed: 0,
            augment: AugmentConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub loss: LossWeights,
    pub augment: AugmentConfig,
    /// Validation interval in steps; the last step is always validated.
    pub val_every: usize,
}

impl Default for GeneratorTrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch_size: 4,
            lr: 1e-3,
            seed: 0,
            loss: LossWeights::default(),
            augment: AugmentConfig::default(),
            val_every: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierLog {
    pub step: usize,
    pub loss: f64,
    /// Training-set scores, filled at epoch ends.
    pub accuracy: Option<f64>,
    pub f1: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorLog {
    pub step: usize,
    pub loss_total: f64,
    pub loss_mse: f64,
    pub loss_per: f64,
    pub val_psnr: Option<f64>,
    pub val_ssim: Option<f64>,
}

/// Shuffled passes over `0..n`, `batch` indices at a time.
struct Batches {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
    rng: ChaCha8Rng,
}

impl Batches {
    fn new(n: usize, batch: usize, rng: ChaCha8Rng) -> Self {
        Self {
            order: (0..n).collect(),
            pos: n,
            batch: batch.min(n),
            rng,
        }
    }

    /// Next batch and whether it closes an epoch.
    fn next(&mut self) -> (Vec<usize>, bool) {
        if self.pos >= self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let end = (self.pos + self.batch).min(self.order.len());
        let idx = self.order[self.pos..end].to_vec();
        self.pos = end;
        (idx, end == self.order.len())
    }
}

fn check_batch(batch: usize, steps: usize) -> Result<()> {
    if batch == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    if steps == 0 {
        return Err(Error::Config("steps must be positive".into()));
    }
    Ok(())
}

/// Accuracy and macro F1 (over classes that occur as truth or prediction).
pub fn classification_scores(truth: &[ClassLabel], predicted: &[ClassLabel]) -> (f64, f64) {
    let n = truth.len().max(1) as f64;
    let correct = truth.iter().zip(predicted).filter(|(a, b)| a == b).count();
    let mut f1_sum = 0.0;
    let mut classes = 0;
    for c in ClassLabel::ALL {
        let tp = truth.iter().zip(predicted).filter(|&(&t, &p)| t == c && p == c).count() as f64;
        let t_count = truth.iter().filter(|&&t| t == c).count() as f64;
        let p_count = predicted.iter().filter(|&&p| p == c).count() as f64;
        if t_count + p_count == 0.0 {
            continue;
        }
        classes += 1;
        f1_sum += 2.0 * tp / (t_count + p_count);
    }
    (correct as f64 / n, if classes == 0 { 0.0 } else { f1_sum / classes as f64 })
}

pub fn predict(classifier: &Classifier, store: &ParamStore<f32>, images: &[&ImageRGB]) -> Result<Vec<ClassLabel>> {
    images
        .iter()
        .map(|img| {
            let p = classifier.classify(store, img)?;
            let best = (0..CLASS_COUNT).fold(0, |b, i| if p[i] > p[b] { i } else { b });
            Ok(ClassLabel::from_index(best).expect("class index"))
        })
        .collect()
}

/// Cross-entropy training with Adam. Calls `on_log` after every step.
pub fn train_classifier(
    classifier: &Classifier,
    store: &mut ParamStore<f32>,
    data: &[(ImageRGB, ClassLabel)],
    config: &ClassifierTrainConfig,
    mut on_log: impl FnMut(&ClassifierLog),
) -> Result<Vec<ClassifierLog>> {
    check_batch(config.batch_size, config.steps)?;
    config.augment.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("classifier training set"));
    }
    for c in ClassLabel::ALL {
        if !data.iter().any(|(_, l)| *l == c) {
            log::warn!("class `{c}` is absent from the classifier training data");
        }
    }
    let mut adam = Adam::new(AdamConfig::with_lr(config.lr), store)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut batches = Batches::new(data.len(), config.batch_size, ChaCha8Rng::seed_from_u64(config.seed ^ 0xb47c));
    let truth: Vec<ClassLabel> = data.iter().map(|(_, l)| *l).collect();
    let images: Vec<&ImageRGB> = data.iter().map(|(i, _)| i).collect();
    let mut logs = Vec::with_capacity(config.steps);
    for step in 1..=config.steps {
        let (idx, epoch_end) = batches.next();
        let augmented: Vec<ImageRGB> = idx.iter().map(|&i| config.augment.draw(&mut rng).apply(&data[i].0)).collect();
        let refs: Vec<&ImageRGB> = augmented.iter().collect();
        let targets: Vec<usize> = idx.iter().map(|&i| data[i].1.index()).collect();

        let mut g = Graph::new();
        let p = store.bind(&mut g, true);
        let x = g.constant(ImageRGB::batch_tensor(&refs)?);
        let (logits, _) = classifier.forward(&mut g, &p, x)?;
        let loss = g.cross_entropy(logits, &targets)?;
        let loss_value = g.value(loss).item() as f64;
        g.backward(loss)?;
        adam.step(store, &p.grads(&g))?;

        let (accuracy, f1) = if epoch_end || step == config.steps {
            let (a, f) = classification_scores(&truth, &predict(classifier, store, &images)?);
            (Some(a), Some(f))
        } else {
            (None, None)
        };
        let rec = ClassifierLog {
            step,
            loss: loss_value,
            accuracy,
            f1,
        };
        on_log(&rec);
        logs.push(rec);
    }
    Ok(logs)
}

/// Frozen classifier used to compute attention maps for the generator.
#[derive(Clone, Copy)]
pub struct CamSource<'a> {
    pub classifier: &'a Classifier,
    pub store: &'a ParamStore<f32>,
}

fn cam_for(generator: &Generator, cams: Option<CamSource<'_>>, image: &ImageRGB) -> Result<Option<Vec<f32>>> {
    if !generator.config.use_cam {
        return Ok(None);
    }
    let src = cams.ok_or_else(|| Error::Config("generator uses CAM attention but no classifier was provided".into()))?;
    Ok(Some(compute_cam(src.classifier, src.store, image, None)?.attention))
}

/// Restores `image`, computing its attention map first when the generator needs one.
/// Odd extents are reflect-padded for the forward pass and cropped back.
pub fn restore_image(generator: &Generator, store: &ParamStore<f32>, cams: Option<CamSource<'_>>, image: &ImageRGB) -> Result<ImageRGB> {
    let (h, w) = (image.height(), image.width());
    let padded = if h % 2 == 1 || w % 2 == 1 { image.pad_reflect_even() } else { image.clone() };
    let cam = cam_for(generator, cams, &padded)?;
    let out = generator.restore(store, &padded, cam.as_deref())?;
    if (out.height(), out.width()) == (h, w) {
        Ok(out)
    } else {
        out.crop(h, w)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairScore {
    pub id: String,
    pub psnr_db: f64,
    pub ssim: f64,
}

pub fn score_pairs(pairs: &[(String, ImageRGB, ImageRGB)]) -> Result<Vec<PairScore>> {
    pairs
        .iter()
        .map(|(id, out, gt)| {
            Ok(PairScore {
                id: id.clone(),
                psnr_db: psnr(out, gt)?,
                ssim: ssim(out, gt)?,
            })
        })
        .collect()
}

/// PSNR/SSIM of the restored degraded images against ground truth.
pub fn evaluate_generator(
    generator: &Generator,
    store: &ParamStore<f32>,
    cams: Option<CamSource<'_>>,
    pairs: &[Pair],
) -> Result<Vec<PairScore>> {
    let restored = pairs
        .iter()
        .map(|p| Ok((p.id.clone(), restore_image(generator, store, cams, &p.degraded)?, p.gt.clone())))
        .collect::<Result<Vec<_>>>()?;
    score_pairs(&restored)
}

pub fn mean_scores(scores: &[PairScore]) -> (f64, f64) {
    let n = scores.len().max(1) as f64;
    (
        scores.iter().map(|s| s.psnr_db).sum::<f64>() / n,
        scores.iter().map(|s| s.ssim).sum::<f64>() / n,
    )
}

/// Input and target tensors for one step: each pair is augmented by its draw and
/// the attention map is computed from the augmented degraded image.
pub fn generator_batch(
    generator: &Generator,
    cams: Option<CamSource<'_>>,
    pairs: &[&Pair],
    draws: &[AugmentDraw],
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let degraded: Vec<ImageRGB> = pairs.iter().zip(draws).map(|(p, d)| d.apply(&p.degraded)).collect();
    let gts: Vec<ImageRGB> = pairs.iter().zip(draws).map(|(p, d)| d.apply(&p.gt)).collect();
    let maps = degraded.iter().map(|d| cam_for(generator, cams, d)).collect::<Result<Vec<_>>>()?;
    let map_refs: Vec<&[f32]> = maps.iter().flatten().map(Vec::as_slice).collect();
    let x = generator.input_tensor::<f32>(&degraded.iter().collect::<Vec<_>>(), &map_refs)?;
    let y = ImageRGB::batch_tensor::<f32>(&gts.iter().collect::<Vec<_>>())?;
    Ok((x, y))
}

/// Adam on the weighted pixel + perceptual loss. Attention maps are recomputed
/// from every augmented degraded image. Calls `on_log` after every step.
#[allow(clippy::too_many_arguments)]
pub fn train_generator(
    generator: &Generator,
    store: &mut ParamStore<f32>,
    train: &[Pair],
    val: &[Pair],
    cams: Option<CamSource<'_>>,
    features: (&FeatureNet, &ParamStore<f32>),
    config: &GeneratorTrainConfig,
    mut on_log: impl FnMut(&GeneratorLog),
) -> Result<Vec<GeneratorLog>> {
    check_batch(config.batch_size, config.steps)?;
    config.augment.validate()?;
    config.loss.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("generator training set"));
    }
    if generator.config.use_cam && cams.is_none() {
        return Err(Error::Config("generator uses CAM attention but no classifier was provided".into()));
    }
    let (featnet, feat_store) = features;
    let mut adam = Adam::new(AdamConfig::with_lr(config.lr), store)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut batches = Batches::new(train.len(), config.batch_size, ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e4e));
    let mut logs = Vec::with_capacity(config.steps);
    for step in 1..=config.steps {
        let (idx, _) = batches.next();
        let batch: Vec<&Pair> = idx.iter().map(|&i| &train[i]).collect();
        let draws: Vec<AugmentDraw> = idx.iter().map(|_| config.augment.draw(&mut rng)).collect();
        let (x, y) = generator_batch(generator, cams, &batch, &draws)?;

        let mut g = Graph::new();
        let p = store.bind(&mut g, true);
        let fp = feat_store.bind(&mut g, false);
        let xv = g.constant(x);
        let yv = g.constant(y);
        let out = generator.forward(&mut g, &p, xv)?;
        let terms = total_loss(&mut g, featnet, &fp, out, yv, &config.loss)?;
        let item = |v| g.value(v).item() as f64;
        let (loss_total, loss_mse, loss_per) = (item(terms.total), item(terms.mse), item(terms.perceptual));
        g.backward(terms.total)?;
        adam.step(store, &p.grads(&g))?;

        let validate = !val.is_empty() && ((config.val_every > 0 && step % config.val_every == 0) || step == config.steps);
        let (val_psnr, val_ssim) = if validate {
            let (ps, ss) = mean_scores(&evaluate_generator(generator, store, cams, val)?);
            (Some(ps), Some(ss))
        } else {
            (None, None)
        };
        let rec = GeneratorLog {
            step,
            loss_total,
            loss_mse,
            loss_per,
            val_psnr,
            val_ssim,
        };
        on_log(&rec);
        logs.push(rec);
    }
    Ok(logs)
}
