mod common;

use common::rng;
use mistdrop::augment::{augment, AugmentConfig, AugmentDraw};
use mistdrop::dataset::synth_balanced;
use mistdrop::image_io::ImageRGB;
use mistdrop::losses::{FeatureNet, FeatureNetSpec};
use mistdrop::networks::{build_ablation, compute_cam, Classifier, ClassifierConfig, Generator, GeneratorConfig, Variant};
use mistdrop::optim::{Adam, AdamConfig};
use mistdrop::synth::{ClassLabel, SynthParams};
use mistdrop::tensor::{Graph, ParamStore, Tensor};
use mistdrop::train::{
    classification_scores, generator_batch, train_classifier, train_generator, CamSource, ClassifierTrainConfig, GeneratorTrainConfig,
    Pair,
};
use mistdrop::Error;
use rand::Rng;

fn quadratic_run(lr: f64, steps: usize) -> (f64, u64) {
    let mut store = ParamStore::<f64>::new();
    let x = store.add("x", Tensor::scalar(0.0));
    let mut adam = Adam::new(AdamConfig::with_lr(lr), &store).unwrap();
    for _ in 0..steps {
        let mut g = Graph::new();
        let p = store.bind(&mut g, true);
        let d = g.add_scalar(p.var(x), -3.0);
        let sq = g.mul(d, d).unwrap();
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        adam.step(&mut store, &p.grads(&g)).unwrap();
    }
    (store.get(x).item(), adam.steps_taken())
}

#[test]
fn adam_converges_on_a_quadratic() {
    let (x, steps) = quadratic_run(0.1, 500);
    assert_eq!(steps, 500);
    assert!((x - 3.0).abs() < 1e-2, "{x}");
    assert_eq!(quadratic_run(0.1, 500).0.to_bits(), x.to_bits());
}

#[test]
fn adam_edge_cases() {
    let mut store = ParamStore::<f64>::new();
    let a = store.add("a", Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
    store.add("b", Tensor::scalar(4.0));
    let before = store.clone();

    let mut adam = Adam::new(AdamConfig::with_lr(0.1), &store).unwrap();
    let zeros = vec![Some(Tensor::zeros(&[3])), Some(Tensor::zeros(&[1]))];
    adam.step(&mut store, &zeros).unwrap();
    assert_eq!(adam.steps_taken(), 1);
    assert_eq!(store.get(a), before.get(a));

    let mut frozen = Adam::new(AdamConfig::with_lr(0.0), &store).unwrap();
    let grads = vec![Some(Tensor::full(&[3], 7.0)), Some(Tensor::full(&[1], -1.0))];
    for _ in 0..5 {
        frozen.step(&mut store, &grads).unwrap();
    }
    for (name, t) in store.iter() {
        assert_eq!(Some(t), before.by_name(name));
    }

    let err = adam.step(&mut store, &[Some(Tensor::zeros(&[3])), None]).unwrap_err();
    assert!(matches!(&err, Error::MissingGradient(n) if n == "b"), "{err}");
    assert_eq!(adam.steps_taken(), 1);
    assert!(Adam::new(AdamConfig { beta1: 1.0, ..AdamConfig::default() }, &store).is_err());
}

fn random_image(h: usize, w: usize, seed: u64) -> ImageRGB {
    let mut r = rng(seed);
    ImageRGB::new(h, w, (0..h * w * 3).map(|_| r.gen_range(0.0..1.0)).collect()).unwrap()
}

#[test]
fn augmentation_identities() {
    let a = random_image(6, 9, 1);
    let b = random_image(6, 9, 2);
    for seed in 0..5 {
        let (x, y) = augment(&a, &b, &AugmentConfig::identity(), seed);
        assert_eq!((&x, &y), (&a, &b));
    }
    let neutral_photometrics = AugmentConfig {
        flip_prob: 0.0,
        rotate_prob: 0.0,
        ..AugmentConfig::identity()
    };
    let mut r = rng(3);
    for _ in 0..5 {
        assert_eq!(neutral_photometrics.draw(&mut r).apply(&a), a);
    }
    let flip = AugmentDraw {
        flip: true,
        rotate: false,
        brightness: 0.0,
        contrast: 1.0,
        gamma: 1.0,
    };
    assert_eq!(flip.apply(&flip.apply(&a)), a);
    let rot = AugmentDraw { flip: false, rotate: true, ..flip };
    assert_eq!(rot.apply(&rot.apply(&a)), a);
    assert_ne!(rot.apply(&a), a);
}

#[test]
fn augmentation_keeps_pairs_aligned() {
    let (h, w) = (8, 10);
    let mark = (1, 2);
    let degraded = ImageRGB::from_fn(h, w, |y, x| if (y, x) == mark { [1.0, 0.0, 0.0] } else { [0.3, 0.3, 0.3] });
    let gt = ImageRGB::from_fn(h, w, |y, x| if (y, x) == mark { [0.0, 0.0, 1.0] } else { [0.6, 0.6, 0.6] });
    let cfg = AugmentConfig::default();
    let mut seen = std::collections::HashSet::new();
    for seed in 0..24 {
        let (d, g) = augment(&degraded, &gt, &cfg, seed);
        let find = |img: &ImageRGB, ch: usize| {
            (0..h)
                .flat_map(|y| (0..w).map(move |x| (y, x)))
                .max_by(|&p, &q| {
                    let s = |(y, x): (usize, usize)| img.get(y, x)[ch] - img.get(y, x)[1];
                    s(p).partial_cmp(&s(q)).unwrap()
                })
                .unwrap()
        };
        let (pd, pg) = (find(&d, 0), find(&g, 2));
        assert_eq!(pd, pg, "seed {seed}");
        seen.insert(pd);
        assert!(d.pixels().iter().chain(g.pixels()).all(|&v| (0.0..=1.0).contains(&v)));
    }
    assert_eq!(seen.len(), 4, "all four flip/rotate combinations occur");
}

fn toy_classifier_set(seed: u64) -> Vec<(ImageRGB, ClassLabel)> {
    synth_balanced("train", 12, (32, 32), &SynthParams::default(), seed)
        .unwrap()
        .into_iter()
        .map(|p| (p.degraded, p.label))
        .collect()
}

#[test]
fn classifier_loss_trends_down_and_is_reproducible() {
    let data = toy_classifier_set(10);
    let cfg = ClassifierTrainConfig {
        steps: 10,
        batch_size: 12,
        augment: AugmentConfig::identity(),
        ..ClassifierTrainConfig::default()
    };
    let run = || {
        let mut store = ParamStore::<f32>::new();
        let cls = Classifier::new(&ClassifierConfig::default(), &mut store, &mut rng(11)).unwrap();
        train_classifier(&cls, &mut store, &data, &cfg, |_| {}).unwrap()
    };
    let logs = run();
    let rises = logs.windows(2).filter(|w| w[1].loss >= w[0].loss).count();
    assert!(rises <= 2, "{:?}", logs.iter().map(|l| l.loss).collect::<Vec<_>>());
    assert!(logs[9].loss < logs[0].loss);
    assert!(logs.iter().all(|l| l.accuracy.is_some()), "every full-batch step closes an epoch");
    assert_eq!(run(), logs);
}

#[test]
fn classification_score_examples() {
    use ClassLabel::*;
    let (acc, f1) = classification_scores(&[Clean, RaindropOnly, MistAndRaindrop], &[Clean, RaindropOnly, MistAndRaindrop]);
    assert_eq!((acc, f1), (1.0, 1.0));
    let (acc, f1) = classification_scores(&[Clean, Clean, RaindropOnly, RaindropOnly], &[Clean, RaindropOnly, RaindropOnly, RaindropOnly]);
    assert_eq!(acc, 0.75);
    // clean: 2*1/(2+1), raindrop: 2*2/(2+3)
    assert!((f1 - (2.0 / 3.0 + 0.8) / 2.0).abs() < 1e-12);
}

fn tiny_pairs() -> Vec<Pair> {
    let params = SynthParams {
        class_proportions: [0.0, 1.0, 1.0],
        ..SynthParams::default()
    };
    synth_balanced("train", 4, (16, 16), &params, 20).unwrap()[..]
        .iter()
        .cloned()
        .map(|mut p| {
            if p.label == ClassLabel::Clean {
                p.label = ClassLabel::RaindropOnly;
            }
            p
        })
        .collect()
}

fn tiny_generator(variant: Variant) -> (Generator, ParamStore<f32>) {
    let base = GeneratorConfig {
        base_channels: 4,
        ..GeneratorConfig::default()
    };
    let mut store = ParamStore::new();
    let gen = Generator::new(&build_ablation(&base, variant).unwrap(), &mut store, &mut rng(21)).unwrap();
    (gen, store)
}

#[test]
fn generator_training_reduces_loss() {
    let pairs = tiny_pairs();
    let (fnet, fstore) = FeatureNet::new::<f32>(&FeatureNetSpec::default()).unwrap();
    let mut cstore = ParamStore::<f32>::new();
    let cls = Classifier::new(&ClassifierConfig::default(), &mut cstore, &mut rng(22)).unwrap();
    let cams = Some(CamSource {
        classifier: &cls,
        store: &cstore,
    });
    let (gen, mut store) = tiny_generator(Variant::Full);
    let cfg = GeneratorTrainConfig {
        steps: 200,
        val_every: 100,
        augment: AugmentConfig::identity(),
        ..GeneratorTrainConfig::default()
    };
    let logs = train_generator(&gen, &mut store, &pairs, &pairs[..2], cams, (&fnet, &fstore), &cfg, |_| {}).unwrap();
    assert!(logs[199].loss_total < logs[0].loss_total, "{} vs {}", logs[199].loss_total, logs[0].loss_total);
    let validated: Vec<usize> = logs.iter().filter(|l| l.val_psnr.is_some()).map(|l| l.step).collect();
    assert_eq!(validated, vec![100, 200]);
    for l in &logs {
        assert!((l.loss_total - (l.loss_mse + 0.05 * l.loss_per)).abs() < 1e-6);
    }
}

#[test]
fn cam_requirements_follow_the_variant() {
    let pairs = tiny_pairs();
    let (fnet, fstore) = FeatureNet::new::<f32>(&FeatureNetSpec::default()).unwrap();
    let cfg = GeneratorTrainConfig {
        steps: 3,
        ..GeneratorTrainConfig::default()
    };
    let (gen, mut store) = tiny_generator(Variant::Full);
    let err = train_generator(&gen, &mut store, &pairs, &[], None, (&fnet, &fstore), &cfg, |_| {}).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");

    let (gen, mut store) = tiny_generator(Variant::NonCam);
    let logs = train_generator(&gen, &mut store, &pairs, &[], None, (&fnet, &fstore), &cfg, |_| {}).unwrap();
    assert_eq!(logs.len(), 3);
}

#[test]
fn batch_attention_is_computed_from_augmented_inputs() {
    let pairs = tiny_pairs();
    let mut cstore = ParamStore::<f32>::new();
    let cls = Classifier::new(&ClassifierConfig::default(), &mut cstore, &mut rng(30)).unwrap();
    let cams = Some(CamSource {
        classifier: &cls,
        store: &cstore,
    });
    let (gen, _) = tiny_generator(Variant::Full);
    let draw = AugmentDraw {
        flip: true,
        rotate: false,
        brightness: 0.05,
        contrast: 1.1,
        gamma: 0.9,
    };
    let (x, y) = generator_batch(&gen, cams, &[&pairs[0]], &[draw]).unwrap();
    assert_eq!(x.shape(), &[1, 4, 16, 16]);
    let augmented = draw.apply(&pairs[0].degraded);
    let want = compute_cam(&cls, &cstore, &augmented, None).unwrap().attention;
    assert_eq!(&x.data()[3 * 256..], &want[..]);
    assert_eq!(&x.data()[..3 * 256], augmented.to_tensor::<f32>().data());
    assert_eq!(y.data(), draw.apply(&pairs[0].gt).to_tensor::<f32>().data());
}
