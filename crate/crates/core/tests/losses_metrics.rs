mod common;

use common::*;
use mistdrop::image_io::ImageRGB;
use mistdrop::losses::{mse_loss, perceptual_loss, total_loss, FeatureNet, FeatureNetSpec, LossWeights};
use mistdrop::metrics::{psnr, psnr_luma, ssim, PSNR_CAP_DB};
use mistdrop::tensor::{save_checkpoint, Graph, ParamStore, Tensor};
use mistdrop::Error;
use rand::Rng;

fn random_image(h: usize, w: usize, seed: u64) -> ImageRGB {
    let mut r = rng(seed);
    ImageRGB::new(h, w, (0..h * w * 3).map(|_| r.gen_range(0.0..1.0)).collect()).unwrap()
}

fn noisy(img: &ImageRGB, amp: f32, seed: u64) -> ImageRGB {
    let mut r = rng(seed);
    let px = img.pixels().iter().map(|&v| v + amp * r.gen_range(-1.0f32..1.0)).collect();
    ImageRGB::new(img.height(), img.width(), px).unwrap()
}

fn scalar(g: &Graph<f64>, v: mistdrop::tensor::Var) -> f64 {
    g.value(v).item()
}

#[test]
fn mse_examples_and_oracle() {
    let mut g = Graph::new();
    let a = g.constant(random_tensor(&[2, 3, 4, 5], &mut rng(1)));
    let z = mse_loss(&mut g, a, a).unwrap();
    assert_eq!(scalar(&g, z), 0.0);

    let shifted = g.add_scalar(a, 0.1);
    let m = mse_loss(&mut g, shifted, a).unwrap();
    assert!((scalar(&g, m) - 0.01).abs() < 1e-15);

    let x = random_tensor(&[1, 3, 6, 7], &mut rng(2));
    let y = random_tensor(&[1, 3, 6, 7], &mut rng(3));
    let mut acc = 0.0;
    for (p, q) in x.data().iter().zip(y.data()) {
        acc += (p - q) * (p - q);
    }
    let want = acc / x.len() as f64;
    let (xv, yv) = (g.constant(x), g.constant(y));
    let m = mse_loss(&mut g, xv, yv).unwrap();
    assert!((scalar(&g, m) - want).abs() <= 1e-15 * want.abs());

    let bad = g.constant(Tensor::zeros(&[1, 3, 6, 6]));
    assert!(matches!(mse_loss(&mut g, xv, bad), Err(Error::Shape { .. })));
}

/// Runs the feature net with the direct convolution oracle.
fn features_oracle(store: &ParamStore<f64>, spec: &FeatureNetSpec, x: &Tensor<f64>) -> Vec<f64> {
    let (n, mut c, mut h, mut w) = x.dims4("oracle").unwrap();
    let mut cur = x.data().to_vec();
    for (i, &cout) in spec.channels.iter().enumerate() {
        let wt = store.by_name(&format!("feat.conv{}.weight", i + 1)).unwrap().data();
        let b = store.by_name(&format!("feat.conv{}.bias", i + 1)).unwrap().data();
        let stride = if spec.stride2_layers.contains(&(i + 1)) { 2 } else { 1 };
        let (out, ho, wo) = conv2d_oracle(&cur, (n, c, h, w), wt, (cout, 3, 3), b, stride, 1, 1);
        cur = out.into_iter().map(|v| v.max(0.0)).collect();
        (c, h, w) = (cout, ho, wo);
    }
    cur
}

#[test]
fn perceptual_loss_examples_and_oracle() {
    let spec = FeatureNetSpec::default();
    let (net, store) = FeatureNet::new::<f64>(&spec).unwrap();
    assert_eq!(net.convs.len(), 7);
    let x = random_image(16, 20, 10).to_tensor::<f64>();
    let y = random_image(16, 20, 11).to_tensor::<f64>();

    let mut g = Graph::new();
    let p = store.bind(&mut g, false);
    let (xv, yv) = (g.constant(x.clone()), g.constant(y.clone()));
    let same = perceptual_loss(&mut g, &net, &p, xv, xv).unwrap();
    assert_eq!(scalar(&g, same), 0.0);
    let ab = perceptual_loss(&mut g, &net, &p, xv, yv).unwrap();
    let ba = perceptual_loss(&mut g, &net, &p, yv, xv).unwrap();
    assert_eq!(scalar(&g, ab), scalar(&g, ba));

    let fx = features_oracle(&store, &spec, &x);
    let fy = features_oracle(&store, &spec, &y);
    assert_eq!(fx.len(), 32 * 4 * 5);
    let want = fx.iter().zip(&fy).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / fx.len() as f64;
    assert!(want > 0.0);
    assert!((scalar(&g, ab) - want).abs() < 1e-6);
}

#[test]
fn feature_net_is_seeded_and_loadable() {
    let spec = FeatureNetSpec::default();
    let (_, a) = FeatureNet::new::<f64>(&spec).unwrap();
    let (_, b) = FeatureNet::new::<f64>(&spec).unwrap();
    assert_eq!(a.by_name("feat.conv7.weight"), b.by_name("feat.conv7.weight"));

    let (_, mut other) = FeatureNet::new::<f64>(&FeatureNetSpec { seed: 5, ..spec.clone() }).unwrap();
    assert_ne!(a.by_name("feat.conv1.weight"), other.by_name("feat.conv1.weight"));
    let id = other.id("feat.conv1.bias").unwrap();
    other.get_mut(id).data_mut()[0] = 0.25;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("feat.ckpt");
    save_checkpoint(&other, &path).unwrap();
    let (_, loaded) = FeatureNet::new::<f64>(&FeatureNetSpec {
        weights: Some(path),
        ..spec.clone()
    })
    .unwrap();
    for (name, t) in other.iter() {
        let got = loaded.by_name(name).unwrap();
        assert!(max_abs_diff(&got.to_f64_vec(), &t.to_f64_vec()) < 1e-7, "{name}");
    }

    let narrow = FeatureNetSpec {
        channels: vec![4, 4],
        weights: Some(dir.path().join("feat.ckpt")),
        ..spec
    };
    assert!(matches!(FeatureNet::new::<f64>(&narrow), Err(Error::CheckpointMismatch(_))));
}

#[test]
fn total_loss_recomposes() {
    let (net, store) = FeatureNet::new::<f64>(&FeatureNetSpec::default()).unwrap();
    let x = random_image(12, 12, 20).to_tensor::<f64>();
    let y = random_image(12, 12, 21).to_tensor::<f64>();
    let mut g = Graph::new();
    let p = store.bind(&mut g, false);
    let (xv, yv) = (g.constant(x), g.constant(y));

    let terms = total_loss(&mut g, &net, &p, xv, yv, &LossWeights::default()).unwrap();
    let mse = mse_loss(&mut g, xv, yv).unwrap();
    let per = perceptual_loss(&mut g, &net, &p, xv, yv).unwrap();
    let want = 1.0 * scalar(&g, mse) + 0.05 * scalar(&g, per);
    assert!((scalar(&g, terms.total) - want).abs() < 1e-12);
    assert_eq!(scalar(&g, terms.mse), scalar(&g, mse));
    assert_eq!(scalar(&g, terms.perceptual), scalar(&g, per));

    let no_per = LossWeights {
        lambda1: 1.0,
        lambda2: 0.0,
    };
    let t = total_loss(&mut g, &net, &p, xv, yv, &no_per).unwrap();
    assert_eq!(scalar(&g, t.total), scalar(&g, mse));
    let t = total_loss(&mut g, &net, &p, xv, xv, &LossWeights::default()).unwrap();
    assert_eq!(scalar(&g, t.total), 0.0);

    let negative = LossWeights {
        lambda1: 1.0,
        lambda2: -0.05,
    };
    assert!(matches!(total_loss(&mut g, &net, &p, xv, yv, &negative), Err(Error::Config(_))));
}

#[test]
fn total_loss_gradient_flows_through_frozen_features() {
    let (net, store) = FeatureNet::new::<f64>(&FeatureNetSpec::default()).unwrap();
    let out = random_image(12, 10, 30).to_tensor::<f64>();
    let gt = random_image(12, 10, 31).to_tensor::<f64>();
    let weights = LossWeights {
        lambda1: 1.0,
        lambda2: 5.0,
    };
    let report = grad_check(&[out], 1e-3, 64, 32, |g, v| {
        let p = store.bind(g, false);
        let gv = g.constant(gt.clone());
        total_loss(g, &net, &p, v[0], gv, &weights).unwrap().total
    });
    assert!(report.checked > 32);
    assert!(report.max_rel_err < 1e-4, "{}", report.max_rel_err);

    let mut g = Graph::new();
    let p = store.bind(&mut g, false);
    let o = g.leaf(random_image(12, 10, 33).to_tensor(), true);
    let gv = g.constant(random_image(12, 10, 34).to_tensor());
    let t = total_loss(&mut g, &net, &p, o, gv, &weights).unwrap();
    g.backward(t.total).unwrap();
    assert!(g.grad(o).is_some());
    assert!(p.grads(&g).iter().all(Option::is_none));
}

/// Independent luma conversion followed by scalar PSNR.
fn psnr_oracle(a: &ImageRGB, b: &ImageRGB) -> f64 {
    let luma = |img: &ImageRGB| -> Vec<f64> {
        img.pixels()
            .chunks(3)
            .map(|p| 255.0 * (0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64))
            .collect()
    };
    let (la, lb) = (luma(a), luma(b));
    let mut se = 0.0;
    for i in 0..la.len() {
        se += (la[i] - lb[i]).powi(2);
    }
    let mse = se / la.len() as f64;
    10.0 * (255.0f64.powi(2) / mse).log10()
}

#[test]
fn psnr_examples_and_oracle() {
    let a = random_image(9, 13, 40);
    assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP_DB);

    let gray = |v: f32| ImageRGB::filled(6, 6, [v / 255.0; 3]);
    let one = psnr(&gray(101.0), &gray(100.0)).unwrap();
    // pixels are stored as f32, so luma differs from 1 by ~1e-5
    assert!((one - 20.0 * 255.0f64.log10()).abs() < 1e-4, "{one}");
    assert!((one - 48.1308).abs() < 1e-4);
    assert!((psnr_luma(&[1.0, 2.0], &[2.0, 3.0]) - 48.130803608679).abs() < 1e-9);

    for seed in 0..10 {
        let x = random_image(10, 8, 100 + seed);
        let y = noisy(&x, 0.2, 200 + seed);
        let got = psnr(&x, &y).unwrap();
        assert!((got - psnr_oracle(&x, &y)).abs() < 1e-9);
        assert_eq!(got, psnr(&y, &x).unwrap());
    }
    assert!(matches!(psnr(&a, &random_image(9, 12, 1)), Err(Error::Shape { .. })));
}

#[test]
fn psnr_falls_with_noise_amplitude() {
    let x = random_image(24, 24, 50);
    let vals: Vec<f64> = [0.02, 0.08, 0.3].iter().map(|&amp| psnr(&x, &noisy(&x, amp, 51)).unwrap()).collect();
    assert!(vals[0] > vals[1] && vals[1] > vals[2], "{vals:?}");
}

/// Literal SSIM: every fully contained 11×11 window, explicit Gaussian weights.
fn ssim_oracle(a: &ImageRGB, b: &ImageRGB) -> f64 {
    let luma = |img: &ImageRGB| -> Vec<f64> {
        img.pixels()
            .chunks(3)
            .map(|p| 255.0 * (0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64))
            .collect()
    };
    let (la, lb) = (luma(a), luma(b));
    let (h, w) = (a.height(), a.width());
    let mut win = [[0.0; 11]; 11];
    let mut total = 0.0;
    for (i, row) in win.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (dy, dx) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(dy * dy + dx * dx) / (2.0 * 1.5 * 1.5)).exp();
            total += *v;
        }
    }
    let (c1, c2) = ((0.01f64 * 255.0).powi(2), (0.03f64 * 255.0).powi(2));
    let mut sum = 0.0;
    let mut count = 0;
    for y0 in 0..=h - 11 {
        for x0 in 0..=w - 11 {
            let (mut ma, mut mb) = (0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let k = win[i][j] / total;
                    ma += k * la[(y0 + i) * w + x0 + j];
                    mb += k * lb[(y0 + i) * w + x0 + j];
                }
            }
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let k = win[i][j] / total;
                    let (p, q) = (la[(y0 + i) * w + x0 + j] - ma, lb[(y0 + i) * w + x0 + j] - mb);
                    va += k * p * p;
                    vb += k * q * q;
                    cov += k * p * q;
                }
            }
            sum += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    sum / count as f64
}

#[test]
fn ssim_examples_and_oracle() {
    let a = random_image(16, 16, 60);
    assert_eq!(ssim(&a, &a).unwrap(), 1.0);
    let c = ImageRGB::filled(12, 12, [128.0 / 255.0; 3]);
    assert!((ssim(&c, &c.clone()).unwrap() - 1.0).abs() < 1e-12);

    for seed in 0..20 {
        let x = random_image(16, 16, 300 + seed);
        let y = if seed % 2 == 0 { random_image(16, 16, 400 + seed) } else { noisy(&x, 0.15, 500 + seed) };
        let got = ssim(&x, &y).unwrap();
        assert!((got - ssim_oracle(&x, &y)).abs() < 1e-6, "seed {seed}");
        assert!((got - ssim(&y, &x).unwrap()).abs() < 1e-12);
        assert!((-1.0..=1.0).contains(&got));
    }

    let eps = a.map(|v| if v < 0.5 { v + 1e-3 } else { v - 1e-3 });
    assert!(ssim(&a, &eps).unwrap() > 0.9999);
    assert!(matches!(ssim(&ImageRGB::filled(10, 20, [0.5; 3]), &ImageRGB::filled(10, 20, [0.5; 3])), Err(Error::Shape { .. })));
}
