//! Luminance PSNR and SSIM.

use crate::error::{Error, Result};
use crate::image_io::{rgb_to_luma, ImageRGB};

/// Reported for identical images, where the ratio is unbounded.
pub const PSNR_CAP_DB: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = (0.01 * 255.0) * (0.01 * 255.0);
pub const SSIM_C2: f64 = (0.03 * 255.0) * (0.03 * 255.0);

fn same_size(op: &'static str, a: &ImageRGB, b: &ImageRGB) -> Result<()> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(Error::shape(
            op,
            format!("{}x{} vs {}x{}", a.height(), a.width(), b.height(), b.width()),
        ));
    }
    Ok(())
}

/// PSNR in dB between two luma planes on the 0..255 scale, capped at [`PSNR_CAP_DB`].
pub fn psnr_luma(a: &[f64], b: &[f64]) -> f64 {
    let mse = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * (255.0 * 255.0 / mse).log10()).min(PSNR_CAP_DB)
}

pub fn psnr(out: &ImageRGB, gt: &ImageRGB) -> Result<f64> {
    same_size("psnr", out, gt)?;
    Ok(psnr_luma(&rgb_to_luma(out), &rgb_to_luma(gt)))
}

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Valid-region separable filtering of an `h`×`w` plane.
fn filter_valid(src: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * src[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM over all fully contained windows of two `h`×`w` luma planes.
pub fn ssim_luma(a: &[f64], b: &[f64], h: usize, w: usize) -> Result<f64> {
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::shape(
            "ssim",
            format!("{h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"),
        ));
    }
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<f64>>();
    let mu_a = filter_valid(a, h, w, &taps);
    let mu_b = filter_valid(b, h, w, &taps);
    let aa = filter_valid(&prod(a, a), h, w, &taps);
    let bb = filter_valid(&prod(b, b), h, w, &taps);
    let ab = filter_valid(&prod(a, b), h, w, &taps);
    let mut acc = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        acc += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2)) / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
    }
    Ok(acc / mu_a.len() as f64)
}

pub fn ssim(out: &ImageRGB, gt: &ImageRGB) -> Result<f64> {
    same_size("ssim", out, gt)?;
    ssim_luma(&rgb_to_luma(out), &rgb_to_luma(gt), out.height(), out.width())
}
