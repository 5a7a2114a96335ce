//! RGB images in `[0, 1]`, PNG round-trips, luma and resampling.

use std::path::Path;

use image::{ColorType, DynamicImage, ImageBuffer, Luma, Rgb};

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// BT.601 luma weights in thousandths, applied to full-range RGB.
pub const LUMA_WEIGHTS_PER_MILLE: [f64; 3] = [299.0, 587.0, 114.0];

/// Height×width×3 image with interleaved components in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageRGB {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResizeKind {
    Bilinear,
    Bicubic,
}

impl ImageRGB {
    /// Builds an image, clamping every component into `[0, 1]`.
    pub fn new(height: usize, width: usize, mut pixels: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Empty("ImageRGB"));
        }
        if pixels.len() != height * width * 3 {
            return Err(Error::shape(
                "ImageRGB",
                format!("{height}x{width}x3 needs {} values, got {}", height * width * 3, pixels.len()),
            ));
        }
        pixels.iter_mut().for_each(|v| *v = clamp01(*v));
        Ok(Self { height, width, pixels })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let pixels = (0..height * width).flat_map(|_| rgb.map(clamp01)).collect();
        Self { height, width, pixels }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> [f32; 3]) -> Self {
        let mut pixels = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                pixels.extend(f(y, x).map(clamp01));
            }
        }
        Self { height, width, pixels }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// Applies `f` to every component and clamps the result.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            height: self.height,
            width: self.width,
            pixels: self.pixels.iter().map(|&v| clamp01(f(v))).collect(),
        }
    }

    pub fn flip_horizontal(&self) -> Self {
        Self::from_fn(self.height, self.width, |y, x| self.get(y, self.width - 1 - x))
    }

    pub fn flip_vertical(&self) -> Self {
        Self::from_fn(self.height, self.width, |y, x| self.get(self.height - 1 - y, x))
    }

    pub fn rotate180(&self) -> Self {
        Self::from_fn(self.height, self.width, |y, x| self.get(self.height - 1 - y, self.width - 1 - x))
    }

    /// Mirrors the last row/column (without repeating the edge) until both extents
    /// are even; 1-pixel extents repeat the edge.
    pub fn pad_reflect_even(&self) -> Self {
        let (h, w) = (self.height, self.width);
        let mirror = |i: usize, n: usize| if i < n { i } else { (2 * n).saturating_sub(i + 2) };
        Self::from_fn(h + h % 2, w + w % 2, |y, x| self.get(mirror(y, h), mirror(x, w)))
    }

    /// Top-left `height`×`width` window.
    pub fn crop(&self, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 || height > self.height || width > self.width {
            return Err(Error::shape(
                "crop",
                format!("{height}x{width} from {}x{}", self.height, self.width),
            ));
        }
        Ok(Self::from_fn(height, width, |y, x| self.get(y, x)))
    }

    /// Planar `[1, 3, H, W]` tensor.
    pub fn to_tensor<T: Float>(&self) -> Tensor<T> {
        let plane = self.height * self.width;
        let mut data = vec![T::zero(); 3 * plane];
        for (i, px) in self.pixels.chunks(3).enumerate() {
            for c in 0..3 {
                data[c * plane + i] = T::from_f64(px[c] as f64);
            }
        }
        Tensor::new(vec![1, 3, self.height, self.width], data).expect("image tensor shape")
    }

    /// Stacks images of equal size into `[N, 3, H, W]`.
    pub fn batch_tensor<T: Float>(images: &[&ImageRGB]) -> Result<Tensor<T>> {
        let first = images.first().ok_or(Error::Empty("batch_tensor"))?;
        let (h, w) = (first.height, first.width);
        let mut data = Vec::with_capacity(images.len() * 3 * h * w);
        for img in images {
            if (img.height, img.width) != (h, w) {
                return Err(Error::shape(
                    "batch_tensor",
                    format!("{}x{} vs {h}x{w}", img.height, img.width),
                ));
            }
            data.extend(img.to_tensor::<T>().into_data());
        }
        Tensor::new(vec![images.len(), 3, h, w], data)
    }

    /// Extracts sample `index` of an `[N, 3, H, W]` tensor, clamping into `[0, 1]`.
    pub fn from_tensor<T: Float>(t: &Tensor<T>, index: usize) -> Result<Self> {
        let (n, c, h, w) = t.dims4("ImageRGB::from_tensor")?;
        if c != 3 || index >= n {
            return Err(Error::shape(
                "ImageRGB::from_tensor",
                format!("need a 3-channel tensor with sample {index}, got {:?}", t.shape()),
            ));
        }
        let plane = h * w;
        let src = &t.data()[index * 3 * plane..(index + 1) * 3 * plane];
        let mut pixels = Vec::with_capacity(3 * plane);
        for i in 0..plane {
            for ch in 0..3 {
                pixels.push(src[ch * plane + i].as_f64() as f32);
            }
        }
        Self::new(h, w, pixels)
    }
}

fn clamp01(v: f32) -> f32 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0)
    }
}

fn to_byte(v: f32) -> u8 {
    (clamp01(v) * 255.0).round() as u8
}

/// Reads an 8-bit RGB or RGBA PNG; alpha is dropped.
pub fn load_png(path: &Path) -> Result<ImageRGB> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let rgb = match img.color() {
        ColorType::Rgb8 | ColorType::Rgba8 => img.to_rgb8(),
        other => {
            return Err(Error::UnsupportedImage {
                path: path.to_path_buf(),
                reason: format!("expected 8-bit RGB or RGBA, found {other:?}"),
            })
        }
    };
    let (w, h) = rgb.dimensions();
    let pixels = rgb.into_raw().into_iter().map(|b| b as f32 / 255.0).collect();
    ImageRGB::new(h as usize, w as usize, pixels)
}

/// Writes an 8-bit RGB PNG, mapping `v` to `round(255 v)`.
pub fn save_png(image: &ImageRGB, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = image.pixels.iter().map(|&v| to_byte(v)).collect();
    let buf: ImageBuffer<Rgb<u8>, _> =
        ImageBuffer::from_raw(image.width as u32, image.height as u32, bytes).expect("buffer size");
    DynamicImage::ImageRgb8(buf).save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes an H×W map in `[0, 1]` as 8-bit grayscale, 0 black and 1 white.
pub fn save_gray_png(map: &[f32], height: usize, width: usize, path: &Path) -> Result<()> {
    if map.len() != height * width {
        return Err(Error::shape("save_gray_png", format!("{} values for {height}x{width}", map.len())));
    }
    let bytes: Vec<u8> = map.iter().map(|&v| to_byte(v)).collect();
    let buf: ImageBuffer<Luma<u8>, _> =
        ImageBuffer::from_raw(width as u32, height as u32, bytes).expect("buffer size");
    DynamicImage::ImageLuma8(buf).save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Full-range luma `255 (0.299 R + 0.587 G + 0.114 B)`, row-major H×W.
pub fn rgb_to_luma(image: &ImageRGB) -> Vec<f64> {
    image
        .pixels
        .chunks(3)
        .map(|p| {
            let w = LUMA_WEIGHTS_PER_MILLE;
            (w[0] * p[0] as f64 + w[1] * p[1] as f64 + w[2] * p[2] as f64) * 255.0 / 1000.0
        })
        .collect()
}

/// Separable resampling with half-pixel centers and clamp-to-edge borders.
pub fn resize(image: &ImageRGB, new_h: usize, new_w: usize, kind: ResizeKind) -> Result<ImageRGB> {
    if new_h == 0 || new_w == 0 {
        return Err(Error::Empty("resize target"));
    }
    let planes: Vec<Vec<f64>> = (0..3)
        .map(|c| image.pixels.iter().skip(c).step_by(3).map(|&v| v as f64).collect())
        .collect();
    let out: Vec<Vec<f64>> = planes
        .iter()
        .map(|p| resize_plane(p, image.height, image.width, new_h, new_w, kind))
        .collect();
    let mut pixels = Vec::with_capacity(new_h * new_w * 3);
    for i in 0..new_h * new_w {
        for plane in &out {
            pixels.push(plane[i] as f32);
        }
    }
    ImageRGB::new(new_h, new_w, pixels)
}

/// Resamples a single row-major plane.
pub fn resize_plane(src: &[f64], h: usize, w: usize, new_h: usize, new_w: usize, kind: ResizeKind) -> Vec<f64> {
    let ty = taps(h, new_h, kind);
    let tx = taps(w, new_w, kind);
    // rows first, then columns
    let mut tmp = vec![0.0; h * new_w];
    for y in 0..h {
        for (ox, t) in tx.iter().enumerate() {
            tmp[y * new_w + ox] = t.iter().map(|&(i, k)| k * src[y * w + i]).sum();
        }
    }
    let mut out = vec![0.0; new_h * new_w];
    for (oy, t) in ty.iter().enumerate() {
        for ox in 0..new_w {
            out[oy * new_w + ox] = t.iter().map(|&(i, k)| k * tmp[i * new_w + ox]).sum();
        }
    }
    out
}

fn taps(src: usize, dst: usize, kind: ResizeKind) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    let last = src as isize - 1;
    (0..dst)
        .map(|o| {
            let s = (o as f64 + 0.5) * scale - 0.5;
            match kind {
                ResizeKind::Bilinear => {
                    let s = s.clamp(0.0, last as f64);
                    let i0 = s.floor() as usize;
                    let i1 = (i0 + 1).min(src - 1);
                    let f = s - i0 as f64;
                    vec![(i0, 1.0 - f), (i1, f)]
                }
                ResizeKind::Bicubic => {
                    let base = s.floor();
                    let f = s - base;
                    (-1..=2)
                        .map(|k| {
                            let i = (base as isize + k).clamp(0, last) as usize;
                            (i, cubic(k as f64 - f))
                        })
                        .collect()
                }
            }
        })
        .collect()
}

/// Keys cubic convolution kernel with `a = -0.5`.
fn cubic(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> ImageRGB {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        ImageRGB::new(h, w, (0..h * w * 3).map(|_| r.gen::<f32>()).collect()).unwrap()
    }

    #[test]
    fn quantized_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("q.png");
        let img = ImageRGB::new(4, 5, (0..60).map(|i| ((i * 37) % 256) as f32 / 255.0).collect()).unwrap();
        save_png(&img, &path).unwrap();
        assert_eq!(load_png(&path).unwrap(), img);

        let white = ImageRGB::filled(2, 2, [1.0, 1.0, 1.0]);
        save_png(&white, &path).unwrap();
        assert!(load_png(&path).unwrap().pixels().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn random_round_trip_within_half_step() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.png");
        let img = random_image(9, 7, 1);
        save_png(&img, &path).unwrap();
        let back = load_png(&path).unwrap();
        let worst = img.pixels().iter().zip(back.pixels()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        assert!(worst <= 1.0 / (2.0 * 255.0) + 1e-7, "{worst}");
    }

    #[test]
    fn rgba_alpha_is_dropped_and_gray16_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let buf: ImageBuffer<image::Rgba<u8>, _> = ImageBuffer::from_raw(1, 1, vec![255u8, 0, 51, 7]).unwrap();
        DynamicImage::ImageRgba8(buf).save(&path).unwrap();
        let img = load_png(&path).unwrap();
        assert_eq!(img.get(0, 0), [1.0, 0.0, 0.2]);

        let p16 = dir.path().join("g.png");
        let buf: ImageBuffer<image::Luma<u16>, _> = ImageBuffer::from_raw(1, 1, vec![1000u16]).unwrap();
        DynamicImage::ImageLuma16(buf).save(&p16).unwrap();
        assert!(matches!(load_png(&p16), Err(Error::UnsupportedImage { .. })));
        assert!(load_png(&dir.path().join("missing.png")).is_err());
    }

    #[test]
    fn luma_examples() {
        assert_eq!(rgb_to_luma(&ImageRGB::filled(1, 1, [1.0, 1.0, 1.0]))[0], 255.0);
        assert_eq!(rgb_to_luma(&ImageRGB::filled(1, 1, [0.0, 0.0, 0.0]))[0], 0.0);
        let g = rgb_to_luma(&ImageRGB::filled(1, 1, [0.0, 1.0, 0.0]))[0];
        assert!((g - 149.685).abs() < 1e-9);
    }

    #[test]
    fn luma_is_linear() {
        let img = random_image(3, 4, 2);
        let base = rgb_to_luma(&img);
        for a in [0.0f32, 0.25, 0.5, 1.0] {
            let scaled = rgb_to_luma(&img.map(|v| v * a));
            for (s, b) in scaled.iter().zip(&base) {
                assert!((s - a as f64 * b).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn resize_examples() {
        let c = ImageRGB::filled(5, 3, [0.2, 0.4, 0.6]);
        for kind in [ResizeKind::Bilinear, ResizeKind::Bicubic] {
            let r = resize(&c, 7, 11, kind).unwrap();
            for px in r.pixels().chunks(3) {
                assert!((px[0] - 0.2).abs() < 1e-6 && (px[1] - 0.4).abs() < 1e-6 && (px[2] - 0.6).abs() < 1e-6);
            }
        }
        let img = random_image(6, 5, 3);
        assert_eq!(resize(&img, 6, 5, ResizeKind::Bilinear).unwrap(), img);
        assert_eq!(resize(&img, 6, 5, ResizeKind::Bicubic).unwrap(), img);

        let checker = ImageRGB::from_fn(2, 2, |y, x| if (y + x) % 2 == 0 { [0.0; 3] } else { [1.0; 3] });
        let r = resize(&checker, 3, 3, ResizeKind::Bilinear).unwrap();
        assert!((r.get(1, 1)[0] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn bicubic_overshoot_is_clamped() {
        // a sharp step overshoots with negative lobes before clamping
        let step = ImageRGB::from_fn(1, 8, |_, x| if x < 4 { [0.0; 3] } else { [1.0; 3] });
        let raw = resize_plane(&[0., 0., 0., 0., 1., 1., 1., 1.], 1, 8, 1, 19, ResizeKind::Bicubic);
        assert!(raw.iter().any(|&v| !(0.0..=1.0).contains(&v)));
        let r = resize(&step, 1, 19, ResizeKind::Bicubic).unwrap();
        assert!(r.pixels().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn bilinear_stays_in_range() {
        let img = random_image(5, 6, 4);
        let r = resize(&img, 13, 4, ResizeKind::Bilinear).unwrap();
        let raw = resize_plane(&img.pixels().iter().step_by(3).map(|&v| v as f64).collect::<Vec<_>>(), 5, 6, 13, 4, ResizeKind::Bilinear);
        assert!(raw.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(r.height(), 13);
    }

    #[test]
    fn tensor_round_trip_and_geometry() {
        let img = random_image(3, 4, 5);
        let t = img.to_tensor::<f32>();
        assert_eq!(t.shape(), &[1, 3, 3, 4]);
        assert_eq!(ImageRGB::from_tensor(&t, 0).unwrap(), img);
        assert_eq!(img.flip_horizontal().flip_horizontal(), img);
        assert_eq!(img.rotate180().get(0, 0), img.get(2, 3));
        assert!(ImageRGB::new(2, 2, vec![0.0; 5]).is_err());
        assert!(ImageRGB::new(1, 1, vec![2.0, -1.0, 0.5]).unwrap().pixels() == [1.0, 0.0, 0.5]);
    }
}
