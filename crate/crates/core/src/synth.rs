//! Procedural (clean, degraded) pairs.
//!
//! A degraded capture is composed from a background `B`, a binary raindrop mask
//! `M`, a raindrop layer `R`, a transmission map `t` and airlight `A`:
//!
//! ```text
//! I = ((1 - M) * B + R) * t + A * (1 - t)
//! ```
//!
//! `M` and `t` are single-channel and broadcast over RGB. Drops are filled
//! ellipses whose interior shows a blurred, inverted, brightness-shifted view of
//! the nearby background. Mist is a bilinearly upsampled coarse random grid.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image_io::ImageRGB;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassLabel {
    Clean,
    RaindropOnly,
    MistAndRaindrop,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; 3] = [ClassLabel::Clean, ClassLabel::RaindropOnly, ClassLabel::MistAndRaindrop];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ClassLabel::Clean => "clean",
            ClassLabel::RaindropOnly => "raindrop_only",
            ClassLabel::MistAndRaindrop => "mist_and_raindrop",
        }
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ClassLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown class label `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthParams {
    /// Inclusive range of drops per image.
    pub drop_count: (usize, usize),
    /// Semi-major axis range in pixels.
    pub drop_radius: (f64, f64),
    /// Brightness added inside drops.
    pub drop_brightness: (f64, f64),
    /// Coarse grid extent of the mist field; 1 gives a spatially constant `t`.
    pub mist_grid: usize,
    pub t_min: f64,
    pub airlight: (f64, f64),
    /// Anti-aliased drop edges (fractional `M`).
    pub soft_mask: bool,
    /// Smoothly varying airlight instead of one constant color.
    pub spatial_airlight: bool,
    /// Relative frequency of clean, raindrop-only and mist-and-raindrop samples.
    pub class_proportions: [f64; 3],
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            drop_count: (4, 12),
            drop_radius: (2.0, 10.0),
            drop_brightness: (0.0, 0.15),
            mist_grid: 4,
            t_min: 0.3,
            airlight: (0.7, 1.0),
            soft_mask: false,
            spatial_airlight: false,
            class_proportions: [1.0, 1.0, 1.0],
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synth: {m}")));
        if self.drop_count.0 > self.drop_count.1 {
            return bad("drop_count range is empty");
        }
        if !(self.drop_radius.0 > 0.0 && self.drop_radius.0 <= self.drop_radius.1) {
            return bad("drop_radius must be a nonempty positive range");
        }
        if self.drop_brightness.0 > self.drop_brightness.1 {
            return bad("drop_brightness range is empty");
        }
        if self.mist_grid == 0 {
            return bad("mist_grid must be at least 1");
        }
        if !(self.t_min > 0.0 && self.t_min < 1.0) {
            return bad("t_min must lie in (0, 1)");
        }
        let (a0, a1) = self.airlight;
        if !(0.0 <= a0 && a0 <= a1 && a1 <= 1.0) {
            return bad("airlight must be a nonempty range inside [0, 1]");
        }
        if self.class_proportions.iter().any(|&p| p < 0.0 || !p.is_finite())
            || self.class_proportions.iter().sum::<f64>() <= 0.0
        {
            return bad("class_proportions must be nonnegative with a positive sum");
        }
        Ok(())
    }
}

/// Ground truth, the component fields and the composed degraded image.
#[derive(Clone, Debug)]
pub struct DegradationSample {
    pub background: ImageRGB,
    /// H×W, values in `{0, 1}` (fractional only with `soft_mask`).
    pub mask: Vec<f32>,
    /// H×W×3, zero wherever `mask` is zero.
    pub raindrop: Vec<f32>,
    /// H×W in `[t_min, 1]`.
    pub transmission: Vec<f32>,
    /// H×W×3.
    pub airlight: Vec<f32>,
    pub degraded: ImageRGB,
    pub label: ClassLabel,
}

/// Unclamped per-component evaluation of the composition, interleaved H×W×3.
pub fn compose_unclamped(b: &ImageRGB, m: &[f32], r: &[f32], t: &[f32], a: &[f32]) -> Result<Vec<f64>> {
    let n = b.height() * b.width();
    for (name, len, want) in [("mask", m.len(), n), ("raindrop", r.len(), 3 * n), ("transmission", t.len(), n), ("airlight", a.len(), 3 * n)] {
        if len != want {
            return Err(Error::shape("compose", format!("{name} has {len} values, expected {want}")));
        }
    }
    let bp = b.pixels();
    let mut out = Vec::with_capacity(3 * n);
    for i in 0..n {
        let (mi, ti) = (m[i] as f64, t[i] as f64);
        for c in 0..3 {
            let j = 3 * i + c;
            out.push(((1.0 - mi) * bp[j] as f64 + r[j] as f64) * ti + a[j] as f64 * (1.0 - ti));
        }
    }
    Ok(out)
}

/// Degraded image from its components, clamped into `[0, 1]`.
pub fn compose(b: &ImageRGB, m: &[f32], r: &[f32], t: &[f32], a: &[f32]) -> Result<ImageRGB> {
    let raw = compose_unclamped(b, m, r, t, a)?;
    ImageRGB::new(b.height(), b.width(), raw.into_iter().map(|v| v as f32).collect())
}

/// Marks pixels whose centers fall inside the ellipse; with `soft`, writes 4×4
/// supersampled coverage instead. Coverage is merged with `max`.
pub fn rasterize_ellipse(mask: &mut [f32], h: usize, w: usize, center: (f64, f64), radii: (f64, f64), soft: bool) {
    let (cy, cx) = center;
    let (ry, rx) = radii;
    let y0 = (cy - ry - 1.0).floor().max(0.0) as usize;
    let y1 = ((cy + ry + 1.0).ceil().max(0.0) as usize).min(h.saturating_sub(1));
    let x0 = (cx - rx - 1.0).floor().max(0.0) as usize;
    let x1 = ((cx + rx + 1.0).ceil().max(0.0) as usize).min(w.saturating_sub(1));
    let inside = |y: f64, x: f64| ((y - cy) / ry).powi(2) + ((x - cx) / rx).powi(2) <= 1.0;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let cover = if soft {
                let mut hits = 0;
                for sy in 0..4 {
                    for sx in 0..4 {
                        let py = y as f64 - 0.375 + 0.25 * sy as f64;
                        let px = x as f64 - 0.375 + 0.25 * sx as f64;
                        hits += inside(py, px) as u32;
                    }
                }
                hits as f32 / 16.0
            } else if inside(y as f64, x as f64) {
                1.0
            } else {
                0.0
            };
            let m = &mut mask[y * w + x];
            *m = m.max(cover);
        }
    }
}

/// Separable box blur with clamp-to-edge borders, interleaved RGB.
fn box_blur(img: &ImageRGB, radius: usize) -> Vec<f32> {
    let (h, w) = (img.height(), img.width());
    let pass = |src: &[f32], horizontal: bool| -> Vec<f32> {
        let mut out = vec![0.0; src.len()];
        let k = (2 * radius + 1) as f32;
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let mut s = 0.0;
                    for d in -(radius as isize)..=radius as isize {
                        let (yy, xx) = if horizontal {
                            (y, (x as isize + d).clamp(0, w as isize - 1) as usize)
                        } else {
                            ((y as isize + d).clamp(0, h as isize - 1) as usize, x)
                        };
                        s += src[(yy * w + xx) * 3 + c];
                    }
                    out[(y * w + x) * 3 + c] = s / k;
                }
            }
        }
        out
    };
    let tmp = pass(img.pixels(), true);
    pass(&tmp, false)
}

/// Drop mask and raindrop layer for `background`.
///
/// Each drop acts as a crude lens: interior pixel `p` shows the blurred
/// background at `c - 1.5 (p - c)` plus a per-drop brightness shift.
pub fn gen_raindrops<R: Rng>(background: &ImageRGB, params: &SynthParams, count: usize, rng: &mut R) -> (Vec<f32>, Vec<f32>) {
    let (h, w) = (background.height(), background.width());
    let mut mask = vec![0.0f32; h * w];
    let mut layer = vec![0.0f32; h * w * 3];
    if count == 0 {
        return (mask, layer);
    }
    let blurred = box_blur(background, 2);
    for _ in 0..count {
        let cy = rng.gen_range(0.0..h as f64);
        let cx = rng.gen_range(0.0..w as f64);
        let rx = sample(rng, params.drop_radius);
        let ry = rx * rng.gen_range(0.75..=1.0);
        let shift = sample(rng, params.drop_brightness) as f32;
        let mut drop = vec![0.0f32; h * w];
        rasterize_ellipse(&mut drop, h, w, (cy.floor(), cx.floor()), (ry, rx), params.soft_mask);
        for (i, &cover) in drop.iter().enumerate() {
            if cover <= 0.0 {
                continue;
            }
            let (y, x) = ((i / w) as f64, (i % w) as f64);
            let sy = (cy - 1.5 * (y - cy)).round().clamp(0.0, (h - 1) as f64) as usize;
            let sx = (cx - 1.5 * (x - cx)).round().clamp(0.0, (w - 1) as f64) as usize;
            let cover = cover.max(mask[i]);
            mask[i] = cover;
            for c in 0..3 {
                let v = (blurred[(sy * w + sx) * 3 + c] + shift).clamp(0.0, 1.0);
                layer[i * 3 + c] = cover * v;
            }
        }
    }
    (mask, layer)
}

fn sample<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

/// Corner-aligned bilinear upsampling of a `g×g` grid to `h×w`.
fn upsample_grid(grid: &[f64], g: usize, h: usize, w: usize) -> Vec<f64> {
    let coord = |o: usize, n: usize| -> (usize, usize, f64) {
        if g == 1 || n == 1 {
            return (0, 0, 0.0);
        }
        let s = o as f64 * (g - 1) as f64 / (n - 1) as f64;
        let i0 = (s.floor() as usize).min(g - 2);
        (i0, i0 + 1, s - i0 as f64)
    };
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let (y0, y1, fy) = coord(y, h);
        for x in 0..w {
            let (x0, x1, fx) = coord(x, w);
            let top = grid[y0 * g + x0] * (1.0 - fx) + grid[y0 * g + x1] * fx;
            let bot = grid[y1 * g + x0] * (1.0 - fx) + grid[y1 * g + x1] * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    out
}

/// Transmission map in `[t_min, 1]` and airlight for an `h×w` image.
pub fn gen_mist<R: Rng>(h: usize, w: usize, params: &SynthParams, rng: &mut R) -> (Vec<f32>, Vec<f32>) {
    let g = params.mist_grid;
    let grid: Vec<f64> = (0..g * g).map(|_| rng.gen::<f64>()).collect();
    let t = upsample_grid(&grid, g, h, w)
        .into_iter()
        .map(|u| (params.t_min + (1.0 - params.t_min) * u).clamp(params.t_min, 1.0) as f32)
        .collect();
    (t, gen_airlight(h, w, params, rng))
}

fn gen_airlight<R: Rng>(h: usize, w: usize, params: &SynthParams, rng: &mut R) -> Vec<f32> {
    let (lo, hi) = params.airlight;
    let base = sample(rng, params.airlight);
    let tint: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-0.03..=0.03));
    let color = tint.map(|d| (base + d).clamp(lo, hi));
    if !params.spatial_airlight {
        return (0..h * w).flat_map(|_| color.map(|v| v as f32)).collect();
    }
    let grid: Vec<f64> = (0..9).map(|_| rng.gen_range(-0.1..=0.1)).collect();
    let field = upsample_grid(&grid, 3, h, w);
    field
        .iter()
        .flat_map(|d| color.map(|v| (v + d).clamp(lo, hi) as f32))
        .collect()
}

/// One sample of the requested class.
pub fn make_sample<R: Rng>(background: &ImageRGB, label: ClassLabel, params: &SynthParams, rng: &mut R) -> Result<DegradationSample> {
    let (h, w) = (background.height(), background.width());
    let (count, with_mist) = match label {
        ClassLabel::Clean => (0, false),
        ClassLabel::RaindropOnly => (rng.gen_range(params.drop_count.0..=params.drop_count.1).max(1), false),
        ClassLabel::MistAndRaindrop => (rng.gen_range(params.drop_count.0..=params.drop_count.1).max(1), true),
    };
    let (mask, raindrop) = gen_raindrops(background, params, count, rng);
    let (transmission, airlight) = if with_mist {
        gen_mist(h, w, params, rng)
    } else {
        (vec![1.0; h * w], gen_airlight(h, w, params, rng))
    };
    let degraded = compose(background, &mask, &raindrop, &transmission, &airlight)?;
    Ok(DegradationSample {
        background: background.clone(),
        mask,
        raindrop,
        transmission,
        airlight,
        degraded,
        label,
    })
}

pub(crate) fn draw_label<R: Rng>(proportions: &[f64; 3], rng: &mut R) -> ClassLabel {
    let total: f64 = proportions.iter().sum();
    let mut u = rng.gen_range(0.0..total);
    for (c, &p) in ClassLabel::ALL.iter().zip(proportions) {
        if u < p {
            return *c;
        }
        u -= p;
    }
    // rounding at the upper edge
    *ClassLabel::ALL.iter().zip(proportions).rev().find(|(_, &p)| p > 0.0).unwrap().0
}

/// Per-index generator: sample `index` depends only on `(seed, index)`.
pub fn index_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// One sample per background with labels drawn from `params.class_proportions`.
pub fn make_dataset(backgrounds: &[ImageRGB], params: &SynthParams, seed: u64) -> Result<Vec<DegradationSample>> {
    if backgrounds.is_empty() {
        return Err(Error::Empty("make_dataset"));
    }
    params.validate()?;
    backgrounds
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let mut rng = index_rng(seed, i as u64);
            let label = draw_label(&params.class_proportions, &mut rng);
            make_sample(b, label, params, &mut rng)
        })
        .collect()
}

/// Synthetic street-like scene: sky gradient, ground, blocky buildings with
/// window grids and a few bright details.
pub fn procedural_background<R: Rng>(h: usize, w: usize, rng: &mut R) -> ImageRGB {
    let horizon = rng.gen_range(0.35..0.65) * h as f64;
    let sky_top: [f32; 3] = [rng.gen_range(0.2..0.5), rng.gen_range(0.4..0.7), rng.gen_range(0.7..1.0)];
    let sky_low: [f32; 3] = [rng.gen_range(0.6..0.9), rng.gen_range(0.6..0.9), rng.gen_range(0.7..0.95)];
    let ground: [f32; 3] = [rng.gen_range(0.15..0.4), rng.gen_range(0.15..0.4), rng.gen_range(0.1..0.3)];
    let stripe = rng.gen_range(2.0..6.0);

    struct Building {
        x0: f64,
        x1: f64,
        top: f64,
        color: [f32; 3],
        window: [f32; 3],
        pitch: usize,
    }
    let buildings: Vec<Building> = (0..rng.gen_range(2..6))
        .map(|_| {
            let x0 = rng.gen_range(-0.1..0.9) * w as f64;
            let bw = rng.gen_range(0.12..0.4) * w as f64;
            let shade = rng.gen_range(0.15..0.7);
            Building {
                x0,
                x1: x0 + bw,
                top: horizon - rng.gen_range(0.1..0.45) * h as f64,
                color: [shade, shade * rng.gen_range(0.8..1.1), shade * rng.gen_range(0.8..1.2)],
                window: if rng.gen_bool(0.5) { [0.95, 0.9, 0.6] } else { [0.1, 0.12, 0.2] },
                pitch: rng.gen_range(3..6),
            }
        })
        .collect();
    let lights: Vec<(f64, f64, f64)> = (0..rng.gen_range(1..4))
        .map(|_| (rng.gen_range(0.0..h as f64), rng.gen_range(0.0..w as f64), rng.gen_range(1.0..3.0)))
        .collect();

    ImageRGB::from_fn(h, w, |y, x| {
        let (yf, xf) = (y as f64, x as f64);
        let mut px = if yf < horizon {
            let k = (yf / horizon.max(1.0)) as f32;
            std::array::from_fn(|c| sky_top[c] * (1.0 - k) + sky_low[c] * k)
        } else {
            let tex = 0.05 * ((xf / stripe).sin() * ((yf - horizon) / stripe).cos()) as f32;
            ground.map(|v| v + tex)
        };
        for b in &buildings {
            if xf >= b.x0 && xf < b.x1 && yf >= b.top && yf < horizon {
                let lx = (xf - b.x0) as usize;
                let ly = (yf - b.top) as usize;
                px = if !lx.is_multiple_of(b.pitch) && !ly.is_multiple_of(b.pitch) && lx % b.pitch < b.pitch - 1 {
                    b.window
                } else {
                    b.color
                };
            }
        }
        for &(ly, lx, r) in &lights {
            if (yf - ly).powi(2) + (xf - lx).powi(2) <= r * r {
                px = [1.0, 0.95, 0.8];
            }
        }
        px
    })
}
