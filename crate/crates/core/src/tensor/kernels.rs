//! Per-sample numeric kernels shared by the forward and backward passes.

use super::Float;

/// Geometry of a single-sample 2-D convolution mapping `c×h×w` to `?×ho×wo`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub dilation: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    /// Rows of the column matrix.
    pub fn patch_len(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn out_len(&self) -> usize {
        self.ho * self.wo
    }

    pub fn in_len(&self) -> usize {
        self.c * self.h * self.w
    }
}

/// Output extent of a convolution along one axis, or `None` if the dilated kernel
/// does not fit inside the padded input.
pub(crate) fn conv_out_extent(
    input: usize,
    kernel: usize,
    stride: usize,
    dilation: usize,
    pad: usize,
) -> Option<usize> {
    let span = dilation * (kernel - 1) + 1;
    let padded = input + 2 * pad;
    (span <= padded).then(|| (padded - span) / stride + 1)
}

/// Unfolds `x` (`c×h×w`) into `cols` (`c*kh*kw × ho*wo`).
pub(crate) fn im2col<T: Float>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let p = g.out_len();
    for ci in 0..g.c {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                let dy = (ki * g.dilation) as isize - g.pad as isize;
                let dx = (kj * g.dilation) as isize - g.pad as isize;
                for oy in 0..g.ho {
                    let iy = (oy * g.stride) as isize + dy;
                    let out_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if g.stride == 1 {
                        // contiguous run of valid columns
                        let lo = (-dx).clamp(0, g.wo as isize) as usize;
                        let hi = (g.w as isize - dx).clamp(lo as isize, g.wo as isize) as usize;
                        out_row[..lo].fill(T::zero());
                        out_row[hi..].fill(T::zero());
                        let start = (lo as isize + dx) as usize;
                        out_row[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                    } else {
                        for (ox, v) in out_row.iter_mut().enumerate() {
                            let ix = (ox * g.stride) as isize + dx;
                            *v = if ix < 0 || ix >= g.w as isize {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters `cols` back and accumulates into `dx`.
pub(crate) fn col2im<T: Float>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let p = g.out_len();
    for ci in 0..g.c {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                let dy = (ki * g.dilation) as isize - g.pad as isize;
                let dxo = (kj * g.dilation) as isize - g.pad as isize;
                for oy in 0..g.ho {
                    let iy = (oy * g.stride) as isize + dy;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let col_row = &src[oy * g.wo..(oy + 1) * g.wo];
                    for (ox, &v) in col_row.iter().enumerate() {
                        let ix = (ox * g.stride) as isize + dxo;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] = dst[ix as usize] + v;
                        }
                    }
                }
            }
        }
    }
}

/// Per-(sample, channel) normalization. Returns `(xhat, inv_std)`.
pub(crate) fn instance_stats<T: Float>(x: &[T], planes: usize, plane_len: usize, eps: T) -> (Vec<T>, Vec<T>) {
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv_std = vec![T::zero(); planes];
    let m = T::from_usize(plane_len);
    for p in 0..planes {
        let src = &x[p * plane_len..(p + 1) * plane_len];
        let mean = src.iter().copied().sum::<T>() / m;
        let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / m;
        let is = T::one() / (var + eps).sqrt();
        inv_std[p] = is;
        for (o, &v) in xhat[p * plane_len..(p + 1) * plane_len].iter_mut().zip(src) {
            *o = (v - mean) * is;
        }
    }
    (xhat, inv_std)
}

/// Index/weight table for separable half-pixel bilinear sampling with edge clamping.
pub(crate) fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}
