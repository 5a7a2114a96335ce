//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use mistdrop::tensor::{Binding, Graph, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Reduces an arbitrary-shape output to a scalar with a fixed random projection,
/// so every output element contributes a distinct weight.
pub fn project(g: &mut Graph<f64>, out: Var, seed: u64) -> Var {
    let shape = g.shape(out).to_vec();
    let w = random_tensor(&shape, &mut rng(seed ^ 0x9e37_79b9));
    let wv = g.constant(w);
    let prod = g.mul(out, wv).unwrap();
    g.sum(prod)
}

pub const GRAD_FLOOR: f64 = 1e-6;

pub struct GradReport {
    /// Largest per-tensor relative error `|a - n| / max(|a|, |n|)` (L2 norms).
    pub max_rel_err: f64,
    pub checked: usize,
    /// Probes whose perturbation crossed a ReLU or max-selection boundary;
    /// central differences are meaningless there, so they are excluded.
    pub skipped: usize,
    pub per_tensor: Vec<f64>,
}

/// Central finite differences at step `h` against the tape gradient of every input.
///
/// `build` maps leaves to a scalar loss. At most `max_per_tensor` coordinates
/// per input are probed (all of them when the tensor is smaller). Probes that
/// change the active piece of a piecewise-linear op are skipped and counted.
pub fn grad_check<F>(inputs: &[Tensor<f64>], h: f64, max_per_tensor: usize, seed: u64, build: F) -> GradReport
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = build(&mut g, &vars);
    let base_pattern = g.branch_pattern();
    g.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map(|t| t.to_f64_vec()).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();

    let eval = |perturbed: &[Tensor<f64>]| -> (f64, bool) {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let loss = build(&mut g, &vars);
        (g.value(loss).item(), g.branch_pattern() == base_pattern)
    };

    let mut r = rng(seed);
    let mut report = GradReport {
        max_rel_err: 0.0,
        checked: 0,
        skipped: 0,
        per_tensor: Vec::new(),
    };
    for (ti, t) in inputs.iter().enumerate() {
        let coords: Vec<usize> = if t.len() <= max_per_tensor {
            (0..t.len()).collect()
        } else {
            (0..max_per_tensor).map(|_| r.gen_range(0..t.len())).collect()
        };
        let mut diff2 = 0.0;
        let mut a2 = 0.0;
        let mut n2 = 0.0;
        for &i in &coords {
            let mut work = inputs.to_vec();
            work[ti].data_mut()[i] += h;
            let (up, same_up) = eval(&work);
            work[ti].data_mut()[i] -= 2.0 * h;
            let (down, same_down) = eval(&work);
            if !(same_up && same_down) {
                report.skipped += 1;
                continue;
            }
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[ti][i];
            diff2 += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
            report.checked += 1;
        }
        // floor keeps a vanishing gradient (e.g. a bias cancelled by normalization)
        // from dividing rounding noise by rounding noise
        let denom = a2.sqrt().max(n2.sqrt()).max(GRAD_FLOOR);
        let rel = diff2.sqrt() / denom;
        report.max_rel_err = report.max_rel_err.max(rel);
        report.per_tensor.push(rel);
    }
    report
}

/// Direct quadruple-loop 2-D convolution, NCHW input, OIHW weights.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_oracle(
    x: &[f64],
    (n, c, h, w): (usize, usize, usize, usize),
    wt: &[f64],
    (o, kh, kw): (usize, usize, usize),
    bias: &[f64],
    stride: usize,
    dilation: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let ho = (h + 2 * pad - (dilation * (kh - 1) + 1)) / stride + 1;
    let wo = (w + 2 * pad - (dilation * (kw - 1) + 1)) / stride + 1;
    let mut out = vec![0.0; n * o * ho * wo];
    for s in 0..n {
        for oc in 0..o {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias[oc];
                    for ic in 0..c {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let iy = (oy * stride + ki * dilation) as isize - pad as isize;
                                let ix = (ox * stride + kj * dilation) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += x[((s * c + ic) * h + iy as usize) * w + ix as usize]
                                    * wt[((oc * c + ic) * kh + ki) * kw + kj];
                            }
                        }
                    }
                    out[((s * o + oc) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    (out, ho, wo)
}

/// Transposed convolution as the explicit scatter (adjoint) of the direct convolution.
/// Weights are `[C_in, C_out, kh, kw]`.
pub fn conv_transpose_oracle(
    x: &[f64],
    (n, cin, h, w): (usize, usize, usize, usize),
    wt: &[f64],
    (cout, kh, kw): (usize, usize, usize),
    bias: &[f64],
    stride: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let ho = (h - 1) * stride + kh - 2 * pad;
    let wo = (w - 1) * stride + kw - 2 * pad;
    let mut out = vec![0.0; n * cout * ho * wo];
    for s in 0..n {
        for oc in 0..cout {
            for v in &mut out[(s * cout + oc) * ho * wo..(s * cout + oc + 1) * ho * wo] {
                *v = bias[oc];
            }
        }
        for ic in 0..cin {
            for iy in 0..h {
                for ix in 0..w {
                    let xv = x[((s * cin + ic) * h + iy) * w + ix];
                    for oc in 0..cout {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let oy = (iy * stride + ki) as isize - pad as isize;
                                let ox = (ix * stride + kj) as isize - pad as isize;
                                if oy < 0 || ox < 0 || oy >= ho as isize || ox >= wo as isize {
                                    continue;
                                }
                                out[((s * cout + oc) * ho + oy as usize) * wo + ox as usize] +=
                                    xv * wt[((ic * cout + oc) * kh + ki) * kw + kj];
                            }
                        }
                    }
                }
            }
        }
    }
    (out, ho, wo)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Overwrites every parameter with uniform values in `[-scale, scale]`.
pub fn randomize(store: &mut ParamStore<f64>, scale: f64, rng: &mut impl Rng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v = rng.gen_range(-scale..scale);
        }
    }
}

/// [`grad_check`] over every parameter of `store` followed by `extra` inputs.
pub fn params_grad_check<F>(store: &ParamStore<f64>, extra: &[Tensor<f64>], max_per_tensor: usize, seed: u64, build: F) -> GradReport
where
    F: Fn(&mut Graph<f64>, &Binding, &[Var]) -> Var,
{
    let n = store.len();
    let mut inputs: Vec<Tensor<f64>> = store.iter().map(|(_, t)| t.clone()).collect();
    inputs.extend(extra.iter().cloned());
    grad_check(&inputs, 1e-3, max_per_tensor, seed, |g, v| {
        let b = Binding::from_vars(v[..n].to_vec());
        build(g, &b, &v[n..])
    })
}
