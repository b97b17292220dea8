//! Shared oracles and fixtures for the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voxbox::{Tape, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Central-difference check of a taped function.
///
/// `f` maps input tensors to an output tensor. The scalar probed is
/// `Σ r ⊙ f(x)` for fixed random weights `r`, so every output element
/// contributes. Inputs are built as trainable leaves; at most `max_coords`
/// coordinates per input are differenced. Returns the relative error
/// between analytic and numeric gradients over all probed coordinates.
pub fn fd_check<F>(inputs: &[(Vec<f64>, Vec<usize>)], f: F, h: f64, max_coords: usize, seed: u64) -> f64
where
    F: Fn(&Tape<f64>, &[Tensor<f64>]) -> Tensor<f64>,
{
    let leaves: Vec<Tensor<f64>> = inputs
        .iter()
        .map(|(d, s)| Tensor::parameter(d.clone(), s).unwrap())
        .collect();
    let tape = Tape::new();
    let y = f(&tape, &leaves);
    let mut r = rng(seed);
    let weights = uniform(&mut r, y.numel(), -1.0, 1.0);
    tape.backward(&y, &Tensor::new(weights.clone(), y.shape()).unwrap())
        .unwrap();

    let eval = |k: usize, i: usize, delta: f64| -> f64 {
        let plain: Vec<Tensor<f64>> = inputs
            .iter()
            .enumerate()
            .map(|(j, (d, s))| {
                let mut d = d.clone();
                if j == k {
                    d[i] += delta;
                }
                Tensor::parameter(d, s).unwrap()
            })
            .collect();
        let y = f(&Tape::suspended(), &plain);
        y.data().iter().zip(&weights).map(|(a, b)| a * b).sum()
    };

    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    for (k, leaf) in leaves.iter().enumerate() {
        let g = leaf.grad().unwrap_or_else(|| vec![0.0; leaf.numel()]);
        let n = leaf.numel();
        let coords: Vec<usize> = if n <= max_coords {
            (0..n).collect()
        } else {
            (0..max_coords).map(|_| r.random_range(0..n)).collect()
        };
        for i in coords {
            analytic.push(g[i]);
            numeric.push((eval(k, i, h) - eval(k, i, -h)) / (2.0 * h));
        }
    }
    rel_err(&analytic, &numeric)
}

/// Direct-definition cross-correlation. Per output voxel the sum starts at
/// the bias and adds `w·x` in `(ci, kd, kh, kw)` order.
pub fn naive_conv3d(
    x: &[f64],
    xs: [usize; 5],
    w: &[f64],
    ws: [usize; 5],
    b: &[f64],
    stride: [usize; 3],
    pad: [usize; 3],
) -> (Vec<f64>, [usize; 5]) {
    let [n, ci_n, di, hi, wi] = xs;
    let [co_n, _, kd_n, kh_n, kw_n] = ws;
    let od = (di + 2 * pad[0] - kd_n) / stride[0] + 1;
    let oh = (hi + 2 * pad[1] - kh_n) / stride[1] + 1;
    let ow = (wi + 2 * pad[2] - kw_n) / stride[2] + 1;
    let mut out = vec![0.0; n * co_n * od * oh * ow];
    for b_ in 0..n {
        for co in 0..co_n {
            for z in 0..od {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut acc = b[co];
                        for ci in 0..ci_n {
                            for kd in 0..kd_n {
                                for kh in 0..kh_n {
                                    for kw in 0..kw_n {
                                        let iz = (z * stride[0] + kd) as isize - pad[0] as isize;
                                        let iy = (y * stride[1] + kh) as isize - pad[1] as isize;
                                        let ix = (xx * stride[2] + kw) as isize - pad[2] as isize;
                                        if iz < 0 || iy < 0 || ix < 0 {
                                            continue;
                                        }
                                        let (iz, iy, ix) = (iz as usize, iy as usize, ix as usize);
                                        if iz >= di || iy >= hi || ix >= wi {
                                            continue;
                                        }
                                        let wv = w[(((co * ci_n + ci) * kd_n + kd) * kh_n + kh) * kw_n + kw];
                                        let xv = x[(((b_ * ci_n + ci) * di + iz) * hi + iy) * wi + ix];
                                        acc += wv * xv;
                                    }
                                }
                            }
                        }
                        out[(((b_ * co_n + co) * od + z) * oh + y) * ow + xx] = acc;
                    }
                }
            }
        }
    }
    (out, [n, co_n, od, oh, ow])
}

/// Direct-definition transposed convolution with weights `[Ci, Co, k…]`:
/// `y[o] = b + Σ w·x[i]` over `o = i·s + k − p`, gathered per output voxel
/// in `(ci, kd, kh, kw)` order.
pub fn naive_conv_transpose3d(
    x: &[f64],
    xs: [usize; 5],
    w: &[f64],
    ws: [usize; 5],
    b: &[f64],
    stride: [usize; 3],
    pad: [usize; 3],
) -> (Vec<f64>, [usize; 5]) {
    let [n, ci_n, di, hi, wi] = xs;
    let [_, co_n, kd_n, kh_n, kw_n] = ws;
    let od = (di - 1) * stride[0] + kd_n - 2 * pad[0];
    let oh = (hi - 1) * stride[1] + kh_n - 2 * pad[1];
    let ow = (wi - 1) * stride[2] + kw_n - 2 * pad[2];
    let source = |o: usize, k: usize, a: usize, len: usize| -> Option<usize> {
        let t = (o + pad[a]) as isize - k as isize;
        if t < 0 || !(t as usize).is_multiple_of(stride[a]) {
            return None;
        }
        let i = t as usize / stride[a];
        (i < len).then_some(i)
    };
    let mut out = vec![0.0; n * co_n * od * oh * ow];
    for b_ in 0..n {
        for co in 0..co_n {
            for z in 0..od {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut acc = b[co];
                        for ci in 0..ci_n {
                            for kd in 0..kd_n {
                                for kh in 0..kh_n {
                                    for kw in 0..kw_n {
                                        let (Some(iz), Some(iy), Some(ix)) =
                                            (source(z, kd, 0, di), source(y, kh, 1, hi), source(xx, kw, 2, wi))
                                        else {
                                            continue;
                                        };
                                        let wv = w[(((ci * co_n + co) * kd_n + kd) * kh_n + kh) * kw_n + kw];
                                        let xv = x[(((b_ * ci_n + ci) * di + iz) * hi + iy) * wi + ix];
                                        acc += wv * xv;
                                    }
                                }
                            }
                        }
                        out[(((b_ * co_n + co) * od + z) * oh + y) * ow + xx] = acc;
                    }
                }
            }
        }
    }
    (out, [n, co_n, od, oh, ow])
}

/// Ball of `radius` voxels centred in an `n³` volume: image 1 inside and
/// −0.5 outside, label 1 inside.
pub fn sphere(n: usize, radius: f64) -> (Vec<f64>, Vec<f64>) {
    let c = (n as f64 - 1.0) / 2.0;
    let mut img = Vec::with_capacity(n * n * n);
    let mut lbl = Vec::with_capacity(n * n * n);
    for z in 0..n {
        for y in 0..n {
            for x in 0..n {
                let r2 = (z as f64 - c).powi(2) + (y as f64 - c).powi(2) + (x as f64 - c).powi(2);
                let inside = r2 <= radius * radius;
                img.push(if inside { 1.0 } else { -0.5 });
                lbl.push(if inside { 1.0 } else { 0.0 });
            }
        }
    }
    (img, lbl)
}
