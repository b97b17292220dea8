//! Trilinear resampling with the align-corners-false convention.
//!
//! Output voxel `i` along an axis samples source coordinate
//! `(i + 0.5) · in / out − 0.5`, clamped below at 0; neighbours past the last
//! sample are clamped to it. The interpolation matrix is materialized as eight
//! taps per output voxel and reused for every channel, and its transpose is
//! the backward pass.

use crate::error::{Error, Result};
use crate::tensor::{Backward, Element, Tape, Tensor};

#[derive(Debug, Clone, Copy)]
struct AxisTap {
    i0: usize,
    i1: usize,
    lambda: f64,
}

fn axis_taps(in_n: usize, out_n: usize) -> Vec<AxisTap> {
    let scale = in_n as f64 / out_n as f64;
    (0..out_n)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_n - 1);
            let i1 = (i0 + 1).min(in_n - 1);
            AxisTap {
                i0,
                i1,
                lambda: src - i0 as f64,
            }
        })
        .collect()
}

/// Sparse interpolation matrix: eight (source index, weight) pairs per output voxel.
struct Taps<T> {
    index: Vec<[u32; 8]>,
    weight: Vec<[T; 8]>,
}

impl<T: Element> Taps<T> {
    fn new(in_ext: [usize; 3], out_ext: [usize; 3]) -> Self {
        let ax: [Vec<AxisTap>; 3] = std::array::from_fn(|a| axis_taps(in_ext[a], out_ext[a]));
        let n: usize = out_ext.iter().product();
        let mut index = Vec::with_capacity(n);
        let mut weight = Vec::with_capacity(n);
        for td in &ax[0] {
            for th in &ax[1] {
                for tw in &ax[2] {
                    let mut idx = [0u32; 8];
                    let mut w = [T::zero(); 8];
                    let mut t = 0;
                    for (zd, wd) in [(td.i0, 1.0 - td.lambda), (td.i1, td.lambda)] {
                        for (zh, wh) in [(th.i0, 1.0 - th.lambda), (th.i1, th.lambda)] {
                            for (zw, ww) in [(tw.i0, 1.0 - tw.lambda), (tw.i1, tw.lambda)] {
                                idx[t] = ((zd * in_ext[1] + zh) * in_ext[2] + zw) as u32;
                                w[t] = T::lit(wd * wh * ww);
                                t += 1;
                            }
                        }
                    }
                    index.push(idx);
                    weight.push(w);
                }
            }
        }
        Taps { index, weight }
    }

    fn apply(&self, src: &[T], dst: &mut [T]) {
        for ((d, idx), w) in dst.iter_mut().zip(&self.index).zip(&self.weight) {
            let mut acc = T::zero();
            for t in 0..8 {
                acc += w[t] * src[idx[t] as usize];
            }
            *d = acc;
        }
    }

    fn apply_transpose(&self, g: &[T], dst: &mut [T]) {
        for ((&gv, idx), w) in g.iter().zip(&self.index).zip(&self.weight) {
            for t in 0..8 {
                dst[idx[t] as usize] += w[t] * gv;
            }
        }
    }

    fn bytes(&self) -> usize {
        self.index.len() * (std::mem::size_of::<[u32; 8]>() + std::mem::size_of::<[T; 8]>())
    }
}

/// Resample each `in_ext` volume in `data` (any number of leading volumes) to `out_ext`.
pub fn resample_trilinear<T: Element>(data: &[T], in_ext: [usize; 3], out_ext: [usize; 3]) -> Vec<T> {
    let in_vol: usize = in_ext.iter().product();
    if in_ext == out_ext {
        return data.to_vec();
    }
    let out_vol: usize = out_ext.iter().product();
    let taps = Taps::<T>::new(in_ext, out_ext);
    let mut out = vec![T::zero(); data.len() / in_vol * out_vol];
    for (src, dst) in data.chunks(in_vol).zip(out.chunks_mut(out_vol)) {
        taps.apply(src, dst);
    }
    out
}

struct InterpBackward<T> {
    taps: Taps<T>,
    in_vol: usize,
    out_vol: usize,
}

impl<T: Element> Backward<T> for InterpBackward<T> {
    fn backward(&self, g: &[T], inputs: &[Tensor<T>]) -> Vec<Option<Vec<T>>> {
        let mut dx = vec![T::zero(); inputs[0].numel()];
        for (gs, dst) in g.chunks(self.out_vol).zip(dx.chunks_mut(self.in_vol)) {
            self.taps.apply_transpose(gs, dst);
        }
        vec![Some(dx)]
    }

    fn saved_bytes(&self) -> usize {
        self.taps.bytes()
    }
}

struct PassThrough;

impl<T: Element> Backward<T> for PassThrough {
    fn backward(&self, g: &[T], _: &[Tensor<T>]) -> Vec<Option<Vec<T>>> {
        vec![Some(g.to_vec())]
    }
}

/// Resample `(N, C, D, H, W)` to `(N, C, D', H', W')`. Equal extents are an
/// exact copy.
pub fn interp_trilinear<T: Element>(tape: &Tape<T>, x: &Tensor<T>, out_ext: [usize; 3]) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 5 {
        return Err(Error::invalid(
            "interp_trilinear",
            format!("input must be 5-D, got {s:?}"),
        ));
    }
    if out_ext.contains(&0) {
        return Err(Error::invalid(
            "interp_trilinear",
            format!("output extents {out_ext:?} must be positive"),
        ));
    }
    let in_ext = [s[2], s[3], s[4]];
    let shape = vec![s[0], s[1], out_ext[0], out_ext[1], out_ext[2]];
    if in_ext == out_ext {
        return Ok(tape.record("interp_trilinear", &[x], x.to_vec(), shape, PassThrough));
    }
    let in_vol: usize = in_ext.iter().product();
    let out_vol: usize = out_ext.iter().product();
    let taps = Taps::<T>::new(in_ext, out_ext);
    let mut out = vec![T::zero(); s[0] * s[1] * out_vol];
    for (src, dst) in x.data().chunks(in_vol).zip(out.chunks_mut(out_vol)) {
        taps.apply(src, dst);
    }
    Ok(tape.record(
        "interp_trilinear",
        &[x],
        out,
        shape,
        InterpBackward { taps, in_vol, out_vol },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_extents_bit_exact() {
        let tape = Tape::<f64>::new();
        let x = Tensor::new((0..24).map(|v| v as f64 * 0.37).collect(), &[1, 1, 2, 3, 4]).unwrap();
        let y = interp_trilinear(&tape, &x, [2, 3, 4]).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn constant_stays_constant() {
        let tape = Tape::<f64>::new();
        let x = Tensor::full(&[1, 2, 2, 3, 2], 1.75);
        let y = interp_trilinear(&tape, &x, [5, 1, 7]).unwrap();
        assert!(y.data().iter().all(|&v| (v - 1.75).abs() < 1e-14));
    }

    #[test]
    fn one_dimensional_upsample() {
        // hand evaluation: sample positions -0.25 (clamped to 0), 0.25, 0.75, 1.25 (clamped neighbour)
        let tape = Tape::<f64>::new();
        let x = Tensor::new(vec![0., 1.], &[1, 1, 1, 1, 2]).unwrap();
        let y = interp_trilinear(&tape, &x, [1, 1, 4]).unwrap();
        assert_eq!(y.data(), &[0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn downsample_by_two_averages_pairs() {
        let tape = Tape::<f64>::new();
        let x = Tensor::new(vec![1., 3., 5., 7.], &[1, 1, 1, 1, 4]).unwrap();
        let y = interp_trilinear(&tape, &x, [1, 1, 2]).unwrap();
        assert_eq!(y.data(), &[2.0, 6.0]);
    }
}
