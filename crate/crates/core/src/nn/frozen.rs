//! Plain numeric kernels for the frozen encoder. Nothing here touches a tape.

use crate::tensor::Element;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrozenKernel {
    LayerNorm,
    Softmax,
    Gelu,
}

const LAYERNORM_EPS: f64 = 1e-6;

/// Apply `kind` to `x`, treating it as rows of length `row` (last axis).
pub fn frozen_kernel<T: Element>(kind: FrozenKernel, x: &[T], row: usize) -> Vec<T> {
    let mut out = x.to_vec();
    match kind {
        FrozenKernel::LayerNorm => out.chunks_mut(row).for_each(layernorm_row),
        FrozenKernel::Softmax => out.chunks_mut(row).for_each(softmax_row),
        FrozenKernel::Gelu => out.iter_mut().for_each(|v| *v = gelu(*v)),
    }
    out
}

/// Standardize one row in place (no affine).
pub fn layernorm_row<T: Element>(r: &mut [T]) {
    let n = T::lit(r.len() as f64);
    let mean = r.iter().copied().sum::<T>() / n;
    let var = r.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    let inv = T::one() / (var + T::lit(LAYERNORM_EPS)).sqrt();
    r.iter_mut().for_each(|v| *v = (*v - mean) * inv);
}

pub fn softmax_row<T: Element>(r: &mut [T]) {
    let max = r.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in r.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    r.iter_mut().for_each(|v| *v = *v / sum);
}

/// Tanh approximation of GELU.
pub fn gelu<T: Element>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + T::lit(0.044715) * x * x * x)).tanh())
}

/// `a (m×k) · b (k×n)` on plain buffers.
pub fn matmul_plain<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            for (o, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}
