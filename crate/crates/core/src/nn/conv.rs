//! 3D cross-correlation and its transpose.
//!
//! Weights are `[Co, Ci, kd, kh, kw]` for [`conv3d`] and `[Ci, Co, kd, kh, kw]`
//! for [`conv_transpose3d`], so the same buffer serves as a convolution and as
//! its adjoint. For every output voxel, contributions are summed starting from
//! the bias in `(ci, kd, kh, kw)` lexicographic order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Backward, Element, Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub transposed: bool,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: [usize; 3]) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel,
            stride: [1; 3],
            padding: [0; 3],
            transposed: false,
        }
    }

    /// `k×k×k` kernel, stride 1, padding `k/2`.
    pub fn same(in_channels: usize, out_channels: usize, k: usize) -> Self {
        Self::new(in_channels, out_channels, [k; 3]).with_padding([k / 2; 3])
    }

    pub fn with_stride(mut self, stride: [usize; 3]) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_padding(mut self, padding: [usize; 3]) -> Self {
        self.padding = padding;
        self
    }

    pub fn transposed(mut self) -> Self {
        self.transposed = true;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let op = if self.transposed { "conv_transpose3d" } else { "conv3d" };
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::invalid(op, "channel counts must be positive"));
        }
        for a in 0..3 {
            if self.kernel[a] == 0 || self.stride[a] == 0 {
                return Err(Error::invalid(op, "kernel and stride must be positive"));
            }
            if self.padding[a] >= self.kernel[a] {
                return Err(Error::invalid(
                    op,
                    format!(
                        "padding {:?} must be smaller than kernel {:?}",
                        self.padding, self.kernel
                    ),
                ));
            }
        }
        Ok(())
    }

    pub fn weight_shape(&self) -> [usize; 5] {
        let [kd, kh, kw] = self.kernel;
        if self.transposed {
            [self.in_channels, self.out_channels, kd, kh, kw]
        } else {
            [self.out_channels, self.in_channels, kd, kh, kw]
        }
    }

    pub fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn parameter_count(&self) -> usize {
        self.in_channels * self.out_channels * self.kernel_volume() + self.out_channels
    }

    /// Spatial output extents for the given input extents.
    pub fn output_extents(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let (i, k, s, p) = (
                input[a] as isize,
                self.kernel[a] as isize,
                self.stride[a] as isize,
                self.padding[a] as isize,
            );
            let o = if self.transposed {
                (i - 1) * s - 2 * p + k
            } else {
                let span = i + 2 * p - k;
                if span < 0 {
                    -1
                } else {
                    span / s + 1
                }
            };
            if o < 1 {
                return Err(Error::invalid(
                    if self.transposed { "conv_transpose3d" } else { "conv3d" },
                    format!("non-positive output extent for input {input:?} with {self:?}"),
                ));
            }
            out[a] = o as usize;
        }
        Ok(out)
    }
}

/// Arithmetic progression of matching `(output, input)` positions along one
/// axis for one kernel tap.
#[derive(Debug, Clone, Copy)]
struct Run {
    o0: usize,
    o_step: usize,
    i0: usize,
    i_step: usize,
    len: usize,
}

/// Runs for each kernel index along one axis.
fn axis_runs(in_n: usize, out_n: usize, k: usize, s: usize, p: usize, transposed: bool) -> Vec<Run> {
    (0..k)
        .map(|kk| {
            let pairs: Vec<(usize, usize)> = if transposed {
                // o = i*s + kk - p
                (0..in_n)
                    .filter_map(|i| {
                        let o = (i * s + kk) as isize - p as isize;
                        (o >= 0 && (o as usize) < out_n).then_some((o as usize, i))
                    })
                    .collect()
            } else {
                // i = o*s + kk - p
                (0..out_n)
                    .filter_map(|o| {
                        let i = (o * s + kk) as isize - p as isize;
                        (i >= 0 && (i as usize) < in_n).then_some((o, i as usize))
                    })
                    .collect()
            };
            match pairs.first() {
                None => Run {
                    o0: 0,
                    o_step: 1,
                    i0: 0,
                    i_step: 1,
                    len: 0,
                },
                Some(&(o0, i0)) => Run {
                    o0,
                    i0,
                    o_step: if transposed { s } else { 1 },
                    i_step: if transposed { 1 } else { s },
                    len: pairs.len(),
                },
            }
        })
        .collect()
}

#[derive(Clone)]
struct Geometry {
    n: usize,
    in_ch: usize,
    out_ch: usize,
    in_ext: [usize; 3],
    out_ext: [usize; 3],
    kernel: [usize; 3],
    runs: [Vec<Run>; 3],
    transposed: bool,
}

impl Geometry {
    fn new(spec: &ConvSpec, n: usize, in_ext: [usize; 3], out_ext: [usize; 3]) -> Self {
        let runs = std::array::from_fn(|a| {
            axis_runs(
                in_ext[a],
                out_ext[a],
                spec.kernel[a],
                spec.stride[a],
                spec.padding[a],
                spec.transposed,
            )
        });
        Geometry {
            n,
            in_ch: spec.in_channels,
            out_ch: spec.out_channels,
            in_ext,
            out_ext,
            kernel: spec.kernel,
            runs,
            transposed: spec.transposed,
        }
    }

    fn in_vol(&self) -> usize {
        self.in_ext.iter().product()
    }

    fn out_vol(&self) -> usize {
        self.out_ext.iter().product()
    }

    fn weight_index(&self, co: usize, ci: usize, kd: usize, kh: usize, kw: usize) -> usize {
        let [_, kh_n, kw_n] = self.kernel;
        let lead = if self.transposed {
            ci * self.out_ch + co
        } else {
            co * self.in_ch + ci
        };
        ((lead * self.kernel[0] + kd) * kh_n + kh) * kw_n + kw
    }

    /// Visit each kernel tap with its three axis runs.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize, &Run, &Run, &Run)) {
        for kd in 0..self.kernel[0] {
            for kh in 0..self.kernel[1] {
                for kw in 0..self.kernel[2] {
                    let (rd, rh, rw) = (&self.runs[0][kd], &self.runs[1][kh], &self.runs[2][kw]);
                    if rd.len == 0 || rh.len == 0 || rw.len == 0 {
                        continue;
                    }
                    f(kd, kh, kw, rd, rh, rw);
                }
            }
        }
    }

    /// Calls `f(out_offset, in_offset, len, out_step, in_step)` for each row
    /// of matching voxels under one tap.
    #[inline]
    fn rows(&self, rd: &Run, rh: &Run, rw: &Run, mut f: impl FnMut(usize, usize)) {
        let [_, oh_n, ow_n] = self.out_ext;
        let [_, ih_n, iw_n] = self.in_ext;
        for t in 0..rd.len {
            let (od, id) = (rd.o0 + t * rd.o_step, rd.i0 + t * rd.i_step);
            for u in 0..rh.len {
                let (oh, ih) = (rh.o0 + u * rh.o_step, rh.i0 + u * rh.i_step);
                f((od * oh_n + oh) * ow_n + rw.o0, (id * ih_n + ih) * iw_n + rw.i0);
            }
        }
    }

    fn forward<T: Element>(&self, x: &[T], w: &[T], b: &[T]) -> Vec<T> {
        let (iv, ov) = (self.in_vol(), self.out_vol());
        let mut out = vec![T::zero(); self.n * self.out_ch * ov];
        for n in 0..self.n {
            for co in 0..self.out_ch {
                let dst = &mut out[(n * self.out_ch + co) * ov..][..ov];
                dst.iter_mut().for_each(|v| *v = b[co]);
                for ci in 0..self.in_ch {
                    let src = &x[(n * self.in_ch + ci) * iv..][..iv];
                    self.for_each_tap(|kd, kh, kw, rd, rh, rw| {
                        let wv = w[self.weight_index(co, ci, kd, kh, kw)];
                        self.rows(rd, rh, rw, |o, i| {
                            for t in 0..rw.len {
                                dst[o + t * rw.o_step] += src[i + t * rw.i_step] * wv;
                            }
                        });
                    });
                }
            }
        }
        out
    }

    fn grad_input<T: Element>(&self, g: &[T], w: &[T]) -> Vec<T> {
        let (iv, ov) = (self.in_vol(), self.out_vol());
        let mut dx = vec![T::zero(); self.n * self.in_ch * iv];
        for n in 0..self.n {
            for ci in 0..self.in_ch {
                let dst = &mut dx[(n * self.in_ch + ci) * iv..][..iv];
                for co in 0..self.out_ch {
                    let src = &g[(n * self.out_ch + co) * ov..][..ov];
                    self.for_each_tap(|kd, kh, kw, rd, rh, rw| {
                        let wv = w[self.weight_index(co, ci, kd, kh, kw)];
                        self.rows(rd, rh, rw, |o, i| {
                            for t in 0..rw.len {
                                dst[i + t * rw.i_step] += src[o + t * rw.o_step] * wv;
                            }
                        });
                    });
                }
            }
        }
        dx
    }

    fn grad_weight<T: Element>(&self, g: &[T], x: &[T], w_len: usize) -> Vec<T> {
        let (iv, ov) = (self.in_vol(), self.out_vol());
        let mut dw = vec![T::zero(); w_len];
        for n in 0..self.n {
            for co in 0..self.out_ch {
                let gs = &g[(n * self.out_ch + co) * ov..][..ov];
                for ci in 0..self.in_ch {
                    let xs = &x[(n * self.in_ch + ci) * iv..][..iv];
                    self.for_each_tap(|kd, kh, kw, rd, rh, rw| {
                        let mut acc = T::zero();
                        self.rows(rd, rh, rw, |o, i| {
                            for t in 0..rw.len {
                                acc += gs[o + t * rw.o_step] * xs[i + t * rw.i_step];
                            }
                        });
                        dw[self.weight_index(co, ci, kd, kh, kw)] += acc;
                    });
                }
            }
        }
        dw
    }

    fn grad_bias<T: Element>(&self, g: &[T]) -> Vec<T> {
        let ov = self.out_vol();
        let mut db = vec![T::zero(); self.out_ch];
        for n in 0..self.n {
            for (co, d) in db.iter_mut().enumerate() {
                *d += g[(n * self.out_ch + co) * ov..][..ov].iter().copied().sum::<T>();
            }
        }
        db
    }
}

struct ConvBackward {
    geo: Geometry,
}

impl<T: Element> Backward<T> for ConvBackward {
    fn backward(&self, g: &[T], inputs: &[Tensor<T>]) -> Vec<Option<Vec<T>>> {
        let (x, w, b) = (&inputs[0], &inputs[1], &inputs[2]);
        vec![
            x.requires_grad().then(|| self.geo.grad_input(g, w.data())),
            w.requires_grad().then(|| self.geo.grad_weight(g, x.data(), w.numel())),
            b.requires_grad().then(|| self.geo.grad_bias(g)),
        ]
    }
}

fn check_inputs<T: Element>(
    op: &'static str,
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<[usize; 3]> {
    spec.validate()?;
    let xs = x.shape();
    if xs.len() != 5 {
        return Err(Error::invalid(op, format!("input must be (N,C,D,H,W), got {xs:?}")));
    }
    if xs[1] != spec.in_channels {
        return Err(Error::invalid(
            op,
            format!("input has {} channels, spec expects {}", xs[1], spec.in_channels),
        ));
    }
    if w.shape() != spec.weight_shape() {
        return Err(Error::shape(op, w.shape(), &spec.weight_shape()));
    }
    if b.shape() != [spec.out_channels] {
        return Err(Error::shape(op, b.shape(), &[spec.out_channels]));
    }
    spec.output_extents([xs[2], xs[3], xs[4]])
}

fn run<T: Element>(
    tape: &Tape<T>,
    op: &'static str,
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let out_ext = check_inputs(op, x, w, b, spec)?;
    let xs = x.shape();
    let geo = Geometry::new(spec, xs[0], [xs[2], xs[3], xs[4]], out_ext);
    let data = geo.forward(x.data(), w.data(), b.data());
    let shape = vec![xs[0], spec.out_channels, out_ext[0], out_ext[1], out_ext[2]];
    Ok(tape.record(op, &[x, w, b], data, shape, ConvBackward { geo }))
}

/// Cross-correlation plus bias.
pub fn conv3d<T: Element>(
    tape: &Tape<T>,
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    if spec.transposed {
        return Err(Error::invalid("conv3d", "spec is marked transposed"));
    }
    run(tape, "conv3d", x, w, b, spec)
}

/// Transposed convolution: the input-gradient of [`conv3d`] used as a forward op.
pub fn conv_transpose3d<T: Element>(
    tape: &Tape<T>,
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let spec = ConvSpec {
        transposed: true,
        ..*spec
    };
    run(tape, "conv_transpose3d", x, w, b, &spec)
}
