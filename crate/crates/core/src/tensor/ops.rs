//! Core differentiable operations, recorded on a [`Tape`].

use super::{bytes_of, numel, strides, Backward, Element, Tape, Tensor};
use crate::error::{Error, Result};
use crate::partition::Partition;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
}

/// Shape of `a (op) b` under same-rank broadcasting of unit extents.
fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(Error::shape(op, a, b));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(Error::shape(op, a, b)),
        })
        .collect()
}

/// For each element of `out_shape`, the flat index into `in_shape`.
fn broadcast_map(in_shape: &[usize], out_shape: &[usize]) -> Option<Vec<usize>> {
    if in_shape == out_shape {
        return None;
    }
    let in_strides = strides(in_shape);
    let out_strides = strides(out_shape);
    let n = numel(out_shape);
    let map = (0..n)
        .map(|flat| {
            let mut rem = flat;
            let mut idx = 0;
            for d in 0..out_shape.len() {
                let c = rem / out_strides[d];
                rem %= out_strides[d];
                if in_shape[d] != 1 {
                    idx += c * in_strides[d];
                }
            }
            idx
        })
        .collect();
    Some(map)
}

struct BinaryBackward {
    op: Elementwise,
    a_map: Option<Vec<usize>>,
    b_map: Option<Vec<usize>>,
}

fn scatter_sum<T: Element>(grad: &[T], map: &Option<Vec<usize>>, len: usize) -> Vec<T> {
    match map {
        None => grad.to_vec(),
        Some(m) => {
            let mut out = vec![T::zero(); len];
            for (g, &i) in grad.iter().zip(m) {
                out[i] += *g;
            }
            out
        }
    }
}

fn at(map: &Option<Vec<usize>>, i: usize) -> usize {
    map.as_ref().map_or(i, |m| m[i])
}

impl<T: Element> Backward<T> for BinaryBackward {
    fn backward(&self, g: &[T], inputs: &[Tensor<T>]) -> Vec<Option<Vec<T>>> {
        let (a, b) = (&inputs[0], &inputs[1]);
        let ga = a.requires_grad().then(|| match self.op {
            Elementwise::Add | Elementwise::Sub => scatter_sum(g, &self.a_map, a.numel()),
            Elementwise::Mul => {
                let bd = b.data();
                let local: Vec<T> = g
                    .iter()
                    .enumerate()
                    .map(|(i, &gi)| gi * bd[at(&self.b_map, i)])
                    .collect();
                scatter_sum(&local, &self.a_map, a.numel())
            }
        });
        let gb = b.requires_grad().then(|| match self.op {
            Elementwise::Add => scatter_sum(g, &self.b_map, b.numel()),
            Elementwise::Sub => {
                let neg: Vec<T> = g.iter().map(|&v| -v).collect();
                scatter_sum(&neg, &self.b_map, b.numel())
            }
            Elementwise::Mul => {
                let ad = a.data();
                let local: Vec<T> = g
                    .iter()
                    .enumerate()
                    .map(|(i, &gi)| gi * ad[at(&self.a_map, i)])
                    .collect();
                scatter_sum(&local, &self.b_map, b.numel())
            }
        });
        vec![ga, gb]
    }

    fn saved_bytes(&self) -> usize {
        let map_bytes = |m: &Option<Vec<usize>>| m.as_ref().map_or(0, |m| bytes_of::<usize>(m.len()));
        map_bytes(&self.a_map) + map_bytes(&self.b_map)
    }
}

struct ReluBackward;

impl<T: Element> Backward<T> for ReluBackward {
    fn backward(&self, g: &[T], inputs: &[Tensor<T>]) -> Vec<Option<Vec<T>>> {
        let x = inputs[0].data();
        vec![Some(
            g.iter()
                .zip(x)
                .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                .collect(),
        )]
    }
}

struct SigmoidBackward<T> {
    out: Vec<T>,
}

impl<T: Element> Backward<T> for SigmoidBackward<T> {
    fn backward(&self, g: &[T], _: &[Tensor<T>]) -> Vec<Option<Vec<T>>> {
        vec![Some(
            g.iter().zip(&self.out).map(|(&g, &s)| g * s * (T::one() - s)).collect(),
        )]
    }

    fn saved_bytes(&self) -> usize {
        bytes_of::<T>(self.out.len())
    }
}

pub(crate) fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

struct ScaleBackward<T> {
    factor: T,
}

impl<T: Element> Backward<T> for ScaleBackward<T> {
    fn backward(&self, g: &[T], _: &[Tensor<T>]) -> Vec<Option<Vec<T>>> {
        vec![Some(g.iter().map(|&v| v * self.factor).collect())]
    }
}

struct SumBackward {
    len: usize,
}

impl<T: Element> Backward<T> for SumBackward {
    fn backward(&self, g: &[T], _: &[Tensor<T>]) -> Vec<Option<Vec<T>>> {
        vec![Some(vec![g[0]; self.len])]
    }
}

struct IdentityBackward;

impl<T: Element> Backward<T> for IdentityBackward {
    fn backward(&self, g: &[T], _: &[Tensor<T>]) -> Vec<Option<Vec<T>>> {
        vec![Some(g.to_vec())]
    }
}

struct MatmulBackward {
    m: usize,
    k: usize,
    n: usize,
}

impl<T: Element> Backward<T> for MatmulBackward {
    fn backward(&self, g: &[T], inputs: &[Tensor<T>]) -> Vec<Option<Vec<T>>> {
        let (m, k, n) = (self.m, self.k, self.n);
        let (a, b) = (&inputs[0], &inputs[1]);
        // dA = dC · Bᵀ
        let ga = a.requires_grad().then(|| {
            let bd = b.data();
            let mut out = vec![T::zero(); m * k];
            for i in 0..m {
                for p in 0..k {
                    let mut acc = T::zero();
                    for j in 0..n {
                        acc += g[i * n + j] * bd[p * n + j];
                    }
                    out[i * k + p] = acc;
                }
            }
            out
        });
        // dB = Aᵀ · dC
        let gb = b.requires_grad().then(|| {
            let ad = a.data();
            let mut out = vec![T::zero(); k * n];
            for i in 0..m {
                for p in 0..k {
                    let av = ad[i * k + p];
                    for j in 0..n {
                        out[p * n + j] += av * g[i * n + j];
                    }
                }
            }
            out
        });
        vec![ga, gb]
    }
}

/// Copy the block `[src_off, src_off + ext)` of `src` into `dst` at `dst_off`.
pub(crate) fn copy_block<T: Copy>(
    src: &[T],
    src_shape: &[usize],
    src_off: &[usize],
    dst: &mut [T],
    dst_shape: &[usize],
    dst_off: &[usize],
    ext: &[usize],
) {
    let rank = ext.len();
    let ss = strides(src_shape);
    let ds = strides(dst_shape);
    let row = ext[rank - 1];
    let outer: usize = ext[..rank - 1].iter().product();
    let mut idx = vec![0usize; rank - 1];
    for _ in 0..outer {
        let mut s = src_off[rank - 1];
        let mut d = dst_off[rank - 1];
        for a in 0..rank - 1 {
            s += (src_off[a] + idx[a]) * ss[a];
            d += (dst_off[a] + idx[a]) * ds[a];
        }
        dst[d..d + row].copy_from_slice(&src[s..s + row]);
        for a in (0..rank - 1).rev() {
            idx[a] += 1;
            if idx[a] < ext[a] {
                break;
            }
            idx[a] = 0;
        }
    }
}

struct SliceBackward {
    src_shape: Vec<usize>,
    offsets: Vec<usize>,
    extents: Vec<usize>,
}

impl<T: Element> Backward<T> for SliceBackward {
    fn backward(&self, g: &[T], _: &[Tensor<T>]) -> Vec<Option<Vec<T>>> {
        let mut out = vec![T::zero(); numel(&self.src_shape)];
        let zero = vec![0; self.extents.len()];
        copy_block(
            g,
            &self.extents,
            &zero,
            &mut out,
            &self.src_shape,
            &self.offsets,
            &self.extents,
        );
        vec![Some(out)]
    }
}

struct AssembleBackward {
    block_shape: Vec<usize>,
    full_shape: Vec<usize>,
    offsets: Vec<Vec<usize>>,
}

impl<T: Element> Backward<T> for AssembleBackward {
    fn backward(&self, g: &[T], inputs: &[Tensor<T>]) -> Vec<Option<Vec<T>>> {
        let zero = vec![0; self.block_shape.len()];
        inputs
            .iter()
            .zip(&self.offsets)
            .map(|(b, off)| {
                b.requires_grad().then(|| {
                    let mut out = vec![T::zero(); numel(&self.block_shape)];
                    copy_block(
                        g,
                        &self.full_shape,
                        off,
                        &mut out,
                        &self.block_shape,
                        &zero,
                        &self.block_shape,
                    );
                    out
                })
            })
            .collect()
    }
}

struct ConcatBackward {
    outer: usize,
    inner: usize,
    sizes: Vec<usize>,
}

impl<T: Element> Backward<T> for ConcatBackward {
    fn backward(&self, g: &[T], inputs: &[Tensor<T>]) -> Vec<Option<Vec<T>>> {
        let total: usize = self.sizes.iter().sum();
        let mut start = 0;
        inputs
            .iter()
            .zip(&self.sizes)
            .map(|(t, &sz)| {
                let s = start;
                start += sz;
                t.requires_grad().then(|| {
                    let mut out = Vec::with_capacity(self.outer * sz * self.inner);
                    for o in 0..self.outer {
                        let base = (o * total + s) * self.inner;
                        out.extend_from_slice(&g[base..base + sz * self.inner]);
                    }
                    out
                })
            })
            .collect()
    }
}

impl<T: Element> Tape<T> {
    pub fn elementwise(&self, op: Elementwise, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        let name = match op {
            Elementwise::Add => "add",
            Elementwise::Sub => "sub",
            Elementwise::Mul => "mul",
        };
        let shape = broadcast_shape(name, a.shape(), b.shape())?;
        let a_map = broadcast_map(a.shape(), &shape);
        let b_map = broadcast_map(b.shape(), &shape);
        let (ad, bd) = (a.data(), b.data());
        let n = numel(&shape);
        let f = |x: T, y: T| match op {
            Elementwise::Add => x + y,
            Elementwise::Sub => x - y,
            Elementwise::Mul => x * y,
        };
        let data: Vec<T> = match (&a_map, &b_map) {
            (None, None) => ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
            _ => (0..n).map(|i| f(ad[at(&a_map, i)], bd[at(&b_map, i)])).collect(),
        };
        if !self.tracks(&[a, b]) {
            return Ok(Tensor::plain(data, shape));
        }
        Ok(self.record(name, &[a, b], data, shape, BinaryBackward { op, a_map, b_map }))
    }

    pub fn add(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        self.elementwise(Elementwise::Add, a, b)
    }

    pub fn sub(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        self.elementwise(Elementwise::Sub, a, b)
    }

    pub fn mul(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        self.elementwise(Elementwise::Mul, a, b)
    }

    pub fn relu(&self, x: &Tensor<T>) -> Tensor<T> {
        let data = x.data().iter().map(|&v| v.max(T::zero())).collect();
        self.record("relu", &[x], data, x.shape().to_vec(), ReluBackward)
    }

    pub fn sigmoid(&self, x: &Tensor<T>) -> Tensor<T> {
        let data: Vec<T> = x.data().iter().map(|&v| sigmoid(v)).collect();
        if !self.tracks(&[x]) {
            return Tensor::plain(data, x.shape().to_vec());
        }
        let out = data.clone();
        self.record("sigmoid", &[x], data, x.shape().to_vec(), SigmoidBackward { out })
    }

    pub fn scale(&self, x: &Tensor<T>, factor: T) -> Tensor<T> {
        let data = x.data().iter().map(|&v| v * factor).collect();
        self.record("scale", &[x], data, x.shape().to_vec(), ScaleBackward { factor })
    }

    /// Sum of all elements as a `[1]` tensor.
    pub fn sum(&self, x: &Tensor<T>) -> Tensor<T> {
        let s = x.data().iter().copied().sum();
        self.record("sum", &[x], vec![s], vec![1], SumBackward { len: x.numel() })
    }

    pub fn reshape(&self, x: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
        if numel(shape) != x.numel() || shape.contains(&0) {
            return Err(Error::shape("reshape", x.shape(), shape));
        }
        Ok(self.record("reshape", &[x], x.to_vec(), shape.to_vec(), IdentityBackward))
    }

    pub fn matmul(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(Error::shape("matmul", a.shape(), b.shape()));
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let (ad, bd) = (a.data(), b.data());
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for p in 0..k {
                let av = ad[i * k + p];
                for j in 0..n {
                    out[i * n + j] += av * bd[p * n + j];
                }
            }
        }
        Ok(self.record("matmul", &[a, b], out, vec![m, n], MatmulBackward { m, k, n }))
    }

    /// Copy of the block starting at `offsets` with the given `extents`.
    pub fn slice_view(&self, t: &Tensor<T>, offsets: &[usize], extents: &[usize]) -> Result<Tensor<T>> {
        if offsets.len() != t.rank() || extents.len() != t.rank() {
            return Err(Error::invalid(
                "slice_view",
                format!(
                    "rank mismatch: tensor {:?}, offsets {offsets:?}, extents {extents:?}",
                    t.shape()
                ),
            ));
        }
        for (dim, ((&o, &e), &size)) in offsets.iter().zip(extents).zip(t.shape()).enumerate() {
            if e == 0 || o + e > size {
                return Err(Error::OutOfBounds {
                    dim,
                    offset: o,
                    extent: e,
                    size,
                });
            }
        }
        let mut out = vec![T::zero(); numel(extents)];
        let zero = vec![0; extents.len()];
        copy_block(t.data(), t.shape(), offsets, &mut out, extents, &zero, extents);
        Ok(self.record(
            "slice",
            &[t],
            out,
            extents.to_vec(),
            SliceBackward {
                src_shape: t.shape().to_vec(),
                offsets: offsets.to_vec(),
                extents: extents.to_vec(),
            },
        ))
    }

    /// Write each `(N, C, d, h, w)` block at its partition offset, producing
    /// the `(N, C, D, H, W)` volume. Blocks are given in partition order.
    pub fn assemble(&self, blocks: &[Tensor<T>], partition: &Partition) -> Result<Tensor<T>> {
        if blocks.len() != partition.len() {
            return Err(Error::Partition(format!(
                "expected {} blocks, got {}",
                partition.len(),
                blocks.len()
            )));
        }
        let first = blocks[0].shape();
        if first.len() != 5 {
            return Err(Error::invalid("assemble", format!("blocks must be 5-D, got {first:?}")));
        }
        let cube = partition.cube_extents();
        let block_shape = vec![first[0], first[1], cube[0], cube[1], cube[2]];
        for b in blocks {
            if b.shape() != block_shape.as_slice() {
                return Err(Error::shape("assemble", b.shape(), &block_shape));
            }
        }
        let vol = partition.volume_extents();
        let full_shape = vec![first[0], first[1], vol[0], vol[1], vol[2]];
        let mut out = vec![T::zero(); numel(&full_shape)];
        let offsets: Vec<Vec<usize>> = partition
            .offsets()
            .iter()
            .map(|o| vec![0, 0, o[0], o[1], o[2]])
            .collect();
        let zero = vec![0; 5];
        for (b, off) in blocks.iter().zip(&offsets) {
            copy_block(b.data(), &block_shape, &zero, &mut out, &full_shape, off, &block_shape);
        }
        let refs: Vec<&Tensor<T>> = blocks.iter().collect();
        Ok(self.record(
            "assemble",
            &refs,
            out,
            full_shape.clone(),
            AssembleBackward {
                block_shape,
                full_shape,
                offsets,
            },
        ))
    }

    /// Inverse of [`Tape::assemble`]: one slice per partition offset.
    pub fn disassemble(&self, t: &Tensor<T>, partition: &Partition) -> Result<Vec<Tensor<T>>> {
        let s = t.shape();
        if s.len() != 5 || s[2..] != partition.volume_extents() {
            return Err(Error::invalid(
                "disassemble",
                format!(
                    "tensor {:?} does not match partition volume {:?}",
                    s,
                    partition.volume_extents()
                ),
            ));
        }
        let c = partition.cube_extents();
        partition
            .offsets()
            .iter()
            .map(|o| self.slice_view(t, &[0, 0, o[0], o[1], o[2]], &[s[0], s[1], c[0], c[1], c[2]]))
            .collect()
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(&self, parts: &[Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat", "no inputs"))?
            .shape()
            .to_vec();
        if axis >= first.len() {
            return Err(Error::invalid(
                "concat",
                format!("axis {axis} out of range for {first:?}"),
            ));
        }
        for p in parts {
            let s = p.shape();
            if s.len() != first.len() || (0..s.len()).any(|d| d != axis && s[d] != first[d]) {
                return Err(Error::shape("concat", &first, s));
            }
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let sizes: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = sizes.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &sz) in parts.iter().zip(&sizes) {
                let base = o * sz * inner;
                out.extend_from_slice(&p.data()[base..base + sz * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let refs: Vec<&Tensor<T>> = parts.iter().collect();
        Ok(self.record("concat", &refs, out, shape, ConcatBackward { outer, inner, sizes }))
    }
}
