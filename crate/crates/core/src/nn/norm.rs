use crate::error::{Error, Result};
use crate::tensor::{Backward, Element, Tape, Tensor};

pub const INSTANCE_NORM_EPS: f64 = 1e-5;

struct InstanceNormBackward<T> {
    /// Standardized input, pre-affine.
    xhat: Vec<T>,
    inv_std: Vec<T>,
    channels: usize,
    vol: usize,
}

impl<T: Element> Backward<T> for InstanceNormBackward<T> {
    fn backward(&self, g: &[T], inputs: &[Tensor<T>]) -> Vec<Option<Vec<T>>> {
        let (x, gamma, beta) = (&inputs[0], &inputs[1], &inputs[2]);
        let (c_n, vol) = (self.channels, self.vol);
        let m = T::lit(vol as f64);
        let mut dgamma = vec![T::zero(); c_n];
        let mut dbeta = vec![T::zero(); c_n];
        let mut dx = x.requires_grad().then(|| vec![T::zero(); x.numel()]);
        for (inst, (gs, xh)) in g.chunks(vol).zip(self.xhat.chunks(vol)).enumerate() {
            let c = inst % c_n;
            let sum_g: T = gs.iter().copied().sum();
            let sum_gx: T = gs.iter().zip(xh).map(|(&a, &b)| a * b).sum();
            dgamma[c] += sum_gx;
            dbeta[c] += sum_g;
            if let Some(dx) = dx.as_mut() {
                let k = gamma.data()[c] * self.inv_std[inst] / m;
                for ((d, &gv), &xv) in dx[inst * vol..][..vol].iter_mut().zip(gs).zip(xh) {
                    *d = k * (m * gv - sum_g - xv * sum_gx);
                }
            }
        }
        vec![
            dx,
            gamma.requires_grad().then_some(dgamma),
            beta.requires_grad().then_some(dbeta),
        ]
    }

    fn saved_bytes(&self) -> usize {
        (self.xhat.len() + self.inv_std.len()) * std::mem::size_of::<T>()
    }
}

/// Per-(n, c) standardization over the spatial volume, then `gamma·x̂ + beta`.
pub fn instance_norm3d<T: Element>(
    tape: &Tape<T>,
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 5 {
        return Err(Error::invalid(
            "instance_norm3d",
            format!("input must be 5-D, got {s:?}"),
        ));
    }
    let (c_n, vol) = (s[1], s[2] * s[3] * s[4]);
    if vol < 2 {
        return Err(Error::invalid(
            "instance_norm3d",
            format!("spatial volume of {s:?} has a single voxel; variance is undefined"),
        ));
    }
    if gamma.shape() != [c_n] {
        return Err(Error::shape("instance_norm3d", gamma.shape(), &[c_n]));
    }
    if beta.shape() != [c_n] {
        return Err(Error::shape("instance_norm3d", beta.shape(), &[c_n]));
    }
    let m = T::lit(vol as f64);
    let mut xhat = Vec::with_capacity(x.numel());
    let mut inv_std = Vec::with_capacity(s[0] * c_n);
    for xs in x.data().chunks(vol) {
        let mean = xs.iter().copied().sum::<T>() / m;
        let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / m;
        let is = T::one() / (var + eps).sqrt();
        inv_std.push(is);
        xhat.extend(xs.iter().map(|&v| (v - mean) * is));
    }
    let (gd, bd) = (gamma.data(), beta.data());
    let out: Vec<T> = xhat
        .chunks(vol)
        .enumerate()
        .flat_map(|(inst, xh)| {
            let c = inst % c_n;
            xh.iter().map(move |&v| gd[c] * v + bd[c])
        })
        .collect();
    if !tape.tracks(&[x, gamma, beta]) {
        return Ok(Tensor::plain(out, s.to_vec()));
    }
    Ok(tape.record(
        "instance_norm3d",
        &[x, gamma, beta],
        out,
        s.to_vec(),
        InstanceNormBackward {
            xhat,
            inv_std,
            channels: c_n,
            vol,
        },
    ))
}
