//! Lightweight volumetric decoder over a four-level feature pyramid.
//!
//! Each level is projected (1×1×1) and refined (3×3×3). The shallowest level
//! is upsampled in-plane by a learned stride-(1,2,2) transposed convolution,
//! the others trilinearly to the same `(d, 2G, 2G)` grid. After channel
//! concatenation, two conv/instance-norm/ReLU blocks and a 1×1×1 convolution
//! give one logit channel, resampled trilinearly to the source extents.

use serde::{Deserialize, Serialize};

use crate::encoder::{FeaturePyramid, LEVELS};
use crate::error::{Error, Result};
use crate::nn::{
    conv3d, conv_transpose3d, instance_norm3d, interp_trilinear, ConvSpec, Initializer, INSTANCE_NORM_EPS,
};
use crate::tensor::{Element, Tape, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    pub c_proj: usize,
    pub c_ref: usize,
    pub c_head: usize,
    /// Fuse all four levels; when false only the deepest level feeds the head.
    pub multi_scale: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            c_proj: 256,
            c_ref: 256,
            c_head: 256,
            multi_scale: true,
        }
    }
}

impl DecoderConfig {
    pub fn uniform(c: usize) -> Self {
        DecoderConfig {
            c_proj: c,
            c_ref: c,
            c_head: c,
            multi_scale: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.c_proj == 0 || self.c_ref == 0 || self.c_head == 0 {
            return Err(Error::Config("decoder widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Conv<T: Element> {
    spec: ConvSpec,
    weight: Tensor<T>,
    bias: Tensor<T>,
    /// False for convolutions followed by instance norm, whose bias is a fixed zero.
    has_bias: bool,
}

impl<T: Element> Conv<T> {
    fn new(init: &mut Initializer, spec: ConvSpec, has_bias: bool) -> Self {
        let (weight, bias) = init.conv(&spec);
        let bias = if has_bias {
            bias
        } else {
            Tensor::zeros(&[spec.out_channels])
        };
        Conv {
            spec,
            weight,
            bias,
            has_bias,
        }
    }

    fn apply(&self, tape: &Tape<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        if self.spec.transposed {
            conv_transpose3d(tape, x, &self.weight, &self.bias, &self.spec)
        } else {
            conv3d(tape, x, &self.weight, &self.bias, &self.spec)
        }
    }

    fn slots<'a>(&'a mut self, name: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        out.push((format!("{name}.weight"), &mut self.weight));
        if self.has_bias {
            out.push((format!("{name}.bias"), &mut self.bias));
        }
    }
}

#[derive(Debug, Clone)]
struct HeadBlock<T: Element> {
    conv: Conv<T>,
    gamma: Tensor<T>,
    beta: Tensor<T>,
}

impl<T: Element> HeadBlock<T> {
    fn new(init: &mut Initializer, c_in: usize, c_out: usize) -> Self {
        HeadBlock {
            conv: Conv::new(init, ConvSpec::same(c_in, c_out, 3), false),
            gamma: Tensor::parameter(vec![T::one(); c_out], &[c_out]).expect("positive width"),
            beta: Tensor::parameter(vec![T::zero(); c_out], &[c_out]).expect("positive width"),
        }
    }

    fn apply(&self, tape: &Tape<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.conv.apply(tape, x)?;
        let y = instance_norm3d(tape, &y, &self.gamma, &self.beta, T::lit(INSTANCE_NORM_EPS))?;
        Ok(tape.relu(&y))
    }
}

#[derive(Debug, Clone)]
pub struct Decoder<T: Element> {
    cfg: DecoderConfig,
    d_emb: usize,
    proj: Vec<Conv<T>>,
    refine: Vec<Conv<T>>,
    fuse: Conv<T>,
    head: [HeadBlock<T>; 2],
    out: Conv<T>,
}

impl<T: Element> Decoder<T> {
    pub fn new(cfg: &DecoderConfig, d_emb: usize, init: &mut Initializer) -> Result<Self> {
        cfg.validate()?;
        let proj = (0..LEVELS)
            .map(|_| Conv::new(init, ConvSpec::new(d_emb, cfg.c_proj, [1; 3]), true))
            .collect();
        let refine = (0..LEVELS)
            .map(|_| Conv::new(init, ConvSpec::same(cfg.c_proj, cfg.c_ref, 3), true))
            .collect();
        let fuse_spec = ConvSpec::new(cfg.c_ref, cfg.c_ref, [1, 2, 2])
            .with_stride([1, 2, 2])
            .transposed();
        let fuse = Conv::new(init, fuse_spec, true);
        let head_in = if cfg.multi_scale { LEVELS * cfg.c_ref } else { cfg.c_ref };
        let head = [
            HeadBlock::new(init, head_in, cfg.c_head),
            HeadBlock::new(init, cfg.c_head, cfg.c_head),
        ];
        let out = Conv::new(init, ConvSpec::new(cfg.c_head, 1, [1; 3]), true);
        Ok(Decoder {
            cfg: cfg.clone(),
            d_emb,
            proj,
            refine,
            fuse,
            head,
            out,
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.cfg
    }

    /// Mutable handles to every trainable tensor, in a fixed order.
    pub fn slots(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for (k, c) in self.proj.iter_mut().enumerate() {
            c.slots(&format!("decoder.proj.{k}"), &mut out);
        }
        for (k, c) in self.refine.iter_mut().enumerate() {
            c.slots(&format!("decoder.refine.{k}"), &mut out);
        }
        self.fuse.slots("decoder.fuse", &mut out);
        for (j, h) in self.head.iter_mut().enumerate() {
            h.conv.slots(&format!("decoder.head.{j}.conv"), &mut out);
            out.push((format!("decoder.head.{j}.norm.weight"), &mut h.gamma));
            out.push((format!("decoder.head.{j}.norm.bias"), &mut h.beta));
        }
        self.out.slots("decoder.out", &mut out);
        out
    }

    /// Named trainable tensors (shared handles) in [`Self::slots`] order.
    pub fn parameters(&self) -> Vec<(String, Tensor<T>)> {
        let mut copy = self.clone();
        copy.slots().into_iter().map(|(n, t)| (n, t.clone())).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|(_, t)| t.numel()).sum()
    }

    fn level(&self, tape: &Tape<T>, k: usize, x: &Tensor<T>) -> Result<Tensor<T>> {
        let p = self.proj[k].apply(tape, x)?;
        self.refine[k].apply(tape, &p)
    }

    /// Logits `(1, 1, d, h, w)` for the pyramid's source extents.
    pub fn forward(&self, tape: &Tape<T>, pyr: &FeaturePyramid<T>) -> Result<Tensor<T>> {
        let [c, d, gh, gw] = pyr.extents();
        if c != self.d_emb {
            return Err(Error::invalid(
                "decode",
                format!("pyramid has {c} channels, decoder expects {}", self.d_emb),
            ));
        }
        let grid = [d, 2 * gh, 2 * gw];
        let fused = if self.cfg.multi_scale {
            let mut parts = Vec::with_capacity(LEVELS);
            let shallow = self.level(tape, 0, &pyr.levels[0])?;
            parts.push(self.fuse.apply(tape, &shallow)?);
            for k in 1..LEVELS {
                let r = self.level(tape, k, &pyr.levels[k])?;
                parts.push(interp_trilinear(tape, &r, grid)?);
            }
            tape.concat(&parts, 1)?
        } else {
            let r = self.level(tape, LEVELS - 1, &pyr.levels[LEVELS - 1])?;
            interp_trilinear(tape, &r, grid)?
        };
        let h = self.head[0].apply(tape, &fused)?;
        let h = self.head[1].apply(tape, &h)?;
        let logits = self.out.apply(tape, &h)?;
        interp_trilinear(tape, &logits, pyr.source_extents)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pyramid(c: usize, ext: [usize; 3], fill: impl Fn(usize) -> f64) -> FeaturePyramid<f64> {
        let n = c * ext.iter().product::<usize>();
        let levels = std::array::from_fn(|k| {
            Tensor::new(
                (0..n).map(|i| fill(k * n + i)).collect(),
                &[1, c, ext[0], ext[1], ext[2]],
            )
            .unwrap()
        });
        FeaturePyramid::new(levels, [ext[0], 8, 8]).unwrap()
    }

    #[test]
    fn output_matches_source_extents() {
        let dec = Decoder::<f64>::new(&DecoderConfig::uniform(4), 6, &mut Initializer::new(1)).unwrap();
        let pyr = pyramid(6, [3, 2, 2], |i| (i as f64 * 0.1).sin());
        let tape = Tape::suspended();
        let y = dec.forward(&tape, &pyr).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 8, 8]);
    }

    #[test]
    fn parameter_names_unique() {
        let dec = Decoder::<f64>::new(&DecoderConfig::uniform(2), 3, &mut Initializer::new(0)).unwrap();
        let params = dec.parameters();
        let mut names: Vec<_> = params.iter().map(|(n, _)| n.clone()).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), params.len());
        assert!(params.iter().all(|(_, t)| t.requires_grad()));
    }

    #[test]
    fn default_width_count() {
        let dec = Decoder::<f32>::new(&DecoderConfig::uniform(8), 16, &mut Initializer::new(0)).unwrap();
        let proj = 4 * (16 * 8 + 8);
        let refine = 4 * (8 * 8 * 27 + 8);
        let fuse = 8 * 8 * 4 + 8;
        let head = 32 * 8 * 27 + 16 + 8 * 8 * 27 + 16;
        let out = 8 + 1;
        assert_eq!(dec.parameter_count(), proj + refine + fuse + head + out);
    }
}
