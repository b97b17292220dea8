//! Slice-wise frozen encoding of a 3D sub-volume.
//!
//! A `(1, 1, d, h, w)` sub-volume is unboxed into `d` axial slices, each
//! slice is encoded independently by a frozen 2D encoder, and the four tapped
//! token grids are boxed back into `(1, d_emb, d, gh, gw)` feature volumes. A
//! trainable depth embedding is then added to every level.

mod imported;
mod toy;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

pub use imported::ImportedEncoder;
pub use toy::{ToyConfig, ToyVit};

use crate::error::{Error, Result};
use crate::nn::interp_trilinear;
use crate::tensor::{Element, Tape, Tensor};

/// Number of tapped encoder layers.
pub const LEVELS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Toy,
    Imported,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub native_size: usize,
    pub patch_size: usize,
    pub d_emb: usize,
    /// One-based indices of the blocks whose outputs are tapped.
    pub tap_layers: [usize; LEVELS],
    pub design_depth: usize,
    pub backend: Backend,
    pub toy: ToyConfig,
    /// Directory of `<subject>.vxf` files for the imported backend.
    pub feature_dir: Option<PathBuf>,
}

impl Default for EncoderConfig {
    /// ViT-Base geometry with the toy backend's block count.
    fn default() -> Self {
        EncoderConfig {
            native_size: 224,
            patch_size: 16,
            d_emb: 768,
            tap_layers: [3, 6, 9, 12],
            design_depth: 128,
            backend: Backend::Imported,
            toy: ToyConfig::default(),
            feature_dir: None,
        }
    }
}

impl EncoderConfig {
    /// Small deterministic encoder for tests and desk-scale runs.
    pub fn toy(native_size: usize, patch_size: usize, d_emb: usize) -> Self {
        EncoderConfig {
            native_size,
            patch_size,
            d_emb,
            tap_layers: [1, 2, 3, 4],
            design_depth: 128,
            backend: Backend::Toy,
            toy: ToyConfig::default(),
            feature_dir: None,
        }
    }

    pub fn grid(&self) -> usize {
        self.native_size / self.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.native_size == 0 || !self.native_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "native size {} must be a positive multiple of patch size {}",
                self.native_size, self.patch_size
            )));
        }
        if self.tap_layers[0] == 0 || self.tap_layers.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "tap layers {:?} must be one-based and strictly increasing",
                self.tap_layers
            )));
        }
        if self.d_emb == 0 || self.design_depth == 0 {
            return Err(Error::Config("d_emb and design depth must be positive".into()));
        }
        if self.backend == Backend::Toy && self.tap_layers[LEVELS - 1] > self.toy.blocks {
            return Err(Error::Config(format!(
                "tap layer {} exceeds the toy encoder's {} blocks",
                self.tap_layers[LEVELS - 1],
                self.toy.blocks
            )));
        }
        Ok(())
    }

    pub fn build<T: Element>(&self) -> Result<Box<dyn SliceEncoder<T>>> {
        self.validate()?;
        Ok(match self.backend {
            Backend::Toy => Box::new(ToyVit::new(self)?),
            Backend::Imported => {
                let dir = self
                    .feature_dir
                    .clone()
                    .ok_or_else(|| Error::Config("imported backend needs encoder.feature_dir".into()))?;
                Box::new(ImportedEncoder::new(dir, self.d_emb))
            }
        })
    }
}

/// Where a slice sits in its subject's full volume.
#[derive(Debug, Clone)]
pub struct SliceContext<'a> {
    pub subject: &'a str,
    /// Absolute depth index in the full volume.
    pub depth_index: usize,
    /// In-plane window `(y0, x0, h, w)` of the sub-volume.
    pub window: [usize; 4],
    /// In-plane extents `(H, W)` of the full volume.
    pub full_in_plane: [usize; 2],
}

/// Token grids tapped from one slice, each `(d_emb, gh, gw)` row-major.
#[derive(Debug, Clone)]
pub struct SliceFeatures<T> {
    pub levels: [Vec<T>; LEVELS],
    pub d_emb: usize,
    pub grid: [usize; 2],
}

/// A frozen 2D encoder. Implementations never touch a tape.
pub trait SliceEncoder<T: Element>: Send + Sync {
    fn d_emb(&self) -> usize;

    /// Short identifier stored in exported feature files.
    fn tag(&self) -> String;

    fn encode_slice(&self, slice: &[T], extents: [usize; 2], ctx: &SliceContext<'_>) -> Result<SliceFeatures<T>>;
}

/// The four volumetric feature maps of one sub-volume.
#[derive(Debug, Clone)]
pub struct FeaturePyramid<T: Element> {
    /// `(1, d_emb, d, gh, gw)` each, shallowest first.
    pub levels: [Tensor<T>; LEVELS],
    /// `(d, h, w)` of the originating sub-volume.
    pub source_extents: [usize; 3],
}

impl<T: Element> FeaturePyramid<T> {
    pub fn new(levels: [Tensor<T>; LEVELS], source_extents: [usize; 3]) -> Result<Self> {
        let s0 = levels[0].shape().to_vec();
        if s0.len() != 5 || s0[0] != 1 {
            return Err(Error::invalid(
                "feature_pyramid",
                format!("levels must be (1,C,D,H,W), got {s0:?}"),
            ));
        }
        for l in &levels[1..] {
            if l.shape() != s0.as_slice() {
                return Err(Error::shape("feature_pyramid", &s0, l.shape()));
            }
        }
        if s0[2] != source_extents[0] {
            return Err(Error::invalid(
                "feature_pyramid",
                format!(
                    "feature depth {} differs from source depth {}",
                    s0[2], source_extents[0]
                ),
            ));
        }
        Ok(FeaturePyramid { levels, source_extents })
    }

    /// `(d_emb, d, gh, gw)`
    pub fn extents(&self) -> [usize; 4] {
        let s = self.levels[0].shape();
        [s[1], s[2], s[3], s[4]]
    }
}

/// Axial slices `x[0, 0, i, :, :]` of a `(1, 1, d, h, w)` tensor.
pub fn unbox<T: Element>(x: &Tensor<T>) -> Result<Vec<Vec<T>>> {
    let s = x.shape();
    if s.len() != 5 || s[0] != 1 || s[1] != 1 {
        return Err(Error::invalid("unbox", format!("expected (1,1,d,h,w), got {s:?}")));
    }
    Ok(x.data().chunks(s[3] * s[4]).map(<[T]>::to_vec).collect())
}

/// Stack per-slice token grids along depth into a [`FeaturePyramid`].
pub fn box_features<T: Element>(slices: &[SliceFeatures<T>], source_extents: [usize; 3]) -> Result<FeaturePyramid<T>> {
    let first = slices.first().ok_or_else(|| Error::invalid("box", "no slices"))?;
    let (c, [gh, gw]) = (first.d_emb, first.grid);
    for s in slices {
        if s.d_emb != c || s.grid != first.grid || s.levels.iter().any(|l| l.len() != c * gh * gw) {
            return Err(Error::invalid(
                "box",
                format!(
                    "inconsistent slice features: ({}, {:?}) vs ({c}, {:?})",
                    s.d_emb, s.grid, first.grid
                ),
            ));
        }
    }
    let d = slices.len();
    let plane = gh * gw;
    let levels: Vec<Tensor<T>> = (0..LEVELS)
        .map(|k| {
            let mut data = vec![T::zero(); c * d * plane];
            for (i, s) in slices.iter().enumerate() {
                for ch in 0..c {
                    data[(ch * d + i) * plane..][..plane].copy_from_slice(&s.levels[k][ch * plane..][..plane]);
                }
            }
            Tensor::new(data, &[1, c, d, gh, gw])
        })
        .collect::<Result<_>>()?;
    FeaturePyramid::new(levels.try_into().expect("four levels"), source_extents)
}

/// Where a sub-volume sits in its subject's volume.
#[derive(Debug, Clone)]
pub struct CubeContext {
    pub subject: String,
    pub offset: [usize; 3],
    pub volume_extents: [usize; 3],
}

impl CubeContext {
    /// Context for a sub-volume that is the whole volume.
    pub fn whole(subject: &str, extents: [usize; 3]) -> Self {
        CubeContext {
            subject: subject.to_string(),
            offset: [0; 3],
            volume_extents: extents,
        }
    }
}

/// Unbox, encode every slice, and box the results.
pub fn encode_subvolume<T: Element>(
    encoder: &dyn SliceEncoder<T>,
    x: &Tensor<T>,
    ctx: &CubeContext,
) -> Result<FeaturePyramid<T>> {
    let s = x.shape();
    let (h, w) = (s[3], s[4]);
    let feats = unbox(x)?
        .iter()
        .enumerate()
        .map(|(i, slice)| {
            let sc = SliceContext {
                subject: &ctx.subject,
                depth_index: ctx.offset[0] + i,
                window: [ctx.offset[1], ctx.offset[2], h, w],
                full_in_plane: [ctx.volume_extents[1], ctx.volume_extents[2]],
            };
            encoder.encode_slice(slice, [h, w], &sc)
        })
        .collect::<Result<Vec<_>>>()?;
    box_features(&feats, [s[2], h, w])
}

/// Trainable `(d_emb, design_depth)` table shared by all four levels.
#[derive(Debug, Clone)]
pub struct DepthEmbedding<T: Element> {
    pub table: Tensor<T>,
}

impl<T: Element> DepthEmbedding<T> {
    pub fn zeros(d_emb: usize, design_depth: usize) -> Self {
        DepthEmbedding {
            table: Tensor::parameter(vec![T::zero(); d_emb * design_depth], &[d_emb, design_depth])
                .expect("positive extents"),
        }
    }

    pub fn design_depth(&self) -> usize {
        self.table.shape()[1]
    }
}

/// Add the depth embedding, linearly interpolated to the pyramid depth, to
/// every level. Disabled, the pyramid is returned unchanged.
pub fn add_depth_embedding<T: Element>(
    tape: &Tape<T>,
    pyr: &FeaturePyramid<T>,
    emb: &DepthEmbedding<T>,
    enabled: bool,
) -> Result<FeaturePyramid<T>> {
    if !enabled {
        return Ok(pyr.clone());
    }
    let [c, d, _, _] = pyr.extents();
    let ts = emb.table.shape();
    if ts[0] != c {
        return Err(Error::shape("add_depth_embedding", ts, &[c, ts[1]]));
    }
    let table = tape.reshape(&emb.table, &[1, c, ts[1], 1, 1])?;
    let table = interp_trilinear(tape, &table, [d, 1, 1])?;
    let levels: Vec<Tensor<T>> = pyr.levels.iter().map(|l| tape.add(l, &table)).collect::<Result<_>>()?;
    FeaturePyramid::new(levels.try_into().expect("four levels"), pyr.source_extents)
}
