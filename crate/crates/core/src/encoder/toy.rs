//! Deterministic frozen miniature ViT.
//!
//! Patch embedding, an optional fixed positional grid, an optional class
//! token, then pre-norm transformer blocks (self-attention and a GELU MLP).
//! All weights come from a seeded stream and are never trained.

use serde::{Deserialize, Serialize};

use super::{EncoderConfig, SliceContext, SliceEncoder, SliceFeatures, LEVELS};
use crate::error::{Error, Result};
use crate::nn::{gelu, layernorm_row, matmul_plain, resample_trilinear, softmax_row, Initializer};
use crate::tensor::Element;

/// Input channels the encoder expects; grayscale slices are replicated.
const IN_CHANNELS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyConfig {
    pub blocks: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub positional: bool,
    pub class_token: bool,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            blocks: 4,
            heads: 2,
            mlp_ratio: 2,
            positional: true,
            class_token: true,
            seed: 0x70f,
        }
    }
}

struct Block<T> {
    qkv: Vec<T>,
    proj: Vec<T>,
    fc1: Vec<T>,
    fc2: Vec<T>,
}

pub struct ToyVit<T: Element> {
    size: usize,
    patch: usize,
    d_emb: usize,
    heads: usize,
    hidden: usize,
    taps: [usize; LEVELS],
    patch_w: Vec<T>,
    patch_b: Vec<T>,
    pos: Option<Vec<T>>,
    cls: Option<Vec<T>>,
    blocks: Vec<Block<T>>,
    tag: String,
}

fn draw<T: Element>(init: &mut Initializer, n: usize, fan_in: usize) -> Vec<T> {
    init.uniform(n, (1.0 / fan_in as f64).sqrt())
        .into_iter()
        .map(T::lit)
        .collect()
}

impl<T: Element> ToyVit<T> {
    pub fn new(cfg: &EncoderConfig) -> Result<Self> {
        let t = &cfg.toy;
        if t.heads == 0 || !cfg.d_emb.is_multiple_of(t.heads) {
            return Err(Error::Config(format!(
                "d_emb {} must be divisible by {} heads",
                cfg.d_emb, t.heads
            )));
        }
        let (d, g) = (cfg.d_emb, cfg.grid());
        let k = IN_CHANNELS * cfg.patch_size * cfg.patch_size;
        let hidden = d * t.mlp_ratio.max(1);
        let mut init = Initializer::new(t.seed);
        let patch_w = draw(&mut init, k * d, k);
        let patch_b = draw(&mut init, d, k);
        let pos = t.positional.then(|| draw(&mut init, g * g * d, 1));
        let cls = t.class_token.then(|| draw(&mut init, d, 1));
        let blocks = (0..t.blocks)
            .map(|_| Block {
                qkv: draw(&mut init, d * 3 * d, d),
                proj: draw(&mut init, d * d, d),
                fc1: draw(&mut init, d * hidden, d),
                fc2: draw(&mut init, hidden * d, hidden),
            })
            .collect();
        Ok(ToyVit {
            size: cfg.native_size,
            patch: cfg.patch_size,
            d_emb: d,
            heads: t.heads,
            hidden,
            taps: cfg.tap_layers,
            patch_w,
            patch_b,
            pos,
            cls,
            blocks,
            tag: format!(
                "toy-vit s{} p{} d{} b{} seed{}",
                cfg.native_size, cfg.patch_size, d, t.blocks, t.seed
            ),
        })
    }

    pub fn grid(&self) -> usize {
        self.size / self.patch
    }

    /// Patch tokens `(G·G, d_emb)` from an `S×S` image replicated to three channels.
    fn embed(&self, img: &[T]) -> Vec<T> {
        let (g, p, s) = (self.grid(), self.patch, self.size);
        let k = IN_CHANNELS * p * p;
        let mut patches = vec![T::zero(); g * g * k];
        for gy in 0..g {
            for gx in 0..g {
                let row = &mut patches[(gy * g + gx) * k..][..k];
                for c in 0..IN_CHANNELS {
                    for py in 0..p {
                        for px in 0..p {
                            row[(c * p + py) * p + px] = img[(gy * p + py) * s + gx * p + px];
                        }
                    }
                }
            }
        }
        let mut tokens = matmul_plain(&patches, &self.patch_w, g * g, k, self.d_emb);
        for row in tokens.chunks_mut(self.d_emb) {
            for (v, &b) in row.iter_mut().zip(&self.patch_b) {
                *v += b;
            }
        }
        if let Some(pos) = &self.pos {
            for (v, &q) in tokens.iter_mut().zip(pos) {
                *v += q;
            }
        }
        tokens
    }

    fn attention(&self, b: &Block<T>, x: &[T], n: usize) -> Vec<T> {
        let d = self.d_emb;
        let hd = d / self.heads;
        let qkv = matmul_plain(x, &b.qkv, n, d, 3 * d);
        let scale = T::lit(1.0 / (hd as f64).sqrt());
        let mut mixed = vec![T::zero(); n * d];
        let mut scores = vec![T::zero(); n];
        for h in 0..self.heads {
            for i in 0..n {
                let q = &qkv[i * 3 * d + h * hd..][..hd];
                for (j, s) in scores.iter_mut().enumerate() {
                    let kj = &qkv[j * 3 * d + d + h * hd..][..hd];
                    *s = q.iter().zip(kj).map(|(&a, &b)| a * b).sum::<T>() * scale;
                }
                softmax_row(&mut scores);
                let out = &mut mixed[i * d + h * hd..][..hd];
                for (j, &a) in scores.iter().enumerate() {
                    let vj = &qkv[j * 3 * d + 2 * d + h * hd..][..hd];
                    for (o, &v) in out.iter_mut().zip(vj) {
                        *o += a * v;
                    }
                }
            }
        }
        matmul_plain(&mixed, &b.proj, n, d, d)
    }

    fn block(&self, b: &Block<T>, x: &mut [T], n: usize) {
        let d = self.d_emb;
        let mut h = x.to_vec();
        h.chunks_mut(d).for_each(layernorm_row);
        for (v, a) in x.iter_mut().zip(self.attention(b, &h, n)) {
            *v += a;
        }
        let mut h = x.to_vec();
        h.chunks_mut(d).for_each(layernorm_row);
        let mut mid = matmul_plain(&h, &b.fc1, n, d, self.hidden);
        mid.iter_mut().for_each(|v| *v = gelu(*v));
        for (v, m) in x.iter_mut().zip(matmul_plain(&mid, &b.fc2, n, self.hidden, d)) {
            *v += m;
        }
    }

    /// Encode an already `S×S` image; tokens are returned per tapped block as
    /// `(d_emb, G, G)` grids.
    pub fn encode_native(&self, img: &[T]) -> [Vec<T>; LEVELS] {
        let (g, d) = (self.grid(), self.d_emb);
        let patches = self.embed(img);
        let skip = self.cls.is_some() as usize;
        let mut x = Vec::with_capacity((g * g + skip) * d);
        if let Some(cls) = &self.cls {
            x.extend_from_slice(cls);
        }
        x.extend_from_slice(&patches);
        let n = g * g + skip;
        let mut taps: [Vec<T>; LEVELS] = Default::default();
        for (i, b) in self.blocks.iter().enumerate() {
            self.block(b, &mut x, n);
            if let Some(level) = self.taps.iter().position(|&t| t == i + 1) {
                let tokens = &x[skip * d..];
                let mut grid = vec![T::zero(); d * g * g];
                for (t, row) in tokens.chunks(d).enumerate() {
                    for (c, &v) in row.iter().enumerate() {
                        grid[c * g * g + t] = v;
                    }
                }
                taps[level] = grid;
            }
        }
        taps
    }
}

impl<T: Element> SliceEncoder<T> for ToyVit<T> {
    fn d_emb(&self) -> usize {
        self.d_emb
    }

    fn tag(&self) -> String {
        self.tag.clone()
    }

    fn encode_slice(&self, slice: &[T], extents: [usize; 2], _: &SliceContext<'_>) -> Result<SliceFeatures<T>> {
        if slice.len() != extents[0] * extents[1] || slice.is_empty() {
            return Err(Error::shape("encode_slice", &[slice.len()], &extents));
        }
        let img = resample_trilinear(slice, [1, extents[0], extents[1]], [1, self.size, self.size]);
        let g = self.grid();
        Ok(SliceFeatures {
            levels: self.encode_native(&img),
            d_emb: self.d_emb,
            grid: [g, g],
        })
    }
}
