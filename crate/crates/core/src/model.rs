//! Frozen slice encoder, depth embedding and decoder as one network.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decoder::{Decoder, DecoderConfig};
use crate::encoder::{add_depth_embedding, encode_subvolume, CubeContext, DepthEmbedding, EncoderConfig, SliceEncoder};
use crate::error::{Error, Result};
use crate::nn::Initializer;
use crate::tensor::{read_checkpoint, write_checkpoint, Element, Tape, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub depth_embedding: bool,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
            depth_embedding: true,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    /// Toy encoder and narrow decoder, small enough for unit-scale runs.
    pub fn toy(native_size: usize, patch_size: usize, d_emb: usize, width: usize) -> Self {
        ModelConfig {
            encoder: EncoderConfig::toy(native_size, patch_size, d_emb),
            decoder: DecoderConfig::uniform(width),
            depth_embedding: true,
            init_seed: 0,
        }
    }
}

pub const DEPTH_EMBEDDING_NAME: &str = "depth_embedding.table";

pub struct Model<T: Element> {
    cfg: ModelConfig,
    encoder: Box<dyn SliceEncoder<T>>,
    depth: DepthEmbedding<T>,
    decoder: Decoder<T>,
}

impl<T: Element> Model<T> {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        let encoder = cfg.encoder.build()?;
        Self::with_encoder(cfg, encoder)
    }

    pub fn with_encoder(cfg: &ModelConfig, encoder: Box<dyn SliceEncoder<T>>) -> Result<Self> {
        let d_emb = encoder.d_emb();
        if d_emb != cfg.encoder.d_emb {
            return Err(Error::Config(format!(
                "encoder produces d_emb {d_emb}, config says {}",
                cfg.encoder.d_emb
            )));
        }
        let mut init = Initializer::new(cfg.init_seed);
        let decoder = Decoder::new(&cfg.decoder, d_emb, &mut init)?;
        Ok(Model {
            cfg: cfg.clone(),
            encoder,
            depth: DepthEmbedding::zeros(d_emb, cfg.encoder.design_depth),
            decoder,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn encoder(&self) -> &dyn SliceEncoder<T> {
        self.encoder.as_ref()
    }

    pub fn decoder(&self) -> &Decoder<T> {
        &self.decoder
    }

    pub fn depth_embedding(&self) -> &DepthEmbedding<T> {
        &self.depth
    }

    /// Logits `(1, 1, d, h, w)` for a `(1, 1, d, h, w)` sub-volume. The
    /// encoder runs outside the tape; everything after it is recorded when
    /// `tape` is recording.
    pub fn forward(&self, tape: &Tape<T>, x: &Tensor<T>, ctx: &CubeContext) -> Result<Tensor<T>> {
        let pyr = encode_subvolume(self.encoder.as_ref(), x, ctx)?;
        let pyr = add_depth_embedding(tape, &pyr, &self.depth, self.cfg.depth_embedding)?;
        self.decoder.forward(tape, &pyr)
    }

    /// Mutable handles to every trainable tensor, depth embedding first.
    pub fn slots(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = vec![(DEPTH_EMBEDDING_NAME.to_string(), &mut self.depth.table)];
        out.extend(self.decoder.slots());
        out
    }

    pub fn parameters(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = vec![(DEPTH_EMBEDDING_NAME.to_string(), self.depth.table.clone())];
        out.extend(self.decoder.parameters());
        out
    }

    /// Trainable scalars; the depth table counts only when it is in use.
    pub fn parameter_count(&self) -> usize {
        let table = if self.cfg.depth_embedding {
            self.depth.table.numel()
        } else {
            0
        };
        table + self.decoder.parameter_count()
    }

    pub fn zero_grad(&self) {
        for (_, p) in self.parameters() {
            p.zero_grad();
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_checkpoint(path, &self.parameters())
    }

    /// Replace parameter values with a checkpoint's; names and shapes must match.
    pub fn load_state(&mut self, state: Vec<(String, Tensor<T>)>) -> Result<()> {
        let mut slots = self.slots();
        if state.len() != slots.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} tensors, model has {}",
                state.len(),
                slots.len()
            )));
        }
        for ((name, slot), (sname, t)) in slots.iter_mut().zip(&state) {
            if name != sname || slot.shape() != t.shape() {
                return Err(Error::Config(format!(
                    "checkpoint tensor {sname} {:?} does not match model tensor {name} {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
        }
        for ((_, slot), (_, t)) in slots.into_iter().zip(state) {
            *slot = Tensor::parameter(t.to_vec(), t.shape())?;
        }
        Ok(())
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        self.load_state(read_checkpoint(path)?)
    }
}
