//! The trainable definition model: learned gloss embeddings, an encoder and
//! the tanh projection into the pretrained head-embedding space.

use ndarray::{Array1, Array2, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::PaddedBatch;
use crate::embeddings::{init_learned, LearnedTable};
use crate::encoder::{EncodeCache, Encoder, EncoderMode, Projection};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Gloss vocabulary size including UNK and PAD.
    pub vocab: usize,
    pub embed: usize,
    pub hidden: usize,
    /// Dimension of the pretrained head vectors.
    pub output: usize,
    pub pad_id: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DefinitionModel {
    pub embeddings: LearnedTable,
    pub encoder: Encoder,
    pub projection: Projection,
}

pub(crate) struct ForwardCache {
    pub(crate) embedded: Array2<f64>,
    pub(crate) encode: EncodeCache,
    pub(crate) encoded: Array1<f64>,
    pub(crate) output: Array1<f64>,
}

const ENCODER_STREAM: u64 = 0x5eed_e4c0_de00_0001;

impl DefinitionModel {
    /// Embeddings are uniform in ±0.05; LSTM and projection weights are
    /// uniform in ±1/√fan_in.
    pub fn init(dims: &ModelDims, mode: EncoderMode, seed: u64) -> Result<Self> {
        if dims.embed == 0 || dims.hidden == 0 || dims.output == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        let embeddings = init_learned(dims.vocab, dims.embed, dims.pad_id, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ENCODER_STREAM);
        let lstm_scale = 1.0 / (dims.hidden as f64).sqrt();
        let encoder = Encoder::new(mode, dims.embed, dims.hidden, lstm_scale, &mut rng);
        let width = mode.output_width(dims.hidden);
        let projection = Projection::uniform(width, dims.output, 1.0 / (width as f64).sqrt(), &mut rng);
        Ok(DefinitionModel {
            embeddings,
            encoder,
            projection,
        })
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            vocab: self.embeddings.vocab_size(),
            embed: self.embeddings.dim(),
            hidden: self.encoder.hidden(),
            output: self.projection.output(),
            pad_id: self.embeddings.pad_id,
        }
    }

    pub fn mode(&self) -> EncoderMode {
        self.encoder.mode
    }

    pub fn pad_id(&self) -> u32 {
        self.embeddings.pad_id
    }

    pub fn output_dim(&self) -> usize {
        self.projection.output()
    }

    /// Zero-valued parameters of the same shapes, used as a gradient buffer.
    pub fn zeros_like(&self) -> (Encoder, Projection) {
        (
            self.encoder.zeros_like(),
            Projection::zeros(self.projection.input(), self.projection.output()),
        )
    }

    pub fn embed(&self, tokens: &[u32]) -> Result<Array2<f64>> {
        let dim = self.embeddings.dim();
        let mut out = Array2::zeros((tokens.len(), dim));
        for (t, &id) in tokens.iter().enumerate() {
            if id as usize >= self.embeddings.vocab_size() {
                return Err(Error::Shape(format!(
                    "token id {id} outside vocab of {}",
                    self.embeddings.vocab_size()
                )));
            }
            out.row_mut(t).assign(&self.embeddings.row(id));
        }
        Ok(out)
    }

    /// Output vector for an unpadded gloss.
    pub fn forward(&self, tokens: &[u32]) -> Result<Array1<f64>> {
        let embedded = self.embed(tokens)?;
        let encoded = self.encoder.encode(embedded.view(), &vec![true; tokens.len()])?;
        self.projection.project(encoded.view())
    }

    /// Output vectors for every row of a padded batch. Each row is embedded
    /// at full padded width and the pad positions are masked out.
    pub fn forward_batch(&self, batch: &PaddedBatch) -> Result<Vec<Array1<f64>>> {
        (0..batch.rows())
            .map(|i| {
                let embedded = self.embed(batch.row(i))?;
                let encoded = self.encoder.encode(embedded.view(), &batch.mask(i))?;
                self.projection.project(encoded.view())
            })
            .collect()
    }

    pub(crate) fn forward_cached(&self, tokens: &[u32]) -> Result<ForwardCache> {
        let embedded = self.embed(tokens)?;
        let xs: Vec<ArrayView1<f64>> = embedded.outer_iter().collect();
        let (encoded, encode) = self.encoder.encode_sequence(&xs)?;
        let output = self.projection.project(encoded.view())?;
        Ok(ForwardCache {
            embedded,
            encode,
            encoded,
            output,
        })
    }

    /// Encoder then projection tensors, in a fixed order.
    pub(crate) fn dense_tensors(&self) -> Vec<&[f64]> {
        let mut out = self.encoder.tensors();
        out.extend(self.projection.tensors());
        out
    }

    pub(crate) fn dense_tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.encoder.tensors_mut();
        out.extend(self.projection.tensors_mut());
        out
    }
}
