//! OCR encoder and OCR-Q bundled with the parameter store that owns them.

use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, OcrBatch, OcrEmbeddings, OcrEncoder};
use crate::error::Result;
use crate::nn::ParamStore;
use crate::ocrq::{OcrQ, OcrQConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d: usize,
    pub d_ocr: usize,
    pub encoder_layers: usize,
    pub ocrq_layers: usize,
    pub n_heads: usize,
    pub ff_mult: usize,
    pub n_buckets: usize,
    pub max_ocr_len: usize,
    pub max_text_len: usize,
    pub n_queries: usize,
    pub d_contrastive: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 256,
            d: 64,
            d_ocr: 64,
            encoder_layers: 4,
            ocrq_layers: 4,
            n_heads: 4,
            ff_mult: 4,
            n_buckets: 20,
            max_ocr_len: 128,
            max_text_len: 64,
            n_queries: 8,
            d_contrastive: 32,
        }
    }
}

impl ModelConfig {
    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            vocab_size: self.vocab_size,
            d_ocr: self.d_ocr,
            n_layers: self.encoder_layers,
            n_heads: self.n_heads,
            ff_mult: self.ff_mult,
            n_buckets: self.n_buckets,
            max_len: self.max_ocr_len,
        }
    }

    pub fn ocrq(&self) -> OcrQConfig {
        OcrQConfig {
            vocab_size: self.vocab_size,
            d: self.d,
            d_ocr: self.d_ocr,
            n_layers: self.ocrq_layers,
            n_heads: self.n_heads,
            ff_mult: self.ff_mult,
            n_queries: self.n_queries,
            max_text_len: self.max_text_len,
            d_contrastive: self.d_contrastive,
        }
    }
}

pub struct TapModel {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub encoder: OcrEncoder,
    pub ocrq: OcrQ,
}

impl TapModel {
    pub fn new(cfg: ModelConfig, seed: u64, dtype: DType) -> Result<Self> {
        let mut store = ParamStore::new(seed, dtype);
        let encoder = OcrEncoder::new(&mut store, "encoder", cfg.encoder())?;
        let ocrq = OcrQ::new(&mut store, "ocrq", cfg.ocrq())?;
        Ok(TapModel {
            cfg,
            store,
            encoder,
            ocrq,
        })
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn encode(&self, batch: &OcrBatch) -> Result<OcrEmbeddings> {
        self.encoder.forward(batch)
    }
}
