//! Layout-aware OCR encoder: token, 1D position and bucketized 2D box
//! embeddings followed by a pre-norm bidirectional transformer stack.

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::corpus::BoundingBox;
use crate::error::{Error, Result};
use crate::nn::{Embedding, FeedForward, LayerNorm, MultiHeadAttention, PadMask, ParamStore};
use crate::tokenizer::PAD_ID;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_ocr: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ff_mult: usize,
    pub n_buckets: usize,
    pub max_len: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            vocab_size: 256,
            d_ocr: 64,
            n_layers: 4,
            n_heads: 4,
            ff_mult: 4,
            n_buckets: 20,
            max_len: 128,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_ocr % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_ocr {} must be divisible by n_heads {}",
                self.d_ocr, self.n_heads
            )));
        }
        if self.n_buckets < 2 {
            return Err(Error::Config("n_buckets must be at least 2".into()));
        }
        if self.vocab_size == 0 || self.max_len == 0 || self.ff_mult == 0 {
            return Err(Error::Config(
                "vocab_size, max_len and ff_mult must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Quantize a normalized coordinate: `floor(c * n)`, clipped to `n - 1`.
pub fn bucket(c: f64, n_buckets: usize) -> usize {
    ((c * n_buckets as f64).floor() as usize).min(n_buckets - 1)
}

/// Host-side padded OCR input: `[batch, len]` ids and boxes.
#[derive(Debug, Clone)]
pub struct OcrBatch {
    pub ids: Vec<u32>,
    pub boxes: Vec<BoundingBox>,
    pub pad: PadMask,
}

impl OcrBatch {
    /// Right-pads each row with PAD tokens carrying an all-zero box.
    pub fn from_rows(rows: &[(Vec<u32>, Vec<BoundingBox>)]) -> Result<Self> {
        let len = rows.iter().map(|(ids, _)| ids.len()).max().unwrap_or(0);
        Self::from_rows_padded(rows, len)
    }

    pub fn from_rows_padded(rows: &[(Vec<u32>, Vec<BoundingBox>)], len: usize) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Validation("OCR batch has no rows".into()));
        }
        let zero = BoundingBox {
            x0: 0.0,
            y0: 0.0,
            x1: 0.0,
            y1: 0.0,
        };
        let mut ids = Vec::with_capacity(rows.len() * len);
        let mut boxes = Vec::with_capacity(rows.len() * len);
        let mut valid = Vec::with_capacity(rows.len() * len);
        for (row_ids, row_boxes) in rows {
            if row_ids.len() != row_boxes.len() {
                return Err(Error::Validation(format!(
                    "{} ids but {} boxes",
                    row_ids.len(),
                    row_boxes.len()
                )));
            }
            if row_ids.is_empty() || row_ids.len() > len {
                return Err(Error::Validation(format!(
                    "row of length {} does not fit padded length {len}",
                    row_ids.len()
                )));
            }
            let pad = len - row_ids.len();
            ids.extend_from_slice(row_ids);
            ids.extend(std::iter::repeat_n(PAD_ID, pad));
            boxes.extend_from_slice(row_boxes);
            boxes.extend(std::iter::repeat_n(zero, pad));
            valid.extend(std::iter::repeat_n(true, row_ids.len()));
            valid.extend(std::iter::repeat_n(false, pad));
        }
        Ok(OcrBatch {
            ids,
            boxes,
            pad: PadMask::new(valid, rows.len(), len)?,
        })
    }

    pub fn batch(&self) -> usize {
        self.pad.batch
    }

    pub fn len(&self) -> usize {
        self.pad.len
    }

    pub fn is_empty(&self) -> bool {
        self.pad.len == 0
    }

    /// Rows `rows` of this batch, keeping the padded length.
    pub fn select_rows(&self, rows: &[usize]) -> OcrBatch {
        let len = self.len();
        let mut out = OcrBatch {
            ids: Vec::with_capacity(rows.len() * len),
            boxes: Vec::with_capacity(rows.len() * len),
            pad: PadMask {
                valid: Vec::with_capacity(rows.len() * len),
                batch: rows.len(),
                len,
            },
        };
        for &r in rows {
            let span = r * len..(r + 1) * len;
            out.ids.extend_from_slice(&self.ids[span.clone()]);
            out.boxes.extend_from_slice(&self.boxes[span.clone()]);
            out.pad.valid.extend_from_slice(&self.pad.valid[span]);
        }
        out
    }
}

/// Encoder output `O`: `[B, l, d_ocr]` plus the padding layout.
pub struct OcrEmbeddings {
    pub values: Tensor,
    pub pad_mask: PadMask,
}

pub struct EncoderLayer {
    pub ln_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln_ff: LayerNorm,
    pub ff: FeedForward,
}

impl EncoderLayer {
    fn new(store: &mut ParamStore, name: &str, cfg: &EncoderConfig) -> Result<Self> {
        Ok(EncoderLayer {
            ln_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), cfg.d_ocr)?,
            attn: MultiHeadAttention::new(
                store,
                &format!("{name}.attn"),
                cfg.d_ocr,
                cfg.d_ocr,
                cfg.n_heads,
            )?,
            ln_ff: LayerNorm::new(store, &format!("{name}.ln_ff"), cfg.d_ocr)?,
            ff: FeedForward::new(store, &format!("{name}.ff"), cfg.d_ocr, cfg.ff_mult)?,
        })
    }

    pub fn forward(&self, x: &Tensor, key_bias: &Tensor) -> Result<Tensor> {
        let h = self.ln_attn.forward(x)?;
        let x = (x + self.attn.forward(&h, &h, key_bias)?)?;
        let h = self.ln_ff.forward(&x)?;
        Ok((&x + self.ff.forward(&h)?)?)
    }
}

pub struct OcrEncoder {
    pub cfg: EncoderConfig,
    pub token_emb: Embedding,
    pub position_emb: Embedding,
    /// One table per coordinate: x0, y0, x1, y1.
    pub layout_emb: [Embedding; 4],
    pub layers: Vec<EncoderLayer>,
    pub ln_out: LayerNorm,
}

impl OcrEncoder {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_ocr;
        let token_emb = Embedding::new(
            store,
            &format!("{prefix}.token_emb"),
            cfg.vocab_size,
            d,
            0.02,
        )?;
        let position_emb = Embedding::new(
            store,
            &format!("{prefix}.position_emb"),
            cfg.max_len,
            d,
            0.02,
        )?;
        let mut layout = Vec::with_capacity(4);
        for coord in ["x0", "y0", "x1", "y1"] {
            layout.push(Embedding::new(
                store,
                &format!("{prefix}.layout_emb.{coord}"),
                cfg.n_buckets,
                d,
                0.02,
            )?);
        }
        let layers = (0..cfg.n_layers)
            .map(|i| EncoderLayer::new(store, &format!("{prefix}.layers.{i}"), &cfg))
            .collect::<Result<Vec<_>>>()?;
        let ln_out = LayerNorm::new(store, &format!("{prefix}.ln_out"), d)?;
        Ok(OcrEncoder {
            layout_emb: layout.try_into().ok().expect("four layout tables"),
            cfg,
            token_emb,
            position_emb,
            layers,
            ln_out,
        })
    }

    fn device(&self) -> &Device {
        self.token_emb.table.device()
    }

    /// token + position + sum of the four coordinate-bucket embeddings.
    pub fn embed(&self, batch: &OcrBatch) -> Result<Tensor> {
        let (b, l) = (batch.batch(), batch.len());
        if l > self.cfg.max_len {
            return Err(Error::Validation(format!(
                "OCR length {l} exceeds encoder max_len {}",
                self.cfg.max_len
            )));
        }
        if let Some(&bad) = batch
            .ids
            .iter()
            .find(|&&id| id as usize >= self.cfg.vocab_size)
        {
            return Err(Error::Validation(format!(
                "token id {bad} outside vocabulary of {}",
                self.cfg.vocab_size
            )));
        }
        for bx in &batch.boxes {
            bx.validate()?;
        }
        let dev = self.device();
        let ids = Tensor::from_vec(batch.ids.clone(), (b, l), dev)?;
        let positions = Tensor::arange(0u32, l as u32, dev)?;
        let mut x = self
            .token_emb
            .forward(&ids)?
            .broadcast_add(&self.position_emb.forward(&positions)?)?;
        let n = self.cfg.n_buckets;
        for (c, table) in self.layout_emb.iter().enumerate() {
            let buckets: Vec<u32> = batch
                .boxes
                .iter()
                .map(|bx| bucket(bx.to_array()[c], n) as u32)
                .collect();
            x = (x + table.forward(&Tensor::from_vec(buckets, (b, l), dev)?)?)?;
        }
        Ok(x)
    }

    /// Runs the transformer stack; padded keys receive no attention weight.
    pub fn encode(&self, embeddings: &Tensor, pad_mask: &PadMask) -> Result<OcrEmbeddings> {
        let (b, l, _) = embeddings.dims3()?;
        if (b, l) != (pad_mask.batch, pad_mask.len) {
            return Err(Error::Validation(format!(
                "embeddings are {b}x{l} but pad mask is {}x{}",
                pad_mask.batch, pad_mask.len
            )));
        }
        let bias = pad_mask.key_bias(embeddings.dtype(), embeddings.device())?;
        let mut x = embeddings.clone();
        for layer in &self.layers {
            x = layer.forward(&x, &bias)?;
        }
        Ok(OcrEmbeddings {
            values: self.ln_out.forward(&x)?,
            pad_mask: pad_mask.clone(),
        })
    }

    pub fn forward(&self, batch: &OcrBatch) -> Result<OcrEmbeddings> {
        self.encode(&self.embed(batch)?, &batch.pad)
    }
}

impl OcrEmbeddings {
    pub fn key_bias(&self) -> Result<Tensor> {
        self.pad_mask
            .key_bias(self.values.dtype(), self.values.device())
    }
}
