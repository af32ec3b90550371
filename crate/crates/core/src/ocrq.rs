//! The OCR-Q compressor.
//!
//! `K` learnable queries and a text sequence are concatenated and run through
//! transformer blocks whose self-attention parameters are shared by both
//! streams. Per block:
//!
//! 1. self-attention over `[queries; text]` under a [`MaskRegime`],
//! 2. cross-attention from the query positions to the OCR embeddings,
//! 3. a query-stream and a text-stream feed-forward sublayer.
//!
//! All sublayers are pre-norm residual. The query-stream output `r_q` always
//! has `K` rows, whatever the OCR or text length.

use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::encoder::OcrEmbeddings;
use crate::error::{Error, Result};
use crate::nn::{
    Embedding, FeedForward, KeyValue, LayerNorm, Linear, MultiHeadAttention, PadMask, ParamStore,
    MASK_BIAS,
};
use crate::tokenizer::PAD_ID;

/// Self-attention visibility between the query and text streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskRegime {
    /// Queries see queries; text sees all queries and earlier text.
    MultimodalCausal,
    /// Each stream sees only itself.
    Unimodal,
    /// Everything sees everything.
    Bidirectional,
}

impl MaskRegime {
    pub const ALL: [MaskRegime; 3] = [
        MaskRegime::MultimodalCausal,
        MaskRegime::Unimodal,
        MaskRegime::Bidirectional,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            MaskRegime::MultimodalCausal => "multimodal_causal",
            MaskRegime::Unimodal => "unimodal",
            MaskRegime::Bidirectional => "bidirectional",
        }
    }

    /// Whether position `row` may attend to position `col`, with queries at
    /// `0..k` and text after them.
    pub fn allows(&self, k: usize, row: usize, col: usize) -> bool {
        let row_is_query = row < k;
        let col_is_query = col < k;
        match self {
            MaskRegime::Bidirectional => true,
            MaskRegime::Unimodal => row_is_query == col_is_query,
            MaskRegime::MultimodalCausal => {
                if row_is_query {
                    col_is_query
                } else {
                    col_is_query || col <= row
                }
            }
        }
    }
}

impl fmt::Display for MaskRegime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MaskRegime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MaskRegime::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown mask regime {s:?}")))
    }
}

/// `(K+T) x (K+T)` visibility matrix, rows attend to columns.
pub fn build_attention_mask(regime: MaskRegime, k: usize, t: usize) -> Vec<Vec<bool>> {
    let n = k + t;
    (0..n)
        .map(|row| (0..n).map(|col| regime.allows(k, row, col)).collect())
        .collect()
}

/// Regime mask combined with per-row text padding, as an additive bias of
/// shape `[B, 1, K+T, K+T]`.
fn self_attention_bias(
    regime: MaskRegime,
    k: usize,
    text: &PadMask,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let t = text.len;
    let n = k + t;
    let base = build_attention_mask(regime, k, t);
    let mut data = Vec::with_capacity(text.batch * n * n);
    for b in 0..text.batch {
        for row in &base {
            for (col, &allowed) in row.iter().enumerate() {
                let valid = col < k || text.is_valid(b, col - k);
                data.push(if allowed && valid { 0.0 } else { MASK_BIAS });
            }
        }
    }
    Ok(Tensor::from_vec(data, (text.batch, 1, n, n), device)?.to_dtype(dtype)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcrQConfig {
    pub vocab_size: usize,
    pub d: usize,
    pub d_ocr: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ff_mult: usize,
    pub n_queries: usize,
    pub max_text_len: usize,
    pub d_contrastive: usize,
}

impl Default for OcrQConfig {
    fn default() -> Self {
        OcrQConfig {
            vocab_size: 256,
            d: 64,
            d_ocr: 64,
            n_layers: 4,
            n_heads: 4,
            ff_mult: 4,
            n_queries: 8,
            max_text_len: 64,
            d_contrastive: 32,
        }
    }
}

impl OcrQConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d {} must be divisible by n_heads {}",
                self.d, self.n_heads
            )));
        }
        if self.n_queries == 0 {
            return Err(Error::Config("need at least one query".into()));
        }
        if self.vocab_size == 0 || self.max_text_len == 0 || self.d_contrastive == 0 {
            return Err(Error::Config(
                "vocab_size, max_text_len and d_contrastive must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// The `K x d` learnable queries, broadcast to every batch row.
pub struct QueryBank {
    pub queries: Tensor,
}

impl QueryBank {
    pub fn new(store: &mut ParamStore, name: &str, k: usize, d: usize) -> Result<Self> {
        Ok(QueryBank {
            queries: store.normal(name, &[k, d], 0.02)?,
        })
    }

    pub fn k(&self) -> usize {
        self.queries.dims()[0]
    }

    pub fn expand(&self, batch: usize) -> Result<Tensor> {
        let (k, d) = self.queries.dims2()?;
        Ok(self
            .queries
            .unsqueeze(0)?
            .broadcast_as((batch, k, d))?
            .contiguous()?)
    }
}

/// Host-side padded text ids `[batch, len]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TextBatch {
    pub ids: Vec<u32>,
    pub pad: PadMask,
}

impl TextBatch {
    pub fn from_rows(rows: &[Vec<u32>]) -> Result<Self> {
        if rows.is_empty() || rows.iter().any(Vec::is_empty) {
            return Err(Error::Validation("text rows must be nonempty".into()));
        }
        let len = rows.iter().map(Vec::len).max().unwrap();
        let mut ids = Vec::with_capacity(rows.len() * len);
        let mut valid = Vec::with_capacity(rows.len() * len);
        for r in rows {
            ids.extend_from_slice(r);
            ids.extend(std::iter::repeat_n(PAD_ID, len - r.len()));
            valid.extend(std::iter::repeat_n(true, r.len()));
            valid.extend(std::iter::repeat_n(false, len - r.len()));
        }
        Ok(TextBatch {
            ids,
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
}

/// Query-stream and text-stream outputs of one forward pass.
pub struct DualStreamOutput {
    /// `[B, K, d]`
    pub r_q: Tensor,
    /// `[B, T, d]`
    pub r_m: Tensor,
}

/// Cross-attention keys/values for every block, computed once per OCR batch
/// and reusable across regimes.
pub struct CrossKv {
    per_layer: Vec<KeyValue>,
    bias: Tensor,
    batch: usize,
}

/// Which stream a sublayer serves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Query,
    Text,
}

pub struct OcrQLayer {
    pub ln_self: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub ln_cross: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub ln_ff_query: LayerNorm,
    pub ff_query: FeedForward,
    pub ln_ff_text: LayerNorm,
    pub ff_text: FeedForward,
}

impl OcrQLayer {
    fn new(store: &mut ParamStore, name: &str, cfg: &OcrQConfig) -> Result<Self> {
        let d = cfg.d;
        Ok(OcrQLayer {
            ln_self: LayerNorm::new(store, &format!("{name}.ln_self"), d)?,
            self_attn: MultiHeadAttention::new(
                store,
                &format!("{name}.self_attn"),
                d,
                d,
                cfg.n_heads,
            )?,
            ln_cross: LayerNorm::new(store, &format!("{name}.ln_cross"), d)?,
            cross_attn: MultiHeadAttention::new(
                store,
                &format!("{name}.cross_attn"),
                d,
                cfg.d_ocr,
                cfg.n_heads,
            )?,
            ln_ff_query: LayerNorm::new(store, &format!("{name}.ln_ff_query"), d)?,
            ff_query: FeedForward::new(store, &format!("{name}.ff_query"), d, cfg.ff_mult)?,
            ln_ff_text: LayerNorm::new(store, &format!("{name}.ln_ff_text"), d)?,
            ff_text: FeedForward::new(store, &format!("{name}.ff_text"), d, cfg.ff_mult)?,
        })
    }

    /// Self-attention used by `stream`. Both streams get the same object.
    pub fn self_attention_for(&self, _stream: Stream) -> &MultiHeadAttention {
        &self.self_attn
    }

    pub fn feed_forward_for(&self, stream: Stream) -> &FeedForward {
        match stream {
            Stream::Query => &self.ff_query,
            Stream::Text => &self.ff_text,
        }
    }

    fn forward(
        &self,
        x: &Tensor,
        k: usize,
        self_bias: &Tensor,
        kv: &KeyValue,
        cross_bias: &Tensor,
    ) -> Result<Tensor> {
        let t = x.dim(1)? - k;
        let h = self.ln_self.forward(x)?;
        let x = (x + self.self_attn.forward(&h, &h, self_bias)?)?;

        let queries = x.narrow(1, 0, k)?;
        let text = x.narrow(1, k, t)?;
        let queries = (&queries
            + self
                .cross_attn
                .attend(&self.ln_cross.forward(&queries)?, kv, cross_bias)?)?;
        let queries = (&queries
            + self
                .ff_query
                .forward(&self.ln_ff_query.forward(&queries)?)?)?;
        let text = (&text + self.ff_text.forward(&self.ln_ff_text.forward(&text)?)?)?;
        Ok(Tensor::cat(&[&queries, &text], 1)?)
    }
}

pub struct OcrQ {
    pub cfg: OcrQConfig,
    pub bank: QueryBank,
    pub token_emb: Embedding,
    pub position_emb: Embedding,
    pub layers: Vec<OcrQLayer>,
    pub ln_query_out: LayerNorm,
    pub ln_text_out: LayerNorm,
    pub lm_head: Linear,
    pub proj_query: Linear,
    pub proj_text: Linear,
    pub match_head: Linear,
}

impl OcrQ {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: OcrQConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d;
        let layers = (0..cfg.n_layers)
            .map(|i| OcrQLayer::new(store, &format!("{prefix}.layers.{i}"), &cfg))
            .collect::<Result<Vec<_>>>()?;
        Ok(OcrQ {
            bank: QueryBank::new(store, &format!("{prefix}.queries"), cfg.n_queries, d)?,
            token_emb: Embedding::new(
                store,
                &format!("{prefix}.token_emb"),
                cfg.vocab_size,
                d,
                0.02,
            )?,
            position_emb: Embedding::new(
                store,
                &format!("{prefix}.position_emb"),
                cfg.max_text_len,
                d,
                0.02,
            )?,
            layers,
            ln_query_out: LayerNorm::new(store, &format!("{prefix}.ln_query_out"), d)?,
            ln_text_out: LayerNorm::new(store, &format!("{prefix}.ln_text_out"), d)?,
            lm_head: Linear::new(store, &format!("{prefix}.lm_head"), d, cfg.vocab_size)?,
            proj_query: Linear::new(store, &format!("{prefix}.proj_query"), d, cfg.d_contrastive)?,
            proj_text: Linear::new(store, &format!("{prefix}.proj_text"), d, cfg.d_contrastive)?,
            match_head: Linear::new(store, &format!("{prefix}.match_head"), d, 1)?,
            cfg,
        })
    }

    pub fn k(&self) -> usize {
        self.cfg.n_queries
    }

    /// Token plus 1D position embedding; the text stream carries no layout.
    pub fn embed_text(&self, text: &TextBatch) -> Result<Tensor> {
        let (b, t) = (text.batch(), text.len());
        if t > self.cfg.max_text_len {
            return Err(Error::Validation(format!(
                "text length {t} exceeds max_text_len {}",
                self.cfg.max_text_len
            )));
        }
        if let Some(&bad) = text
            .ids
            .iter()
            .find(|&&id| id as usize >= self.cfg.vocab_size)
        {
            return Err(Error::Validation(format!(
                "text id {bad} outside vocabulary"
            )));
        }
        let dev = self.bank.queries.device();
        let ids = Tensor::from_vec(text.ids.clone(), (b, t), dev)?;
        let pos = Tensor::arange(0u32, t as u32, dev)?;
        Ok(self
            .token_emb
            .forward(&ids)?
            .broadcast_add(&self.position_emb.forward(&pos)?)?)
    }

    /// Project OCR embeddings into per-block cross-attention keys/values.
    pub fn cross_kv(&self, ocr: &OcrEmbeddings) -> Result<CrossKv> {
        let (batch, _, d_ocr) = ocr.values.dims3()?;
        if d_ocr != self.cfg.d_ocr {
            return Err(Error::Validation(format!(
                "OCR embeddings have width {d_ocr}, OCR-Q expects {}",
                self.cfg.d_ocr
            )));
        }
        Ok(CrossKv {
            per_layer: self
                .layers
                .iter()
                .map(|l| l.cross_attn.key_value(&ocr.values))
                .collect::<Result<Vec<_>>>()?,
            bias: ocr.key_bias()?,
            batch,
        })
    }

    pub fn forward(
        &self,
        text: &TextBatch,
        ocr: &OcrEmbeddings,
        regime: MaskRegime,
    ) -> Result<DualStreamOutput> {
        self.forward_with_kv(
            &self.embed_text(text)?,
            &text.pad,
            &self.cross_kv(ocr)?,
            regime,
        )
    }

    /// Forward pass from already-embedded text `[B, T, d]`.
    pub fn forward_embedded(
        &self,
        text_emb: &Tensor,
        text_pad: &PadMask,
        ocr: &OcrEmbeddings,
        regime: MaskRegime,
    ) -> Result<DualStreamOutput> {
        self.forward_with_kv(text_emb, text_pad, &self.cross_kv(ocr)?, regime)
    }

    pub fn forward_with_kv(
        &self,
        text_emb: &Tensor,
        text_pad: &PadMask,
        kv: &CrossKv,
        regime: MaskRegime,
    ) -> Result<DualStreamOutput> {
        let (b, t, d) = text_emb.dims3()?;
        if d != self.cfg.d || b != kv.batch || (b, t) != (text_pad.batch, text_pad.len) {
            return Err(Error::Validation(format!(
                "text embeddings {:?} inconsistent with pad mask {}x{}, OCR batch {} and width {}",
                text_emb.dims(),
                text_pad.batch,
                text_pad.len,
                kv.batch,
                self.cfg.d
            )));
        }
        let k = self.k();
        let self_bias =
            self_attention_bias(regime, k, text_pad, text_emb.dtype(), text_emb.device())?;
        let mut x = Tensor::cat(&[&self.bank.expand(b)?, text_emb], 1)?;
        for (layer, layer_kv) in self.layers.iter().zip(&kv.per_layer) {
            x = layer.forward(&x, k, &self_bias, layer_kv, &kv.bias)?;
        }
        Ok(DualStreamOutput {
            r_q: self.ln_query_out.forward(&x.narrow(1, 0, k)?)?,
            r_m: self.ln_text_out.forward(&x.narrow(1, k, t)?)?,
        })
    }

    /// Vocabulary logits `[B, T, V]`.
    pub fn lm_logits(&self, r_m: &Tensor) -> Result<Tensor> {
        self.lm_head.forward(r_m)
    }

    /// Unit-norm query projections `[B, K, d_c]`.
    pub fn project_queries(&self, r_q: &Tensor) -> Result<Tensor> {
        l2_normalize(&self.proj_query.forward(r_q)?)
    }

    /// Unit-norm projection of the prefix position `[B, d_c]`.
    pub fn project_text(&self, r_m: &Tensor) -> Result<Tensor> {
        l2_normalize(&self.proj_text.forward(&r_m.narrow(1, 0, 1)?.squeeze(1)?)?)
    }

    /// Per-query matching logits `[B, K, 1]`.
    pub fn match_logits(&self, r_q: &Tensor) -> Result<Tensor> {
        self.match_head.forward(r_q)
    }

    /// Per-row matching logit, averaged over queries: `[B]`.
    pub fn pooled_match_logit(&self, r_q: &Tensor) -> Result<Tensor> {
        Ok(self.match_logits(r_q)?.squeeze(D::Minus1)?.mean(1)?)
    }
}

fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let norm = x.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
    Ok(x.broadcast_div(&(norm + 1e-12)?)?)
}
