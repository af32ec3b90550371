//! Inference-side plumbing: compress documents into K query vectors, lay out
//! the downstream LM input in baseline, Full or Light mode, and count the
//! forward FLOPs of that input.
//!
//! FLOP convention: forward pass only, one multiply-accumulate is 2 FLOPs,
//! embedding lookups, norms, softmax and biases are free.

use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::corpus::OcrDocument;
use crate::encoder::OcrBatch;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, TapModel};
use crate::ocrq::{MaskRegime, TextBatch};
use crate::tokenizer::{Vocabulary, CLS_ID};

/// Regime used at inference: queries and instruction attend to each other.
pub const INFERENCE_REGIME: MaskRegime = MaskRegime::Bidirectional;

/// Compressed pages: `vectors` is `[pages, K, d]`.
#[derive(Debug, Clone)]
pub struct CompressedOcr {
    pub vectors: Tensor,
    pub doc_ids: Vec<String>,
    pub instruction: String,
}

impl CompressedOcr {
    pub fn pages(&self) -> usize {
        self.vectors.dims()[0]
    }

    pub fn k(&self) -> usize {
        self.vectors.dims()[1]
    }

    pub fn to_json(&self) -> Result<CompressedJson> {
        Ok(CompressedJson {
            shape: self.vectors.dims().to_vec(),
            doc_ids: self.doc_ids.clone(),
            instruction: self.instruction.clone(),
            vectors: self.vectors.to_dtype(DType::F32)?.to_vec3::<f32>()?,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompressedJson {
    pub shape: Vec<usize>,
    pub doc_ids: Vec<String>,
    pub instruction: String,
    pub vectors: Vec<Vec<Vec<f32>>>,
}

fn instruction_text(vocab: &Vocabulary, instruction: &str) -> Result<TextBatch> {
    let mut ids = vec![CLS_ID];
    ids.extend(vocab.encode_text(instruction));
    TextBatch::from_rows(&[ids])
}

/// Encode one page and run OCR-Q with the instruction as text; returns `[1, K, d]`.
fn compress_page(
    model: &TapModel,
    vocab: &Vocabulary,
    doc: &OcrDocument,
    text: &TextBatch,
) -> Result<Tensor> {
    if doc.is_empty() {
        return Err(Error::Argument(format!(
            "document {} has no tokens",
            doc.doc_id
        )));
    }
    let ids = vocab.encode_tokens(&doc.tokens)?;
    let ocr = model.encode(&OcrBatch::from_rows(&[(ids, doc.bboxes.clone())])?)?;
    Ok(model.ocrq.forward(text, &ocr, INFERENCE_REGIME)?.r_q)
}

pub fn compress(
    model: &TapModel,
    vocab: &Vocabulary,
    doc: &OcrDocument,
    instruction: &str,
) -> Result<CompressedOcr> {
    let text = instruction_text(vocab, instruction)?;
    Ok(CompressedOcr {
        vectors: compress_page(model, vocab, doc, &text)?,
        doc_ids: vec![doc.doc_id.clone()],
        instruction: instruction.to_string(),
    })
}

/// Each page is compressed on its own and the blocks are stacked in page order.
pub fn compress_multipage(
    model: &TapModel,
    vocab: &Vocabulary,
    pages: &[OcrDocument],
    instruction: &str,
) -> Result<CompressedOcr> {
    if pages.is_empty() {
        return Err(Error::Argument(
            "multi-page compression needs at least one page".into(),
        ));
    }
    let text = instruction_text(vocab, instruction)?;
    let blocks = pages
        .iter()
        .map(|p| compress_page(model, vocab, p, &text))
        .collect::<Result<Vec<_>>>()?;
    Ok(CompressedOcr {
        vectors: Tensor::cat(&blocks, 0)?,
        doc_ids: pages.iter().map(|p| p.doc_id.clone()).collect(),
        instruction: instruction.to_string(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssemblyMode {
    /// Raw OCR words and instruction, no compressor.
    Baseline,
    /// Query vectors, raw OCR words, instruction.
    Full,
    /// Query vectors and instruction only.
    Light,
}

impl AssemblyMode {
    pub const ALL: [AssemblyMode; 3] = [
        AssemblyMode::Baseline,
        AssemblyMode::Full,
        AssemblyMode::Light,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            AssemblyMode::Baseline => "baseline",
            AssemblyMode::Full => "full",
            AssemblyMode::Light => "light",
        }
    }

    pub fn uses_compressor(&self) -> bool {
        !matches!(self, AssemblyMode::Baseline)
    }
}

impl fmt::Display for AssemblyMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AssemblyMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AssemblyMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown assembly mode {s:?}, expected baseline, full or light"
                ))
            })
    }
}

/// Where per-page raw OCR goes in multi-page Full mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RawOcrOrder {
    /// All query blocks, then every page's words as one long sequence.
    #[default]
    Concatenated,
    /// Each page's query block followed by that page's words.
    Interleaved,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SlotKind {
    Queries { page: usize },
    RawOcr { page: Option<usize> },
    Instruction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slot {
    #[serde(flatten)]
    pub kind: SlotKind,
    pub len: usize,
}

/// Ordered embedding slots of one downstream LM input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssembledInput {
    pub mode: AssemblyMode,
    pub slots: Vec<Slot>,
    pub seq_len: usize,
    pub k: usize,
    pub instr_len: usize,
    /// Raw OCR length of each page.
    pub page_ocr_lens: Vec<usize>,
}

impl AssembledInput {
    pub fn pages(&self) -> usize {
        self.page_ocr_lens.len()
    }

    pub fn ocr_len(&self) -> usize {
        self.page_ocr_lens.iter().sum()
    }
}

/// Slot layout from sizes alone.
pub fn assemble_lengths(
    mode: AssemblyMode,
    k: usize,
    page_ocr_lens: &[usize],
    instr_len: usize,
    order: RawOcrOrder,
) -> Result<AssembledInput> {
    if page_ocr_lens.is_empty() {
        return Err(Error::Argument("assembly needs at least one page".into()));
    }
    let mut slots = Vec::new();
    let queries = |page| Slot {
        kind: SlotKind::Queries { page },
        len: k,
    };
    let total_ocr: usize = page_ocr_lens.iter().sum();
    let all_raw = Slot {
        kind: SlotKind::RawOcr {
            page: if page_ocr_lens.len() == 1 {
                Some(0)
            } else {
                None
            },
        },
        len: total_ocr,
    };
    match mode {
        AssemblyMode::Baseline => slots.push(all_raw),
        AssemblyMode::Light => slots.extend((0..page_ocr_lens.len()).map(queries)),
        AssemblyMode::Full => match order {
            RawOcrOrder::Concatenated => {
                slots.extend((0..page_ocr_lens.len()).map(queries));
                slots.push(all_raw);
            }
            RawOcrOrder::Interleaved => {
                for (p, &len) in page_ocr_lens.iter().enumerate() {
                    slots.push(queries(p));
                    slots.push(Slot {
                        kind: SlotKind::RawOcr { page: Some(p) },
                        len,
                    });
                }
            }
        },
    }
    slots.push(Slot {
        kind: SlotKind::Instruction,
        len: instr_len,
    });
    Ok(AssembledInput {
        mode,
        seq_len: slots.iter().map(|s| s.len).sum(),
        slots,
        k,
        instr_len,
        page_ocr_lens: page_ocr_lens.to_vec(),
    })
}

/// Slot layout for an actual compressed document. `raw_ocr_ids` holds one id
/// list per page.
pub fn assemble_llm_input(
    compressed: &CompressedOcr,
    instruction_ids: &[u32],
    raw_ocr_ids: &[Vec<u32>],
    mode: AssemblyMode,
    order: RawOcrOrder,
) -> Result<AssembledInput> {
    if raw_ocr_ids.len() != compressed.pages() {
        return Err(Error::Argument(format!(
            "{} raw OCR pages for {} compressed pages",
            raw_ocr_ids.len(),
            compressed.pages()
        )));
    }
    let lens: Vec<usize> = raw_ocr_ids.iter().map(Vec::len).collect();
    assemble_lengths(mode, compressed.k(), &lens, instruction_ids.len(), order)
}

/// Split `total` words across `pages` as evenly as possible, earlier pages first.
pub fn split_pages(total: usize, pages: usize) -> Vec<usize> {
    (0..pages)
        .map(|p| total / pages + usize::from(p < total % pages))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LmArch {
    pub d_lm: u64,
    pub layers: u64,
    pub heads: u64,
    pub ff_mult: u64,
}

impl LmArch {
    pub fn validate(&self) -> Result<()> {
        if self.d_lm == 0 || self.layers == 0 || self.heads == 0 || self.ff_mult == 0 {
            return Err(Error::Config(format!(
                "LM architecture needs positive dimensions: {self:?}"
            )));
        }
        if self.d_lm % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_lm {} not divisible by {} heads",
                self.d_lm, self.heads
            )));
        }
        Ok(())
    }
}

impl FromStr for LmArch {
    type Err = Error;

    /// `d_lm,layers,heads,ff_mult`, e.g. `2048,24,16,4`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<u64> = s
            .split(',')
            .map(|p| p.trim().parse::<u64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| {
                Error::Config(format!(
                    "bad LM architecture {s:?}, expected d_lm,layers,heads,ff_mult"
                ))
            })?;
        let [d_lm, layers, heads, ff_mult] = parts[..] else {
            return Err(Error::Config(format!(
                "bad LM architecture {s:?}, expected four comma-separated integers"
            )));
        };
        let arch = LmArch {
            d_lm,
            layers,
            heads,
            ff_mult,
        };
        arch.validate()?;
        Ok(arch)
    }
}

/// Widths of the OCR module stages whose cost is charged in Full and Light.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OcrArch {
    pub encoder: LmArch,
    pub ocrq: LmArch,
}

impl OcrArch {
    pub fn from_model(cfg: &ModelConfig) -> Self {
        OcrArch {
            encoder: LmArch {
                d_lm: cfg.d_ocr as u64,
                layers: cfg.encoder_layers as u64,
                heads: cfg.n_heads as u64,
                ff_mult: cfg.ff_mult as u64,
            },
            ocrq: LmArch {
                d_lm: cfg.d as u64,
                layers: cfg.ocrq_layers as u64,
                heads: cfg.n_heads as u64,
                ff_mult: cfg.ff_mult as u64,
            },
        }
    }
}

impl Default for OcrArch {
    fn default() -> Self {
        Self::from_model(&ModelConfig::default())
    }
}

/// Attention FLOPs of one layer over `n` positions: four projections plus
/// scores and weighted values.
pub fn attention_flops(n: u64, d: u64) -> u128 {
    let (n, d) = (n as u128, d as u128);
    8 * n * d * d + 4 * n * n * d
}

pub fn mlp_flops(n: u64, d: u64, ff_mult: u64) -> u128 {
    let (n, d) = (n as u128, d as u128);
    4 * n * d * d * ff_mult as u128
}

/// (attention, mlp) over all layers of `arch` at sequence length `n`.
pub fn stack_flops(arch: &LmArch, n: u64) -> (u128, u128) {
    let layers = arch.layers as u128;
    (
        layers * attention_flops(n, arch.d_lm),
        layers * mlp_flops(n, arch.d_lm, arch.ff_mult),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopsProfile {
    pub mode: AssemblyMode,
    pub seq_len: usize,
    pub lm_attention_flops: u128,
    pub lm_mlp_flops: u128,
    pub lm_flops: u128,
    pub ocr_module_flops: u128,
    pub total_flops: u128,
}

/// Forward cost of the LM on the assembled input, plus per page the OCR
/// encoder over the page's words and OCR-Q over K queries and the instruction.
pub fn flops_report(
    lm: &LmArch,
    ocr: &OcrArch,
    assembled: &AssembledInput,
) -> Result<FlopsProfile> {
    lm.validate()?;
    let (attn, mlp) = stack_flops(lm, assembled.seq_len as u64);
    let mut ocr_module = 0u128;
    if assembled.mode.uses_compressor() {
        ocr.encoder.validate()?;
        ocr.ocrq.validate()?;
        for &l in &assembled.page_ocr_lens {
            let (ea, em) = stack_flops(&ocr.encoder, l as u64);
            let (qa, qm) = stack_flops(&ocr.ocrq, (assembled.k + assembled.instr_len) as u64);
            ocr_module += ea + em + qa + qm;
        }
    }
    Ok(FlopsProfile {
        mode: assembled.mode,
        seq_len: assembled.seq_len,
        lm_attention_flops: attn,
        lm_mlp_flops: mlp,
        lm_flops: attn + mlp,
        ocr_module_flops: ocr_module,
        total_flops: attn + mlp + ocr_module,
    })
}

/// Aligned text table, one row per profile.
pub fn flops_table(profiles: &[FlopsProfile]) -> String {
    let header = [
        "mode",
        "seq_len",
        "lm_attention",
        "lm_mlp",
        "lm_total",
        "ocr_module",
        "total",
        "TFLOPs",
    ];
    let rows: Vec<[String; 8]> = profiles
        .iter()
        .map(|p| {
            [
                p.mode.to_string(),
                p.seq_len.to_string(),
                p.lm_attention_flops.to_string(),
                p.lm_mlp_flops.to_string(),
                p.lm_flops.to_string(),
                p.ocr_module_flops.to_string(),
                p.total_flops.to_string(),
                format!("{:.4}", p.total_flops as f64 / 1e12),
            ]
        })
        .collect();
    let mut widths = header.map(str::len);
    for r in &rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let mut out = String::new();
    let mut line = |cells: Vec<&str>| {
        let parts: Vec<String> = cells
            .iter()
            .zip(widths)
            .enumerate()
            .map(|(i, (c, w))| {
                if i == 0 {
                    format!("{c:<w$}")
                } else {
                    format!("{c:>w$}")
                }
            })
            .collect();
        out.push_str(parts.join("  ").trim_end());
        out.push('\n');
    };
    line(header.to_vec());
    for r in &rows {
        line(r.iter().map(String::as_str).collect());
    }
    out
}
