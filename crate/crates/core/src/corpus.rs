//! OCR document model, a synthetic form-like corpus generator, span masking
//! for denoising pretraining, and JSONL persistence.
//!
//! Coordinates are normalized page coordinates in `[0, 1]`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::{is_special_token, sentinel_token};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BoundingBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        let b = BoundingBox { x0, y0, x1, y1 };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        if !(in_unit(self.x0) && in_unit(self.y0) && in_unit(self.x1) && in_unit(self.y1)) {
            return Err(Error::Validation(format!(
                "bounding box {:?} has coordinates outside [0,1]",
                self.to_array()
            )));
        }
        if self.x0 > self.x1 || self.y0 > self.y1 {
            return Err(Error::Validation(format!(
                "bounding box {:?} is inverted",
                self.to_array()
            )));
        }
        Ok(())
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }

    pub fn from_array(a: [f64; 4]) -> Result<Self> {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0)
    }
}

/// Smallest box enclosing every input box.
pub fn min_covering_bbox(boxes: &[BoundingBox]) -> Result<BoundingBox> {
    let (first, rest) = boxes
        .split_first()
        .ok_or_else(|| Error::Argument("min_covering_bbox needs at least one box".into()))?;
    Ok(rest.iter().fold(*first, |acc, b| BoundingBox {
        x0: acc.x0.min(b.x0),
        y0: acc.y0.min(b.y0),
        x1: acc.x1.max(b.x1),
        y1: acc.y1.max(b.y1),
    }))
}

/// One page of OCR output: words in reading order with their boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct OcrDocument {
    pub doc_id: String,
    pub page_index: u32,
    pub tokens: Vec<String>,
    pub bboxes: Vec<BoundingBox>,
}

impl OcrDocument {
    pub fn new(
        doc_id: impl Into<String>,
        page_index: u32,
        tokens: Vec<String>,
        bboxes: Vec<BoundingBox>,
    ) -> Result<Self> {
        let doc = OcrDocument {
            doc_id: doc_id.into(),
            page_index,
            tokens,
            bboxes,
        };
        doc.validate()?;
        Ok(doc)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tokens.len() != self.bboxes.len() {
            return Err(Error::Validation(format!(
                "document {}: {} tokens but {} boxes",
                self.doc_id,
                self.tokens.len(),
                self.bboxes.len()
            )));
        }
        if self.tokens.is_empty() {
            return Err(Error::Validation(format!(
                "document {} has no tokens",
                self.doc_id
            )));
        }
        for t in &self.tokens {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Validation(format!(
                    "document {}: token {t:?} is empty or contains whitespace",
                    self.doc_id
                )));
            }
            if is_special_token(t) {
                return Err(Error::Validation(format!(
                    "document {}: token {t:?} collides with a special token",
                    self.doc_id
                )));
            }
        }
        for b in &self.bboxes {
            b.validate()?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Parameters of the synthetic form generator.
///
/// The page is a `rows x cols` grid of cells. Each key `k` owns a fixed
/// line inside cell `k mod (rows*cols)`; its value sits directly right of it
/// on the same line. Values are drawn from a per-key pool indexed by a
/// document-wide theme, so a masked value is recoverable from its key plus
/// any other visible value, and a masked key is recoverable from its box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutSpec {
    pub rows: usize,
    pub cols: usize,
    pub n_keys: usize,
    pub n_themes: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
}

impl Default for LayoutSpec {
    fn default() -> Self {
        LayoutSpec {
            rows: 4,
            cols: 2,
            n_keys: 32,
            n_themes: 4,
            min_tokens: 24,
            max_tokens: 64,
        }
    }
}

impl LayoutSpec {
    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::Config(format!(
                "layout grid must have nonzero rows and columns (got {}x{})",
                self.rows, self.cols
            )));
        }
        if self.n_keys == 0 || self.n_themes == 0 {
            return Err(Error::Config("n_keys and n_themes must be positive".into()));
        }
        if self.min_tokens == 0 || self.min_tokens > self.max_tokens {
            return Err(Error::Config(format!(
                "token range [{}, {}] is empty",
                self.min_tokens, self.max_tokens
            )));
        }
        if self.max_tokens > 2 * self.n_keys {
            return Err(Error::Config(format!(
                "max_tokens {} exceeds the {} tokens that {} keys can produce",
                self.max_tokens,
                2 * self.n_keys,
                self.n_keys
            )));
        }
        Ok(())
    }

    fn slots(&self) -> usize {
        self.rows * self.cols
    }

    fn lines_per_cell(&self) -> usize {
        self.n_keys.div_ceil(self.slots())
    }

    /// Grid cell (row, col) holding key `k`.
    pub fn cell_of_key(&self, key: usize) -> (usize, usize) {
        let slot = key % self.slots();
        (slot / self.cols, slot % self.cols)
    }

    fn line_of_key(&self, key: usize) -> usize {
        key / self.slots()
    }

    fn field_boxes(&self, key: usize) -> (BoundingBox, BoundingBox) {
        let (row, col) = self.cell_of_key(key);
        let cw = 1.0 / self.cols as f64;
        let ch = 1.0 / self.rows as f64;
        let cx = col as f64 * cw;
        let cy = row as f64 * ch;
        let lh = 0.9 * ch / self.lines_per_cell() as f64;
        let y0 = cy + 0.05 * ch + self.line_of_key(key) as f64 * lh;
        let y1 = y0 + 0.8 * lh;
        let key_box = BoundingBox {
            x0: cx + 0.05 * cw,
            y0,
            x1: cx + 0.45 * cw,
            y1,
        };
        let value_box = BoundingBox {
            x0: cx + 0.55 * cw,
            y0,
            x1: cx + 0.95 * cw,
            y1,
        };
        (key_box, value_box)
    }
}

pub fn key_word(key: usize) -> String {
    format!("key{key:02}")
}

pub fn value_word(key: usize, theme: usize) -> String {
    format!("val{key:02}_{theme}")
}

/// Deterministic synthetic form page for `seed`.
pub fn generate_synthetic_document(seed: u64, spec: &LayoutSpec) -> Result<OcrDocument> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let theme = rng.random_range(0..spec.n_themes);
    page_with_theme(&mut rng, format!("doc-{seed:016x}"), 0, theme, spec)
}

fn page_with_theme(
    rng: &mut ChaCha8Rng,
    doc_id: String,
    page_index: u32,
    theme: usize,
    spec: &LayoutSpec,
) -> Result<OcrDocument> {
    spec.validate()?;
    let n_tokens = rng.random_range(spec.min_tokens..=spec.max_tokens);
    let n_fields = n_tokens.div_ceil(2);
    let mut keys = index::sample(rng, spec.n_keys, n_fields).into_vec();
    // reading order: top to bottom, then left to right
    keys.sort_by_key(|&k| {
        let (row, col) = spec.cell_of_key(k);
        (row, spec.line_of_key(k), col)
    });

    let mut tokens = Vec::with_capacity(n_tokens);
    let mut bboxes = Vec::with_capacity(n_tokens);
    for &k in &keys {
        let (kb, vb) = spec.field_boxes(k);
        tokens.push(key_word(k));
        bboxes.push(kb);
        if tokens.len() < n_tokens {
            tokens.push(value_word(k, theme));
            bboxes.push(vb);
        }
    }
    OcrDocument::new(doc_id, page_index, tokens, bboxes)
}

/// Pages of one multi-page document: shared `doc_id`, increasing `page_index`.
pub fn generate_multipage_document(
    seed: u64,
    spec: &LayoutSpec,
    n_pages: usize,
) -> Result<Vec<OcrDocument>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let theme = rng.random_range(0..spec.n_themes);
    let doc_id = format!("doc-{seed:016x}");
    (0..n_pages)
        .map(|p| page_with_theme(&mut rng, doc_id.clone(), p as u32, theme, spec))
        .collect()
}

/// `n` single-page documents with distinct ids.
pub fn generate_corpus(n: usize, seed: u64, spec: &LayoutSpec) -> Result<Vec<OcrDocument>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = std::collections::HashSet::with_capacity(n);
    let mut docs = Vec::with_capacity(n);
    while docs.len() < n {
        let s: u64 = rng.random();
        if seen.insert(s) {
            docs.push(generate_synthetic_document(s, spec)?);
        }
    }
    Ok(docs)
}

/// A denoising sample: noisy OCR with sentinels plus the removed spans.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedExample {
    pub noisy_tokens: Vec<String>,
    pub noisy_bboxes: Vec<BoundingBox>,
    /// `(sentinel index, original span text)` in left-to-right order.
    pub target: Vec<(usize, String)>,
    /// Inclusive `(start, end)` indices into the original token list.
    pub spans: Vec<(usize, usize)>,
    pub source_doc_id: String,
}

impl MaskedExample {
    pub fn n_spans(&self) -> usize {
        self.spans.len()
    }

    pub fn masked_token_count(&self) -> usize {
        self.spans.iter().map(|(s, e)| e - s + 1).sum()
    }

    /// Re-expand sentinels into the original token sequence.
    pub fn restore_tokens(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut next = 0;
        for tok in &self.noisy_tokens {
            if next < self.target.len() && *tok == sentinel_token(self.target[next].0) {
                out.extend(self.target[next].1.split(' ').map(str::to_string));
                next += 1;
            } else {
                out.push(tok.clone());
            }
        }
        out
    }
}

/// Replace random spans with `<extra_id_i>` sentinels and covering boxes.
///
/// Exactly `clamp(round(n * mask_density), 1, n - 1)` tokens are masked.
/// Span lengths are geometric with mean `mean_span_len`, clipped to the
/// remaining budget; start positions are drawn by rejection so spans never
/// overlap.
pub fn mask_spans<R: Rng + ?Sized>(
    doc: &OcrDocument,
    mask_density: f64,
    mean_span_len: f64,
    rng: &mut R,
) -> Result<MaskedExample> {
    if !(mask_density > 0.0 && mask_density < 1.0) {
        return Err(Error::Argument(format!(
            "mask_density must lie in (0,1), got {mask_density}"
        )));
    }
    if !(mean_span_len >= 1.0 && mean_span_len.is_finite()) {
        return Err(Error::Argument(format!(
            "mean_span_len must be >= 1, got {mean_span_len}"
        )));
    }
    let n = doc.len();
    if n < 2 {
        return Err(Error::Argument(format!(
            "document {} needs at least 2 tokens to mask, has {n}",
            doc.doc_id
        )));
    }

    let budget = ((n as f64 * mask_density).round() as usize).clamp(1, n - 1);
    let geometric = Geometric::new(1.0 / mean_span_len)
        .map_err(|e| Error::Argument(format!("span length law: {e}")))?;

    let mut masked = vec![false; n];
    let mut spans: Vec<(usize, usize)> = Vec::new();
    let mut remaining = budget;
    while remaining > 0 {
        let mut len = (1 + geometric.sample(rng) as usize).min(remaining);
        let start = loop {
            if let Some(s) = draw_free_start(&masked, len, rng) {
                break Some(s);
            }
            if len == 1 {
                break None;
            }
            len -= 1;
        };
        let Some(start) = start else { break };
        masked[start..start + len]
            .iter_mut()
            .for_each(|m| *m = true);
        spans.push((start, start + len - 1));
        remaining -= len;
    }
    spans.sort_unstable();

    let mut noisy_tokens = Vec::with_capacity(n - budget + spans.len());
    let mut noisy_bboxes = Vec::with_capacity(noisy_tokens.capacity());
    let mut target = Vec::with_capacity(spans.len());
    let mut cursor = 0;
    for (i, &(s, e)) in spans.iter().enumerate() {
        noisy_tokens.extend_from_slice(&doc.tokens[cursor..s]);
        noisy_bboxes.extend_from_slice(&doc.bboxes[cursor..s]);
        noisy_tokens.push(sentinel_token(i));
        noisy_bboxes.push(min_covering_bbox(&doc.bboxes[s..=e])?);
        target.push((i, doc.tokens[s..=e].join(" ")));
        cursor = e + 1;
    }
    noisy_tokens.extend_from_slice(&doc.tokens[cursor..]);
    noisy_bboxes.extend_from_slice(&doc.bboxes[cursor..]);

    Ok(MaskedExample {
        noisy_tokens,
        noisy_bboxes,
        target,
        spans,
        source_doc_id: doc.doc_id.clone(),
    })
}

fn draw_free_start<R: Rng + ?Sized>(masked: &[bool], len: usize, rng: &mut R) -> Option<usize> {
    let n = masked.len();
    if len > n {
        return None;
    }
    let fits = |s: usize| masked[s..s + len].iter().all(|m| !m);
    for _ in 0..32 {
        let s = rng.random_range(0..=n - len);
        if fits(s) {
            return Some(s);
        }
    }
    let free: Vec<usize> = (0..=n - len).filter(|&s| fits(s)).collect();
    if free.is_empty() {
        None
    } else {
        Some(free[rng.random_range(0..free.len())])
    }
}

#[derive(Serialize, Deserialize)]
struct DocRecord {
    doc_id: String,
    page_index: u32,
    tokens: Vec<String>,
    bboxes: Vec<[f64; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    target: Option<Vec<(usize, String)>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    spans: Option<Vec<(usize, usize)>>,
}

impl From<&OcrDocument> for DocRecord {
    fn from(d: &OcrDocument) -> Self {
        DocRecord {
            doc_id: d.doc_id.clone(),
            page_index: d.page_index,
            tokens: d.tokens.clone(),
            bboxes: d.bboxes.iter().map(BoundingBox::to_array).collect(),
            target: None,
            spans: None,
        }
    }
}

fn boxes_from_arrays(raw: &[[f64; 4]], line: usize) -> Result<Vec<BoundingBox>> {
    raw.iter()
        .map(|a| BoundingBox::from_array(*a))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| Error::Validation(format!("line {line}: {e}")))
}

fn write_jsonl<T: Serialize>(records: impl Iterator<Item = T>, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, &r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn read_jsonl(path: &Path) -> Result<Vec<(usize, DocRecord)>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DocRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push((i + 1, rec));
    }
    Ok(out)
}

/// Write one JSON document per line.
pub fn save_corpus(docs: &[OcrDocument], path: impl AsRef<Path>) -> Result<()> {
    write_jsonl(docs.iter().map(DocRecord::from), path.as_ref())
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<OcrDocument>> {
    read_jsonl(path.as_ref())?
        .into_iter()
        .map(|(line, rec)| {
            let bboxes = boxes_from_arrays(&rec.bboxes, line)?;
            OcrDocument::new(rec.doc_id, rec.page_index, rec.tokens, bboxes)
                .map_err(|e| Error::Validation(format!("line {line}: {e}")))
        })
        .collect()
}

/// Masked-example cache: corpus format plus `target` and `spans`.
pub fn save_masked(examples: &[MaskedExample], path: impl AsRef<Path>) -> Result<()> {
    write_jsonl(
        examples.iter().map(|m| DocRecord {
            doc_id: m.source_doc_id.clone(),
            page_index: 0,
            tokens: m.noisy_tokens.clone(),
            bboxes: m.noisy_bboxes.iter().map(BoundingBox::to_array).collect(),
            target: Some(m.target.clone()),
            spans: Some(m.spans.clone()),
        }),
        path.as_ref(),
    )
}

pub fn load_masked(path: impl AsRef<Path>) -> Result<Vec<MaskedExample>> {
    read_jsonl(path.as_ref())?
        .into_iter()
        .map(|(line, rec)| {
            let noisy_bboxes = boxes_from_arrays(&rec.bboxes, line)?;
            if noisy_bboxes.len() != rec.tokens.len() {
                return Err(Error::Validation(format!(
                    "line {line}: {} tokens but {} boxes",
                    rec.tokens.len(),
                    noisy_bboxes.len()
                )));
            }
            let (Some(target), Some(spans)) = (rec.target, rec.spans) else {
                return Err(Error::Validation(format!(
                    "line {line}: masked example lacks target or spans"
                )));
            };
            Ok(MaskedExample {
                noisy_tokens: rec.tokens,
                noisy_bboxes,
                target,
                spans,
                source_doc_id: rec.doc_id,
            })
        })
        .collect()
}
