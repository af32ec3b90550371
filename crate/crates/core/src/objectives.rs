//! The three pretraining objectives and their weighted combination.
//!
//! * denoising: the text stream regenerates the masked spans under the
//!   multimodal-causal regime, seeing the OCR only through the queries;
//! * contrastive: unimodal regime, similarity between each document's
//!   queries and the `<cls>` representation of masked words;
//! * matching: bidirectional regime, binary classification of
//!   (noisy OCR, masked words) pairs against mined hard negatives.

use candle_core::{DType, Tensor, D};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::MaskedExample;
use crate::encoder::{OcrBatch, OcrEmbeddings};
use crate::error::{Error, Result};
use crate::model::TapModel;
use crate::nn::{log_softmax_last, MASK_BIAS};
use crate::ocrq::{CrossKv, DualStreamOutput, MaskRegime, TextBatch};
use crate::tokenizer::{Vocabulary, CLS_ID, DEC_ID, PAD_ID};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    /// Contrastive temperature.
    pub tau: f64,
    /// Probability of keeping the true pair in the matching objective.
    pub match_p: f64,
    pub w_lm: f64,
    pub w_con: f64,
    pub w_match: f64,
    /// Add the text-to-query direction to the contrastive loss.
    pub symmetric_contrastive: bool,
    /// Keep the positive in the contrastive denominator (standard InfoNCE).
    pub include_positive: bool,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            tau: 0.07,
            match_p: 0.5,
            w_lm: 1.0,
            w_con: 1.0,
            w_match: 1.0,
            symmetric_contrastive: false,
            include_positive: false,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!(
                "tau must be positive, got {}",
                self.tau
            )));
        }
        if !(0.0..=1.0).contains(&self.match_p) {
            return Err(Error::Config(format!(
                "match_p must lie in [0,1], got {}",
                self.match_p
            )));
        }
        Ok(())
    }
}

/// Noisy OCR inputs and encoded target sequences for one step.
#[derive(Debug, Clone)]
pub struct PretrainBatch {
    pub ocr: OcrBatch,
    /// `EXTRA_ID_i, words...` per row.
    pub targets: Vec<Vec<u32>>,
    pub doc_ids: Vec<String>,
    /// Ids below this value are special tokens (PAD, UNK, DEC, CLS, sentinels).
    pub n_special: u32,
}

impl PretrainBatch {
    pub fn from_examples(examples: &[MaskedExample], vocab: &Vocabulary) -> Result<Self> {
        let mut rows = Vec::with_capacity(examples.len());
        let mut targets = Vec::with_capacity(examples.len());
        for ex in examples {
            if ex.target.is_empty() {
                return Err(Error::Validation(format!(
                    "example from {} has no masked span",
                    ex.source_doc_id
                )));
            }
            rows.push((
                vocab.encode_tokens(&ex.noisy_tokens)?,
                ex.noisy_bboxes.clone(),
            ));
            targets.push(vocab.encode_target(&ex.target)?);
        }
        Ok(PretrainBatch {
            ocr: OcrBatch::from_rows(&rows)?,
            targets,
            doc_ids: examples.iter().map(|e| e.source_doc_id.clone()).collect(),
            n_special: vocab.n_special() as u32,
        })
    }

    pub fn batch(&self) -> usize {
        self.targets.len()
    }

    /// Teacher-forced denoising input `[DEC] + target[..-1]` and labels `target`.
    pub fn denoising_text(&self) -> Result<(TextBatch, Vec<u32>)> {
        let inputs: Vec<Vec<u32>> = self
            .targets
            .iter()
            .map(|t| {
                let mut v = Vec::with_capacity(t.len());
                v.push(DEC_ID);
                v.extend_from_slice(&t[..t.len() - 1]);
                v
            })
            .collect();
        let text = TextBatch::from_rows(&inputs)?;
        let len = text.len();
        let mut labels = Vec::with_capacity(self.batch() * len);
        for t in &self.targets {
            labels.extend_from_slice(t);
            labels.extend(std::iter::repeat_n(PAD_ID, len - t.len()));
        }
        Ok((text, labels))
    }

    /// `[CLS] + targets[partner[i]]` for each row `i`.
    pub fn cls_text(&self, partner: &[usize]) -> Result<TextBatch> {
        let rows: Vec<Vec<u32>> = partner
            .iter()
            .map(|&j| {
                let mut v = Vec::with_capacity(self.targets[j].len() + 1);
                v.push(CLS_ID);
                v.extend_from_slice(&self.targets[j]);
                v
            })
            .collect();
        TextBatch::from_rows(&rows)
    }
}

/// OCR embeddings plus cached cross-attention keys/values.
pub struct EncodedBatch {
    pub ocr: OcrEmbeddings,
    pub kv: CrossKv,
}

pub fn encode_batch(model: &TapModel, batch: &PretrainBatch) -> Result<EncodedBatch> {
    let ocr = model.encode(&batch.ocr)?;
    let kv = model.ocrq.cross_kv(&ocr)?;
    Ok(EncodedBatch { ocr, kv })
}

fn run_text(
    model: &TapModel,
    enc: &EncodedBatch,
    text: &TextBatch,
    regime: MaskRegime,
) -> Result<DualStreamOutput> {
    let emb = model.ocrq.embed_text(text)?;
    model.ocrq.forward_with_kv(&emb, &text.pad, &enc.kv, regime)
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn to_rows(t: &Tensor) -> Result<Vec<Vec<f64>>> {
    Ok(t.to_dtype(DType::F64)?.to_vec2::<f64>()?)
}

/// Mean negative log-likelihood over positions with `valid` set.
pub fn masked_cross_entropy(logits: &Tensor, labels: &[u32], valid: &[bool]) -> Result<Tensor> {
    let n_valid = valid.iter().filter(|&&v| v).count();
    if n_valid == 0 {
        return Err(Error::Argument("cross-entropy over zero labels".into()));
    }
    let v = logits.dim(D::Minus1)?;
    let rows = logits.elem_count() / v;
    if labels.len() != rows || valid.len() != rows {
        return Err(Error::Validation(format!(
            "{} labels for {rows} logit rows",
            labels.len()
        )));
    }
    let dev = logits.device();
    let logp = log_softmax_last(&logits.reshape((rows, v))?)?;
    let idx = Tensor::from_vec(labels.to_vec(), (rows, 1), dev)?;
    let picked = logp.gather(&idx, 1)?.squeeze(1)?;
    let weights: Vec<f64> = valid.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let weights = Tensor::from_vec(weights, rows, dev)?.to_dtype(logits.dtype())?;
    Ok(((picked * weights)?.sum_all()? * (-1.0 / n_valid as f64))?)
}

pub struct DenoisingOutput {
    pub loss: Tensor,
    /// `[B, T, V]`
    pub logits: Tensor,
    pub labels: Vec<u32>,
    pub label_valid: Vec<bool>,
    /// Argmax accuracy over masked-word labels (sentinel labels excluded).
    pub word_accuracy: f64,
    pub n_words: usize,
}

pub fn denoising_with(
    model: &TapModel,
    batch: &PretrainBatch,
    enc: &EncodedBatch,
) -> Result<DenoisingOutput> {
    let (text, labels) = batch.denoising_text()?;
    let out = run_text(model, enc, &text, MaskRegime::MultimodalCausal)?;
    let logits = model.ocrq.lm_logits(&out.r_m)?;
    let label_valid = text.pad.valid.clone();
    let loss = masked_cross_entropy(&logits, &labels, &label_valid)?;

    let v = logits.dim(D::Minus1)?;
    let pred = logits
        .reshape((labels.len(), v))?
        .argmax(D::Minus1)?
        .to_vec1::<u32>()?;
    let mut hits = 0;
    let mut n_words = 0;
    for ((&p, &y), &ok) in pred.iter().zip(&labels).zip(&label_valid) {
        if ok && y >= batch.n_special {
            n_words += 1;
            hits += usize::from(p == y);
        }
    }
    Ok(DenoisingOutput {
        loss,
        logits,
        labels,
        label_valid,
        word_accuracy: if n_words > 0 {
            hits as f64 / n_words as f64
        } else {
            0.0
        },
        n_words,
    })
}

pub fn denoising_loss(model: &TapModel, batch: &PretrainBatch) -> Result<DenoisingOutput> {
    denoising_with(model, batch, &encode_batch(model, batch)?)
}

/// `S[i, j] = max_k <proj_q(r_q)[i, k], proj_t(r_m)[j, 0]>`.
pub fn similarity_from_streams(model: &TapModel, out: &DualStreamOutput) -> Result<Tensor> {
    let q = model.ocrq.project_queries(&out.r_q)?;
    let t = model.ocrq.project_text(&out.r_m)?;
    let (b, k, dc) = q.dims3()?;
    let bt = t.dim(0)?;
    let pairwise = q
        .reshape((b * k, dc))?
        .matmul(&t.t()?)?
        .reshape((b, k, bt))?;
    Ok(pairwise.max(1)?)
}

pub fn contrastive_with(
    model: &TapModel,
    batch: &PretrainBatch,
    enc: &EncodedBatch,
) -> Result<Tensor> {
    if batch.batch() < 2 {
        return Err(Error::Argument(
            "contrastive similarity needs a batch of at least 2".into(),
        ));
    }
    let identity: Vec<usize> = (0..batch.batch()).collect();
    let out = run_text(
        model,
        enc,
        &batch.cls_text(&identity)?,
        MaskRegime::Unimodal,
    )?;
    similarity_from_streams(model, &out)
}

/// Query-to-text similarity matrix `[B, B]` under the unimodal regime.
pub fn contrastive_similarity(model: &TapModel, batch: &PretrainBatch) -> Result<Tensor> {
    contrastive_with(model, batch, &encode_batch(model, batch)?)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveOptions {
    pub symmetric: bool,
    pub include_positive: bool,
}

/// `-(1/B) sum_i log(exp(S_ii/tau) / sum_{j != i} exp(S_ij/tau))`.
///
/// The positive is excluded from the denominator unless
/// `opts.include_positive` is set, so the value can be negative.
pub fn contrastive_loss(s: &Tensor, tau: f64, opts: ContrastiveOptions) -> Result<Tensor> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("tau must be positive, got {tau}")));
    }
    let (b, b2) = s.dims2()?;
    if b != b2 || b < 2 {
        return Err(Error::Argument(format!(
            "contrastive loss needs a square matrix with B >= 2, got {b}x{b2}"
        )));
    }
    let one_direction = |logits: &Tensor| -> Result<Tensor> {
        let eye = Tensor::eye(b, logits.dtype(), logits.device())?;
        let positive = (logits * &eye)?.sum(1)?;
        let masked = if opts.include_positive {
            logits.clone()
        } else {
            (logits + (&eye * MASK_BIAS)?)?
        };
        let max = masked.max_keepdim(1)?.detach();
        let lse = (masked.broadcast_sub(&max)?.exp()?.sum(1)?.log()? + max.squeeze(1)?)?;
        Ok((lse - positive)?.mean_all()?)
    };
    let logits = (s * (1.0 / tau))?;
    let forward = one_direction(&logits)?;
    if opts.symmetric {
        let backward = one_direction(&logits.t()?.contiguous()?)?;
        Ok(((forward + backward)? * 0.5)?)
    } else {
        Ok(forward)
    }
}

/// For each row, sample a negative column with probability proportional to
/// `softmax(S[i, j])` over `j != i` with a different document id. Rows whose
/// candidates all share its document id fall back to uniform over `j != i`.
pub fn mine_hard_negatives<R: Rng + ?Sized>(
    s: &[Vec<f64>],
    doc_ids: &[String],
    rng: &mut R,
) -> Result<Vec<usize>> {
    let b = s.len();
    if b < 2 || doc_ids.len() != b || s.iter().any(|r| r.len() != b) {
        return Err(Error::Argument(format!(
            "hard-negative mining needs a square B >= 2 matrix with B doc ids (B = {b})"
        )));
    }
    if s.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("similarity matrix".into()));
    }
    let mut out = Vec::with_capacity(b);
    for i in 0..b {
        let candidates: Vec<usize> = (0..b)
            .filter(|&j| j != i && doc_ids[j] != doc_ids[i])
            .collect();
        let pick = if candidates.is_empty() {
            let others: Vec<usize> = (0..b).filter(|&j| j != i).collect();
            others[rng.random_range(0..others.len())]
        } else {
            let max = candidates
                .iter()
                .map(|&j| s[i][j])
                .fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = candidates.iter().map(|&j| (s[i][j] - max).exp()).collect();
            let dist = WeightedIndex::new(&weights)
                .map_err(|e| Error::Argument(format!("similarity row {i}: {e}")))?;
            candidates[dist.sample(rng)]
        };
        out.push(pick);
    }
    Ok(out)
}

/// Text partner and label for each OCR row of the matching objective.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchingPairs {
    pub partner: Vec<usize>,
    pub labels: Vec<f64>,
}

/// Keep the true pair with probability `p`, else swap in the mined negative.
pub fn build_matching_pairs<R: Rng + ?Sized>(
    negatives: &[usize],
    p: f64,
    rng: &mut R,
) -> Result<MatchingPairs> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!(
            "match probability must lie in [0,1], got {p}"
        )));
    }
    let mut partner = Vec::with_capacity(negatives.len());
    let mut labels = Vec::with_capacity(negatives.len());
    for (i, &neg) in negatives.iter().enumerate() {
        if rng.random::<f64>() < p {
            partner.push(i);
            labels.push(1.0);
        } else {
            partner.push(neg);
            labels.push(0.0);
        }
    }
    Ok(MatchingPairs { partner, labels })
}

/// Mean of `softplus(x) - y x`, the binary cross-entropy of `sigmoid(x)`.
pub fn bce_with_logits(logits: &Tensor, labels: &[f64]) -> Result<Tensor> {
    let y = Tensor::from_vec(labels.to_vec(), labels.len(), logits.device())?
        .to_dtype(logits.dtype())?;
    let softplus = (logits.relu()? + ((logits.abs()? * -1.0)?.exp()? + 1.0)?.log()?)?;
    Ok((softplus - (logits * y)?)?.mean_all()?)
}

pub struct MatchingOutput {
    pub loss: Tensor,
    /// Pooled logit per row, `[B]`.
    pub logits: Tensor,
    pub pairs: MatchingPairs,
    pub accuracy: f64,
}

pub fn matching_for_pairs(
    model: &TapModel,
    batch: &PretrainBatch,
    enc: &EncodedBatch,
    pairs: MatchingPairs,
) -> Result<MatchingOutput> {
    let out = run_text(
        model,
        enc,
        &batch.cls_text(&pairs.partner)?,
        MaskRegime::Bidirectional,
    )?;
    let logits = model.ocrq.pooled_match_logit(&out.r_q)?;
    let loss = bce_with_logits(&logits, &pairs.labels)?;
    let host = logits.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    let correct = host
        .iter()
        .zip(&pairs.labels)
        .filter(|(&x, &y)| (x > 0.0) == (y > 0.5))
        .count();
    Ok(MatchingOutput {
        loss,
        logits,
        accuracy: correct as f64 / host.len() as f64,
        pairs,
    })
}

/// Matching objective with negatives mined from this batch's similarities.
pub fn matching_loss<R: Rng + ?Sized>(
    model: &TapModel,
    batch: &PretrainBatch,
    p: f64,
    rng: &mut R,
) -> Result<MatchingOutput> {
    let enc = encode_batch(model, batch)?;
    let s = to_rows(&contrastive_with(model, batch, &enc)?)?;
    let negatives = mine_hard_negatives(&s, &batch.doc_ids, rng)?;
    let pairs = build_matching_pairs(&negatives, p, rng)?;
    matching_for_pairs(model, batch, &enc, pairs)
}

/// Fraction of rows whose most similar column is their own.
pub fn retrieval_top1(s: &[Vec<f64>]) -> f64 {
    let hits = s
        .iter()
        .enumerate()
        .filter(|(i, row)| {
            let best = row
                .iter()
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |acc, (j, &v)| if v > acc.1 { (j, v) } else { acc },
                );
            best.0 == *i
        })
        .count();
    hits as f64 / s.len() as f64
}

pub struct LossBundle {
    /// Weighted sum, differentiable.
    pub total: Tensor,
    pub total_value: f64,
    pub l_lm: f64,
    pub l_con: f64,
    pub l_match: f64,
    pub acc_lm: f64,
    pub acc_ret: f64,
    pub acc_match: f64,
}

/// All three objectives on one batch, each under its own regime.
pub fn total_loss<R: Rng + ?Sized>(
    model: &TapModel,
    batch: &PretrainBatch,
    cfg: &ObjectiveConfig,
    rng: &mut R,
) -> Result<LossBundle> {
    cfg.validate()?;
    let enc = encode_batch(model, batch)?;

    let den = denoising_with(model, batch, &enc)?;
    let s = contrastive_with(model, batch, &enc)?;
    let l_con = contrastive_loss(
        &s,
        cfg.tau,
        ContrastiveOptions {
            symmetric: cfg.symmetric_contrastive,
            include_positive: cfg.include_positive,
        },
    )?;
    let s_host = to_rows(&s)?;
    let negatives = mine_hard_negatives(&s_host, &batch.doc_ids, rng)?;
    let pairs = build_matching_pairs(&negatives, cfg.match_p, rng)?;
    let mat = matching_for_pairs(model, batch, &enc, pairs)?;

    let total = (((&den.loss * cfg.w_lm)? + (&l_con * cfg.w_con)?)? + (&mat.loss * cfg.w_match)?)?;
    Ok(LossBundle {
        total_value: scalar(&total)?,
        total,
        l_lm: scalar(&den.loss)?,
        l_con: scalar(&l_con)?,
        l_match: scalar(&mat.loss)?,
        acc_lm: den.word_accuracy,
        acc_ret: retrieval_top1(&s_host),
        acc_match: mat.accuracy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mat(rows: &[&[f64]]) -> Tensor {
        let b = rows.len();
        let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor::from_vec(flat, (b, b), &Device::Cpu).unwrap()
    }

    #[test]
    fn mining_rejects_nan_rows() {
        let s = vec![vec![0.0, f64::NAN], vec![0.1, 0.2]];
        let ids = vec!["a".to_string(), "b".to_string()];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            mine_hard_negatives(&s, &ids, &mut rng),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn two_by_two_closed_form() {
        let (s, t, tau) = (0.7, -0.2, 0.07);
        let loss = contrastive_loss(&mat(&[&[s, t], &[t, s]]), tau, Default::default()).unwrap();
        assert!((scalar(&loss).unwrap() - (t - s) / tau).abs() < 1e-9);
        let loss =
            contrastive_loss(&mat(&[&[0.3, 0.3], &[0.3, 0.3]]), tau, Default::default()).unwrap();
        assert!(scalar(&loss).unwrap().abs() < 1e-12);
    }

    #[test]
    fn contrastive_errors() {
        let s = mat(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert!(matches!(
            contrastive_loss(&s, 0.0, Default::default()),
            Err(Error::Config(_))
        ));
        assert!(contrastive_loss(&mat(&[&[1.0]]), 0.1, Default::default()).is_err());
    }

    #[test]
    fn shift_invariance() {
        let s = mat(&[&[0.1, 0.5, -0.3], &[0.2, 0.9, 0.0], &[-0.4, 0.3, 0.6]]);
        let a = scalar(&contrastive_loss(&s, 0.1, Default::default()).unwrap()).unwrap();
        let b = scalar(&contrastive_loss(&(&s + 0.37).unwrap(), 0.1, Default::default()).unwrap())
            .unwrap();
        assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn zero_logit_bce_is_ln2() {
        let logits = Tensor::zeros(4, DType::F64, &Device::Cpu).unwrap();
        let l = scalar(&bce_with_logits(&logits, &[1.0, 0.0, 1.0, 1.0]).unwrap()).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        let big = Tensor::new(&[40.0f64], &Device::Cpu).unwrap();
        assert!(scalar(&bce_with_logits(&big, &[1.0]).unwrap()).unwrap() < 1e-15);
    }

    #[test]
    fn forced_and_saturated_negatives() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ids: Vec<String> = vec!["a".into(), "b".into()];
        for _ in 0..20 {
            assert_eq!(
                mine_hard_negatives(&[vec![0.0, 0.0], vec![0.0, 0.0]], &ids, &mut rng).unwrap(),
                vec![1, 0]
            );
        }
        let ids: Vec<String> = (0..4).map(|i| i.to_string()).collect();
        let row = vec![-10.0, -10.0, 10.0, -10.0];
        let s = vec![
            row.clone(),
            row.clone(),
            vec![-10.0, 10.0, -10.0, -10.0],
            row,
        ];
        let mut hits = 0;
        for _ in 0..2000 {
            hits += usize::from(mine_hard_negatives(&s, &ids, &mut rng).unwrap()[0] == 2);
        }
        assert!(hits as f64 / 2000.0 > 0.999);
    }

    #[test]
    fn same_document_fallback() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ids: Vec<String> = vec!["x".into(); 3];
        let s = vec![vec![0.0; 3]; 3];
        let neg = mine_hard_negatives(&s, &ids, &mut rng).unwrap();
        for (i, j) in neg.iter().enumerate() {
            assert_ne!(i, *j);
        }
    }

    #[test]
    fn same_document_excluded() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ids: Vec<String> = vec!["x".into(), "x".into(), "y".into()];
        let s = vec![vec![0.0, 5.0, -5.0]; 3];
        for _ in 0..100 {
            assert_eq!(mine_hard_negatives(&s, &ids, &mut rng).unwrap()[0], 2);
        }
    }

    #[test]
    fn pairs_respect_p() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(build_matching_pairs(&[1, 0], 1.5, &mut rng).is_err());
        let all = build_matching_pairs(&[1, 0], 1.0, &mut rng).unwrap();
        assert_eq!(all.partner, vec![0, 1]);
        let none = build_matching_pairs(&[1, 0], 0.0, &mut rng).unwrap();
        assert_eq!(none.partner, vec![1, 0]);
        assert_eq!(none.labels, vec![0.0, 0.0]);
    }

    #[test]
    fn top1() {
        assert_eq!(retrieval_top1(&[vec![1.0, 0.0], vec![1.0, 0.5]]), 0.5);
    }
}
