#![allow(dead_code)]

use candle_core::{DType, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tapq::corpus::{generate_corpus, mask_spans, LayoutSpec, OcrDocument};
use tapq::model::{ModelConfig, TapModel};
use tapq::objectives::PretrainBatch;
use tapq::ocrq::{MaskRegime, TextBatch};
use tapq::tokenizer::{build_vocab, Vocabulary, CLS_ID};

pub fn small_layout() -> LayoutSpec {
    LayoutSpec {
        rows: 2,
        cols: 2,
        n_keys: 8,
        n_themes: 3,
        min_tokens: 6,
        max_tokens: 14,
    }
}

pub struct Fixture {
    pub docs: Vec<OcrDocument>,
    pub vocab: Vocabulary,
    pub model: TapModel,
}

pub fn tiny_config(vocab_size: usize, d: usize) -> ModelConfig {
    ModelConfig {
        vocab_size,
        d,
        d_ocr: d,
        encoder_layers: 1,
        ocrq_layers: 2,
        n_heads: 2,
        ff_mult: 2,
        n_buckets: 8,
        max_ocr_len: 512,
        max_text_len: 32,
        n_queries: 4,
        d_contrastive: d,
    }
}

pub fn fixture(n_docs: usize, d: usize, dtype: DType, seed: u64) -> Fixture {
    let docs = generate_corpus(n_docs, seed, &small_layout()).unwrap();
    let vocab = build_vocab(&docs, 1, 16);
    let model = TapModel::new(tiny_config(vocab.len(), d), seed, dtype).unwrap();
    Fixture { docs, vocab, model }
}

impl Fixture {
    /// A freshly masked batch over `rows` consecutive documents starting at `start`.
    pub fn batch(&self, start: usize, rows: usize, seed: u64) -> PretrainBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let examples: Vec<_> = (0..rows)
            .map(|r| {
                let doc = &self.docs[(start + r) % self.docs.len()];
                mask_spans(doc, 0.15, 3.0, &mut rng).unwrap()
            })
            .collect();
        PretrainBatch::from_examples(&examples, &self.vocab).unwrap()
    }
}

pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Add Gaussian noise to every parameter, so unit LayerNorm gains and zero
/// biases no longer make sums over the feature axis constant.
pub fn perturb_params(model: &TapModel, std: f64, seed: u64) {
    use rand_distr::{Distribution, Normal};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, std).unwrap();
    for (name, var) in model.store.iter() {
        let t = var.as_tensor();
        let noise: Vec<f64> = (0..t.elem_count())
            .map(|_| normal.sample(&mut rng))
            .collect();
        let noise = Tensor::from_vec(noise, t.dims(), t.device())
            .unwrap()
            .to_dtype(t.dtype())
            .unwrap();
        model
            .store
            .assign(name, &(t.copy().unwrap() + noise).unwrap())
            .unwrap();
    }
}

/// Scalar-loop references for the three objectives, written from their
/// formulas without any tensor code.
pub mod oracle {
    fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
        let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
        m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
    }

    /// Mean over valid positions of `-log softmax(logits)[label]`.
    pub fn cross_entropy(logits: &[Vec<Vec<f64>>], labels: &[u32], valid: &[bool]) -> f64 {
        let t = logits[0].len();
        let (mut total, mut n) = (0.0, 0);
        for (b, row) in logits.iter().enumerate() {
            for (j, z) in row.iter().enumerate() {
                let idx = b * t + j;
                if !valid[idx] {
                    continue;
                }
                total += log_sum_exp(z.iter().copied()) - z[labels[idx] as usize];
                n += 1;
            }
        }
        total / n as f64
    }

    /// `S[i][j] = max_k q[i][k] . t[j]`.
    pub fn similarity(q: &[Vec<Vec<f64>>], t: &[Vec<f64>]) -> Vec<Vec<f64>> {
        q.iter()
            .map(|qi| {
                t.iter()
                    .map(|tj| {
                        qi.iter()
                            .map(|qk| qk.iter().zip(tj).map(|(a, b)| a * b).sum::<f64>())
                            .fold(f64::NEG_INFINITY, f64::max)
                    })
                    .collect()
            })
            .collect()
    }

    /// `-(1/B) sum_i [S_ii/tau - log sum_{j != i} exp(S_ij/tau)]`, optionally
    /// with the positive kept in the denominator.
    pub fn contrastive(s: &[Vec<f64>], tau: f64, include_positive: bool) -> f64 {
        let b = s.len();
        let mut total = 0.0;
        for i in 0..b {
            let denom = log_sum_exp(
                (0..b)
                    .filter(|&j| include_positive || j != i)
                    .map(|j| s[i][j] / tau),
            );
            total += denom - s[i][i] / tau;
        }
        total / b as f64
    }

    pub fn transpose(s: &[Vec<f64>]) -> Vec<Vec<f64>> {
        (0..s.len())
            .map(|j| s.iter().map(|r| r[j]).collect())
            .collect()
    }

    /// Mean BCE of `sigmoid(mean_k logits[i][k])` against `labels`.
    pub fn matching(per_query: &[Vec<f64>], labels: &[f64]) -> f64 {
        let mut total = 0.0;
        for (row, &y) in per_query.iter().zip(labels) {
            let x = row.iter().sum::<f64>() / row.len() as f64;
            let p = 1.0 / (1.0 + (-x).exp());
            total -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
        }
        total / labels.len() as f64
    }
}

/// (implementation, oracle) pairs for denoising, contrastive and matching
/// losses on one batch. Matching pairs come from a rng seeded with `seed`.
pub fn loss_pairs(model: &TapModel, batch: &PretrainBatch, tau: f64, seed: u64) -> [(f64, f64); 3] {
    use tapq::objectives::{
        build_matching_pairs, contrastive_loss, contrastive_similarity, denoising_loss,
        encode_batch, matching_for_pairs, mine_hard_negatives, ContrastiveOptions,
    };
    use tapq::ocrq::MaskRegime;

    let to64 = |t: &Tensor| t.to_dtype(DType::F64).unwrap();

    let den = denoising_loss(model, batch).unwrap();
    let logits = to64(&den.logits).to_vec3::<f64>().unwrap();
    let den_pair = (
        to64(&den.loss).to_scalar::<f64>().unwrap(),
        oracle::cross_entropy(&logits, &den.labels, &den.label_valid),
    );

    let ocr = model.encode(&batch.ocr).unwrap();
    let identity: Vec<usize> = (0..batch.batch()).collect();
    let uni = model
        .ocrq
        .forward(
            &batch.cls_text(&identity).unwrap(),
            &ocr,
            MaskRegime::Unimodal,
        )
        .unwrap();
    let q = to64(&model.ocrq.project_queries(&uni.r_q).unwrap())
        .to_vec3::<f64>()
        .unwrap();
    let t = to64(&model.ocrq.project_text(&uni.r_m).unwrap())
        .to_vec2::<f64>()
        .unwrap();
    let s_ref = oracle::similarity(&q, &t);
    let s = contrastive_similarity(model, batch).unwrap();
    let s_impl = to64(&s).to_vec2::<f64>().unwrap();
    for (a, b) in s_impl.iter().flatten().zip(s_ref.iter().flatten()) {
        assert!((a - b).abs() < 1e-6, "similarity {a} vs {b}");
    }
    let con_pair = (
        to64(&contrastive_loss(&s, tau, ContrastiveOptions::default()).unwrap())
            .to_scalar::<f64>()
            .unwrap(),
        oracle::contrastive(&s_ref, tau, false),
    );

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let negatives = mine_hard_negatives(&s_impl, &batch.doc_ids, &mut rng).unwrap();
    let pairs = build_matching_pairs(&negatives, 0.5, &mut rng).unwrap();
    let enc = encode_batch(model, batch).unwrap();
    let out = matching_for_pairs(model, batch, &enc, pairs.clone()).unwrap();
    let bi = model
        .ocrq
        .forward(
            &batch.cls_text(&pairs.partner).unwrap(),
            &ocr,
            MaskRegime::Bidirectional,
        )
        .unwrap();
    let per_query: Vec<Vec<f64>> = to64(&model.ocrq.match_logits(&bi.r_q).unwrap())
        .to_vec3::<f64>()
        .unwrap()
        .into_iter()
        .map(|row| row.into_iter().map(|v| v[0]).collect())
        .collect();
    let match_pair = (
        to64(&out.loss).to_scalar::<f64>().unwrap(),
        oracle::matching(&per_query, &pairs.labels),
    );
    [den_pair, con_pair, match_pair]
}

/// A page of exactly `len` vocabulary words on a regular grid of boxes.
pub fn sized_doc(vocab: &Vocabulary, len: usize, seed: u64) -> OcrDocument {
    use rand::Rng;
    use tapq::corpus::BoundingBox;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let words = vocab.words();
    let tokens = (0..len)
        .map(|_| words[rng.random_range(0..words.len())].clone())
        .collect();
    let side = (len as f64).sqrt().ceil() as usize;
    let cell = 1.0 / side as f64;
    let bboxes = (0..len)
        .map(|i| {
            let (x, y) = ((i % side) as f64 * cell, (i / side) as f64 * cell);
            BoundingBox::new(x, y, x + 0.8 * cell, y + 0.8 * cell).unwrap()
        })
        .collect();
    OcrDocument::new(format!("sized-{len}-{seed}"), 0, tokens, bboxes).unwrap()
}

/// Forward FLOPs by listing every matrix product of a pre-norm transformer
/// stack one at a time, at 2 FLOPs per multiply-accumulate.
pub mod flops_oracle {
    use tapq::integration::LmArch;

    fn matmul(m: u64, k: u64, n: u64) -> u128 {
        2 * m as u128 * k as u128 * n as u128
    }

    pub fn layer(arch: &LmArch, n: u64) -> u128 {
        let d = arch.d_lm;
        let dh = d / arch.heads;
        let mut products = vec![(n, d, d); 4];
        for _ in 0..arch.heads {
            products.push((n, dh, n));
            products.push((n, n, dh));
        }
        products.push((n, d, arch.ff_mult * d));
        products.push((n, arch.ff_mult * d, d));
        products.into_iter().map(|(m, k, n)| matmul(m, k, n)).sum()
    }

    pub fn stack(arch: &LmArch, n: u64) -> u128 {
        (0..arch.layers).map(|_| layer(arch, n)).sum()
    }
}

/// The mask tables restated as three separate rules.
pub fn brute_force_mask(regime: MaskRegime, k: usize, t: usize) -> Vec<Vec<bool>> {
    let n = k + t;
    let mut m = vec![vec![false; n]; n];
    for (r, row) in m.iter_mut().enumerate() {
        for (c, cell) in row.iter_mut().enumerate() {
            let (rq, cq) = (r < k, c < k);
            *cell = match regime {
                MaskRegime::Bidirectional => true,
                MaskRegime::Unimodal => rq == cq,
                MaskRegime::MultimodalCausal => {
                    if rq {
                        cq
                    } else {
                        cq || c <= r
                    }
                }
            };
        }
    }
    m
}

pub fn text_rows(f: &Fixture, rows: usize, len: usize, offset: u32) -> TextBatch {
    let v = f.vocab.len() as u32;
    let rows: Vec<Vec<u32>> = (0..rows)
        .map(|r| {
            let mut ids = vec![CLS_ID];
            ids.extend((1..len).map(|i| {
                f.vocab.n_special() as u32
                    + (r as u32 * 7 + i as u32 * 3 + offset) % (v - f.vocab.n_special() as u32)
            }));
            ids
        })
        .collect();
    TextBatch::from_rows(&rows).unwrap()
}

pub fn sum_rq_grad_norm(f: &Fixture, batch: &PretrainBatch, regime: MaskRegime) -> f64 {
    let ocr = f.model.encode(&batch.ocr).unwrap();
    let text = text_rows(f, batch.batch(), 6, 0);
    let emb = Var::from_tensor(&f.model.ocrq.embed_text(&text).unwrap().detach()).unwrap();
    let out = f
        .model
        .ocrq
        .forward_embedded(emb.as_tensor(), &text.pad, &ocr, regime)
        .unwrap();
    let grads = out.r_q.sum_all().unwrap().backward().unwrap();
    match grads.get(emb.as_tensor()) {
        Some(g) => g
            .sqr()
            .unwrap()
            .sum_all()
            .unwrap()
            .to_scalar::<f64>()
            .unwrap()
            .sqrt(),
        None => 0.0,
    }
}
