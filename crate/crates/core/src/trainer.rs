//! Pretraining loop: AdamW with linear warmup and cosine decay, global-norm
//! gradient clipping, per-step metrics CSV, `TAPQ1` checkpoints, and
//! held-out evaluation.

use std::collections::HashSet;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use candle_core::{backprop::GradStore, DType, Tensor};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::corpus::{
    generate_corpus, load_corpus, mask_spans, LayoutSpec, MaskedExample, OcrDocument,
};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, TapModel};
use crate::objectives::{
    build_matching_pairs, contrastive_with, denoising_with, encode_batch, matching_for_pairs,
    mine_hard_negatives, retrieval_top1, total_loss, ObjectiveConfig, PretrainBatch,
};
use crate::tokenizer::{build_vocab, Vocabulary};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"TAPQ1";
pub const METRICS_HEADER: &str = "step,lr,l_lm,l_con,l_match,total,acc_lm,acc_ret,acc_match";

/// Every knob of a pretraining run. Persisted as flat `key = value` text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub d: usize,
    pub d_ocr: usize,
    pub n_queries: usize,
    pub encoder_layers: usize,
    pub ocrq_layers: usize,
    pub n_heads: usize,
    pub ff_mult: usize,
    pub n_buckets: usize,
    pub max_ocr_len: usize,
    pub max_text_len: usize,
    pub d_contrastive: usize,

    pub min_count: usize,
    pub n_sentinels: usize,

    pub steps: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,

    pub mask_density: f64,
    pub mean_span_len: f64,

    pub tau: f64,
    pub match_p: f64,
    pub w_lm: f64,
    pub w_con: f64,
    pub w_match: f64,
    pub symmetric_contrastive: bool,
    pub include_positive: bool,

    pub seed: u64,

    pub train_corpus: Option<PathBuf>,
    pub heldout_corpus: Option<PathBuf>,
    pub n_train_docs: usize,
    pub n_heldout_docs: usize,
    pub layout_rows: usize,
    pub layout_cols: usize,
    pub n_keys: usize,
    pub n_themes: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,

    pub checkpoint_path: Option<PathBuf>,
    pub metrics_path: Option<PathBuf>,
    pub checkpoint_every: usize,
    pub dump_dir: Option<PathBuf>,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let layout = LayoutSpec::default();
        let model = ModelConfig::default();
        let obj = ObjectiveConfig::default();
        TrainConfig {
            d: model.d,
            d_ocr: model.d_ocr,
            n_queries: model.n_queries,
            encoder_layers: model.encoder_layers,
            ocrq_layers: model.ocrq_layers,
            n_heads: model.n_heads,
            ff_mult: model.ff_mult,
            n_buckets: model.n_buckets,
            max_ocr_len: model.max_ocr_len,
            max_text_len: model.max_text_len,
            d_contrastive: model.d_contrastive,
            min_count: 1,
            n_sentinels: 32,
            steps: 3000,
            batch_size: 16,
            base_lr: 1e-3,
            warmup_steps: 150,
            weight_decay: 0.05,
            grad_clip: 1.0,
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-8,
            mask_density: 0.15,
            mean_span_len: 3.0,
            tau: obj.tau,
            match_p: obj.match_p,
            w_lm: obj.w_lm,
            w_con: obj.w_con,
            w_match: obj.w_match,
            symmetric_contrastive: obj.symmetric_contrastive,
            include_positive: obj.include_positive,
            seed: 0,
            train_corpus: None,
            heldout_corpus: None,
            n_train_docs: 2000,
            n_heldout_docs: 800,
            layout_rows: layout.rows,
            layout_cols: layout.cols,
            n_keys: layout.n_keys,
            n_themes: layout.n_themes,
            min_tokens: layout.min_tokens,
            max_tokens: layout.max_tokens,
            checkpoint_path: None,
            metrics_path: None,
            checkpoint_every: 0,
            dump_dir: None,
            eval_batch_size: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps > self.steps {
            return Err(Error::Config(format!(
                "warmup_steps {} exceeds steps {}",
                self.warmup_steps, self.steps
            )));
        }
        if self.batch_size < 2 || self.eval_batch_size < 2 {
            return Err(Error::Config("batch sizes must be at least 2".into()));
        }
        if !(self.mask_density > 0.0 && self.mask_density < 1.0) {
            return Err(Error::Config(format!(
                "mask_density must lie in (0,1), got {}",
                self.mask_density
            )));
        }
        if !(self.base_lr >= 0.0 && self.grad_clip > 0.0) {
            return Err(Error::Config(
                "base_lr must be >= 0 and grad_clip > 0".into(),
            ));
        }
        let max_masked = ((self.max_ocr_len as f64 * self.mask_density).round() as usize).max(1);
        if self.n_sentinels < max_masked {
            return Err(Error::Config(format!(
                "n_sentinels {} cannot hold up to {max_masked} spans",
                self.n_sentinels
            )));
        }
        if self.max_text_len < 2 * max_masked + 1 {
            return Err(Error::Config(format!(
                "max_text_len {} is shorter than the longest target ({})",
                self.max_text_len,
                2 * max_masked + 1
            )));
        }
        self.objectives().validate()?;
        self.layout().validate()?;
        Ok(())
    }

    pub fn layout(&self) -> LayoutSpec {
        LayoutSpec {
            rows: self.layout_rows,
            cols: self.layout_cols,
            n_keys: self.n_keys,
            n_themes: self.n_themes,
            min_tokens: self.min_tokens,
            max_tokens: self.max_tokens,
        }
    }

    pub fn objectives(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            tau: self.tau,
            match_p: self.match_p,
            w_lm: self.w_lm,
            w_con: self.w_con,
            w_match: self.w_match,
            symmetric_contrastive: self.symmetric_contrastive,
            include_positive: self.include_positive,
        }
    }

    pub fn model(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d: self.d,
            d_ocr: self.d_ocr,
            encoder_layers: self.encoder_layers,
            ocrq_layers: self.ocrq_layers,
            n_heads: self.n_heads,
            ff_mult: self.ff_mult,
            n_buckets: self.n_buckets,
            max_ocr_len: self.max_ocr_len,
            max_text_len: self.max_text_len,
            n_queries: self.n_queries,
            d_contrastive: self.d_contrastive,
        }
    }

    /// Parse `key = value` lines; `#` starts a comment. Unknown keys are errors.
    pub fn from_kv_str(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("expected key = value, got {raw:?}"),
            })?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        let mut cfg = TrainConfig::default();
        cfg.apply_overrides(&pairs)?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_kv_str(&std::fs::read_to_string(path)?)
    }

    /// Set fields by name, coercing each value to the field's current type.
    pub fn apply_overrides(&mut self, pairs: &[(String, String)]) -> Result<()> {
        let mut obj = match serde_json::to_value(&*self)? {
            Value::Object(m) => m,
            _ => unreachable!("config serializes to an object"),
        };
        for (key, raw) in pairs {
            let slot = obj
                .get_mut(key)
                .ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
            *slot = coerce(key, raw, slot)?;
        }
        *self = serde_json::from_value(Value::Object(obj))
            .map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        Ok(())
    }

    pub fn to_kv_string(&self) -> String {
        let Ok(Value::Object(obj)) = serde_json::to_value(self) else {
            unreachable!("config serializes to an object")
        };
        let mut out = String::new();
        for (k, v) in obj {
            let v = match v {
                Value::Null => String::new(),
                Value::String(s) => s,
                other => other.to_string(),
            };
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }
}

fn coerce(key: &str, raw: &str, current: &Value) -> Result<Value> {
    let bad = || Error::Config(format!("config key {key:?}: cannot parse {raw:?}"));
    Ok(match current {
        Value::Bool(_) => Value::Bool(raw.parse().map_err(|_| bad())?),
        Value::Number(n) if n.is_u64() => Value::from(raw.parse::<u64>().map_err(|_| bad())?),
        Value::Number(_) => Value::from(raw.parse::<f64>().map_err(|_| bad())?),
        Value::Null | Value::String(_) if raw.is_empty() => Value::Null,
        _ => Value::String(raw.to_string()),
    })
}

/// Linear warmup from 0 to `base_lr`, then cosine decay to 0 at `steps`.
pub fn learning_rate(step: usize, cfg: &TrainConfig) -> f64 {
    if step < cfg.warmup_steps {
        return cfg.base_lr * step as f64 / cfg.warmup_steps as f64;
    }
    let decay_steps = cfg.steps.saturating_sub(cfg.warmup_steps);
    if decay_steps == 0 {
        return cfg.base_lr;
    }
    let progress = ((step - cfg.warmup_steps) as f64 / decay_steps as f64).min(1.0);
    0.5 * cfg.base_lr * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Decoupled-weight-decay Adam over every parameter of a store.
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(model: &TapModel, cfg: &TrainConfig) -> Result<Self> {
        let zeros = || {
            model
                .store
                .iter()
                .map(|(_, v)| Ok(v.as_tensor().zeros_like()?))
                .collect::<Result<Vec<_>>>()
        };
        Ok(AdamW {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            t: 0,
            m: zeros()?,
            v: zeros()?,
        })
    }

    fn decays(name: &str, rank: usize) -> bool {
        rank == 2 && name.ends_with(".weight")
    }

    pub fn step(
        &mut self,
        model: &TapModel,
        grads: &GradStore,
        lr: f64,
        clip_scale: f64,
    ) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (name, var)) in model.store.iter().enumerate() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            // leaf gradients still reference the forward graph
            let g = (g.detach() * clip_scale)?;
            self.m[i] = ((&self.m[i] * self.beta1)? + (&g * (1.0 - self.beta1))?)?;
            self.v[i] = ((&self.v[i] * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let m_hat = (&self.m[i] * (1.0 / bc1))?;
            let v_hat = (&self.v[i] * (1.0 / bc2))?;
            let update = (m_hat / (v_hat.sqrt()? + self.eps)?)?;
            let p = var.as_tensor();
            let mut next = (p - (update * lr)?)?;
            if Self::decays(name, p.rank()) {
                next = (next - (p * (lr * self.weight_decay))?)?;
            }
            var.set(&next)?;
        }
        Ok(())
    }
}

/// Global L2 norm of all parameter gradients.
pub fn grad_norm(model: &TapModel, grads: &GradStore) -> Result<f64> {
    let mut sq = 0.0;
    for (_, var) in model.store.iter() {
        if let Some(g) = grads.get(var.as_tensor()) {
            sq += g
                .to_dtype(DType::F64)?
                .sqr()?
                .sum_all()?
                .to_scalar::<f64>()?;
        }
    }
    Ok(sq.sqrt())
}

/// Named flat f32 array.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedArray {
    fn from_tensor(name: &str, t: &Tensor) -> Result<Self> {
        Ok(NamedArray {
            name: name.to_string(),
            shape: t.dims().to_vec(),
            data: t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?,
        })
    }

    fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        Ok(Tensor::from_vec(
            self.data.clone(),
            self.shape.as_slice(),
            &candle_core::Device::Cpu,
        )?
        .to_dtype(dtype)?)
    }
}

/// Everything needed to resume training or run inference.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model_config: ModelConfig,
    pub vocab: Vocabulary,
    pub step: usize,
    pub params: Vec<NamedArray>,
    pub adam_t: u64,
    pub adam_m: Vec<NamedArray>,
    pub adam_v: Vec<NamedArray>,
    pub rng: ChaCha8Rng,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    step: usize,
    config: TrainConfig,
    model_config: ModelConfig,
    n_sentinels: usize,
    words: Vec<String>,
    adam_t: u64,
    rng: ChaCha8Rng,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    /// Layout: `TAPQ1`, u64 LE header length, JSON header, then every tensor's
    /// f32 LE data back to back. Tensor names carry a `param/`, `adam_m/` or
    /// `adam_v/` prefix; offsets count f32 values from the start of the data.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut tensors = Vec::new();
        let mut offset = 0;
        let groups = [
            ("param/", &self.params),
            ("adam_m/", &self.adam_m),
            ("adam_v/", &self.adam_v),
        ];
        for (prefix, arrays) in groups {
            for a in arrays.iter() {
                tensors.push(TensorEntry {
                    name: format!("{prefix}{}", a.name),
                    shape: a.shape.clone(),
                    offset,
                });
                offset += a.data.len();
            }
        }
        let header = CheckpointHeader {
            step: self.step,
            config: self.config.clone(),
            model_config: self.model_config.clone(),
            n_sentinels: self.vocab.n_sentinels(),
            words: self.vocab.words().to_vec(),
            adam_t: self.adam_t,
            rng: self.rng.clone(),
            tensors,
        };
        let header = serde_json::to_vec(&header)?;
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        for (_, arrays) in groups {
            for a in arrays.iter() {
                for x in &a.data {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        File::open(path)?.read_to_end(&mut bytes)?;
        if bytes.len() < 13 || &bytes[..5] != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("missing TAPQ1 magic".into()));
        }
        let hlen = u64::from_le_bytes(bytes[5..13].try_into().unwrap()) as usize;
        let body = bytes
            .get(13..13 + hlen)
            .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
        let header: CheckpointHeader = serde_json::from_slice(body)?;
        let data = &bytes[13 + hlen..];
        if data.len() % 4 != 0 {
            return Err(Error::Checkpoint(
                "tensor data is not a whole number of f32".into(),
            ));
        }
        let floats: Vec<f32> = data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();

        let (mut params, mut adam_m, mut adam_v) = (Vec::new(), Vec::new(), Vec::new());
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let slice = floats
                .get(e.offset..e.offset + n)
                .ok_or_else(|| Error::Checkpoint(format!("tensor {} out of bounds", e.name)))?;
            let (group, name) = e
                .name
                .split_once('/')
                .ok_or_else(|| Error::Checkpoint(format!("bad tensor name {}", e.name)))?;
            let arr = NamedArray {
                name: name.to_string(),
                shape: e.shape,
                data: slice.to_vec(),
            };
            match group {
                "param" => params.push(arr),
                "adam_m" => adam_m.push(arr),
                "adam_v" => adam_v.push(arr),
                other => return Err(Error::Checkpoint(format!("unknown tensor group {other}"))),
            }
        }
        Ok(Checkpoint {
            config: header.config,
            model_config: header.model_config,
            vocab: Vocabulary::from_parts(header.n_sentinels, header.words)?,
            step: header.step,
            params,
            adam_t: header.adam_t,
            adam_m,
            adam_v,
            rng: header.rng,
        })
    }

    /// Rebuild the model with these parameters in the requested precision.
    pub fn model(&self, dtype: DType) -> Result<TapModel> {
        let model = TapModel::new(self.model_config.clone(), self.config.seed, dtype)?;
        if model.store.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, model has {}",
                self.params.len(),
                model.store.len()
            )));
        }
        for p in &self.params {
            model.store.assign(&p.name, &p.to_tensor(dtype)?)?;
        }
        Ok(model)
    }
}

/// Per-step training diagnostics, one CSV row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub lr: f64,
    pub l_lm: f64,
    pub l_con: f64,
    pub l_match: f64,
    pub total: f64,
    pub acc_lm: f64,
    pub acc_ret: f64,
    pub acc_match: f64,
}

impl StepMetrics {
    fn csv_row(&self) -> String {
        format!(
            "{},{:e},{},{},{},{},{},{},{}",
            self.step,
            self.lr,
            self.l_lm,
            self.l_con,
            self.l_match,
            self.total,
            self.acc_lm,
            self.acc_ret,
            self.acc_match
        )
    }
}

/// Training corpus for a config: loaded from `train_corpus` or synthesized.
pub fn training_docs(cfg: &TrainConfig) -> Result<Vec<OcrDocument>> {
    match &cfg.train_corpus {
        Some(p) => load_corpus(p),
        None => generate_corpus(cfg.n_train_docs, cfg.seed, &cfg.layout()),
    }
}

/// Held-out corpus, with any document id seen in `train` removed.
pub fn heldout_docs(cfg: &TrainConfig, train: &[OcrDocument]) -> Result<Vec<OcrDocument>> {
    let docs = match &cfg.heldout_corpus {
        Some(p) => load_corpus(p)?,
        None => generate_corpus(cfg.n_heldout_docs, cfg.seed ^ 0x5eed_0f_4e1d, &cfg.layout())?,
    };
    let seen: HashSet<&str> = train.iter().map(|d| d.doc_id.as_str()).collect();
    Ok(docs
        .into_iter()
        .filter(|d| !seen.contains(d.doc_id.as_str()))
        .collect())
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: TapModel,
    pub vocab: Vocabulary,
    pub optimizer: AdamW,
    pub rng: ChaCha8Rng,
    pub step: usize,
    docs: Vec<OcrDocument>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        let docs = training_docs(&cfg)?;
        Self::with_docs(cfg, docs)
    }

    pub fn with_docs(cfg: TrainConfig, docs: Vec<OcrDocument>) -> Result<Self> {
        cfg.validate()?;
        if docs.len() < cfg.batch_size {
            return Err(Error::Config(format!(
                "training corpus has {} documents, fewer than batch_size {}",
                docs.len(),
                cfg.batch_size
            )));
        }
        let vocab = build_vocab(&docs, cfg.min_count, cfg.n_sentinels);
        let model = TapModel::new(cfg.model(vocab.len()), cfg.seed, DType::F32)?;
        let optimizer = AdamW::new(&model, &cfg)?;
        Ok(Trainer {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9e37_79b9_7f4a_7c15)),
            cfg,
            model,
            vocab,
            optimizer,
            step: 0,
            docs,
        })
    }

    /// Restore a run from a checkpoint. `cfg` may extend `steps` or change
    /// output paths; the model shape comes from the checkpoint.
    pub fn resume(ckpt: &Checkpoint, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let docs = training_docs(&cfg)?;
        let model = ckpt.model(DType::F32)?;
        let mut optimizer = AdamW::new(&model, &cfg)?;
        optimizer.t = ckpt.adam_t;
        let lookup = |arrays: &[NamedArray], name: &str| -> Result<Tensor> {
            arrays
                .iter()
                .find(|a| a.name == name)
                .ok_or_else(|| Error::Checkpoint(format!("optimizer state missing for {name}")))?
                .to_tensor(DType::F32)
        };
        for (i, (name, _)) in model.store.iter().enumerate() {
            optimizer.m[i] = lookup(&ckpt.adam_m, name)?;
            optimizer.v[i] = lookup(&ckpt.adam_v, name)?;
        }
        Ok(Trainer {
            cfg,
            model,
            vocab: ckpt.vocab.clone(),
            optimizer,
            rng: ckpt.rng.clone(),
            step: ckpt.step,
            docs,
        })
    }

    pub fn docs(&self) -> &[OcrDocument] {
        &self.docs
    }

    fn sample_examples(&mut self) -> Result<Vec<MaskedExample>> {
        let picks = index::sample(&mut self.rng, self.docs.len(), self.cfg.batch_size).into_vec();
        picks
            .into_iter()
            .map(|i| {
                mask_spans(
                    &self.docs[i],
                    self.cfg.mask_density,
                    self.cfg.mean_span_len,
                    &mut self.rng,
                )
            })
            .collect()
    }

    fn dump_batch(&self, examples: &[MaskedExample]) -> Result<PathBuf> {
        let dir = self.cfg.dump_dir.clone().unwrap_or_else(std::env::temp_dir);
        std::fs::create_dir_all(&dir)?;
        let path = dir.join(format!("nonfinite_batch_step{}.jsonl", self.step));
        crate::corpus::save_masked(examples, &path)?;
        Ok(path)
    }

    /// One optimization step on a freshly masked batch.
    pub fn train_step(&mut self) -> Result<StepMetrics> {
        let examples = self.sample_examples()?;
        let batch = PretrainBatch::from_examples(&examples, &self.vocab)?;
        let obj = self.cfg.objectives();
        let bundle = match total_loss(&self.model, &batch, &obj, &mut self.rng) {
            Err(Error::NonFinite(_)) => {
                let dump = self.dump_batch(&examples)?;
                return Err(Error::NonFiniteLoss {
                    step: self.step,
                    dump,
                });
            }
            other => other?,
        };
        if !bundle.total_value.is_finite() {
            let dump = self.dump_batch(&examples)?;
            return Err(Error::NonFiniteLoss {
                step: self.step,
                dump,
            });
        }
        let grads = bundle.total.backward()?;
        let norm = grad_norm(&self.model, &grads)?;
        if !norm.is_finite() {
            let dump = self.dump_batch(&examples)?;
            return Err(Error::NonFiniteLoss {
                step: self.step,
                dump,
            });
        }
        let clip_scale = if norm > self.cfg.grad_clip {
            self.cfg.grad_clip / norm
        } else {
            1.0
        };
        let lr = learning_rate(self.step, &self.cfg);
        self.optimizer.step(&self.model, &grads, lr, clip_scale)?;
        let m = StepMetrics {
            step: self.step,
            lr,
            l_lm: bundle.l_lm,
            l_con: bundle.l_con,
            l_match: bundle.l_match,
            total: bundle.total_value,
            acc_lm: bundle.acc_lm,
            acc_ret: bundle.acc_ret,
            acc_match: bundle.acc_match,
        };
        self.step += 1;
        Ok(m)
    }

    /// Train until `cfg.steps`, streaming metrics and periodic checkpoints.
    pub fn run(&mut self) -> Result<Vec<StepMetrics>> {
        let mut csv = match &self.cfg.metrics_path {
            Some(p) => {
                let fresh = self.step == 0 || !p.exists();
                let mut f = if fresh {
                    File::create(p)?
                } else {
                    OpenOptions::new().append(true).open(p)?
                };
                if fresh {
                    writeln!(f, "{METRICS_HEADER}")?;
                }
                Some(BufWriter::new(f))
            }
            None => None,
        };
        let mut history = Vec::with_capacity(self.cfg.steps.saturating_sub(self.step));
        while self.step < self.cfg.steps {
            let m = self.train_step()?;
            if let Some(w) = csv.as_mut() {
                writeln!(w, "{}", m.csv_row())?;
                w.flush()?;
            }
            history.push(m);
            if self.cfg.checkpoint_every > 0 && self.step % self.cfg.checkpoint_every == 0 {
                if let Some(p) = &self.cfg.checkpoint_path {
                    self.checkpoint()?.save(p)?;
                }
            }
        }
        if let Some(p) = &self.cfg.checkpoint_path {
            self.checkpoint()?.save(p)?;
        }
        Ok(history)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut params = Vec::new();
        let mut adam_m = Vec::new();
        let mut adam_v = Vec::new();
        for (i, (name, var)) in self.model.store.iter().enumerate() {
            params.push(NamedArray::from_tensor(name, var.as_tensor())?);
            adam_m.push(NamedArray::from_tensor(name, &self.optimizer.m[i])?);
            adam_v.push(NamedArray::from_tensor(name, &self.optimizer.v[i])?);
        }
        Ok(Checkpoint {
            config: self.cfg.clone(),
            model_config: self.model.cfg.clone(),
            vocab: self.vocab.clone(),
            step: self.step,
            params,
            adam_t: self.optimizer.t,
            adam_m,
            adam_v,
            rng: self.rng.clone(),
        })
    }
}

/// Build, train for `cfg.steps` steps, and return the final checkpoint.
pub fn train(cfg: TrainConfig) -> Result<Checkpoint> {
    let mut trainer = Trainer::new(cfg)?;
    trainer.run()?;
    trainer.checkpoint()
}

/// Held-out proxy metrics for the three objectives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    /// Teacher-forced argmax accuracy over masked words.
    pub masked_token_accuracy: f64,
    /// Fraction of rows whose own masked words score highest.
    pub retrieval_top1: f64,
    /// Accuracy at threshold 0.5 over every row's true pair and its mined
    /// hard negative.
    pub matching_accuracy: f64,
    pub n_batches: usize,
    pub n_docs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub batch_size: usize,
    pub mask_density: f64,
    pub mean_span_len: f64,
    pub seed: u64,
}

impl EvalConfig {
    pub fn from_train(cfg: &TrainConfig) -> Self {
        EvalConfig {
            batch_size: cfg.eval_batch_size,
            mask_density: cfg.mask_density,
            mean_span_len: cfg.mean_span_len,
            seed: cfg.seed ^ 0xe7a1,
        }
    }
}

pub fn evaluate(
    model: &TapModel,
    vocab: &Vocabulary,
    heldout: &[OcrDocument],
    cfg: &EvalConfig,
) -> Result<EvalMetrics> {
    if heldout.is_empty() {
        return Err(Error::Argument("held-out corpus is empty".into()));
    }
    if cfg.batch_size < 2 {
        return Err(Error::Config(
            "evaluation batch size must be at least 2".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (mut word_hits, mut words) = (0.0, 0usize);
    let (mut ret_hits, mut ret_rows) = (0.0, 0usize);
    let (mut match_hits, mut match_rows) = (0.0, 0usize);
    let mut n_batches = 0;
    let mut n_docs = 0;
    for chunk in heldout.chunks(cfg.batch_size) {
        if chunk.len() < 2 {
            continue;
        }
        let examples = chunk
            .iter()
            .map(|d| mask_spans(d, cfg.mask_density, cfg.mean_span_len, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let batch = PretrainBatch::from_examples(&examples, vocab)?;
        let enc = encode_batch(model, &batch)?;

        let den = denoising_with(model, &batch, &enc)?;
        word_hits += den.word_accuracy * den.n_words as f64;
        words += den.n_words;

        let s = contrastive_with(model, &batch, &enc)?
            .to_dtype(DType::F64)?
            .to_vec2::<f64>()?;
        ret_hits += retrieval_top1(&s) * s.len() as f64;
        ret_rows += s.len();

        let negatives = mine_hard_negatives(&s, &batch.doc_ids, &mut rng)?;
        for p in [1.0, 0.0] {
            let pairs = build_matching_pairs(&negatives, p, &mut rng)?;
            let out = matching_for_pairs(model, &batch, &enc, pairs)?;
            match_hits += out.accuracy * chunk.len() as f64;
            match_rows += chunk.len();
        }
        n_batches += 1;
        n_docs += chunk.len();
    }
    if n_batches == 0 {
        return Err(Error::Argument(
            "held-out corpus yields no batch of two or more".into(),
        ));
    }
    Ok(EvalMetrics {
        masked_token_accuracy: if words > 0 {
            word_hits / words as f64
        } else {
            0.0
        },
        retrieval_top1: ret_hits / ret_rows as f64,
        matching_accuracy: match_hits / match_rows as f64,
        n_batches,
        n_docs,
    })
}
