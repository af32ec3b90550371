//! Small neural-network toolkit on top of candle tensors: a named parameter
//! store with seeded initialization, and the layers shared by the encoder and
//! the OCR-Q.

use std::collections::HashMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Additive attention bias for disallowed positions. `exp` of it underflows to
/// exactly zero in both f32 and f64, so masked positions get zero weight and
/// zero gradient.
pub const MASK_BIAS: f64 = -1e9;

/// Ordered collection of named trainable parameters.
pub struct ParamStore {
    vars: Vec<(String, Var)>,
    index: HashMap<String, usize>,
    dtype: DType,
    device: Device,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        ParamStore {
            vars: Vec::new(),
            index: HashMap::new(),
            dtype,
            device: Device::Cpu,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn register(&mut self, name: &str, data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("parameter {name} registered twice")));
        }
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let tensor = var.as_tensor().clone();
        self.index.insert(name.to_string(), self.vars.len());
        self.vars.push((name.to_string(), var));
        Ok(tensor)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<Tensor> {
        let n = shape.iter().product();
        let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let data = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        self.register(name, data, shape)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Tensor> {
        let n = shape.iter().product();
        self.register(name, vec![value; n], shape)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.index.get(name).map(|&i| &self.vars[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.vars.iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Overwrite a parameter in place, keeping every holder of the tensor in sync.
    pub fn assign(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        if var.shape() != value.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter {name}: shape {:?} does not match stored {:?}",
                value.dims(),
                var.dims()
            )));
        }
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }
}

pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        let std = (1.0 / d_in as f64).sqrt();
        Ok(Linear {
            weight: store.normal(&format!("{name}.weight"), &[d_in, d_out], std)?,
            bias: Some(store.constant(&format!("{name}.bias"), &[d_out], 0.0)?),
        })
    }

    pub fn no_bias(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        let std = (1.0 / d_in as f64).sqrt();
        Ok(Linear {
            weight: store.normal(&format!("{name}.weight"), &[d_in, d_out], std)?,
            bias: None,
        })
    }

    /// Applies to the last dimension of an input of any rank.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let d_in = *dims.last().expect("linear input has rank >= 1");
        let rows = x.elem_count() / d_in;
        let mut y = x.reshape((rows, d_in))?.matmul(&self.weight)?;
        if let Some(b) = &self.bias {
            y = y.broadcast_add(b)?;
        }
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.weight.dim(1)?;
        Ok(y.reshape(out_dims)?)
    }
}

pub struct LayerNorm {
    pub weight: Tensor,
    pub bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Result<Self> {
        Ok(LayerNorm {
            weight: store.constant(&format!("{name}.weight"), &[d], 1.0)?,
            bias: store.constant(&format!("{name}.bias"), &[d], 0.0)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(&self.weight)?
            .broadcast_add(&self.bias)?)
    }
}

pub struct Embedding {
    pub table: Tensor,
}

impl Embedding {
    pub fn new(store: &mut ParamStore, name: &str, n: usize, d: usize, std: f64) -> Result<Self> {
        Ok(Embedding {
            table: store.normal(name, &[n, d], std)?,
        })
    }

    pub fn rows(&self) -> usize {
        self.table.dims()[0]
    }

    /// Looks up `ids` (any shape) and appends the embedding dimension.
    pub fn forward(&self, ids: &Tensor) -> Result<Tensor> {
        let mut dims = ids.dims().to_vec();
        let flat = ids.flatten_all()?;
        let out = self.table.index_select(&flat, 0)?;
        dims.push(self.table.dim(1)?);
        Ok(out.reshape(dims)?)
    }
}

pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, mult: usize) -> Result<Self> {
        Ok(FeedForward {
            up: Linear::new(store, &format!("{name}.up"), d, d * mult)?,
            down: Linear::new(store, &format!("{name}.down"), d * mult, d)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.down.forward(&self.up.forward(x)?.silu()?)
    }
}

/// Numerically stable softmax over the last dimension.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Multi-head attention with separate query and key/value inputs.
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    n_heads: usize,
}

/// Keys and values already split into heads: `[B, H, L, d_head]` each.
pub struct KeyValue {
    pub k: Tensor,
    pub v: Tensor,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        d_kv_in: usize,
        n_heads: usize,
    ) -> Result<Self> {
        if d_model % n_heads != 0 {
            return Err(Error::Config(format!(
                "width {d_model} is not divisible by {n_heads} heads"
            )));
        }
        Ok(MultiHeadAttention {
            q: Linear::new(store, &format!("{name}.q"), d_model, d_model)?,
            k: Linear::new(store, &format!("{name}.k"), d_kv_in, d_model)?,
            v: Linear::new(store, &format!("{name}.v"), d_kv_in, d_model)?,
            o: Linear::new(store, &format!("{name}.o"), d_model, d_model)?,
            n_heads,
        })
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, l, d) = x.dims3()?;
        Ok(x.reshape((b, l, self.n_heads, d / self.n_heads))?
            .transpose(1, 2)?
            .contiguous()?)
    }

    pub fn key_value(&self, x: &Tensor) -> Result<KeyValue> {
        Ok(KeyValue {
            k: self.split_heads(&self.k.forward(x)?)?,
            v: self.split_heads(&self.v.forward(x)?)?,
        })
    }

    /// `bias` broadcasts to `[B, H, Lq, Lk]` and is added to the scores.
    pub fn attend(&self, xq: &Tensor, kv: &KeyValue, bias: &Tensor) -> Result<Tensor> {
        let (b, lq, d) = xq.dims3()?;
        let q = self.split_heads(&self.q.forward(xq)?)?;
        let d_head = d / self.n_heads;
        let scores = (q.matmul(&kv.k.t()?)? * (1.0 / (d_head as f64).sqrt()))?;
        let weights = softmax_last(&scores.broadcast_add(bias)?)?;
        let ctx = weights
            .matmul(&kv.v)?
            .transpose(1, 2)?
            .reshape((b, lq, d))?;
        self.o.forward(&ctx)
    }

    pub fn forward(&self, xq: &Tensor, xkv: &Tensor, bias: &Tensor) -> Result<Tensor> {
        self.attend(xq, &self.key_value(xkv)?, bias)
    }
}

/// Validity of each position in a padded `[batch, len]` layout.
#[derive(Debug, Clone, PartialEq)]
pub struct PadMask {
    pub valid: Vec<bool>,
    pub batch: usize,
    pub len: usize,
}

impl PadMask {
    pub fn new(valid: Vec<bool>, batch: usize, len: usize) -> Result<Self> {
        if valid.len() != batch * len {
            return Err(Error::Validation(format!(
                "pad mask has {} entries for a {batch}x{len} layout",
                valid.len()
            )));
        }
        Ok(PadMask { valid, batch, len })
    }

    pub fn is_valid(&self, b: usize, i: usize) -> bool {
        self.valid[b * self.len + i]
    }

    pub fn row_len(&self, b: usize) -> usize {
        self.valid[b * self.len..(b + 1) * self.len]
            .iter()
            .filter(|&&v| v)
            .count()
    }

    /// Key-padding bias of shape `[B, 1, 1, len]`.
    pub fn key_bias(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let data: Vec<f64> = self
            .valid
            .iter()
            .map(|&v| if v { 0.0 } else { MASK_BIAS })
            .collect();
        Ok(Tensor::from_vec(data, (self.batch, 1, 1, self.len), device)?.to_dtype(dtype)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0], [0.0, MASK_BIAS, 0.0]], &Device::Cpu).unwrap();
        let p = softmax_last(&x).unwrap().to_vec2::<f64>().unwrap();
        for row in &p {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert_eq!(p[1][1], 0.0);
        assert!((p[1][0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_statistics() {
        let mut store = ParamStore::new(0, DType::F64);
        let ln = LayerNorm::new(&mut store, "ln", 4).unwrap();
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0, 10.0]], &Device::Cpu).unwrap();
        let y = ln.forward(&x).unwrap().to_vec2::<f64>().unwrap();
        let mean: f64 = y[0].iter().sum::<f64>() / 4.0;
        let var: f64 = y[0].iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn duplicate_parameter_names_rejected() {
        let mut store = ParamStore::new(0, DType::F32);
        store.constant("a", &[2], 0.0).unwrap();
        assert!(store.constant("a", &[2], 0.0).is_err());
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let mut a = ParamStore::new(7, DType::F32);
        let mut b = ParamStore::new(7, DType::F32);
        let ta = a.normal("w", &[3, 3], 0.02).unwrap();
        let tb = b.normal("w", &[3, 3], 0.02).unwrap();
        assert_eq!(ta.to_vec2::<f32>().unwrap(), tb.to_vec2::<f32>().unwrap());
    }

    #[test]
    fn assign_updates_shared_tensor() {
        let mut store = ParamStore::new(0, DType::F32);
        let t = store.constant("w", &[2], 0.0).unwrap();
        store
            .assign("w", &Tensor::new(&[1.0f32, 2.0], &Device::Cpu).unwrap())
            .unwrap();
        assert_eq!(t.to_vec1::<f32>().unwrap(), vec![1.0, 2.0]);
    }
}
