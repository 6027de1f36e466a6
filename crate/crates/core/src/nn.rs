//! Parameter storage and the small set of layers the models are built from.
//!
//! Every trainable tensor is registered in a [`ParamStore`] under a dotted
//! name (`rssm.gru.input.weight`, ...). Layers keep clones of the variable
//! tensors; clones share storage with the `Var`, so optimizer updates are
//! visible to the layers without re-binding.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Registers `init` under `name` and returns a tensor sharing the variable's storage.
    pub fn add(&mut self, name: &str, init: Tensor) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let var = Var::from_tensor(&init.to_dtype(self.dtype)?)?;
        let t = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(t)
    }

    pub fn glorot(&mut self, name: &str, shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Result<Tensor> {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit).expect("valid glorot range");
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
        self.add(name, Tensor::from_vec(data, shape, &self.device)?)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<Tensor> {
        self.add(name, Tensor::zeros(shape, DType::F64, &self.device)?)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn named_vars(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn names(&self) -> Vec<String> {
        self.vars.keys().cloned().collect()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn contains_prefix(&self, prefix: &str) -> bool {
        self.vars.keys().any(|k| k.starts_with(prefix))
    }

    pub fn num_elements(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub fn shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.vars
            .iter()
            .map(|(k, v)| (k.clone(), v.dims().to_vec()))
            .collect()
    }

    pub fn tensors(&self) -> HashMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect()
    }

    /// Copies values from `tensors` into the registered variables. Every
    /// registered name must be present with a matching shape.
    pub fn load_from(&self, tensors: &HashMap<String, Tensor>) -> Result<()> {
        for (name, var) in &self.vars {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::Load(format!("missing parameter {name}")))?;
            if t.dims() != var.dims() {
                return Err(Error::Load(format!(
                    "parameter {name}: stored shape {:?}, expected {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        candle_core::safetensors::save(&self.tensors(), path)?;
        Ok(())
    }

    /// SHA-256 over names, shapes and raw values (as f64).
    pub fn checksum(&self) -> Result<String> {
        let mut hasher = Sha256::new();
        for (name, var) in &self.vars {
            hasher.update(name.as_bytes());
            for d in var.dims() {
                hasher.update((*d as u64).to_le_bytes());
            }
            let values = var.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
            for v in values {
                hasher.update(v.to_le_bytes());
            }
        }
        Ok(format!("{:x}", hasher.finalize()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Elu,
    Relu,
    Identity,
}

impl Activation {
    pub fn apply(self, x: &Tensor) -> Result<Tensor> {
        Ok(match self {
            Activation::Elu => x.elu(1.0)?,
            Activation::Relu => x.relu()?,
            Activation::Identity => x.clone(),
        })
    }
}

#[derive(Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize, bias: bool, rng: &mut impl Rng) -> Result<Self> {
        let weight = store.glorot(&format!("{name}.weight"), &[output, input], input, output, rng)?;
        let bias = if bias {
            Some(store.zeros(&format!("{name}.bias"), &[output])?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn from_weight(weight: Tensor, bias: Option<Tensor>) -> Self {
        Self { weight, bias }
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    /// `x` is `(N, in)`; returns `(N, out)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.matmul(&self.weight.t()?)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(b)?),
            None => Ok(y),
        }
    }
}

/// Dense stack: hidden layers use `act`, the last layer is linear.
#[derive(Clone)]
pub struct Mlp {
    layers: Vec<Linear>,
    act: Activation,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: &[usize], output: usize, act: Activation, rng: &mut impl Rng) -> Result<Self> {
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut prev = input;
        for (i, &width) in hidden.iter().chain(std::iter::once(&output)).enumerate() {
            layers.push(Linear::new(store, &format!("{name}.l{i}"), prev, width, true, rng)?);
            prev = width;
        }
        Ok(Self { layers, act })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            if i < last {
                h = self.act.apply(&h)?;
            }
        }
        Ok(h)
    }
}

#[derive(Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
}

impl Conv2d {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize, kernel: usize, stride: usize, rng: &mut impl Rng) -> Result<Self> {
        let k2 = kernel * kernel;
        let weight = store.glorot(&format!("{name}.weight"), &[output, input, kernel, kernel], input * k2, output * k2, rng)?;
        let bias = store.zeros(&format!("{name}.bias"), &[output])?;
        Ok(Self { weight, bias, stride })
    }

    /// NCHW in, NCHW out, no padding.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = self.bias.dims()[0];
        let y = x.conv2d(&self.weight, 0, self.stride, 1, 1)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }
}

#[derive(Clone)]
pub struct ConvTranspose2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
}

impl ConvTranspose2d {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize, kernel: usize, stride: usize, rng: &mut impl Rng) -> Result<Self> {
        let k2 = kernel * kernel;
        // candle stores transposed-conv kernels as (in, out, k, k)
        let weight = store.glorot(&format!("{name}.weight"), &[input, output, kernel, kernel], input * k2, output * k2, rng)?;
        let bias = store.zeros(&format!("{name}.bias"), &[output])?;
        Ok(Self { weight, bias, stride })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = self.bias.dims()[0];
        let y = x.conv_transpose2d(&self.weight, 0, 0, self.stride, 1)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }
}

/// Gated recurrent unit cell.
#[derive(Clone)]
pub struct GruCell {
    input: Linear,
    hidden: Linear,
    size: usize,
}

impl GruCell {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, size: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            input: Linear::new(store, &format!("{name}.input"), input, 3 * size, true, rng)?,
            hidden: Linear::new(store, &format!("{name}.hidden"), size, 3 * size, true, rng)?,
            size,
        })
    }

    pub fn forward(&self, x: &Tensor, h: &Tensor) -> Result<Tensor> {
        let n = self.size;
        let gi = self.input.forward(x)?;
        let gh = self.hidden.forward(h)?;
        let reset = sigmoid(&(gi.narrow(1, 0, n)? + gh.narrow(1, 0, n)?)?)?;
        let update = sigmoid(&(gi.narrow(1, n, n)? + gh.narrow(1, n, n)?)?)?;
        let cand = (gi.narrow(1, 2 * n, n)? + (reset * gh.narrow(1, 2 * n, n)?)?)?.tanh()?;
        let keep = update.affine(-1.0, 1.0)?;
        Ok(((keep * cand)? + (update * h)?)?)
    }
}

/// Logistic function written through `tanh` so that neither the forward
/// value nor its derivative overflows.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(((x * 0.5)?.tanh()? + 1.0)?.affine(0.5, 0.0)?)
}

/// `log(1 + exp(x))` evaluated as `relu(x) + log1p(exp(-|x|))`.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let tail = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok((x.relu()? + tail)?)
}

/// Standard normal noise from a seeded stream.
pub fn normal_tensor(rng: &mut impl Rng, shape: &[usize], dtype: DType) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Ok(Tensor::from_vec(data, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

pub fn ensure_finite(t: &Tensor, what: &str) -> Result<()> {
    let s = t.to_dtype(DType::F64)?.abs()?.sum_all()?.to_scalar::<f64>()?;
    if s.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{what} contains non-finite values")))
    }
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

pub fn to_f64_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

/// Sum over the last dimension.
pub fn sum_last(t: &Tensor) -> Result<Tensor> {
    Ok(t.sum(D::Minus1)?)
}
