//! Executes a [`NetworkSpec`] layer table with learned parameters.

use std::collections::BTreeMap;
use std::sync::Mutex;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::nets::attention::{reduced_channels, self_attention, AttentionParams};
use crate::nets::ops::{
    conv2d, conv_transpose2d, global_avg_pool, instance_norm, leaky_relu, pixel_shuffle, LEAKY_RELU_SLOPE,
};
use crate::nets::spec::{Activation, LayerKind, LayerSpec, NetworkSpec, Norm};
use crate::nets::spectral::normalize_weight;

pub const INIT_STD: f64 = 0.02;

/// Power iterations per training forward pass for spectrally normalized layers.
pub const TRAIN_POWER_ITERS: usize = 1;

/// `(C, H, W)` after each layer, as recorded by [`Network::forward_traced`].
pub type ShapeTrace = Vec<(usize, usize, usize)>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Spectral-norm state advances on every forward pass.
    Train,
    /// Read-only forward pass; no autograd graph is recorded.
    Eval,
}

/// Named trainable variables, ordered by name.
#[derive(Debug, Default, Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn get(&self, name: &str) -> Result<&Var> {
        self.vars
            .get(name)
            .ok_or_else(|| Error::LayerTable(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    fn insert(&mut self, name: String, t: Tensor) -> Result<()> {
        self.vars.insert(name, Var::from_tensor(&t)?);
        Ok(())
    }
}

struct Init<'a, R: Rng + ?Sized> {
    rng: &'a mut R,
    dtype: DType,
    device: &'a Device,
}

impl<R: Rng + ?Sized> Init<'_, R> {
    fn gaussian(&mut self, shape: &[usize]) -> Result<Tensor> {
        let normal = Normal::new(0.0f64, INIT_STD).expect("valid std");
        let len: usize = shape.iter().product();
        let v: Vec<f64> = (0..len).map(|_| normal.sample(self.rng)).collect();
        Ok(Tensor::from_vec(v, shape, self.device)?.to_dtype(self.dtype)?)
    }

    fn zeros(&self, shape: &[usize]) -> Result<Tensor> {
        Ok(Tensor::zeros(shape, self.dtype, self.device)?)
    }
}

/// Parameter-name stem for layer `index`, counted per kind so that tables
/// differing only by inserted attention layers share names for the rest.
fn layer_names(spec: &NetworkSpec) -> Vec<String> {
    let mut counts: BTreeMap<&'static str, usize> = BTreeMap::new();
    spec.layers
        .iter()
        .map(|l| {
            let stem = match l.kind {
                LayerKind::Conv => "conv",
                LayerKind::TransposedConv => "up",
                LayerKind::ResidualBlock => "res",
                LayerKind::SubpixelBlock => "subpixel",
                LayerKind::SelfAttention => "attn",
                LayerKind::GlobalAvgPool => "gap",
            };
            let i = counts.entry(stem).or_default();
            let name = format!("{stem}{i}");
            *i += 1;
            name
        })
        .collect()
}

/// A feed-forward network built from a layer table.
pub struct Network {
    spec: NetworkSpec,
    names: Vec<String>,
    params: ParamStore,
    /// Persisted power-iteration vectors, keyed by weight name.
    spectral_state: Mutex<BTreeMap<String, Tensor>>,
    dtype: DType,
    device: Device,
}

impl std::fmt::Debug for Network {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Network")
            .field("name", &self.spec.name)
            .field("layers", &self.spec.layers.len())
            .field("params", &self.params.len())
            .finish()
    }
}

impl Network {
    /// Builds the network with N(0, 0.02) weights, zero biases and zero attention gates.
    pub fn new<R: Rng + ?Sized>(spec: NetworkSpec, rng: &mut R, dtype: DType, device: &Device) -> Result<Self> {
        spec.validate()?;
        let names = layer_names(&spec);
        let mut init = Init { rng, dtype, device };
        let mut params = ParamStore::default();
        let mut spectral = BTreeMap::new();
        let mut channels = spec.in_channels;
        for (layer, name) in spec.layers.iter().zip(&names) {
            let k = layer.k;
            match layer.kind {
                LayerKind::Conv | LayerKind::SubpixelBlock => {
                    params.insert(format!("{name}.weight"), init.gaussian(&[layer.n, channels, k, k])?)?;
                    params.insert(format!("{name}.bias"), init.zeros(&[layer.n])?)?;
                    if layer.norm == Norm::Spectral {
                        let u = init.gaussian(&[layer.n])?;
                        let norm = u.sqr()?.sum_all()?.sqrt()?;
                        spectral.insert(format!("{name}.weight"), u.broadcast_div(&norm)?);
                    }
                }
                LayerKind::TransposedConv => {
                    params.insert(format!("{name}.weight"), init.gaussian(&[channels, layer.n, k, k])?)?;
                    params.insert(format!("{name}.bias"), init.zeros(&[layer.n])?)?;
                }
                LayerKind::ResidualBlock => {
                    for conv in ["conv1", "conv2"] {
                        params.insert(
                            format!("{name}.{conv}.weight"),
                            init.gaussian(&[layer.n, channels, k, k])?,
                        )?;
                        params.insert(format!("{name}.{conv}.bias"), init.zeros(&[layer.n])?)?;
                    }
                }
                LayerKind::SelfAttention => {
                    let r = reduced_channels(channels);
                    for (proj, out) in [("query", r), ("key", r), ("value", channels)] {
                        params.insert(format!("{name}.{proj}.weight"), init.gaussian(&[out, channels])?)?;
                        params.insert(format!("{name}.{proj}.bias"), init.zeros(&[out])?)?;
                    }
                    params.insert(format!("{name}.gate"), init.zeros(&[1])?)?;
                }
                LayerKind::GlobalAvgPool => {}
            }
            channels = layer.out_channels();
        }
        Ok(Self {
            spec,
            names,
            params,
            spectral_state: Mutex::new(spectral),
            dtype,
            device: device.clone(),
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        self.run(x, mode, None)
    }

    /// Forward pass that also records the `(C, H, W)` of the first sample after every layer.
    pub fn forward_traced(&self, x: &Tensor, mode: Mode) -> Result<(Tensor, ShapeTrace)> {
        let mut trace = Vec::with_capacity(self.spec.layers.len());
        let y = self.run(x, mode, Some(&mut trace))?;
        Ok((y, trace))
    }

    fn run(&self, x: &Tensor, mode: Mode, mut trace: Option<&mut ShapeTrace>) -> Result<Tensor> {
        let (_, c, _, _) = x.dims4()?;
        if c != self.spec.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "{} expects {} input channels, got {c}",
                self.spec.name, self.spec.in_channels
            )));
        }
        let mut h = x.to_dtype(self.dtype)?;
        if mode == Mode::Eval {
            h = h.detach();
        }
        for (layer, name) in self.spec.layers.iter().zip(&self.names) {
            h = self.layer(layer, name, &h, mode)?;
            if let Some(trace) = trace.as_deref_mut() {
                let (_, c, hh, ww) = h.dims4()?;
                trace.push((c, hh, ww));
            }
        }
        Ok(h)
    }

    fn param(&self, name: &str, mode: Mode) -> Result<Tensor> {
        let t = self.params.get(name)?.as_tensor();
        Ok(match mode {
            Mode::Train => t.clone(),
            Mode::Eval => t.detach(),
        })
    }

    fn weight(&self, name: &str, norm: Norm, mode: Mode) -> Result<Tensor> {
        let w = self.param(name, mode)?;
        if norm != Norm::Spectral {
            return Ok(w);
        }
        let mut state = self.spectral_state.lock().expect("spectral state poisoned");
        let u = state
            .get(name)
            .ok_or_else(|| Error::LayerTable(format!("missing spectral state for `{name}`")))?;
        let iters = match mode {
            Mode::Train => TRAIN_POWER_ITERS,
            Mode::Eval => 0,
        };
        let (normalized, u_next) = normalize_weight(&w, u, iters)?;
        if mode == Mode::Train {
            state.insert(name.to_string(), u_next);
        }
        Ok(normalized)
    }

    fn conv_params(&self, stem: &str, norm: Norm, mode: Mode) -> Result<ConvParams> {
        Ok(ConvParams {
            weight: self.weight(&format!("{stem}.weight"), norm, mode)?,
            bias: self.param(&format!("{stem}.bias"), mode)?,
        })
    }

    fn layer(&self, layer: &LayerSpec, name: &str, x: &Tensor, mode: Mode) -> Result<Tensor> {
        match layer.kind {
            LayerKind::Conv => {
                let p = self.conv_params(name, layer.norm, mode)?;
                let y = conv2d(x, &p.weight, Some(&p.bias), layer.s, layer.p)?;
                finish(&y, layer.norm, layer.activation)
            }
            LayerKind::TransposedConv => {
                let p = self.conv_params(name, layer.norm, mode)?;
                let y = conv_transpose2d(x, &p.weight, Some(&p.bias), layer.s, layer.p, layer.output_padding)?;
                finish(&y, layer.norm, layer.activation)
            }
            LayerKind::ResidualBlock => {
                let p = ResidualParams {
                    conv1: self.conv_params(&format!("{name}.conv1"), Norm::None, mode)?,
                    conv2: self.conv_params(&format!("{name}.conv2"), Norm::None, mode)?,
                };
                residual_block(x, &p)
            }
            LayerKind::SubpixelBlock => {
                let p = self.conv_params(name, layer.norm, mode)?;
                let y = conv2d(x, &p.weight, Some(&p.bias), layer.s, layer.p)?;
                let y = pixel_shuffle(&y, layer.upscale)?;
                finish(&y, layer.norm, layer.activation)
            }
            LayerKind::SelfAttention => self_attention(x, &self.attention_params_for(name, mode)?),
            LayerKind::GlobalAvgPool => global_avg_pool(x),
        }
    }

    pub fn attention_params(&self, stem: &str) -> Result<AttentionParams> {
        self.attention_params_for(stem, Mode::Train)
    }

    fn attention_params_for(&self, stem: &str, mode: Mode) -> Result<AttentionParams> {
        let get = |s: &str| self.param(&format!("{stem}.{s}"), mode);
        Ok(AttentionParams {
            query_weight: get("query.weight")?,
            query_bias: get("query.bias")?,
            key_weight: get("key.weight")?,
            key_bias: get("key.bias")?,
            value_weight: get("value.weight")?,
            value_bias: get("value.bias")?,
            gate: get("gate")?,
        })
    }

    /// Parameters plus spectral-norm state (under `spectral.` prefixed names), detached copies.
    pub fn state_dict(&self) -> Result<BTreeMap<String, Tensor>> {
        let mut out = BTreeMap::new();
        for (name, var) in self.params.iter() {
            out.insert(name.clone(), var.as_tensor().copy()?);
        }
        for (name, u) in self.spectral_state.lock().expect("spectral state poisoned").iter() {
            out.insert(format!("spectral.{name}"), u.copy()?);
        }
        Ok(out)
    }

    /// Overwrites every parameter and spectral vector from `state`. Names and shapes must match exactly.
    pub fn load_state_dict(&self, state: &BTreeMap<String, Tensor>) -> Result<()> {
        let mut spectral = self.spectral_state.lock().expect("spectral state poisoned");
        let expected = self.params.len() + spectral.len();
        if state.len() != expected {
            return Err(Error::LayerTable(format!(
                "{}: state has {} tensors, network needs {expected}",
                self.spec.name,
                state.len()
            )));
        }
        for (name, var) in self.params.iter() {
            let t = state
                .get(name)
                .ok_or_else(|| Error::LayerTable(format!("state is missing `{name}`")))?;
            if t.dims() != var.dims() {
                return Err(Error::ShapeMismatch(format!(
                    "`{name}`: stored {:?}, network {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?.to_device(&self.device)?)?;
        }
        let keys: Vec<String> = spectral.keys().cloned().collect();
        for name in keys {
            let t = state
                .get(&format!("spectral.{name}"))
                .ok_or_else(|| Error::LayerTable(format!("state is missing spectral vector for `{name}`")))?;
            spectral.insert(name, t.to_dtype(self.dtype)?.to_device(&self.device)?);
        }
        Ok(())
    }

    /// Copies every parameter that exists under the same name and shape in `other`. Returns how many were copied.
    pub fn copy_matching_from(&self, other: &Network) -> Result<usize> {
        let mut copied = 0;
        for (name, var) in self.params.iter() {
            if let Ok(src) = other.params.get(name) {
                if src.dims() == var.dims() {
                    var.set(src.as_tensor())?;
                    copied += 1;
                }
            }
        }
        Ok(copied)
    }
}

fn finish(x: &Tensor, norm: Norm, activation: Activation) -> Result<Tensor> {
    let x = match norm {
        Norm::Instance => instance_norm(x)?,
        Norm::Spectral | Norm::None => x.clone(),
    };
    Ok(match activation {
        Activation::Relu => x.relu()?,
        Activation::LeakyRelu => leaky_relu(&x, LEAKY_RELU_SLOPE)?,
        Activation::Tanh => x.tanh()?,
        Activation::None => x,
    })
}

#[derive(Debug, Clone)]
pub struct ConvParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone)]
pub struct ResidualParams {
    pub conv1: ConvParams,
    pub conv2: ConvParams,
}

/// The residual branch `F(x)`: conv → IN → ReLU → conv → IN, all 3×3 stride 1.
pub fn residual_branch(x: &Tensor, p: &ResidualParams) -> Result<Tensor> {
    let pad = p.conv1.weight.dim(3)? / 2;
    let h = conv2d(x, &p.conv1.weight, Some(&p.conv1.bias), 1, pad)?;
    let h = instance_norm(&h)?.relu()?;
    let h = conv2d(&h, &p.conv2.weight, Some(&p.conv2.bias), 1, pad)?;
    instance_norm(&h)
}

/// `x + F(x)`.
pub fn residual_block(x: &Tensor, p: &ResidualParams) -> Result<Tensor> {
    let c = x.dim(1)?;
    let (cout, cin, _, _) = p.conv1.weight.dims4()?;
    if cin != c || cout != c || p.conv2.weight.dims4()?.0 != c {
        return Err(Error::ShapeMismatch(format!(
            "residual block of {cout} channels applied to {c}-channel input"
        )));
    }
    Ok((x + residual_branch(x, p)?)?)
}

/// Sub-pixel upsampling: conv to `C_out·r²` channels, pixel shuffle by `r`, instance norm, ReLU.
pub fn subpixel_upsample(x: &Tensor, p: &ConvParams, r: usize) -> Result<Tensor> {
    let c = x.dim(1)?;
    let (_, cin, k, _) = p.weight.dims4()?;
    if cin != c {
        return Err(Error::ShapeMismatch(format!(
            "sub-pixel block expects {cin} channels, got {c}"
        )));
    }
    let y = conv2d(x, &p.weight, Some(&p.bias), 1, k / 2)?;
    let y = pixel_shuffle(&y, r)?;
    Ok(instance_norm(&y)?.relu()?)
}
