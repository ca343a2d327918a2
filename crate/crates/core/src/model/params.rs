use std::collections::BTreeMap;

use rand::Rng;

use super::config::ModelConfig;
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::init::he_normal;
use crate::nn::spectral::{spectral_normalize, SpectralMode, SpectralState};
use crate::nn::{ConvParams, ConvSpec};
use crate::tensor::{Real, Tensor};

/// Named parameters of a model plus the power-iteration state of its
/// spectrally normalized layers.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    config: ModelConfig,
    tensors: BTreeMap<String, Tensor<T>>,
    spectral: BTreeMap<String, SpectralState<T>>,
    specs: BTreeMap<String, (ConvSpec, bool)>,
}

impl<T: Real> ModelParams<T> {
    /// He-normal weights, zero biases (one on the `α` heads), random unit `u`.
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut tensors = BTreeMap::new();
        let mut spectral = BTreeMap::new();
        let mut specs = BTreeMap::new();
        for layer in config.layers() {
            let w = he_normal(&layer.spec.weight_shape(), layer.spec.fan_in(), rng)?;
            tensors.insert(format!("{}.weight", layer.name), w);
            if layer.spec.bias {
                let b = Tensor::full(&[layer.spec.out_channels], T::cast(layer.bias_init))?;
                tensors.insert(format!("{}.bias", layer.name), b);
            }
            if layer.spectral {
                spectral.insert(
                    format!("{}.weight", layer.name),
                    SpectralState::new(layer.spec.out_channels, rng),
                );
            }
            specs.insert(layer.name, (layer.spec, layer.spectral));
        }
        Ok(Self {
            config,
            tensors,
            spectral,
            specs,
        })
    }

    /// Reassembles a parameter set, checking it against `config`'s layer table.
    pub fn from_parts(
        config: ModelConfig,
        tensors: BTreeMap<String, Tensor<T>>,
        spectral: BTreeMap<String, SpectralState<T>>,
    ) -> Result<Self> {
        config.validate()?;
        let mut specs = BTreeMap::new();
        let mut expected = BTreeMap::new();
        let mut expected_u = BTreeMap::new();
        for layer in config.layers() {
            expected.insert(
                format!("{}.weight", layer.name),
                layer.spec.weight_shape().to_vec(),
            );
            if layer.spec.bias {
                expected.insert(
                    format!("{}.bias", layer.name),
                    vec![layer.spec.out_channels],
                );
            }
            if layer.spectral {
                expected_u.insert(format!("{}.weight", layer.name), layer.spec.out_channels);
            }
            specs.insert(layer.name, (layer.spec, layer.spectral));
        }
        for (name, want) in &expected {
            match tensors.get(name) {
                Some(t) if t.shape() == want.as_slice() => {}
                Some(t) => {
                    return Err(Error::IncompatibleCheckpoint(format!(
                        "{name}: shape {:?}, model expects {want:?}",
                        t.shape()
                    )))
                }
                None => {
                    return Err(Error::IncompatibleCheckpoint(format!(
                        "missing tensor {name}"
                    )))
                }
            }
        }
        if let Some(extra) = tensors.keys().find(|k| !expected.contains_key(*k)) {
            return Err(Error::IncompatibleCheckpoint(format!(
                "unexpected tensor {extra}"
            )));
        }
        for (name, &rows) in &expected_u {
            match spectral.get(name) {
                Some(s) if s.u.len() == rows => {}
                _ => {
                    return Err(Error::IncompatibleCheckpoint(format!(
                        "spectral state for {name}"
                    )))
                }
            }
        }
        if spectral.len() != expected_u.len() {
            return Err(Error::IncompatibleCheckpoint(
                "unexpected spectral state".into(),
            ));
        }
        Ok(Self {
            config,
            tensors,
            spectral,
            specs,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut BTreeMap<String, Tensor<T>> {
        &mut self.tensors
    }

    pub fn spectral(&self) -> &BTreeMap<String, SpectralState<T>> {
        &self.spectral
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config,
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
            spectral: self
                .spectral
                .iter()
                .map(|(k, s)| {
                    let u = s.u.iter().map(|x| U::cast(x.as_f64())).collect();
                    (
                        k.clone(),
                        SpectralState {
                            u,
                            iterations: s.iterations,
                        },
                    )
                })
                .collect(),
            specs: self.specs.clone(),
        }
    }

    fn layer(&self, name: &str) -> Result<(ConvSpec, bool)> {
        self.specs
            .get(name)
            .copied()
            .ok_or_else(|| Error::contract(format!("unknown layer {name}")))
    }
}

/// One forward pass: a fresh graph with parameters bound lazily by name.
pub struct Ctx<'a, T: Real> {
    pub g: Graph<T>,
    params: &'a mut ModelParams<T>,
    bound: BTreeMap<String, Var>,
    mode: SpectralMode,
    trainable: bool,
}

impl<'a, T: Real> Ctx<'a, T> {
    /// Parameters are graph leaves with gradients; spectral `u` advances.
    pub fn train(params: &'a mut ModelParams<T>) -> Self {
        Self::with(params, SpectralMode::Update, true)
    }

    /// Parameters are constants; spectral state is read-only.
    pub fn infer(params: &'a mut ModelParams<T>) -> Self {
        Self::with(params, SpectralMode::Frozen, false)
    }

    pub fn with(params: &'a mut ModelParams<T>, mode: SpectralMode, trainable: bool) -> Self {
        Self {
            g: Graph::new(),
            params,
            bound: BTreeMap::new(),
            mode,
            trainable,
        }
    }

    pub fn config(&self) -> ModelConfig {
        self.params.config
    }

    /// The graph leaf for parameter `name`, binding it on first use.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self
            .params
            .tensors
            .get(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter {name}")))?
            .clone();
        let v = if self.trainable {
            self.g.param(t)
        } else {
            self.g.constant(t)
        };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Applies layer `name` to `x`, normalizing its weight when the layer is spectral.
    pub fn conv(&mut self, name: &str, x: Var) -> Result<Var> {
        let (spec, spectral) = self.params.layer(name)?;
        let wname = format!("{name}.weight");
        let mut weight = self.param(&wname)?;
        if spectral {
            let state = self
                .params
                .spectral
                .get_mut(&wname)
                .ok_or_else(|| Error::contract(format!("no spectral state for {wname}")))?;
            weight = spectral_normalize(&mut self.g, weight, state, self.mode)?;
        }
        let bias = if spec.bias {
            Some(self.param(&format!("{name}.bias"))?)
        } else {
            None
        };
        self.g.conv3d(x, weight, bias, &spec)
    }

    /// Bound weights and bias of a non-spectral layer.
    pub fn conv_params(&mut self, name: &str) -> Result<(ConvSpec, Var, Option<Var>)> {
        let (spec, _) = self.params.layer(name)?;
        let w = self.param(&format!("{name}.weight"))?;
        let b = if spec.bias {
            Some(self.param(&format!("{name}.bias"))?)
        } else {
            None
        };
        Ok((spec, w, b))
    }

    pub fn gated(&mut self, value: &str, gate: &str, x: Var) -> Result<Var> {
        let (sa, wa, ba) = self.conv_params(value)?;
        let (sb, wb, bb) = self.conv_params(gate)?;
        crate::nn::gated_transposed_conv3d(
            &mut self.g,
            x,
            ConvParams {
                spec: &sa,
                weight: wa,
                bias: ba,
            },
            ConvParams {
                spec: &sb,
                weight: wb,
                bias: bb,
            },
        )
    }

    /// Runs backward from `loss` and returns gradients keyed by parameter name.
    /// Parameters the pass never touched receive zeros.
    pub fn gradients(mut self, loss: Var) -> Result<BTreeMap<String, Tensor<T>>> {
        let mut grads = self.g.backward(loss)?;
        let mut out = BTreeMap::new();
        for (name, t) in &self.params.tensors {
            let g = match self.bound.get(name).and_then(|&v| grads.take(v)) {
                Some(g) => g,
                None => Tensor::zeros(t.shape())?,
            };
            out.insert(name.clone(), g);
        }
        Ok(out)
    }
}
