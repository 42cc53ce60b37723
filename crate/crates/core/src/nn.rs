//! Parameter storage and the small set of layers the model is built from.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Conv2dSpec, Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Named, ordered parameter tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(self.params.iter().all(|p| p.name != name), "duplicate parameter {name}");
        self.params.push(Param { name, value });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Overwrite values from another store with identical names and shapes.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        if other.params.len() != self.params.len() {
            return Err(Error::Shape(format!(
                "parameter count mismatch: {} vs {}",
                other.params.len(),
                self.params.len()
            )));
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            if dst.name != src.name || dst.value.shape() != src.value.shape() {
                return Err(Error::Shape(format!(
                    "parameter {} {:?} does not match {} {:?}",
                    dst.name,
                    dst.value.shape(),
                    src.name,
                    src.value.shape()
                )));
            }
            dst.value = src.value.clone();
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                })
                .collect(),
        }
    }
}

/// Builds parameters with a shared name prefix and a seeded initialiser.
pub struct Builder<'a, T> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a, T: Scalar> Builder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    /// Run `f` with `name` appended to the prefix.
    pub fn scope<R>(&mut self, name: &str, f: impl FnOnce(&mut Builder<'_, T>) -> R) -> R {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        let mut child = Builder {
            store: self.store,
            rng: self.rng,
            prefix,
        };
        f(&mut child)
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> ParamId {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| T::of(if bound > 0.0 { self.rng.random_range(-bound..bound) } else { 0.0 }))
            .collect();
        let full = self.full_name(name);
        self.store.add(full, Tensor::from_vec(shape, data).unwrap())
    }

    pub fn constant(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        let full = self.full_name(name);
        self.store.add(full, value)
    }
}

/// Forward-pass context: a tape plus lazily bound parameters.
pub struct Session<'a, T: Scalar> {
    pub tape: Tape<T>,
    params: &'a ParamStore<T>,
    bound: Vec<Option<Var>>,
    track_params: bool,
    dropout: Option<(f64, ChaCha8Rng)>,
}

impl<'a, T: Scalar> Session<'a, T> {
    /// Inference session: parameters are constants and dropout is off.
    pub fn inference(params: &'a ParamStore<T>) -> Self {
        Self {
            tape: Tape::new(),
            params,
            bound: vec![None; params.len()],
            track_params: false,
            dropout: None,
        }
    }

    /// Training session: parameters receive gradients; dropout with
    /// probability `p` (0 disables it) driven by `seed`.
    pub fn training(params: &'a ParamStore<T>, dropout: f64, seed: u64) -> Self {
        Self {
            tape: Tape::new(),
            params,
            bound: vec![None; params.len()],
            track_params: true,
            dropout: (dropout > 0.0).then(|| (dropout, ChaCha8Rng::seed_from_u64(seed))),
        }
    }

    pub fn is_training(&self) -> bool {
        self.track_params
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.leaf(self.params.get(id).clone(), self.track_params);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.tape.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.tape.value(v)
    }

    /// Inverted dropout; identity when disabled.
    pub fn dropout(&mut self, x: Var) -> Var {
        let Some((p, rng)) = self.dropout.as_mut() else {
            return x;
        };
        let p = *p;
        let keep = T::of(1.0 / (1.0 - p));
        let shape = self.tape.shape(x).to_vec();
        let n: usize = shape.iter().product();
        let mask = (0..n)
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let m = self.tape.constant(Tensor::from_vec(&shape, mask).unwrap());
        self.tape.mul(x, m)
    }

    /// Gradient for every parameter (zeros for unused ones), in store order.
    pub fn param_grads(&self, grads: &Gradients<T>) -> Vec<Tensor<T>> {
        self.bound
            .iter()
            .enumerate()
            .map(|(i, v)| {
                v.and_then(|v| grads.get(v).cloned())
                    .unwrap_or_else(|| Tensor::zeros(self.params.get(ParamId(i)).shape()))
            })
            .collect()
    }
}

/// Fully connected layer with weight `[out, in]` and bias `[out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        b.scope(name, |b| Self {
            weight: b.uniform("weight", &[out_dim, in_dim], bound),
            bias: b.uniform("bias", &[out_dim], bound),
            in_dim,
            out_dim,
        })
    }

    /// Zero weight with an explicit bias.
    pub fn with_bias<T: Scalar>(b: &mut Builder<'_, T>, name: &str, in_dim: usize, bias: Vec<T>) -> Self {
        let out_dim = bias.len();
        b.scope(name, |b| Self {
            weight: b.uniform("weight", &[out_dim, in_dim], 0.0),
            bias: b.constant("bias", Tensor::from_vec(&[out_dim], bias).unwrap()),
            in_dim,
            out_dim,
        })
    }

    /// `x: [n, in] -> [n, out]`.
    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Var {
        let (w, b) = (s.param(self.weight), s.param(self.bias));
        let y = s.tape.matmul_bt(x, w);
        s.tape.add_row(y, b)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub spec: Conv2dSpec,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Conv2d {
    pub fn new<T: Scalar>(
        b: &mut Builder<'_, T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        let fan_in = (in_channels * kernel * kernel) as f64;
        // He-style bound keeps activations O(1) through ReLU stacks.
        let bound = (6.0 / fan_in).sqrt();
        b.scope(name, |b| Self {
            weight: b.uniform("weight", &[out_channels, in_channels, kernel, kernel], bound),
            bias: b.uniform("bias", &[out_channels], 0.0),
            spec: Conv2dSpec {
                stride,
                pad: kernel / 2,
            },
            in_channels,
            out_channels,
        })
    }

    /// `x: [C, H, W] -> [O, H', W']`.
    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Var {
        let (w, b) = (s.param(self.weight), s.param(self.bias));
        s.tape.conv2d(x, w, Some(b), self.spec)
    }
}

/// Layer normalisation over the last axis with learned gain and offset.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub offset: ParamId,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str, dim: usize) -> Self {
        b.scope(name, |b| Self {
            gain: b.constant("gain", Tensor::full(&[dim], T::one())),
            offset: b.constant("offset", Tensor::zeros(&[dim])),
        })
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Var {
        let (g, o) = (s.param(self.gain), s.param(self.offset));
        let n = s.tape.layer_norm(x, T::of(LAYER_NORM_EPS));
        let y = s.tape.mul_row(n, g);
        s.tape.add_row(y, o)
    }
}
