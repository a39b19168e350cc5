//! Named parameter storage and the small layer types built on it.

use std::collections::HashMap;

use ammsm_tensor::{Scalar, Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered collection of named parameter tensors.
#[derive(Clone)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Replaces a parameter value, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))?;
        if self.values[i].shape() != value.shape() {
            return Err(Error::Contract(format!(
                "parameter {name} has shape {:?}, got {:?}",
                self.values[i].shape(),
                value.shape()
            )));
        }
        self.values[i] = value;
        Ok(())
    }

    /// Places every parameter on `tape`, as trainable leaves or as constants.
    pub fn bind(&self, tape: &Tape<T>, trainable: bool) -> Bound<T> {
        let vars = self
            .values
            .iter()
            .map(|v| {
                if trainable {
                    tape.param(v.clone())
                } else {
                    tape.constant(v.clone())
                }
            })
            .collect();
        Bound {
            tape: tape.clone(),
            vars,
        }
    }
}

/// Parameters placed on a tape for one forward pass.
pub struct Bound<T> {
    tape: Tape<T>,
    vars: Vec<Var<T>>,
}

impl<T: Scalar> Bound<T> {
    pub fn get(&self, id: ParamId) -> &Var<T> {
        &self.vars[id.0]
    }

    pub fn tape(&self) -> &Tape<T> {
        &self.tape
    }

    pub fn vars(&self) -> &[Var<T>] {
        &self.vars
    }

    /// Substitutes the variable bound to `id`, e.g. to differentiate with
    /// respect to one parameter only.
    pub fn set(&mut self, id: ParamId, var: Var<T>) {
        self.vars[id.0] = var;
    }

    pub fn constant(&self, t: Tensor<T>) -> Var<T> {
        self.tape.constant(t)
    }
}

/// Weight initializers drawing from a seeded generator.
pub struct Init<'a> {
    pub rng: &'a mut ChaCha8Rng,
}

impl Init<'_> {
    pub fn normal<T: Scalar>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let dist = Normal::new(0.0, std).expect("finite std");
        Tensor::from_fn(shape, |_| T::lit(dist.sample(self.rng)))
    }

    pub fn uniform<T: Scalar>(&mut self, shape: &[usize], bound: f64) -> Tensor<T> {
        Tensor::from_fn(shape, |_| T::lit(self.rng.random_range(-bound..bound)))
    }
}

/// Fully connected layer over the last axis: `[.., in] -> [.., out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, init: &mut Init, name: &str, d_in: usize, d_out: usize) -> Self {
        let bound = (1.0 / d_in as f64).sqrt();
        Linear {
            w: store.add(format!("{name}.w"), init.uniform(&[d_in, d_out], bound)),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[d_out])),
            d_in,
            d_out,
        }
    }

    pub fn zeroed<T: Scalar>(store: &mut ParamStore<T>, name: &str, d_in: usize, d_out: usize) -> Self {
        Linear {
            w: store.add(format!("{name}.w"), Tensor::zeros(&[d_in, d_out])),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[d_out])),
            d_in,
            d_out,
        }
    }

    pub fn forward<T: Scalar>(&self, p: &Bound<T>, x: &Var<T>) -> Result<Var<T>> {
        Ok(x.matmul(p.get(self.w))?.add(p.get(self.b))?)
    }

    /// Multiply-add count for `tokens` input rows.
    pub fn flops(&self, tokens: usize) -> u64 {
        (2 * tokens * self.d_in * self.d_out + tokens * self.d_out) as u64
    }
}

/// Dense NHWC convolution with weights `[k, k, cin, cout]`.
#[derive(Debug, Clone)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub cin: usize,
    pub cout: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let std = (2.0 / (k * k * cin) as f64).sqrt();
        Conv {
            w: store.add(format!("{name}.w"), init.normal(&[k, k, cin, cout], std)),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[cout])),
            k,
            stride,
            pad,
            cin,
            cout,
        }
    }

    pub fn forward<T: Scalar>(&self, p: &Bound<T>, x: &Var<T>) -> Result<Var<T>> {
        Ok(x.conv2d(p.get(self.w), Some(p.get(self.b)), self.stride, self.pad)?)
    }

    pub fn out_size(&self, n: usize) -> usize {
        (n + 2 * self.pad - self.k) / self.stride + 1
    }
}

/// 3x3 depthwise convolution with "same" padding.
#[derive(Debug, Clone)]
pub struct DwConv {
    pub w: ParamId,
    pub b: ParamId,
    pub c: usize,
}

impl DwConv {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, init: &mut Init, name: &str, c: usize) -> Self {
        DwConv {
            w: store.add(format!("{name}.w"), init.normal(&[3, 3, c], (2.0f64 / 9.0).sqrt())),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[c])),
            c,
        }
    }

    pub fn forward<T: Scalar>(&self, p: &Bound<T>, x: &Var<T>) -> Result<Var<T>> {
        Ok(x.depthwise_conv2d(p.get(self.w), Some(p.get(self.b)), 1)?)
    }

    pub fn flops(&self, pixels: usize) -> u64 {
        (pixels * self.c * (2 * 9 + 1)) as u64
    }
}

/// Layer normalization over the last axis with a learned affine map.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub d: usize,
}

pub const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[d])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[d])),
            d,
        }
    }

    pub fn forward<T: Scalar>(&self, p: &Bound<T>, x: &Var<T>) -> Result<Var<T>> {
        Ok(x.layernorm(T::lit(LN_EPS))?
            .mul(p.get(self.gamma))?
            .add(p.get(self.beta))?)
    }

    pub fn flops(&self, tokens: usize) -> u64 {
        (tokens * self.d * 7) as u64
    }
}
