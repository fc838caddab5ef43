//! Named parameters, forward sessions and the basic layers built on them.
//!
//! A [`ParamStore`] owns every tensor of a model under a dotted name, each
//! tagged with a [`ParamRole`]. A forward pass runs inside a [`Session`],
//! which binds parameters onto a fresh [`Tape`] (trainable ones as
//! gradient-requiring leaves, frozen ones and buffers as constants), carries
//! the train/eval switch and the random source for dropout, and collects
//! running-statistics updates. Parameter values are kept exactly
//! representable as `f32`, the checkpoint storage precision.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::{Rng as _, RngCore};

use crate::{Error, Result, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamRole {
    /// Updated by the optimizer.
    Trainable,
    /// Pretrained and never updated.
    Frozen,
    /// Non-gradient state such as batch-norm running statistics.
    Buffer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub role: ParamRole,
    pub grad: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor; names must be unique.
    pub fn add(&mut self, name: &str, mut value: Tensor, role: ParamRole) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::Contract(alloc::format!("duplicate parameter name {name}")));
        }
        value.round_to_f32();
        let id = ParamId(self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            value,
            role,
            grad: None,
        });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    /// Replaces a tensor's value (rounded to `f32`), keeping its shape.
    pub fn set_value(&mut self, id: ParamId, mut value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::shape("set_value", p.value.shape(), value.shape()));
        }
        value.round_to_f32();
        p.value = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn names_with_role(&self, role: ParamRole) -> Vec<&str> {
        self.params
            .iter()
            .filter(|p| p.role == role)
            .map(|p| p.name.as_str())
            .collect()
    }

    pub fn num_scalars(&self, role: ParamRole) -> usize {
        self.params.iter().filter(|p| p.role == role).map(|p| p.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }
}

/// Weight initialization schemes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Constant(f64),
    Normal(f64),
    /// Normal with std `gain / sqrt(fan_in)`.
    FanIn { fan_in: usize, gain: f64 },
}

impl Init {
    pub fn tensor(self, shape: &[usize], rng: &mut dyn RngCore) -> Tensor {
        match self {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::ones(shape),
            Init::Constant(c) => Tensor::full(shape, c),
            Init::Normal(std) => Tensor::randn(shape, std, rng),
            Init::FanIn { fan_in, gain } => Tensor::randn(shape, gain / libm::sqrt(fan_in.max(1) as f64), rng),
        }
    }
}

/// Registers parameters under a common name prefix and role.
pub struct Builder<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut dyn RngCore,
    prefix: String,
    role: ParamRole,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut dyn RngCore, role: ParamRole) -> Self {
        Builder {
            store,
            rng,
            prefix: String::new(),
            role,
        }
    }

    /// Child builder with `name` appended to the prefix.
    pub fn scope(&mut self, name: &str) -> Builder<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            alloc::format!("{}.{}", self.prefix, name)
        };
        Builder {
            store: self.store,
            rng: self.rng,
            prefix,
            role: self.role,
        }
    }

    pub fn with_role(&mut self, role: ParamRole) -> Builder<'_> {
        Builder {
            store: self.store,
            rng: self.rng,
            prefix: self.prefix.clone(),
            role,
        }
    }

    pub fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            alloc::format!("{}.{}", self.prefix, name)
        }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<ParamId> {
        let value = init.tensor(shape, self.rng);
        let full = self.full_name(name);
        self.store.add(&full, value, self.role)
    }

    pub fn buffer(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        let full = self.full_name(name);
        self.store.add(&full, value, ParamRole::Buffer)
    }
}

/// Forward-pass context: tape, parameter bindings, mode and randomness.
pub struct Session<'a> {
    pub tape: Tape,
    params: &'a ParamStore,
    bound: BTreeMap<ParamId, Var>,
    rng: Option<&'a mut dyn RngCore>,
    buffer_updates: Vec<(ParamId, Vec<f64>)>,
}

/// What remains of a [`Session`] once the forward pass is built.
pub struct SessionOutput {
    pub tape: Tape,
    bound: BTreeMap<ParamId, Var>,
    buffer_updates: Vec<(ParamId, Vec<f64>)>,
}

impl<'a> Session<'a> {
    /// Training mode: dropout and drop-path active, batch norm uses batch statistics.
    pub fn train(params: &'a ParamStore, rng: &'a mut dyn RngCore) -> Self {
        Session {
            tape: Tape::new(),
            params,
            bound: BTreeMap::new(),
            rng: Some(rng),
            buffer_updates: Vec::new(),
        }
    }

    /// Inference mode: deterministic, running statistics, no dropout.
    pub fn eval(params: &'a ParamStore) -> Self {
        Session {
            tape: Tape::new(),
            params,
            bound: BTreeMap::new(),
            rng: None,
            buffer_updates: Vec::new(),
        }
    }

    /// Continues on an existing tape; `rng` selects training mode.
    pub fn on_tape(tape: Tape, params: &'a ParamStore, rng: Option<&'a mut dyn RngCore>) -> Self {
        Session {
            tape,
            params,
            bound: BTreeMap::new(),
            rng,
            buffer_updates: Vec::new(),
        }
    }

    /// Binds `id` to an existing tape variable instead of its stored value.
    pub fn bind(&mut self, id: ParamId, v: Var) {
        self.bound.insert(id, v);
    }

    pub fn training(&self) -> bool {
        self.rng.is_some()
    }

    pub fn params(&self) -> &ParamStore {
        self.params
    }

    /// Binds a parameter onto the tape (once per session).
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let p = self.params.get(id);
        let v = self.tape.leaf(p.value.clone(), p.role == ParamRole::Trainable);
        self.bound.insert(id, v);
        v
    }

    pub fn opt_param(&mut self, id: Option<ParamId>) -> Option<Var> {
        id.map(|id| self.param(id))
    }

    pub fn buffer(&self, id: ParamId) -> &Tensor {
        self.params.value(id)
    }

    pub(crate) fn record_buffer(&mut self, id: ParamId, value: Vec<f64>) {
        self.buffer_updates.push((id, value));
    }

    pub fn rng(&mut self) -> Option<&mut dyn RngCore> {
        match self.rng.as_mut() {
            Some(r) => Some(&mut **r),
            None => None,
        }
    }

    /// Inverted dropout: zeroes entries with probability `rate` and scales the
    /// survivors by `1/(1 − rate)`. Identity in eval mode.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        let Some(rng) = self.rng.as_mut() else {
            return Ok(x);
        };
        if rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - rate;
        let shape = self.tape.shape(x).to_vec();
        let mask = Tensor::from_fn(&shape, |_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 });
        self.tape.mul_const(x, mask)
    }

    /// Stochastic depth on a residual branch: each sample (leading axis) keeps
    /// the whole branch with probability `1 − rate`, rescaled by `1/(1 − rate)`.
    /// Identity in eval mode.
    pub fn drop_path(&mut self, x: Var, rate: f64) -> Result<Var> {
        let Some(rng) = self.rng.as_mut() else {
            return Ok(x);
        };
        if rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - rate;
        let shape = self.tape.shape(x).to_vec();
        let per_sample = self.tape.value(x).numel() / shape[0].max(1);
        let flags: Vec<f64> = (0..shape[0])
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let mask = Tensor::from_fn(&shape, |i| flags[i / per_sample]);
        self.tape.mul_const(x, mask)
    }

    pub fn finish(self) -> SessionOutput {
        SessionOutput {
            tape: self.tape,
            bound: self.bound,
            buffer_updates: self.buffer_updates,
        }
    }
}

impl SessionOutput {
    /// Adds the tape's leaf gradients onto the store's trainable parameters.
    pub fn accumulate_grads(&self, store: &mut ParamStore) {
        for (&id, &v) in &self.bound {
            let p = store.get_mut(id);
            if p.role != ParamRole::Trainable {
                continue;
            }
            let Some(g) = self.tape.grad(v) else { continue };
            match &mut p.grad {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                None => p.grad = Some(g.to_vec()),
            }
        }
    }

    /// Writes recorded running-statistics updates into the store.
    pub fn apply_buffer_updates(&self, store: &mut ParamStore) -> Result<()> {
        for (id, data) in &self.buffer_updates {
            let shape = store.value(*id).shape().to_vec();
            store.set_value(*id, Tensor::new(&shape, data.clone())?)?;
        }
        Ok(())
    }

    /// Gradient bound to `id` in this pass, if any.
    pub fn grad(&self, id: ParamId) -> Option<&[f64]> {
        self.bound.get(&id).and_then(|&v| self.tape.grad(v))
    }
}

// ---------------------------------------------------------------------------
// Layers

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    /// `[din, dout]` weight with fan-in scaled normal init, zero bias.
    pub fn new(b: &mut Builder, name: &str, din: usize, dout: usize) -> Result<Self> {
        Self::with_init(b, name, din, dout, Init::FanIn { fan_in: din, gain: 1.0 }, true)
    }

    pub fn with_init(b: &mut Builder, name: &str, din: usize, dout: usize, init: Init, bias: bool) -> Result<Self> {
        let mut s = b.scope(name);
        let weight = s.param("weight", &[din, dout], init)?;
        let bias = if bias { Some(s.param("bias", &[dout], Init::Zeros)?) } else { None };
        Ok(Linear { weight, bias })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = s.opt_param(self.bias);
        s.tape.linear(x, w, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub weight: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

pub const LN_EPS: f64 = 1e-6;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

impl LayerNorm {
    pub fn new(b: &mut Builder, name: &str, d: usize) -> Result<Self> {
        let mut s = b.scope(name);
        Ok(LayerNorm {
            weight: s.param("weight", &[d], Init::Ones)?,
            bias: s.param("bias", &[d], Init::Zeros)?,
            eps: LN_EPS,
        })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let g = s.param(self.weight);
        let b = s.param(self.bias);
        s.tape.layer_norm(x, g, b, self.eps)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    /// Zeros before and after each spatial axis.
    pub pad: (usize, usize),
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(b: &mut Builder, name: &str, cin: usize, cout: usize, k: usize, stride: usize, pad: usize, init: Option<Init>) -> Result<Self> {
        let mut s = b.scope(name);
        let init = init.unwrap_or(Init::FanIn { fan_in: cin * k * k, gain: core::f64::consts::SQRT_2 });
        Ok(Conv2d {
            weight: s.param("weight", &[cout, cin, k, k], init)?,
            bias: Some(s.param("bias", &[cout], Init::Zeros)?),
            stride,
            pad: (pad, pad),
        })
    }

    /// Same as [`new`](Self::new) without a bias term, for layers feeding a norm.
    #[allow(clippy::too_many_arguments)]
    pub fn without_bias(b: &mut Builder, name: &str, cin: usize, cout: usize, k: usize, stride: usize, pad: usize, init: Option<Init>) -> Result<Self> {
        let mut s = b.scope(name);
        let init = init.unwrap_or(Init::FanIn { fan_in: cin * k * k, gain: core::f64::consts::SQRT_2 });
        Ok(Conv2d {
            weight: s.param("weight", &[cout, cin, k, k], init)?,
            bias: None,
            stride,
            pad: (pad, pad),
        })
    }

    pub fn with_padding(mut self, before: usize, after: usize) -> Self {
        self.pad = (before, after);
        self
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = s.opt_param(self.bias);
        s.tape.conv2d_padded(x, w, b, self.stride, self.pad)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm2d {
    pub fn new(b: &mut Builder, name: &str, c: usize) -> Result<Self> {
        let mut s = b.scope(name);
        Ok(BatchNorm2d {
            weight: s.param("weight", &[c], Init::Ones)?,
            bias: s.param("bias", &[c], Init::Zeros)?,
            running_mean: s.buffer("running_mean", Tensor::zeros(&[c]))?,
            running_var: s.buffer("running_var", Tensor::ones(&[c]))?,
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let g = s.param(self.weight);
        let b = s.param(self.bias);
        if s.training() {
            let (y, stats) = s.tape.batch_norm_train(x, g, b, self.eps)?;
            let m = self.momentum;
            let mean: Vec<f64> = s
                .buffer(self.running_mean)
                .data()
                .iter()
                .zip(&stats.mean)
                .map(|(r, v)| (1.0 - m) * r + m * v)
                .collect();
            let var: Vec<f64> = s
                .buffer(self.running_var)
                .data()
                .iter()
                .zip(&stats.var)
                .map(|(r, v)| (1.0 - m) * r + m * v)
                .collect();
            s.record_buffer(self.running_mean, mean);
            s.record_buffer(self.running_var, var);
            Ok(y)
        } else {
            let mean = s.buffer(self.running_mean).data().to_vec();
            let var = s.buffer(self.running_var).data().to_vec();
            s.tape.batch_norm_eval(x, g, b, &mean, &var, self.eps)
        }
    }
}

/// Two-layer perceptron `fc2(dropout(act(fc1(x))))`.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
    pub activation: Activation,
    pub dropout: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
}

impl Mlp {
    #[allow(clippy::too_many_arguments)]
    pub fn new(b: &mut Builder, name: &str, din: usize, hidden: usize, dout: usize, activation: Activation, dropout: f64, zero_out: bool) -> Result<Self> {
        let mut s = b.scope(name);
        let fc1 = Linear::new(&mut s, "fc1", din, hidden)?;
        let fc2 = if zero_out {
            Linear::with_init(&mut s, "fc2", hidden, dout, Init::Zeros, true)?
        } else {
            Linear::new(&mut s, "fc2", hidden, dout)?
        };
        Ok(Mlp { fc1, fc2, activation, dropout })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let h = self.fc1.forward(s, x)?;
        let h = match self.activation {
            Activation::Relu => s.tape.relu(h),
            Activation::Gelu => s.tape.gelu(h),
        };
        let h = s.dropout(h, self.dropout)?;
        self.fc2.forward(s, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::new();
        store.add("a", Tensor::zeros(&[1]), ParamRole::Frozen).unwrap();
        assert!(store.add("a", Tensor::zeros(&[1]), ParamRole::Frozen).is_err());
    }

    #[test]
    fn values_are_rounded_to_f32() {
        let mut store = ParamStore::new();
        let id = store.add("a", Tensor::full(&[1], 0.1), ParamRole::Trainable).unwrap();
        assert_eq!(store.value(id).data()[0], 0.1f32 as f64);
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut store = ParamStore::new();
        let mut rng = crate::seeded_rng(0);
        let (lin_f, lin_t) = {
            let mut b = Builder::new(&mut store, &mut rng, ParamRole::Frozen);
            let f = Linear::new(&mut b, "frozen", 3, 3).unwrap();
            let mut bt = b.with_role(ParamRole::Trainable);
            let t = Linear::new(&mut bt, "train", 3, 1).unwrap();
            (f, t)
        };
        let sentinel = store.clone();
        let mut s = Session::eval(&store);
        let x = s.tape.constant(Tensor::ones(&[2, 3]));
        let h = lin_f.forward(&mut s, x).unwrap();
        let y = lin_t.forward(&mut s, h).unwrap();
        let loss = s.tape.sum(y);
        s.tape.backward(loss).unwrap();
        let out = s.finish();
        out.accumulate_grads(&mut store);
        assert!(store.get(lin_f.weight).grad.is_none());
        assert!(store.get(lin_t.weight).grad.is_some());
        assert_eq!(store.value(lin_f.weight), sentinel.value(lin_f.weight));
    }

    #[test]
    fn dropout_and_drop_path_are_identity_in_eval() {
        let store = ParamStore::new();
        let mut s = Session::eval(&store);
        let x = s.tape.constant(Tensor::ones(&[4, 3]));
        assert_eq!(s.dropout(x, 0.4).unwrap(), x);
        assert_eq!(s.drop_path(x, 0.4).unwrap(), x);
    }

    #[test]
    fn drop_path_drops_whole_samples() {
        let store = ParamStore::new();
        let mut rng = crate::seeded_rng(9);
        let mut s = Session::train(&store, &mut rng);
        let x = s.tape.constant(Tensor::ones(&[64, 5]));
        let y = s.drop_path(x, 0.4).unwrap();
        for row in s.tape.value(y).data().chunks(5) {
            assert!(row.iter().all(|&v| v == row[0]));
            assert!(row[0] == 0.0 || (row[0] - 1.0 / 0.6).abs() < 1e-15);
        }
    }
}
