//! Parameterized layers on top of the tape.

use std::collections::HashMap;

use rand::Rng;

use crate::autodiff::{ParamId, ParamStore, Tape, TrainingError, Var};
use crate::scalar::Scalar;

/// Weight initialization scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// He-uniform, for layers followed by a ReLU.
    Relu,
    /// Uniform ±sqrt(3 / fan_in) times a gain.
    Gain(f64),
}

impl Init {
    fn bound(self, fan_in: usize) -> f64 {
        let gain = match self {
            Init::Relu => 2f64.sqrt(),
            Init::Gain(g) => g,
        };
        gain * (3.0 / fan_in as f64).sqrt()
    }
}

/// Binds store parameters onto a tape, once per parameter per tape.
///
/// Parameters whose names start with a frozen prefix enter the tape as
/// constants and receive no gradient.
pub struct Bind<'a, T: Scalar> {
    store: &'a ParamStore<T>,
    vars: HashMap<ParamId, Var>,
    frozen: Vec<String>,
}

impl<'a, T: Scalar> Bind<'a, T> {
    pub fn new(store: &'a ParamStore<T>) -> Self {
        Self { store, vars: HashMap::new(), frozen: Vec::new() }
    }

    pub fn freezing(mut self, prefix: &str) -> Self {
        self.frozen.push(prefix.to_string());
        self
    }

    /// Uses an existing tape variable for a parameter instead of copying it from the store.
    pub fn preset(mut self, id: ParamId, var: Var) -> Self {
        self.vars.insert(id, var);
        self
    }

    pub fn store(&self) -> &'a ParamStore<T> {
        self.store
    }

    pub fn get(&mut self, t: &mut Tape<T>, id: ParamId) -> Var {
        if let Some(&v) = self.vars.get(&id) {
            return v;
        }
        let name = self.store.name(id);
        let v = if self.frozen.iter().any(|p| name.starts_with(p.as_str())) {
            t.frozen_param(self.store, id)
        } else {
            t.param(self.store, id)
        };
        self.vars.insert(id, v);
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Dense {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        inputs: usize,
        outputs: usize,
        init: Init,
        rng: &mut impl Rng,
    ) -> Result<Self, TrainingError> {
        let w = store.uniform(&format!("{name}.w"), &[inputs, outputs], init.bound(inputs), rng)?;
        let b = store.zeros(&format!("{name}.b"), &[outputs])?;
        Ok(Self { w, b, inputs, outputs })
    }

    pub fn forward<T: Scalar>(&self, t: &mut Tape<T>, p: &mut Bind<T>, x: Var) -> Var {
        let (w, b) = (p.get(t, self.w), p.get(t, self.b));
        t.dense(x, w, Some(b))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Conv {
    pub k: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        init: Init,
        rng: &mut impl Rng,
    ) -> Result<Self, TrainingError> {
        let fan_in = in_channels * kernel * kernel;
        let k = store.uniform(&format!("{name}.k"), &[out_channels, in_channels, kernel, kernel], init.bound(fan_in), rng)?;
        let b = store.zeros(&format!("{name}.b"), &[out_channels])?;
        Ok(Self { k, b, stride, pad: kernel / 2, in_channels, out_channels })
    }

    pub fn forward<T: Scalar>(&self, t: &mut Tape<T>, p: &mut Bind<T>, x: Var) -> Var {
        let (k, b) = (p.get(t, self.k), p.get(t, self.b));
        t.conv2d(x, k, Some(b), self.stride, self.pad)
    }
}

/// Gated recurrent unit with PyTorch gate layout (reset, update, candidate).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gru {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b_ih: ParamId,
    pub b_hh: ParamId,
    pub hidden: usize,
}

impl Gru {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        inputs: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, TrainingError> {
        let bound = 1.0 / (hidden as f64).sqrt();
        let w_ih = store.uniform(&format!("{name}.w_ih"), &[inputs, 3 * hidden], bound, rng)?;
        let w_hh = store.uniform(&format!("{name}.w_hh"), &[hidden, 3 * hidden], bound, rng)?;
        let b_ih = store.zeros(&format!("{name}.b_ih"), &[3 * hidden])?;
        let b_hh = store.zeros(&format!("{name}.b_hh"), &[3 * hidden])?;
        Ok(Self { w_ih, w_hh, b_ih, b_hh, hidden })
    }

    pub fn forward<T: Scalar>(&self, t: &mut Tape<T>, p: &mut Bind<T>, x: Var, h: Var) -> Var {
        let (a, b, c, d) = (p.get(t, self.w_ih), p.get(t, self.w_hh), p.get(t, self.b_ih), p.get(t, self.b_hh));
        t.gru_cell(x, h, a, b, c, d)
    }
}
