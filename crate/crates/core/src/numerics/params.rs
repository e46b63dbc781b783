use super::{Dense, Gradients, Tape, Var};
use crate::error::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Named trainable tensors in a fixed order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Dense)>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a tensor and returns its slot.
    pub fn push(&mut self, name: impl Into<String>, value: Dense) -> usize {
        self.entries.push((name.into(), value));
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, slot: usize) -> &Dense {
        &self.entries[slot].1
    }

    pub fn get_mut(&mut self, slot: usize) -> &mut Dense {
        &mut self.entries[slot].1
    }

    pub fn entries(&self) -> &[(String, Dense)] {
        &self.entries
    }

    /// Replaces every tensor by the entry of the same name and shape in `named`.
    pub fn load_named(&mut self, named: &[(String, Dense)]) -> Result<()> {
        for (name, value) in &mut self.entries {
            let (_, src) = named
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| Error::MissingTensor(name.clone()))?;
            if src.dims() != value.dims() {
                return Err(Error::shape(
                    "load_named",
                    format!("{name}: expected {:?}, got {:?}", value.dims(), src.dims()),
                ));
            }
            *value = src.clone();
        }
        Ok(())
    }

    /// Records every tensor as a parameter leaf on `tape`.
    pub fn register(&self, tape: &mut Tape) -> Result<Vec<Var>> {
        self.entries
            .iter()
            .map(|(_, v)| tape.param(v.clone()))
            .collect()
    }

    /// Gradient per slot; zero for parameters the loss does not reach.
    pub fn collect_grads(&self, vars: &[Var], grads: &Gradients) -> Vec<Dense> {
        self.entries
            .iter()
            .zip(vars)
            .map(|((_, v), &var)| {
                grads
                    .get(var)
                    .cloned()
                    .unwrap_or_else(|| Dense::zeros(v.dims()))
            })
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|(_, v)| v.is_finite())
    }
}

/// Uniform Glorot initialisation for a `fan_in × fan_out` weight.
pub fn glorot<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Dense {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-limit..limit))
        .collect();
    Dense::new(vec![fan_in, fan_out], data).expect("glorot dims")
}

/// Gradient descent with an optional heavy-ball term.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub step: f64,
    pub momentum: f64,
    velocity: Vec<Dense>,
}

impl Sgd {
    pub fn new(step: f64, momentum: f64) -> Self {
        Sgd {
            step,
            momentum,
            velocity: Vec::new(),
        }
    }

    pub fn apply(&mut self, params: &mut ParamStore, grads: &[Dense]) {
        if self.velocity.len() != params.len() {
            self.velocity = params
                .entries
                .iter()
                .map(|(_, v)| Dense::zeros(v.dims()))
                .collect();
        }
        for ((slot, g), vel) in grads.iter().enumerate().zip(&mut self.velocity) {
            if self.momentum > 0.0 {
                for (v, &d) in vel.data_mut().iter_mut().zip(g.data()) {
                    *v = self.momentum * *v + d;
                }
                params.get_mut(slot).axpy(-self.step, vel);
            } else {
                params.get_mut(slot).axpy(-self.step, g);
            }
        }
    }
}

/// Adam with bias-corrected first and second moment estimates.
#[derive(Clone, Debug)]
pub struct Adam {
    pub step: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Dense>,
    v: Vec<Dense>,
}

impl Adam {
    pub fn new(step: f64) -> Self {
        Adam {
            step,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn apply(&mut self, params: &mut ParamStore, grads: &[Dense]) {
        if self.m.len() != params.len() {
            self.m = params
                .entries
                .iter()
                .map(|(_, v)| Dense::zeros(v.dims()))
                .collect();
            self.v = self.m.clone();
            self.t = 0;
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (slot, g) in grads.iter().enumerate() {
            let (m, v) = (self.m[slot].data_mut(), self.v[slot].data_mut());
            let p = params.get_mut(slot).data_mut();
            for i in 0..g.len() {
                let d = g.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * d;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * d * d;
                p[i] -= self.step * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Update rule and its hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum OptimizerConfig {
    Sgd { step: f64, momentum: f64 },
    Adam { step: f64 },
}

impl OptimizerConfig {
    pub fn build(&self) -> Optimizer {
        match *self {
            OptimizerConfig::Sgd { step, momentum } => Optimizer::Sgd(Sgd::new(step, momentum)),
            OptimizerConfig::Adam { step } => Optimizer::Adam(Adam::new(step)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            OptimizerConfig::Sgd { step, momentum } => step > 0.0 && (0.0..1.0).contains(&momentum),
            OptimizerConfig::Adam { step } => step > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "invalid optimiser settings {self:?}"
            )))
        }
    }
}

#[derive(Clone, Debug)]
pub enum Optimizer {
    Sgd(Sgd),
    Adam(Adam),
}

impl Optimizer {
    pub fn apply(&mut self, params: &mut ParamStore, grads: &[Dense]) {
        match self {
            Optimizer::Sgd(o) => o.apply(params, grads),
            Optimizer::Adam(o) => o.apply(params, grads),
        }
    }
}
