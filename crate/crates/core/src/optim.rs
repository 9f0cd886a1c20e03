//! Adam with weight decay.

use std::collections::BTreeMap;

use pyrad_tensor::{Element, Tensor};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightDecay {
    /// `g ← g + wd·θ` before the moment updates.
    L2,
    /// `θ ← θ − lr·wd·θ` applied separately from the adaptive step.
    Decoupled,
}

impl std::str::FromStr for WeightDecay {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l2" => Ok(Self::L2),
            "decoupled" => Ok(Self::Decoupled),
            _ => Err(Error::Config(format!("unknown weight decay mode `{s}` (expected l2 or decoupled)"))),
        }
    }
}

impl std::fmt::Display for WeightDecay {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::L2 => "l2",
            Self::Decoupled => "decoupled",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub decay: WeightDecay,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            decay: WeightDecay::L2,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad(format!("betas must lie in [0, 1), got ({}, {})", self.beta1, self.beta2));
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return bad(format!("eps must be positive, got {}", self.eps));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!("weight decay must be ≥ 0, got {}", self.weight_decay));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T: Element> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
}

/// Moment buffers keyed by parameter name, plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T: Element = f32> {
    pub step: u64,
    pub moments: BTreeMap<String, Moments<T>>,
}

impl<T: Element> Default for OptimizerState<T> {
    fn default() -> Self {
        Self {
            step: 0,
            moments: BTreeMap::new(),
        }
    }
}

pub const MOMENT_PREFIX_M: &str = "adam.m.";
pub const MOMENT_PREFIX_V: &str = "adam.v.";

impl OptimizerState<f32> {
    pub fn to_tensors(&self) -> Vec<(String, Tensor<f32>)> {
        let mut out = Vec::with_capacity(2 * self.moments.len());
        for (name, mv) in &self.moments {
            out.push((format!("{MOMENT_PREFIX_M}{name}"), mv.m.clone()));
            out.push((format!("{MOMENT_PREFIX_V}{name}"), mv.v.clone()));
        }
        out
    }

    /// Collect `adam.m.*` / `adam.v.*` entries; each first moment needs its
    /// matching second moment.
    pub fn from_tensors(step: u64, tensors: &[(String, Tensor<f32>)]) -> Result<Self> {
        let mut moments = BTreeMap::new();
        for (name, m) in tensors {
            let Some(param) = name.strip_prefix(MOMENT_PREFIX_M) else { continue };
            let key = format!("{MOMENT_PREFIX_V}{param}");
            let v = tensors
                .iter()
                .find(|(n, _)| *n == key)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| Error::Load(format!("`{name}` has no matching `{key}`")))?;
            if v.shape() != m.shape() {
                return Err(Error::Load(format!("moment shapes differ for `{param}`")));
            }
            moments.insert(param.to_string(), Moments { m: m.clone(), v });
        }
        Ok(Self { step, moments })
    }
}

/// One Adam update of every parameter that has a gradient. Gradients are
/// checked for NaN/Inf before anything is modified.
pub fn adam_step<T: Element>(
    store: &mut ParamStore<T>,
    grads: &[(ParamId, Tensor<T>)],
    state: &mut OptimizerState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    for (id, g) in grads {
        let name = store.name(*id);
        if !store.is_trainable(*id) {
            return Err(Error::Frozen(name.to_string()));
        }
        if g.shape() != store.get(*id).shape() {
            return Err(Error::Config(format!(
                "gradient for `{name}` has shape {:?}, parameter {:?}",
                g.shape(),
                store.get(*id).shape()
            )));
        }
        let bad = g.data().iter().filter(|v| !v.is_finite()).count();
        if bad > 0 {
            return Err(Error::Numeric(format!(
                "{bad} non-finite gradient values for `{name}` at step {}",
                state.step + 1
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let (c1, c2) = (T::one() - b1, T::one() - b2);
    let bc1 = T::lit(1.0 - cfg.beta1.powi(t));
    let bc2 = T::lit(1.0 - cfg.beta2.powi(t));
    let (lr, eps, wd) = (T::lit(cfg.lr), T::lit(cfg.eps), T::lit(cfg.weight_decay));
    for (id, g) in grads {
        let name = store.name(*id).to_string();
        let mv = state.moments.entry(name).or_insert_with(|| Moments {
            m: Tensor::zeros(g.shape().to_vec()),
            v: Tensor::zeros(g.shape().to_vec()),
        });
        let (m, v) = (mv.m.data_mut(), mv.v.data_mut());
        let theta = store.data_mut(*id)?;
        for i in 0..theta.len() {
            let mut gi = g.data()[i];
            match cfg.decay {
                WeightDecay::L2 => gi = gi + wd * theta[i],
                WeightDecay::Decoupled => theta[i] = theta[i] - lr * wd * theta[i],
            }
            m[i] = b1 * m[i] + c1 * gi;
            v[i] = b2 * v[i] + c2 * gi * gi;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            theta[i] = theta[i] - lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}
