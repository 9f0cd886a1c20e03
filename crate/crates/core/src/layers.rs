//! Parameterized layers. Each layer holds only [`ParamId`]s; values live
//! in a [`ParamStore`].

use pyrad_tensor::{Activation, Element, Graph, Tensor, Var};

use crate::error::Result;
use crate::init::{derive_seed, orthogonal_init};
use crate::params::{ParamId, ParamRole, ParamStore};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Running statistics; the forward pass is a pure function.
    Eval,
}

/// Shared construction context: parameter names get `prefix.` and every
/// weight is orthogonally initialized from a name-derived seed.
pub struct Builder<'a, T: Element> {
    pub store: &'a mut ParamStore<T>,
    pub seed: u64,
    pub trainable: bool,
}

impl<T: Element> Builder<'_, T> {
    fn weight(&mut self, name: String, shape: &[usize]) -> Result<ParamId> {
        let w = orthogonal_init(shape, derive_seed(self.seed, &name))?;
        self.store.add(name, w, self.trainable, ParamRole::Weight)
    }

    fn filled(&mut self, name: String, len: usize, v: f64, role: ParamRole) -> Result<ParamId> {
        self.store.add(name, Tensor::full([len], T::lit(v)), self.trainable, role)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, pad: usize, bias: bool) -> Result<Conv2d> {
        Ok(Conv2d {
            weight: self.weight(format!("{name}.weight"), &[cout, cin, k, k])?,
            bias: if bias { Some(self.filled(format!("{name}.bias"), cout, 0.0, ParamRole::Bias)?) } else { None },
            stride,
            pad,
        })
    }

    pub fn conv_transpose(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> Result<ConvTranspose2d> {
        // Stored InC×OutC×k×k; orthogonalized over the OutC·k² fan.
        Ok(ConvTranspose2d {
            weight: self.weight(format!("{name}.weight"), &[cin, cout, k, k])?,
            bias: self.filled(format!("{name}.bias"), cout, 0.0, ParamRole::Bias)?,
            stride,
            pad,
        })
    }

    pub fn linear(&mut self, name: &str, fin: usize, fout: usize) -> Result<Linear> {
        Ok(Linear {
            weight: self.weight(format!("{name}.weight"), &[fout, fin])?,
            bias: self.filled(format!("{name}.bias"), fout, 0.0, ParamRole::Bias)?,
        })
    }

    pub fn batch_norm(&mut self, name: &str, c: usize) -> Result<BatchNorm> {
        Ok(BatchNorm {
            gamma: self.filled(format!("{name}.weight"), c, 1.0, ParamRole::Scale)?,
            beta: self.filled(format!("{name}.bias"), c, 0.0, ParamRole::Bias)?,
            running_mean: self.filled(format!("{name}.running_mean"), c, 0.0, ParamRole::Buffer)?,
            running_var: self.filled(format!("{name}.running_var"), c, 1.0, ParamRole::Buffer)?,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn forward<T: Element>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = store.bind(g, self.weight);
        let b = self.bias.map(|b| store.bind(g, b));
        Ok(g.conv2d(x, w, b, self.stride, self.pad)?)
    }

    pub fn out_channels<T: Element>(&self, store: &ParamStore<T>) -> usize {
        store.get(self.weight).shape()[0]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose2d {
    pub fn forward<T: Element>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = store.bind(g, self.weight);
        let b = store.bind(g, self.bias);
        Ok(g.conv_transpose2d(x, w, Some(b), self.stride, self.pad)?)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn forward<T: Element>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = store.bind(g, self.weight);
        let b = store.bind(g, self.bias);
        Ok(g.linear(x, w, Some(b))?)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    /// In [`Mode::Train`] the running statistics are updated with momentum
    /// 0.1 using the unbiased batch variance.
    pub fn forward<T: Element>(&self, g: &mut Graph<T>, store: &mut ParamStore<T>, x: Var, mode: Mode) -> Result<Var> {
        let gamma = store.bind(g, self.gamma);
        let beta = store.bind(g, self.beta);
        match mode {
            Mode::Eval => Ok(g.batch_norm_eval(
                x,
                gamma,
                beta,
                store.get(self.running_mean),
                store.get(self.running_var),
                T::lit(BN_EPS),
            )?),
            Mode::Train => {
                let (y, stats) = g.batch_norm_train(x, gamma, beta, T::lit(BN_EPS))?;
                let m = T::lit(BN_MOMENTUM);
                let keep = T::one() - m;
                let unbias = T::lit(stats.count as f64 / (stats.count as f64 - 1.0));
                let mut rm = store.get(self.running_mean).clone();
                for (r, &b) in rm.data_mut().iter_mut().zip(&stats.mean) {
                    *r = keep * *r + m * b;
                }
                let mut rv = store.get(self.running_var).clone();
                for (r, &b) in rv.data_mut().iter_mut().zip(&stats.var) {
                    *r = keep * *r + m * b * unbias;
                }
                store.set_buffer(self.running_mean, rm)?;
                store.set_buffer(self.running_var, rv)?;
                Ok(y)
            }
        }
    }
}

/// Convenience: `act(bn(x))`.
pub fn bn_act<T: Element>(
    g: &mut Graph<T>,
    store: &mut ParamStore<T>,
    bn: &BatchNorm,
    x: Var,
    mode: Mode,
    act: Activation,
) -> Result<Var> {
    let y = bn.forward(g, store, x, mode)?;
    Ok(g.activation(y, act))
}
