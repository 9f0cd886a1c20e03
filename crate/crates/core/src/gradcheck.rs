//! Finite-difference check of the whole model plus the training objective.

use pyrad_tensor::{Graph, Tensor};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::Result;
use crate::layers::Mode;
use crate::loss::{total_loss, PerceptualNet};
use crate::model::{build_model, Model};
use crate::params::ParamRole;

#[derive(Clone, Debug, PartialEq)]
pub struct CompositeCheck {
    pub mode: Mode,
    /// Trainable tensors probed.
    pub params: usize,
    /// Individual entries probed.
    pub entries: usize,
    pub max_rel_err: f64,
    pub worst_param: String,
    /// Trainable tensors whose analytic gradient is exactly zero.
    pub zero_grad_params: Vec<String>,
    pub per_param: Vec<(String, f64)>,
}

#[derive(Clone, Debug)]
pub struct CompositeSetup {
    pub config: ModelConfig,
    pub batch: usize,
    pub perceptual_channels: Vec<usize>,
    pub lambda: f64,
    /// Central-difference step. A bias perturbation shifts every spatial
    /// position of a channel at once, so with steps of 1e-4 and up some
    /// ReLU inputs cross zero.
    pub step: f64,
    /// Entries sampled per trainable tensor.
    pub per_param: usize,
    /// Half-width of uniform noise added to every trainable bias. At
    /// initialization all biases are zero and the running statistics are
    /// (0, 1), so a branch whose pooled features are all clipped by ReLU
    /// carries exact zeros through every later layer and each of its
    /// pre-activations sits exactly on a kink.
    pub bias_jitter: f64,
}

/// Denominator floor as a fraction of the largest numeric gradient seen.
/// A conv bias feeding a train-mode batch norm has an exactly zero
/// gradient; without the floor its error is noise divided by noise.
pub const SCALE_FLOOR: f64 = 1e-4;

impl Default for CompositeSetup {
    /// 2×3×16×16 batch through the miniature network (D = 32, mf = 1)
    /// with λ = 1.
    fn default() -> Self {
        Self {
            config: ModelConfig::miniature(16).expect("valid preset"),
            batch: 2,
            perceptual_channels: vec![3, 4, 4],
            lambda: 1.0,
            step: 1e-6,
            per_param: 4,
            bias_jitter: 0.1,
        }
    }
}

fn loss_value(model: &mut Model<f64>, net: &PerceptualNet<f64>, x: &Tensor<f64>, lambda: f64, mode: Mode) -> Result<f64> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let xh = model.forward(&mut g, xv, mode)?;
    let t = total_loss(&mut g, xv, xh, lambda, net)?;
    Ok(g.value(t.total).item()?)
}

/// Compare backward against central differences for sampled entries of
/// every trainable tensor, in f64.
pub fn check_model_gradients(setup: &CompositeSetup, seed: u64, mode: Mode) -> Result<CompositeCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model: Model<f64> = build_model(&setup.config, seed, None)?;
    let biases: Vec<_> = model.store().trainable_ids().filter(|&id| model.store().role(id) == ParamRole::Bias).collect();
    for id in biases {
        for v in model.store_mut().data_mut(id)? {
            *v += rng.random_range(-setup.bias_jitter..=setup.bias_jitter);
        }
    }
    let net = PerceptualNet::<f64>::new(&setup.perceptual_channels, seed ^ 0x5eed)?;
    let (h, w) = setup.config.input_size;
    let x = Tensor::from_fn([setup.batch, 3, h, w], |_| rng.random::<f64>());

    let mut m = model.clone();
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let xh = m.forward(&mut g, xv, mode)?;
    let t = total_loss(&mut g, xv, xh, setup.lambda, &net)?;
    g.backward(t.total)?;
    let store = model.store();
    let mut analytic: Vec<Option<Tensor<f64>>> = vec![None; store.len()];
    for (key, grad) in g.param_grads() {
        if let Some(id) = store.id_for_key(key) {
            analytic[id.index()] = Some(grad.clone());
        }
    }

    let mut report = CompositeCheck {
        mode,
        params: 0,
        entries: 0,
        max_rel_err: 0.0,
        worst_param: String::new(),
        zero_grad_params: Vec::new(),
        per_param: Vec::new(),
    };
    let mut probes = Vec::new();
    for id in store.trainable_ids() {
        let grad = analytic[id.index()].clone().unwrap_or_else(|| Tensor::zeros(store.get(id).shape().to_vec()));
        if grad.data().iter().all(|&v| v == 0.0) {
            report.zero_grad_params.push(store.name(id).to_string());
        }
        let numel = grad.numel();
        let mut pairs = Vec::new();
        for i in sample(&mut rng, numel, setup.per_param.min(numel)).into_vec() {
            let probe = |delta: f64| -> Result<f64> {
                let mut pm = model.clone();
                pm.store_mut().data_mut(id)?[i] += delta;
                loss_value(&mut pm, &net, &x, setup.lambda, mode)
            };
            let (up, down) = (probe(setup.step)?, probe(-setup.step)?);
            pairs.push((grad.data()[i], (up - down) / (2.0 * setup.step)));
        }
        probes.push((store.name(id).to_string(), pairs));
    }

    let scale = probes.iter().flat_map(|(_, p)| p.iter()).fold(0.0f64, |m, &(_, n)| m.max(n.abs()));
    let floor = (SCALE_FLOOR * scale).max(f64::MIN_POSITIVE);
    for (name, pairs) in probes {
        let err = pairs.iter().map(|&(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor)).fold(0.0, f64::max);
        report.params += 1;
        report.entries += pairs.len();
        if err > report.max_rel_err || report.worst_param.is_empty() {
            report.max_rel_err = err;
            report.worst_param = name.clone();
        }
        report.per_param.push((name, err));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn composite_agrees_in_both_modes() {
        let setup = CompositeSetup::default();
        for mode in [Mode::Eval, Mode::Train] {
            let r = check_model_gradients(&setup, 3, mode).unwrap();
            assert!(r.max_rel_err <= 1e-3, "{mode:?} {:#?}", r.per_param);
            assert_eq!(r.params, 72);
            // the last bias has three channels
            assert_eq!(r.entries, 4 * 72 - 1);
        }
        let r = check_model_gradients(&setup, 3, Mode::Eval).unwrap();
        assert!(r.zero_grad_params.is_empty(), "{r:?}");
    }
}
