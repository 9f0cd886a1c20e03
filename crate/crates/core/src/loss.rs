//! Training objective and anomaly scoring: pixel MSE plus λ times the MSE
//! between frozen-network features of the input and the reconstruction.

use std::path::PathBuf;

use pyrad_tensor::{kernels, Activation, Element, Graph, Tensor, Var};

use crate::data::Label;
use crate::error::{Error, Result};
use crate::layers::{Builder, Conv2d, Mode};
use crate::model::Model;
use crate::params::ParamStore;

pub const PERCEPTUAL_NAMESPACE: u32 = 1;
pub const PERCEPTUAL_PREFIX: &str = "perceptual.";
pub const DEFAULT_PERCEPTUAL_CHANNELS: [usize; 5] = [3, 64, 128, 256, 256];

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    /// Weight of the perceptual term; 0 removes it from the graph.
    pub lambda: f64,
    /// Channel widths of the feature network, starting with 3.
    pub perceptual_channels: Vec<usize>,
    pub perceptual_seed: u64,
    /// Checkpoint holding `perceptual.conv{i}.{weight,bias}` entries.
    pub perceptual_weights: Option<PathBuf>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            perceptual_channels: DEFAULT_PERCEPTUAL_CHANNELS.to_vec(),
            perceptual_seed: 0,
            perceptual_weights: None,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::Config(format!("loss.lambda must be finite and ≥ 0, got {}", self.lambda)));
        }
        if self.perceptual_channels.first() != Some(&3) || self.perceptual_channels.contains(&0) {
            return Err(Error::Config(format!(
                "perceptual channels must start with 3 and be positive, got {:?}",
                self.perceptual_channels
            )));
        }
        Ok(())
    }

    /// The frozen feature network described by this config.
    pub fn perceptual_net<T: Element>(&self) -> Result<PerceptualNet<T>> {
        self.validate()?;
        let mut net = PerceptualNet::new(&self.perceptual_channels, self.perceptual_seed)?;
        if let Some(path) = &self.perceptual_weights {
            let ckpt = crate::checkpoint::read(path)?;
            net.load_weights(&ckpt.tensors)?;
        }
        Ok(net)
    }
}

/// Frozen stack of 3×3 conv + ReLU layers without normalization. With no
/// layers it is the identity map.
#[derive(Clone, Debug)]
pub struct PerceptualNet<T: Element = f32> {
    store: ParamStore<T>,
    convs: Vec<Conv2d>,
}

impl<T: Element> PerceptualNet<T> {
    pub fn new(channels: &[usize], seed: u64) -> Result<Self> {
        let mut store = ParamStore::new(PERCEPTUAL_NAMESPACE);
        let mut b = Builder { store: &mut store, seed, trainable: false };
        let convs = channels
            .windows(2)
            .enumerate()
            .map(|(i, c)| b.conv(&format!("perceptual.conv{i}"), c[0], c[1], 3, 1, 1, true))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { store, convs })
    }

    pub fn identity() -> Self {
        Self {
            store: ParamStore::new(PERCEPTUAL_NAMESPACE),
            convs: Vec::new(),
        }
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    /// Load `perceptual.conv{i}.*` weights (prefix optional).
    pub fn load_weights(&mut self, tensors: &[(String, Tensor<f32>)]) -> Result<()> {
        self.store.load_named(PERCEPTUAL_PREFIX, tensors)
    }

    pub fn features(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let mut y = x;
        for c in &self.convs {
            y = c.forward(g, &self.store, y)?;
            y = g.activation(y, Activation::Relu);
        }
        Ok(y)
    }

    pub fn cast<U: Element>(&self) -> PerceptualNet<U> {
        PerceptualNet {
            store: self.store.cast(),
            convs: self.convs.clone(),
        }
    }
}

/// Mean of squared pixel differences over every element of the batch.
pub fn reconstruction_loss<T: Element>(g: &mut Graph<T>, x: Var, x_hat: Var) -> Result<Var> {
    Ok(g.mse(x_hat, x)?)
}

/// Mean of squared differences between feature maps of `x` and `x_hat`,
/// normalized by the final map's size.
pub fn perceptual_loss<T: Element>(g: &mut Graph<T>, x: Var, x_hat: Var, net: &PerceptualNet<T>) -> Result<Var> {
    let fx = net.features(g, x)?;
    let fxh = net.features(g, x_hat)?;
    Ok(g.mse(fxh, fx)?)
}

#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub reconstruction: Var,
    /// Absent when λ = 0.
    pub perceptual: Option<Var>,
}

/// `reconstruction + λ·perceptual`. With λ = 0 the total is the
/// reconstruction node itself.
pub fn total_loss<T: Element>(g: &mut Graph<T>, x: Var, x_hat: Var, lambda: f64, net: &PerceptualNet<T>) -> Result<LossTerms> {
    let reconstruction = reconstruction_loss(g, x, x_hat)?;
    if lambda == 0.0 {
        return Ok(LossTerms {
            total: reconstruction,
            reconstruction,
            perceptual: None,
        });
    }
    let p = perceptual_loss(g, x, x_hat, net)?;
    let weighted = g.scale(p, T::lit(lambda));
    let total = g.add(reconstruction, weighted)?;
    if !g.value(total).all_finite() {
        return Err(Error::Numeric("total loss is not finite".into()));
    }
    Ok(LossTerms {
        total,
        reconstruction,
        perceptual: Some(p),
    })
}

/// One image's anomaly score and ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredSample {
    pub id: String,
    pub score: f32,
    pub label: Label,
}

/// Per-sample scores and the reconstructions they came from.
#[derive(Clone, Debug)]
pub struct BatchScores<T: Element> {
    pub scores: Vec<T>,
    pub reconstruction: Tensor<T>,
}

/// Score every sample of an N×3×H×W batch with the training objective,
/// evaluated per sample with the model in eval mode.
pub fn score_batch<T: Element>(model: &mut Model<T>, net: &PerceptualNet<T>, lambda: f64, batch: &Tensor<T>) -> Result<BatchScores<T>> {
    let mut g = Graph::new();
    let x = g.constant(batch.clone());
    let xh = model.forward(&mut g, x, Mode::Eval)?;
    let feats = if lambda == 0.0 {
        None
    } else {
        let fx = net.features(&mut g, x)?;
        let fxh = net.features(&mut g, xh)?;
        Some((g.value(fx).clone(), g.value(fxh).clone()))
    };
    let recon = g.value(xh).clone();
    let n = batch.shape()[0];
    let mut scores = Vec::with_capacity(n);
    for i in 0..n {
        let mut s = kernels::mse(&recon.sample(i)?, &batch.sample(i)?)?;
        if let Some((fx, fxh)) = &feats {
            let p = kernels::mse(&fxh.sample(i)?, &fx.sample(i)?)?;
            s = s + p * T::lit(lambda);
        }
        if !s.is_finite() {
            return Err(Error::Numeric(format!("anomaly score of sample {i} is not finite")));
        }
        scores.push(s);
    }
    Ok(BatchScores {
        scores,
        reconstruction: recon,
    })
}

/// Score a single 3×H×W image.
pub fn anomaly_score<T: Element>(model: &mut Model<T>, net: &PerceptualNet<T>, lambda: f64, image: &Tensor<T>) -> Result<T> {
    let mut shape = vec![1];
    shape.extend_from_slice(image.shape());
    let batch = image.reshape(shape)?;
    Ok(score_batch(model, net, lambda, &batch)?.scores[0])
}

/// Anomalous iff the score is strictly above the threshold.
pub fn classify(scores: &[ScoredSample], threshold: f32) -> Vec<Label> {
    scores
        .iter()
        .map(|s| if s.score > threshold { Label::Anomalous } else { Label::Normal })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::model::build_model;
    use rand::{Rng, SeedableRng};

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape.to_vec(), |_| rng.random::<f64>())
    }

    fn small_net() -> PerceptualNet<f64> {
        PerceptualNet::new(&[3, 4, 4], 1).unwrap()
    }

    #[test]
    fn single_pixel_reconstruction() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full([1, 1, 1, 1], 0.5));
        let xh = g.constant(Tensor::zeros([1, 1, 1, 1]));
        let l = reconstruction_loss(&mut g, x, xh).unwrap();
        assert_eq!(g.value(l).item().unwrap(), 0.25);
    }

    #[test]
    fn reconstruction_matches_naive_sum() {
        let (a, b) = (rand_tensor(&[2, 3, 5, 4], 1), rand_tensor(&[2, 3, 5, 4], 2));
        let mut g = Graph::new();
        let (x, xh) = (g.constant(a.clone()), g.constant(b.clone()));
        let l = reconstruction_loss(&mut g, x, xh).unwrap();
        let mut sum = 0.0;
        for i in 0..a.numel() {
            sum += (a.data()[i] - b.data()[i]).powi(2);
        }
        assert!((g.value(l).item().unwrap() - sum / a.numel() as f64).abs() < 1e-12);
    }

    #[test]
    fn identity_net_reduces_to_reconstruction() {
        let (a, b) = (rand_tensor(&[1, 3, 4, 4], 3), rand_tensor(&[1, 3, 4, 4], 4));
        let mut g = Graph::new();
        let (x, xh) = (g.constant(a), g.constant(b));
        let r = reconstruction_loss(&mut g, x, xh).unwrap();
        let p = perceptual_loss(&mut g, x, xh, &PerceptualNet::identity()).unwrap();
        assert_eq!(g.value(r).item().unwrap(), g.value(p).item().unwrap());
    }

    #[test]
    fn zero_lambda_is_bit_exact_reconstruction() {
        let (a, b) = (rand_tensor(&[2, 3, 4, 4], 5), rand_tensor(&[2, 3, 4, 4], 6));
        let mut g = Graph::new();
        let (x, xh) = (g.constant(a), g.constant(b));
        let t = total_loss(&mut g, x, xh, 0.0, &small_net()).unwrap();
        assert!(t.perceptual.is_none());
        let r = reconstruction_loss(&mut g, x, xh).unwrap();
        assert_eq!(g.value(t.total).item().unwrap().to_bits(), g.value(r).item().unwrap().to_bits());
    }

    #[test]
    fn total_is_linear_in_lambda() {
        let (a, b) = (rand_tensor(&[1, 3, 4, 4], 7), rand_tensor(&[1, 3, 4, 4], 8));
        let net = small_net();
        let mut prev = f64::NEG_INFINITY;
        for lambda in [0.5, 1.0, 2.0] {
            let mut g = Graph::new();
            let (x, xh) = (g.constant(a.clone()), g.constant(b.clone()));
            let t = total_loss(&mut g, x, xh, lambda, &net).unwrap();
            let (r, p) = (g.value(t.reconstruction).item().unwrap(), g.value(t.perceptual.unwrap()).item().unwrap());
            let total = g.value(t.total).item().unwrap();
            assert!((total - (r + lambda * p)).abs() < 1e-12);
            assert!(p > 0.0 && total > prev);
            prev = total;
        }
    }

    #[test]
    fn identical_images_score_zero() {
        let a = rand_tensor(&[1, 3, 4, 4], 9);
        let mut g = Graph::new();
        let (x, xh) = (g.constant(a.clone()), g.constant(a));
        let t = total_loss(&mut g, x, xh, 1.0, &small_net()).unwrap();
        assert_eq!(g.value(t.total).item().unwrap(), 0.0);
    }

    #[test]
    fn perceptual_net_gets_no_gradient() {
        let (a, b) = (rand_tensor(&[1, 3, 4, 4], 10), rand_tensor(&[1, 3, 4, 4], 11));
        let net = small_net();
        let mut g = Graph::new();
        let x = g.constant(a);
        let xh = g.leaf(b, true);
        let t = total_loss(&mut g, x, xh, 1.0, &net).unwrap();
        g.backward(t.total).unwrap();
        assert!(g.grad(xh).is_some());
        let keys: Vec<usize> = g.param_grads().map(|(k, _)| k).collect();
        assert!(keys.iter().all(|&k| net.store().id_for_key(k).is_none()), "{keys:?}");
    }

    #[test]
    fn per_sample_score_matches_single_image_loss() {
        let cfg = ModelConfig::miniature(16).unwrap();
        let mut model = build_model::<f64>(&cfg, 3, None).unwrap();
        let net = small_net();
        let batch = rand_tensor(&[3, 3, 16, 16], 12);
        let scores = score_batch(&mut model, &net, 1.0, &batch).unwrap().scores;
        for (i, &s) in scores.iter().enumerate() {
            let xi = batch.sample(i).unwrap();
            let mut g = Graph::new();
            let x = g.constant(xi.clone());
            let xh = model.forward(&mut g, x, Mode::Eval).unwrap();
            let t = total_loss(&mut g, x, xh, 1.0, &net).unwrap();
            assert!((g.value(t.total).item().unwrap() - s).abs() < 1e-12);
            let again = anomaly_score(&mut model, &net, 1.0, &xi.reshape([3, 16, 16]).unwrap()).unwrap();
            assert_eq!(again, s);
            assert!(s >= 0.0);
        }
    }

    #[test]
    fn classify_ties_are_normal() {
        let s = |score, label| ScoredSample { id: String::new(), score, label };
        let scores = [s(0.1, Label::Normal), s(0.5, Label::Normal), s(0.9, Label::Anomalous)];
        assert_eq!(classify(&scores, 0.5), [Label::Normal, Label::Normal, Label::Anomalous]);
        assert_eq!(classify(&scores, -1.0), [Label::Anomalous; 3]);
        assert_eq!(classify(&scores, 1.0), [Label::Normal; 3]);
    }

    #[test]
    fn negative_lambda_rejected() {
        let cfg = LossConfig { lambda: -1.0, ..LossConfig::default() };
        assert!(cfg.validate().is_err());
    }
}
