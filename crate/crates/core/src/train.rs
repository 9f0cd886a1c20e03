//! Training loop over normal-only data.

use pyrad_tensor::{Graph, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{stack_batch, ImageSample, Label};
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::loss::{total_loss, PerceptualNet};
use crate::model::Model;
use crate::optim::{adam_step, AdamConfig, OptimizerState};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    /// Drives the per-epoch shuffle.
    pub seed: u64,
    /// Call the checkpoint hook every this many epochs; 0 disables it.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            batch_size: 120,
            epochs: 600,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.adam.validate()?;
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch size must be ≥ 2 for batch norm, got {}", self.batch_size)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be ≥ 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub mean_loss: f64,
    pub steps: usize,
}

/// Batches of sample indices for one epoch: a seeded shuffle cut into
/// `batch_size` chunks, dropping a final chunk smaller than 2.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    order.shuffle(&mut rng);
    order
        .chunks(batch_size.max(1))
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect()
}

/// Forward in train mode, total loss, backward and one Adam step. Returns
/// the loss before the update.
pub fn train_step(
    model: &mut Model<f32>,
    net: &PerceptualNet<f32>,
    lambda: f64,
    state: &mut OptimizerState<f32>,
    adam: &AdamConfig,
    batch: &Tensor<f32>,
) -> Result<f64> {
    let mut g = Graph::new();
    let x = g.constant(batch.clone());
    let xh = model.forward(&mut g, x, Mode::Train)?;
    let loss = total_loss(&mut g, x, xh, lambda, net)?;
    let value = f64::from(g.value(loss.total).item()?);
    if !value.is_finite() {
        return Err(Error::Numeric(format!("loss became {value} at step {}", state.step + 1)));
    }
    g.backward(loss.total)?;
    let store = model.store();
    let grads: Vec<_> = g
        .param_grads()
        .filter_map(|(key, grad)| store.id_for_key(key).map(|id| (id, grad.clone())))
        .filter(|(id, _)| store.is_trainable(*id))
        .collect();
    adam_step(model.store_mut(), &grads, state, adam)?;
    Ok(value)
}

/// Refuse anything a one-class trainer must not see.
pub fn check_training_set(model: &Model<f32>, data: &[ImageSample]) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    if let Some(s) = data.iter().find(|s| s.label != Label::Normal) {
        return Err(Error::Protocol(format!("training set contains anomalous sample {}", s.id())));
    }
    let (h, w) = model.config().input_size;
    if let Some(s) = data.iter().find(|s| s.pixels.shape() != [3, h, w]) {
        return Err(Error::Dataset(format!(
            "{} has shape {:?}, model expects [3, {h}, {w}]",
            s.id(),
            s.pixels.shape()
        )));
    }
    if data.len() < 2 {
        return Err(Error::Dataset("need at least 2 training images for batch norm".into()));
    }
    Ok(())
}

/// Run one epoch; `epoch` is 0-based and selects the shuffle stream.
pub fn run_epoch(
    model: &mut Model<f32>,
    net: &PerceptualNet<f32>,
    data: &[ImageSample],
    cfg: &TrainConfig,
    lambda: f64,
    state: &mut OptimizerState<f32>,
    epoch: usize,
) -> Result<EpochRecord> {
    let batches = epoch_batches(data.len(), cfg.batch_size, cfg.seed, epoch);
    let mut sum = 0.0;
    for idx in &batches {
        let samples: Vec<&ImageSample> = idx.iter().map(|&i| &data[i]).collect();
        let batch = stack_batch(&samples)?;
        sum += train_step(model, net, lambda, state, &cfg.adam, &batch)?;
    }
    Ok(EpochRecord {
        epoch: epoch + 1,
        mean_loss: sum / batches.len() as f64,
        steps: batches.len(),
    })
}

/// Hook invoked after every epoch with the record, the model and the
/// optimizer state; `checkpoint` is true on checkpoint epochs.
pub type EpochSink<'a> = dyn FnMut(&EpochRecord, &Model<f32>, &OptimizerState<f32>, bool) -> Result<()> + 'a;

/// Train for `cfg.epochs` epochs and return the loss curve.
pub fn train(
    model: &mut Model<f32>,
    net: &PerceptualNet<f32>,
    data: &[ImageSample],
    cfg: &TrainConfig,
    lambda: f64,
    state: &mut OptimizerState<f32>,
    sink: &mut EpochSink<'_>,
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    check_training_set(model, data)?;
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let rec = run_epoch(model, net, data, cfg, lambda, state, epoch)?;
        let ckpt = cfg.checkpoint_every > 0 && rec.epoch % cfg.checkpoint_every == 0;
        sink(&rec, model, state, ckpt)?;
        curve.push(rec);
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::data::{make_synthetic_benchmark, SyntheticSpec};
    use crate::model::build_model;

    fn setup() -> (Model<f32>, PerceptualNet<f32>, Vec<ImageSample>) {
        let model = build_model(&ModelConfig::miniature(16).unwrap(), 1, None).unwrap();
        let net = PerceptualNet::new(&[3, 4], 2).unwrap();
        let spec = SyntheticSpec { n_train: 6, n_test_normal: 0, n_test_anomalous: 0, size: 16, seed: 3 };
        (model, net, make_synthetic_benchmark(&spec).unwrap().train)
    }

    #[test]
    fn batches_cover_and_drop_singletons() {
        let b = epoch_batches(9, 4, 1, 0);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), [4, 4]);
        let b = epoch_batches(10, 4, 1, 0);
        let mut all: Vec<usize> = b.concat();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_ne!(epoch_batches(10, 10, 1, 0), epoch_batches(10, 10, 1, 1));
        assert_eq!(epoch_batches(10, 10, 1, 3), epoch_batches(10, 10, 1, 3));
    }

    #[test]
    fn same_seed_same_curve() {
        let cfg = TrainConfig { batch_size: 3, epochs: 2, seed: 4, adam: AdamConfig { lr: 1e-3, ..Default::default() }, ..Default::default() };
        let run = || {
            let (mut m, net, data) = setup();
            let mut st = OptimizerState::default();
            train(&mut m, &net, &data, &cfg, 1.0, &mut st, &mut |_, _, _, _| Ok(())).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn rejects_bad_inputs() {
        let (mut m, net, mut data) = setup();
        let mut st = OptimizerState::default();
        let cfg = TrainConfig { epochs: 0, ..Default::default() };
        assert!(matches!(train(&mut m, &net, &data, &cfg, 1.0, &mut st, &mut |_, _, _, _| Ok(())), Err(Error::Config(_))));
        let cfg = TrainConfig { epochs: 1, batch_size: 2, ..Default::default() };
        assert!(matches!(train(&mut m, &net, &[], &cfg, 1.0, &mut st, &mut |_, _, _, _| Ok(())), Err(Error::Dataset(_))));
        data[2].label = Label::Anomalous;
        assert!(matches!(train(&mut m, &net, &data, &cfg, 1.0, &mut st, &mut |_, _, _, _| Ok(())), Err(Error::Protocol(_))));
    }

    #[test]
    fn frozen_parts_stay_out_of_optimizer_state() {
        let (mut m, net, data) = setup();
        let before: Vec<_> = m.backbone_ids().iter().map(|&id| m.store().get(id).clone()).collect();
        let mut st = OptimizerState::default();
        let cfg = TrainConfig { batch_size: 3, epochs: 1, ..Default::default() };
        train(&mut m, &net, &data, &cfg, 1.0, &mut st, &mut |_, _, _, _| Ok(())).unwrap();
        assert!(st.moments.keys().all(|k| !k.starts_with("backbone.") && !k.starts_with("perceptual.")));
        assert_eq!(st.moments.len(), m.store().trainable_ids().count());
        let after: Vec<_> = m.backbone_ids().iter().map(|&id| m.store().get(id).clone()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn checkpoint_hook_cadence() {
        let (mut m, net, data) = setup();
        let mut st = OptimizerState::default();
        let cfg = TrainConfig { batch_size: 3, epochs: 4, checkpoint_every: 2, ..Default::default() };
        let mut marks = Vec::new();
        train(&mut m, &net, &data, &cfg, 0.0, &mut st, &mut |r, _, _, c| {
            marks.push((r.epoch, c));
            Ok(())
        })
        .unwrap();
        assert_eq!(marks, [(1, false), (2, true), (3, false), (4, true)]);
    }
}
