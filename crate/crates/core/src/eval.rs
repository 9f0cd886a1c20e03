//! Scoring a labelled test set and summarizing it.

use pyrad_tensor::Tensor;

use crate::data::{stack_batch, ImageSample, Label};
use crate::error::{Error, Result};
use crate::loss::{score_batch, PerceptualNet, ScoredSample};
use crate::metrics::{ssim, EvalReport};
use crate::model::Model;

pub const EVAL_BATCH: usize = 32;

/// Score samples in eval mode; returns scores and reconstructions in input
/// order.
pub fn score_samples(
    model: &mut Model<f32>,
    net: &PerceptualNet<f32>,
    lambda: f64,
    samples: &[ImageSample],
) -> Result<(Vec<ScoredSample>, Vec<Tensor<f32>>)> {
    let mut scored = Vec::with_capacity(samples.len());
    let mut recon = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let refs: Vec<&ImageSample> = chunk.iter().collect();
        let out = score_batch(model, net, lambda, &stack_batch(&refs)?)?;
        for (i, (s, score)) in chunk.iter().zip(out.scores).enumerate() {
            scored.push(ScoredSample {
                id: s.id(),
                score,
                label: s.label,
            });
            let r = out.reconstruction.sample(i)?;
            recon.push(r.reshape(s.pixels.shape().to_vec())?);
        }
    }
    Ok((scored, recon))
}

/// AUC, rates at the balanced-accuracy threshold, accuracy and the mean
/// SSIM of normal reconstructions. Needs both classes.
pub fn evaluate(model: &mut Model<f32>, net: &PerceptualNet<f32>, lambda: f64, test: &[ImageSample]) -> Result<EvalReport> {
    let anomalies = test.iter().filter(|s| s.label.is_anomalous()).count();
    if anomalies == 0 || anomalies == test.len() {
        return Err(Error::Protocol(format!(
            "both classes required in the test set ({} normal, {anomalies} anomalous)",
            test.len() - anomalies
        )));
    }
    let (scored, recon) = score_samples(model, net, lambda, test)?;
    let mut ssim_sum = 0.0;
    let mut normals = 0usize;
    for (s, r) in test.iter().zip(&recon) {
        if s.label == Label::Normal {
            ssim_sum += ssim(&s.pixels, r)?;
            normals += 1;
        }
    }
    EvalReport::from_scores(scored, ssim_sum / normals as f64)
}
