//! Train-and-evaluate runs over one varied setting.

use std::io::Write;
use std::path::PathBuf;

use crate::checkpoint;
use crate::config::ModelConfig;
use crate::data::ImageSample;
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::loss::LossConfig;
use crate::metrics::{EvalReport, REPORT_CSV_HEADER};
use crate::model::{build_model, Model};
use crate::optim::OptimizerState;
use crate::train::{train, EpochRecord, EpochSink, TrainConfig};

/// Everything that defines one run.
#[derive(Clone, Debug, PartialEq)]
pub struct Experiment {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    /// Seed for parameter initialization.
    pub init_seed: u64,
    pub backbone_weights: Option<PathBuf>,
}

pub struct TrainedRun {
    pub model: Model<f32>,
    pub state: OptimizerState<f32>,
    pub curve: Vec<EpochRecord>,
}

impl Experiment {
    pub fn build(&self) -> Result<Model<f32>> {
        let weights = match &self.backbone_weights {
            Some(p) => Some(checkpoint::read(p)?.tensors),
            None => None,
        };
        build_model(&self.model, self.init_seed, weights.as_deref())
    }

    pub fn fit(&self, train_set: &[ImageSample], sink: &mut EpochSink<'_>) -> Result<TrainedRun> {
        let mut model = self.build()?;
        let net = self.loss.perceptual_net()?;
        let mut state = OptimizerState::default();
        let curve = train(&mut model, &net, train_set, &self.train, self.loss.lambda, &mut state, sink)?;
        Ok(TrainedRun { model, state, curve })
    }

    /// Train, then evaluate on `test_set`.
    pub fn run(&self, train_set: &[ImageSample], test_set: &[ImageSample]) -> Result<(TrainedRun, EvalReport)> {
        let mut run = self.fit(train_set, &mut |_, _, _, _| Ok(()))?;
        let net = self.loss.perceptual_net()?;
        let report = evaluate(&mut run.model, &net, self.loss.lambda, test_set)?;
        Ok((run, report))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationAxis {
    /// 1, 2, 4 and 6 encoders.
    Encoders,
    /// λ = 0 and λ = 1.
    Lambda,
}

impl std::str::FromStr for AblationAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "encoders" => Ok(Self::Encoders),
            "lambda" => Ok(Self::Lambda),
            _ => Err(Error::Config(format!("unknown ablation axis `{s}` (expected encoders or lambda)"))),
        }
    }
}

impl AblationAxis {
    /// Named variants of `base`; all share every other setting and seed.
    pub fn variants(self, base: &Experiment) -> Result<Vec<(String, Experiment)>> {
        match self {
            Self::Encoders => [1, 2, 4, 6]
                .into_iter()
                .map(|k| {
                    let mut e = base.clone();
                    e.model = base.model.with_encoders(k)?;
                    Ok((format!("encoders={k}"), e))
                })
                .collect(),
            Self::Lambda => Ok([0.0, 1.0]
                .into_iter()
                .map(|l| {
                    let mut e = base.clone();
                    e.loss.lambda = l;
                    (format!("lambda={l}"), e)
                })
                .collect()),
        }
    }
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub config: String,
    pub outcome: std::result::Result<EvalReport, String>,
}

fn sink_err(e: std::io::Error) -> Error {
    Error::io("<ablation output>", e)
}

/// Run every variant, writing the CSV header and one row per run as soon
/// as it finishes. A failed run is recorded (metrics `NaN`) and the
/// remaining runs continue.
pub fn run_ablation(
    base: &Experiment,
    axis: AblationAxis,
    train_set: &[ImageSample],
    test_set: &[ImageSample],
    out: &mut dyn Write,
) -> Result<Vec<AblationRow>> {
    writeln!(out, "{REPORT_CSV_HEADER}").map_err(sink_err)?;
    let mut rows = Vec::new();
    for (name, exp) in axis.variants(base)? {
        let outcome = exp.run(train_set, test_set).map(|(_, r)| r).map_err(|e| e.to_string());
        let line = match &outcome {
            Ok(r) => r.csv_row(&name),
            Err(_) => format!("{name},NaN,NaN,NaN,NaN,NaN,NaN"),
        };
        writeln!(out, "{line}").map_err(sink_err)?;
        out.flush().map_err(sink_err)?;
        rows.push(AblationRow { config: name, outcome });
    }
    Ok(rows)
}
