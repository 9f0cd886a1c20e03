pub mod ablation;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod init;
pub mod layers;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod train;

pub use ablation::{run_ablation, AblationAxis, Experiment};
pub use checkpoint::Checkpoint;
pub use config::{BackboneConfig, DecoderLayer, ModelConfig, ShapeTrace};
pub use data::{ImageSample, Label};
pub use error::{Error, Result};
pub use eval::evaluate;
pub use layers::Mode;
pub use loss::{LossConfig, PerceptualNet, ScoredSample};
pub use metrics::EvalReport;
pub use model::{build_model, Model};
pub use optim::{AdamConfig, OptimizerState, WeightDecay};
pub use params::{ParamId, ParamRole, ParamStore};
pub use train::{train, EpochRecord, TrainConfig};
