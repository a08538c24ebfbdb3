//! Small CPU tensor engine with hand-written backward passes, the
//! pre-enhancing net, the classification U-net and their training loop.
//!
//! Everything is generic over [`Scalar`]: models train in `f32`, while the
//! same code instantiated with `f64` backs the finite-difference checks.

pub mod io;
pub mod layers;
pub mod models;
pub mod ops;
pub mod optim;
pub mod tensor;
pub mod train;

pub use io::{decode_model, encode_model, load_model, peek_manifest, save_model, ModelManifest};
pub use models::{
    build_cunet, build_pe, param_hash, CuNet, CunetArch, CunetOutput, CunetPrediction, LayerKind, LayerSpec, Network,
    PeNet, FEATURE_CHANNELS,
};
pub use optim::{adam_step, OptimState};
pub use tensor::{Param, Scalar, Tensor};
pub use train::{
    loss_log_csv, train_two_phase, write_loss_log, LossRecord, TrainConfig, TrainOutput, TrainSample, Trainer,
    TrainingSet, LOSS_LOG_HEADER,
};
