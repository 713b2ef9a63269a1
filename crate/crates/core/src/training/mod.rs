//! Segmenter pretraining, translator training and the seeds-by-variants protocol.

pub mod config;
pub mod optim;
pub mod protocol;
pub mod replay;
pub mod segmenter;
pub mod translator;

pub use config::{ExperimentConfig, LrSchedule, ProtocolConfig, RunConfig, SegTrainConfig};
pub use optim::Adam;
pub use protocol::{evaluate_bundle, run_protocol, CellFailure, ProtocolInputs, ProtocolOutcome};
pub use replay::ReplayBuffer;
pub use segmenter::{train_segmenter, SegTrainReport};
pub use translator::{
    load_translator, save_translator, train_translator, train_translator_until, FrozenChecksums, MetricsRow,
    RunOutcome, TrainInputs, TranslatorTrainer,
};
