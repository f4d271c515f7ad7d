//! Configuration, training and evaluation orchestration, file formats and
//! the command implementations behind the `slot-ground` binary.

pub mod cli;
mod config;
mod io;
mod train;

pub use config::{RunConfig, SaTarget};
pub use io::{read_svtf, svtf_from_bytes, svtf_to_bytes, write_svtf, Checkpoint};
pub use train::{
    attach_tuning, build_decoder, evaluate, init_base, metrics_from_records, pooled_repr, predict, pretrain_base,
    sample_loss, slot_attention, train, train_step, DecoderGrounder, EvalRecord, EvalReport, SampleLoss, StepLog,
    TrainOutcome,
};

#[cfg(test)]
mod tests;
