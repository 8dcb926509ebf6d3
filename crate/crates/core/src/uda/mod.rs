//! Desk-scale unsupervised domain adaptation: synthetic shift datasets,
//! scarce-target subsampling and the kernelized and adversarial Stein
//! alignment trainers.

mod dataset;
mod train;

pub use dataset::{
    make_blob_shift, make_two_moons, split_target, subsample_size, subsample_target, Dataset, Domain,
};
pub use train::{
    evaluate, kernelized_transfer, lambda_schedule, prepare_data, run_uda, train_epoch_adversarial,
    train_epoch_kernelized, DataSpec, EpochLog, EpochRecord, Evaluation, FeatureBuffer, TrainConfig,
    TrainState, TransferForm, UdaData, UdaModel, UdaResult, UdaRun, UpdateCadence,
};
