//! Training (sampling, loss wiring, optimizer) and frame-by-frame tracking
//! with lazy early exit.

mod flops;
mod optim;
mod track;
mod train;

pub use flops::{flops_estimate, FlopsBreakdown};
pub use optim::{clip_grad_norm, optimizer_update, AdamW, OptState};
pub use track::{
    lazy_forward, predict_maps, template_feature_mse, track_frame, track_init, track_sequence, ExitMode, TrackDiag,
    TrackRun, TrackState, MIN_BOX_SIDE,
};
pub use train::{
    make_sample, sample_batch, sample_forward, train_step, LossLog, SampleForward, StepOptions, StepReport,
    TrainSample, Trainer, LOSS_CSV_HEADER,
};

#[cfg(test)]
mod tests;
