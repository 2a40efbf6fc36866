//! Synthetic sequences, dataset files, tracking metrics, the ablation grid
//! and latency benchmarking.

mod bench;
mod grid;
mod io;
mod metrics;
mod plot;
mod synth;

pub use bench::{bench, BenchFrame, BenchReport};
pub use grid::{
    ablation_grid, probe_template_mse, run_cell, score_model, write_grid_csv, CellResult, CellSpec, DataSpec, GridData,
    GridSpec, TestScores,
};
pub use io::{
    load_dataset, load_sequence_dir, read_groundtruth, read_predictions, write_groundtruth, write_predictions,
    write_sequence_dir, GROUNDTRUTH_FILE,
};
pub use metrics::{evaluate, success_threshold, MetricReport, PRECISION_RADIUS, PRECISION_THRESHOLDS, SUCCESS_THRESHOLDS};
pub use plot::save_curve_png;
pub use synth::{generate_sequence, MotionLaw, ObjectKind, SequenceSpec, SyntheticSequence};

use crate::bbox::BBox;
use crate::image::Image;

/// Frames with one ground-truth box each, in frame pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub name: String,
    pub frames: Vec<Image>,
    pub boxes: Vec<BBox>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

#[cfg(test)]
mod tests;
