use crate::backbone::{block_forward, patch_embed, search_slice, template_slice, TokenSequence};
use crate::bbox::BBox;
use crate::config::ViTConfig;
use crate::deem::{gate_score, try_resolve_exit, ExitRule, ExitTrace};
use crate::error::{Error, Result};
use crate::head::{decode_box_windowed, hanning_window, head_forward, HeadOutput};
use crate::image::{CropWindow, Image};
use crate::model::Model;
use crate::numerics::{Session, Tensor};

/// Smallest tracked box side, in frame pixels.
pub const MIN_BOX_SIDE: f64 = 2.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ExitMode {
    /// Gates are evaluated and the pass stops at the resolved exit layer.
    #[default]
    Dynamic,
    /// Every block runs and no gate is evaluated.
    FullDepth,
}

/// Per-sequence tracker state. The template is fixed at initialization.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackState {
    template_crop: Image,
    pub current_box: BBox,
    window: Tensor,
    frame_width: usize,
    frame_height: usize,
}

impl TrackState {
    pub fn template_crop(&self) -> &Image {
        &self.template_crop
    }

    pub fn window(&self) -> &Tensor {
        &self.window
    }
}

/// What one tracked frame cost and how it was decided.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackDiag {
    pub exit_layer: usize,
    pub trace: ExitTrace,
    pub blocks_executed: usize,
    /// Multiply-accumulates recorded by the forward pass.
    pub macs: u64,
    pub peak_score: f64,
    pub search_window: CropWindow,
}

pub fn track_init(cfg: &ViTConfig, frame: &Image, b: &BBox) -> Result<TrackState> {
    if !(b.w > 0.0 && b.h > 0.0) {
        return Err(Error::InvalidArgument(format!("degenerate initial box {b:?}")));
    }
    let (fw, fh) = (frame.width() as f64, frame.height() as f64);
    if b.cx < 0.0 || b.cy < 0.0 || b.cx > fw || b.cy > fh {
        return Err(Error::InvalidArgument(format!("initial box {b:?} lies outside the {fw}x{fh} frame")));
    }
    let template_crop = CropWindow::around(b, cfg.template_context, cfg.template_side)?.extract(frame);
    Ok(TrackState {
        template_crop,
        current_box: *b,
        window: hanning_window(cfg.search_grid(), cfg.window_blend),
        frame_width: frame.width(),
        frame_height: frame.height(),
    })
}

/// Forward pass with lazy exit: blocks past the exit layer never run.
/// Returns the exit trace, the number of blocks run and the final tokens.
pub fn lazy_forward(
    s: &mut Session,
    cfg: &ViTConfig,
    template: &Image,
    search: &Image,
    mode: ExitMode,
) -> Result<(ExitTrace, usize, TokenSequence)> {
    let mut t = patch_embed(s, cfg, template, search)?;
    let mut blocks = 0;
    let trace = match mode {
        ExitMode::FullDepth => ExitTrace::full_depth(cfg.depth),
        ExitMode::Dynamic => try_resolve_exit(&ExitRule::from(cfg), |l| {
            while t.layer < l - 1 {
                t = block_forward(s, cfg, &t, t.layer + 1)?;
                blocks += 1;
            }
            let e = gate_score(s, cfg, &t, l)?;
            Ok::<_, Error>(s.item(e))
        })?,
    };
    while t.layer < trace.exit_layer {
        t = block_forward(s, cfg, &t, t.layer + 1)?;
        blocks += 1;
    }
    Ok((trace, blocks, t))
}

/// Head maps for one template/search pair.
pub fn predict_maps(model: &Model, template: &Image, search: &Image, mode: ExitMode) -> Result<(HeadOutput, ExitTrace)> {
    let mut s = Session::inference(&model.params);
    let (trace, _, t) = lazy_forward(&mut s, &model.cfg, template, search, mode)?;
    let tokens = search_slice(&mut s, &t)?;
    let head = head_forward(&mut s, &model.cfg, tokens)?;
    Ok((head.output(&s), trace))
}

/// Tracks one frame and moves the state to the new box.
pub fn track_frame(state: &mut TrackState, frame: &Image, model: &Model, mode: ExitMode) -> Result<(BBox, TrackDiag)> {
    let cfg = &model.cfg;
    if frame.width() != state.frame_width || frame.height() != state.frame_height {
        return Err(Error::InvalidArgument(format!(
            "frame is {}x{}, sequence started at {}x{}",
            frame.width(),
            frame.height(),
            state.frame_width,
            state.frame_height
        )));
    }
    let window = CropWindow::around(&state.current_box, cfg.search_context, cfg.search_side)?;
    let search = window.extract(frame);
    let mut s = Session::inference(&model.params);
    let (trace, blocks, t) = lazy_forward(&mut s, cfg, &state.template_crop, &search, mode)?;
    let tokens = search_slice(&mut s, &t)?;
    let head = head_forward(&mut s, cfg, tokens)?;
    let (rel, peak) = decode_box_windowed(&head.output(&s), &state.window)?;
    let b = window
        .to_frame(&rel)
        .clamp_to_frame(frame.width() as f64, frame.height() as f64, MIN_BOX_SIDE);
    state.current_box = b;
    Ok((
        b,
        TrackDiag {
            exit_layer: trace.exit_layer,
            trace,
            blocks_executed: blocks,
            macs: s.macs(),
            peak_score: peak,
            search_window: window,
        },
    ))
}

/// Predicted boxes for a whole sequence; frame 0 reports the initial box.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackRun {
    pub boxes: Vec<BBox>,
    /// One entry per frame after the first.
    pub diags: Vec<TrackDiag>,
}

pub fn track_sequence(model: &Model, frames: &[Image], init: &BBox, mode: ExitMode) -> Result<TrackRun> {
    let first = frames.first().ok_or_else(|| Error::InvalidArgument("empty sequence".into()))?;
    let mut state = track_init(&model.cfg, first, init)?;
    let mut run = TrackRun {
        boxes: vec![*init],
        diags: Vec::with_capacity(frames.len().saturating_sub(1)),
    };
    for frame in &frames[1..] {
        let (b, d) = track_frame(&mut state, frame, model, mode)?;
        run.boxes.push(b);
        run.diags.push(d);
    }
    Ok(run)
}

/// Mean squared difference of last-block template tokens between the
/// clean and the blurred template, each paired with the same search crop.
pub fn template_feature_mse(model: &Model, clean: &Image, blurred: &Image, search: &Image) -> Result<f64> {
    let cfg = &model.cfg;
    let features = |template: &Image| -> Result<Vec<f64>> {
        let mut s = Session::inference(&model.params);
        let (_, _, t) = lazy_forward(&mut s, cfg, template, search, ExitMode::FullDepth)?;
        let z = template_slice(&mut s, &t)?;
        Ok(s.value(z).to_vec())
    };
    let (a, b) = (features(clean)?, features(blurred)?);
    Ok(a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64)
}
