use std::collections::BTreeMap;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::backbone::{block_forward, patch_embed, search_slice, template_slice, TokenSequence};
use crate::bbox::BBox;
use crate::blur::{apply_blur, blur_loss, sample_blur, AngleLaw, BlurKernel, BlurPolicy, Reduction};
use crate::config::{LossWeights, RunConfig, TrainConfig, ViTConfig};
use crate::deem::{gate_score, sparsity_loss, try_resolve_exit, ExitRule};
use crate::error::{Error, Result};
use crate::harness::Sequence;
use crate::head::head_forward;
use crate::image::{CropWindow, Image};
use crate::losses::{focal_loss, giou_loss, l1_loss, overall_loss, LossComponents, LossTerms, TrainTarget};
use crate::model::Model;
use crate::numerics::{Session, Var};

use super::optim::{clip_grad_norm, optimizer_update, AdamW, OptState};

/// One supervised template/search pair plus the blur drawn for it.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    pub template: Image,
    pub search: Image,
    pub target: TrainTarget,
    pub blur_kernel: BlurKernel,
}

/// Crops a training pair: the template around `template_box`, the search
/// region around a jittered copy of `search_box`.
#[allow(clippy::too_many_arguments)]
pub fn make_sample<R: Rng>(
    cfg: &ViTConfig,
    train: &TrainConfig,
    template_frame: &Image,
    template_box: &BBox,
    search_frame: &Image,
    search_box: &BBox,
    rng: &mut R,
) -> Result<TrainSample> {
    let template = CropWindow::around(template_box, cfg.template_context, cfg.template_side)?.extract(template_frame);
    let scale = (train.search_scale_jitter * rng.gen_range(-1.0..=1.0)).exp();
    let side = cfg.search_context * (search_box.w * search_box.h).sqrt() * scale;
    let shift = |rng: &mut R| train.search_shift * side * rng.gen_range(-1.0..=1.0);
    let center = BBox::new(search_box.cx + shift(rng), search_box.cy + shift(rng), search_box.w, search_box.h);
    let window = CropWindow {
        x0: center.cx - side / 2.0,
        y0: center.cy - side / 2.0,
        side,
        out_side: cfg.search_side,
    };
    let search = window.extract(search_frame);
    let rel = window.to_crop(search_box);
    let rel = BBox::new(rel.cx.clamp(0.0, 1.0), rel.cy.clamp(0.0, 1.0), rel.w.min(1.0), rel.h.min(1.0));
    let target = TrainTarget::new(rel, cfg.search_grid())?;
    let blur_kernel = if rng.gen::<f64>() < train.blur_prob {
        let policy = BlurPolicy {
            lengths: train.blur_lengths.clone(),
            angle: AngleLaw::Uniform,
        };
        sample_blur(rng, &policy)?
    } else {
        BlurKernel::identity()
    };
    Ok(TrainSample {
        template,
        search,
        target,
        blur_kernel,
    })
}

/// Draws `count` samples from random frame pairs at most
/// `train.max_frame_gap` apart.
pub fn sample_batch<R: Rng>(
    seqs: &[Sequence],
    cfg: &ViTConfig,
    train: &TrainConfig,
    count: usize,
    rng: &mut R,
) -> Result<Vec<TrainSample>> {
    if seqs.iter().all(|s| s.is_empty()) {
        return Err(Error::InvalidArgument("no training frames".into()));
    }
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let seq = &seqs[rng.gen_range(0..seqs.len())];
        if seq.is_empty() {
            continue;
        }
        let n = seq.len();
        let i = rng.gen_range(0..n);
        let gap = train.max_frame_gap as isize;
        let j = (i as isize + rng.gen_range(-gap..=gap)).clamp(0, n as isize - 1) as usize;
        out.push(make_sample(cfg, train, &seq.frames[i], &seq.boxes[i], &seq.frames[j], &seq.boxes[j], rng)?);
    }
    Ok(out)
}

/// How a training forward pass treats the exit gates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StepOptions {
    /// Evaluate gates and train the head on the exit layer.
    pub deem: bool,
    /// Evaluate every gate but keep the head on the last block.
    pub warmup: bool,
    /// Forward the blurred template and add the blur-robustness term.
    pub mbrv: bool,
}

impl StepOptions {
    pub fn from_train(train: &TrainConfig, step: usize) -> Self {
        Self {
            deem: train.deem,
            warmup: step < train.warmup_steps,
            mbrv: train.mbrv,
        }
    }
}

/// The objective of one sample on a training session.
pub struct SampleForward {
    pub loss: Var,
    pub terms: LossTerms,
    pub exit_layer: usize,
}

fn run_to(s: &mut Session, cfg: &ViTConfig, layers: &mut Vec<TokenSequence>, layer: usize) -> Result<()> {
    while layers.len() <= layer {
        let next = block_forward(s, cfg, layers.last().expect("embedding present"), layers.len())?;
        layers.push(next);
    }
    Ok(())
}

/// Builds the five loss terms of one sample.
pub fn sample_forward(
    s: &mut Session,
    cfg: &ViTConfig,
    weights: &LossWeights,
    sample: &TrainSample,
    opts: StepOptions,
) -> Result<SampleForward> {
    let mut layers = vec![patch_embed(s, cfg, &sample.template, &sample.search)?];
    let mut gates: Vec<Var> = Vec::new();
    let rule = ExitRule::from(cfg);
    let exit_layer = if !opts.deem {
        cfg.depth
    } else if opts.warmup {
        for l in rule.first_examined()..=cfg.depth {
            run_to(s, cfg, &mut layers, l - 1)?;
            gates.push(gate_score(s, cfg, &layers[l - 1], l)?);
        }
        cfg.depth
    } else {
        let trace = try_resolve_exit(&rule, |l| {
            run_to(s, cfg, &mut layers, l - 1)?;
            let e = gate_score(s, cfg, &layers[l - 1], l)?;
            gates.push(e);
            Ok::<_, Error>(s.item(e))
        })?;
        trace.exit_layer
    };
    run_to(s, cfg, &mut layers, exit_layer)?;

    let tokens = search_slice(s, &layers[exit_layer])?;
    let head = head_forward(s, cfg, tokens)?;
    let cls = focal_loss(s, head.p, &sample.target)?;
    let (row, col) = sample.target.positive_cell;
    let pred = head.box_at(s, row, col)?;
    let iou = giou_loss(s, pred, &sample.target.gt_box)?;
    let l1 = l1_loss(s, pred, &sample.target.gt_box)?;

    let blur = if opts.mbrv {
        run_to(s, cfg, &mut layers, cfg.depth)?;
        let blurred = apply_blur(&sample.template, &sample.blur_kernel);
        let mut bl = vec![patch_embed(s, cfg, &blurred, &sample.search)?];
        run_to(s, cfg, &mut bl, cfg.depth)?;
        let clean = template_slice(s, &layers[cfg.depth])?;
        let noisy = template_slice(s, &bl[cfg.depth])?;
        blur_loss(s, clean, noisy, Reduction::Sum)?
    } else {
        s.scalar(0.0)
    };
    let sparsity = if gates.is_empty() {
        s.scalar(0.0)
    } else {
        sparsity_loss(s, &gates, cfg.sparsity_target)?
    };
    let terms = LossTerms {
        cls,
        iou,
        l1,
        blur,
        sparsity,
    };
    let loss = overall_loss(s, &terms, weights)?;
    Ok(SampleForward {
        loss,
        terms,
        exit_layer,
    })
}

/// Batch-mean losses of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub losses: LossComponents,
    pub overall: f64,
    pub mean_exit_layer: f64,
}

struct SampleResult {
    losses: LossComponents,
    overall: f64,
    exit_layer: usize,
    grads: Vec<(String, Vec<f64>)>,
}

/// Forward and backward over the batch (samples in parallel), mean
/// gradients, then one optimizer update.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    batch: &[TrainSample],
    model: &mut Model,
    weights: &LossWeights,
    opt: &AdamW,
    state: &mut OptState,
    opts: StepOptions,
    grad_clip: f64,
) -> Result<StepReport> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let cfg = &model.cfg;
    let store = &model.params;
    let results: Vec<SampleResult> = batch
        .par_iter()
        .map(|sample| {
            let mut s = Session::training(store);
            let f = sample_forward(&mut s, cfg, weights, sample, opts)?;
            let overall = s.item(f.loss);
            if !overall.is_finite() {
                return Err(Error::NonFinite(format!("overall loss {overall}")));
            }
            s.backward(f.loss)?;
            Ok(SampleResult {
                losses: f.terms.values(&s),
                overall,
                exit_layer: f.exit_layer,
                grads: s.param_grads(),
            })
        })
        .collect::<Result<_>>()?;

    let n = batch.len() as f64;
    let mut grads: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut losses = [0.0; 5];
    let (mut overall, mut exits) = (0.0, 0.0);
    for r in &results {
        for (acc, v) in losses.iter_mut().zip(r.losses.to_array()) {
            *acc += v / n;
        }
        overall += r.overall / n;
        exits += r.exit_layer as f64 / n;
        for (name, g) in &r.grads {
            let slot = grads.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            slot.iter_mut().zip(g).for_each(|(a, b)| *a += b / n);
        }
    }
    if let Some((name, _)) = grads.iter().find(|(_, g)| g.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite(format!("gradient of {name}")));
    }
    clip_grad_norm(&mut grads, grad_clip);
    optimizer_update(&mut model.params, &grads, state, opt)?;
    Ok(StepReport {
        step: state.step as usize,
        losses: LossComponents {
            cls: losses[0],
            iou: losses[1],
            l1: losses[2],
            blur: losses[3],
            sparsity: losses[4],
        },
        overall,
        mean_exit_layer: exits,
    })
}

/// Model, optimizer state and data stream of one training run.
pub struct Trainer {
    pub model: Model,
    pub run: RunConfig,
    pub opt_state: OptState,
    rng: ChaCha8Rng,
    steps_done: usize,
}

impl Trainer {
    /// Parameters are initialized from `run.train.seed`; batches come from
    /// a separate stream of the same seed.
    pub fn new(run: &RunConfig) -> Result<Self> {
        run.validate()?;
        let model = Model::new(run.model.clone(), run.train.seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(run.train.seed);
        rng.set_stream(1);
        Ok(Self {
            model,
            run: run.clone(),
            opt_state: OptState::default(),
            rng,
            steps_done: 0,
        })
    }

    pub fn steps_done(&self) -> usize {
        self.steps_done
    }

    pub fn optimizer(&self) -> AdamW {
        AdamW::new(self.run.train.lr, self.run.train.weight_decay)
    }

    /// Samples a batch from `seqs` and takes one step.
    pub fn step(&mut self, seqs: &[Sequence]) -> Result<StepReport> {
        let t = &self.run.train;
        let batch = sample_batch(seqs, &self.model.cfg, t, t.batch_size, &mut self.rng)?;
        self.step_on(&batch)
    }

    /// One step on a caller-supplied batch.
    pub fn step_on(&mut self, batch: &[TrainSample]) -> Result<StepReport> {
        let opts = StepOptions::from_train(&self.run.train, self.steps_done);
        let opt = self.optimizer();
        let report = train_step(
            batch,
            &mut self.model,
            &self.run.loss,
            &opt,
            &mut self.opt_state,
            opts,
            self.run.train.grad_clip,
        )?;
        self.steps_done += 1;
        Ok(report)
    }

    /// Runs the configured number of steps, calling `on_step` after each.
    pub fn fit(
        &mut self,
        seqs: &[Sequence],
        mut on_step: impl FnMut(&Trainer, &StepReport) -> Result<()>,
    ) -> Result<Vec<StepReport>> {
        let mut reports = Vec::with_capacity(self.run.train.steps);
        while self.steps_done < self.run.train.steps {
            let r = self.step(seqs)?;
            on_step(self, &r)?;
            reports.push(r);
        }
        Ok(reports)
    }
}

pub const LOSS_CSV_HEADER: [&str; 8] = ["step", "L_cls", "L_iou", "L_L1", "L_br", "L_spar", "L_overall", "mean_L_e"];

/// Writes per-step losses as CSV.
pub struct LossLog<W: Write> {
    out: csv::Writer<W>,
}

impl<W: Write> LossLog<W> {
    pub fn new(w: W) -> Result<Self> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(LOSS_CSV_HEADER)?;
        Ok(Self { out })
    }

    pub fn record(&mut self, r: &StepReport) -> Result<()> {
        let l = &r.losses;
        let fields = [l.cls, l.iou, l.l1, l.blur, l.sparsity, r.overall, r.mean_exit_layer];
        let mut row = vec![r.step.to_string()];
        row.extend(fields.iter().map(|v| format!("{v:.17e}")));
        self.out.write_record(&row)?;
        self.out.flush()?;
        Ok(())
    }
}
