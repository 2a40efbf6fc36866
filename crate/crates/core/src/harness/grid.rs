use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::image::CropWindow;
use crate::model::Model;
use crate::pipeline::{template_feature_mse, track_sequence, ExitMode, LossLog, Trainer};

use super::metrics::evaluate;
use super::synth::{generate_sequence, SequenceSpec};
use super::Sequence;

/// Training and test data shared by every cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSpec {
    /// Template for every generated sequence; `seed` and `blur_prob` are
    /// overridden per sequence.
    pub sequence: SequenceSpec,
    pub train_sequences: usize,
    pub train_seed: u64,
    pub train_blur_prob: f64,
    pub test_sequences: usize,
    pub test_seed: u64,
    /// Blur probability of the test copies; each also has a clean twin.
    pub test_blur_prob: f64,
    /// Every this many frames a clean/blurred template pair is probed.
    pub probe_stride: usize,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self {
            sequence: SequenceSpec::default(),
            train_sequences: 16,
            train_seed: 1000,
            train_blur_prob: 0.0,
            test_sequences: 4,
            test_seed: 5000,
            test_blur_prob: 1.0,
            probe_stride: 5,
        }
    }
}

/// Generated data of a grid: training sequences and matched clean/blurred
/// test pairs.
#[derive(Clone, Debug)]
pub struct GridData {
    pub train: Vec<Sequence>,
    pub test_clean: Vec<Sequence>,
    pub test_blurred: Vec<Sequence>,
}

impl DataSpec {
    pub fn generate(&self) -> Result<GridData> {
        let make = |seed: u64, blur: f64, name: String| -> Result<Sequence> {
            let spec = SequenceSpec {
                seed,
                blur_prob: blur,
                ..self.sequence.clone()
            };
            Ok(generate_sequence(&spec)?.into_sequence(name))
        };
        let train = (0..self.train_sequences as u64)
            .map(|i| make(self.train_seed + i, self.train_blur_prob, format!("train{i:03}")))
            .collect::<Result<Vec<_>>>()?;
        let mut test_clean = Vec::new();
        let mut test_blurred = Vec::new();
        for i in 0..self.test_sequences as u64 {
            test_clean.push(make(self.test_seed + i, 0.0, format!("test{i:03}"))?);
            test_blurred.push(make(self.test_seed + i, self.test_blur_prob, format!("test{i:03}_blur"))?);
        }
        Ok(GridData {
            train,
            test_clean,
            test_blurred,
        })
    }
}

/// One training/evaluation run. Unset fields keep the base config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellSpec {
    pub name: String,
    pub mbrv: bool,
    pub deem: bool,
    #[serde(default)]
    pub rho: Option<f64>,
    #[serde(default)]
    pub gamma: Option<f64>,
    #[serde(default)]
    pub tau: Option<f64>,
    #[serde(default)]
    pub n_enf: Option<usize>,
    pub seed: u64,
}

impl CellSpec {
    pub fn apply(&self, base: &RunConfig) -> Result<RunConfig> {
        let mut run = base.clone();
        run.train.mbrv = self.mbrv;
        run.train.deem = self.deem;
        run.train.seed = self.seed;
        if let Some(r) = self.rho {
            run.loss.blur = r;
        }
        if let Some(g) = self.gamma {
            run.loss.sparsity = g;
        }
        if let Some(t) = self.tau {
            run.model.sparsity_target = t;
        }
        if let Some(n) = self.n_enf {
            run.model.enforced_blocks = n;
        }
        run.validate()?;
        Ok(run)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    #[serde(default)]
    pub base: RunConfig,
    #[serde(default)]
    pub data: DataSpec,
    pub cells: Vec<CellSpec>,
}

impl GridSpec {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }
}

/// Row of the ablation table.
#[derive(Clone, Debug, PartialEq)]
pub struct CellResult {
    pub cell: CellSpec,
    /// Tracking on the blurred test copies.
    pub precision_at_20: f64,
    pub success_auc: f64,
    /// Tracking on the clean test copies.
    pub clean_precision_at_20: f64,
    pub clean_success_auc: f64,
    pub mean_exit_layer: f64,
    /// Mean measured multiply-accumulates per tracked frame.
    pub mean_flops: f64,
    /// Mean squared last-block template-feature difference, clean vs blurred.
    pub template_mse: f64,
    pub final_loss: f64,
    pub wall_clock_s: f64,
    pub error: Option<String>,
}

/// Evaluation of a trained model on the grid's test data.
#[derive(Clone, Debug, PartialEq)]
pub struct TestScores {
    pub precision_at_20: f64,
    pub success_auc: f64,
    pub clean_precision_at_20: f64,
    pub clean_success_auc: f64,
    pub mean_exit_layer: f64,
    pub mean_flops: f64,
    pub template_mse: f64,
}

fn pooled(model: &Model, seqs: &[Sequence], mode: ExitMode) -> Result<(f64, f64, f64, f64)> {
    let (mut pred, mut gt) = (Vec::new(), Vec::new());
    let (mut exits, mut macs, mut n) = (0.0, 0.0, 0.0);
    for seq in seqs {
        let run = track_sequence(model, &seq.frames, &seq.boxes[0], mode)?;
        pred.extend(run.boxes.iter().skip(1).copied());
        gt.extend(seq.boxes.iter().skip(1).copied());
        for d in &run.diags {
            exits += d.exit_layer as f64;
            macs += d.macs as f64;
            n += 1.0;
        }
    }
    let r = evaluate(&pred, &gt)?;
    Ok((r.precision_at_20, r.success_auc, exits / n, macs / n))
}

/// Mean template-feature MSE over probed frames of the matched pairs.
pub fn probe_template_mse(model: &Model, clean: &[Sequence], blurred: &[Sequence], stride: usize) -> Result<f64> {
    let cfg = &model.cfg;
    let (mut total, mut count) = (0.0, 0.0);
    for (c, b) in clean.iter().zip(blurred) {
        for k in (0..c.len()).step_by(stride.max(1)) {
            let bx: &BBox = &c.boxes[k];
            let tw = CropWindow::around(bx, cfg.template_context, cfg.template_side)?;
            let sw = CropWindow::around(bx, cfg.search_context, cfg.search_side)?;
            let search = sw.extract(&c.frames[k]);
            total += template_feature_mse(model, &tw.extract(&c.frames[k]), &tw.extract(&b.frames[k]), &search)?;
            count += 1.0;
        }
    }
    Ok(total / count)
}

pub fn score_model(model: &Model, data: &GridData, mode: ExitMode, probe_stride: usize) -> Result<TestScores> {
    let (p, s, exits, flops) = pooled(model, &data.test_blurred, mode)?;
    let (cp, cs, _, _) = pooled(model, &data.test_clean, mode)?;
    Ok(TestScores {
        precision_at_20: p,
        success_auc: s,
        clean_precision_at_20: cp,
        clean_success_auc: cs,
        mean_exit_layer: exits,
        mean_flops: flops,
        template_mse: probe_template_mse(model, &data.test_clean, &data.test_blurred, probe_stride)?,
    })
}

/// Trains and evaluates one cell; DEEM cells track with dynamic exit, the
/// others at full depth. The loss trace goes to `loss_csv` when given.
pub fn run_cell(
    base: &RunConfig,
    cell: &CellSpec,
    data: &GridData,
    probe_stride: usize,
    loss_csv: Option<&Path>,
) -> Result<(Model, TestScores, f64)> {
    let run = cell.apply(base)?;
    let mut trainer = Trainer::new(&run)?;
    let mut log = match loss_csv {
        Some(p) => Some(LossLog::new(std::fs::File::create(p)?)?),
        None => None,
    };
    let reports = trainer.fit(&data.train, |_, r| match log.as_mut() {
        Some(l) => l.record(r),
        None => Ok(()),
    })?;
    let final_loss = reports.last().map(|r| r.overall).unwrap_or(f64::NAN);
    let mode = if cell.deem { ExitMode::Dynamic } else { ExitMode::FullDepth };
    let scores = score_model(&trainer.model, data, mode, probe_stride)?;
    Ok((trainer.model, scores, final_loss))
}

/// Runs every cell on the same generated data. A failing cell is reported
/// in its row and the other cells continue.
pub fn ablation_grid(spec: &GridSpec, out_dir: Option<&Path>) -> Result<Vec<CellResult>> {
    let data = spec.data.generate()?;
    if let Some(d) = out_dir {
        std::fs::create_dir_all(d)?;
    }
    let results = spec
        .cells
        .par_iter()
        .map(|cell| {
            let start = Instant::now();
            let csv = out_dir.map(|d| d.join(format!("{}_loss.csv", cell.name)));
            let outcome = run_cell(&spec.base, cell, &data, spec.data.probe_stride, csv.as_deref());
            let wall_clock_s = start.elapsed().as_secs_f64();
            match outcome {
                Ok((model, s, final_loss)) => {
                    let error = out_dir
                        .and_then(|d| model.save(d.join(format!("{}.ckpt", cell.name))).err())
                        .map(|e| e.to_string());
                    CellResult {
                        cell: cell.clone(),
                        precision_at_20: s.precision_at_20,
                        success_auc: s.success_auc,
                        clean_precision_at_20: s.clean_precision_at_20,
                        clean_success_auc: s.clean_success_auc,
                        mean_exit_layer: s.mean_exit_layer,
                        mean_flops: s.mean_flops,
                        template_mse: s.template_mse,
                        final_loss,
                        wall_clock_s,
                        error,
                    }
                }
                Err(e) => CellResult {
                    cell: cell.clone(),
                    precision_at_20: f64::NAN,
                    success_auc: f64::NAN,
                    clean_precision_at_20: f64::NAN,
                    clean_success_auc: f64::NAN,
                    mean_exit_layer: f64::NAN,
                    mean_flops: f64::NAN,
                    template_mse: f64::NAN,
                    final_loss: f64::NAN,
                    wall_clock_s,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    Ok(results)
}

pub fn write_grid_csv<W: Write>(w: W, rows: &[CellResult]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "name",
        "mbrv",
        "deem",
        "rho",
        "gamma",
        "tau",
        "n_enf",
        "seed",
        "prec20",
        "succ_auc",
        "clean_prec20",
        "clean_succ_auc",
        "mean_L_e",
        "mean_flops",
        "template_mse",
        "final_loss",
        "wall_clock_s",
        "error",
    ])?;
    let opt = |v: Option<String>| v.unwrap_or_default();
    for r in rows {
        let c = &r.cell;
        out.write_record([
            c.name.clone(),
            c.mbrv.to_string(),
            c.deem.to_string(),
            opt(c.rho.map(|v| v.to_string())),
            opt(c.gamma.map(|v| v.to_string())),
            opt(c.tau.map(|v| v.to_string())),
            opt(c.n_enf.map(|v| v.to_string())),
            c.seed.to_string(),
            r.precision_at_20.to_string(),
            r.success_auc.to_string(),
            r.clean_precision_at_20.to_string(),
            r.clean_success_auc.to_string(),
            r.mean_exit_layer.to_string(),
            r.mean_flops.to_string(),
            r.template_mse.to_string(),
            r.final_loss.to_string(),
            format!("{:.3}", r.wall_clock_s),
            opt(r.error.clone()),
        ])?;
    }
    out.flush()?;
    Ok(())
}
