use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use exitrack::harness::{
    ablation_grid, bench, evaluate, load_dataset, load_sequence_dir, read_groundtruth, read_predictions,
    save_curve_png, write_grid_csv, write_predictions, write_sequence_dir, DataSpec, GridSpec, MetricReport,
};
use exitrack::pipeline::{track_sequence, ExitMode, LossLog, Trainer};
use exitrack::{Model, RunConfig};

#[derive(Parser)]
#[command(name = "exitrack", version, about = "Early-exit ViT tracker: data, training, tracking, evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render synthetic train and matched clean/blurred test sequences.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes model.ckpt, periodic checkpoints and loss.csv.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Dataset root; its `train/` subdirectory is used when present.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Track one sequence directory, writing `frame_idx,cx,cy,w,h` lines.
    Track {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        seq: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Run every block instead of exiting early.
        #[arg(long)]
        full_depth: bool,
        /// Per-frame exit layer and multiply-accumulate count as CSV.
        #[arg(long)]
        diag: Option<PathBuf>,
    },
    /// Score predictions against a ground-truth file.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Diagnostics written by `track --diag`, for mean exit layer and FLOPs.
        #[arg(long)]
        diag: Option<PathBuf>,
        /// Directory for precision.png and success.png.
        #[arg(long)]
        curves: Option<PathBuf>,
    },
    /// Time dynamic exit against forced full depth; prints a summary CSV.
    Bench {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        seq: PathBuf,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        /// Per-frame timings, exit layers and gate scores as CSV.
        #[arg(long)]
        frames: Option<PathBuf>,
    },
    /// Train and score every cell of an ablation grid; writes grid.csv.
    Grid {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenData { spec, out } => gen_data(&spec, &out),
        Command::Train { config, data, out } => train(&config, &data, &out),
        Command::Track {
            ckpt,
            seq,
            out,
            full_depth,
            diag,
        } => track(&ckpt, &seq, &out, full_depth, diag.as_deref()),
        Command::Eval {
            pred,
            gt,
            report,
            diag,
            curves,
        } => eval(&pred, &gt, &report, diag.as_deref(), curves.as_deref()),
        Command::Bench {
            ckpt,
            seq,
            repeats,
            frames,
        } => run_bench(&ckpt, &seq, repeats, frames.as_deref()),
        Command::Grid { spec, out } => grid(&spec, &out),
    }
}

fn gen_data(spec: &Path, out: &Path) -> Result<()> {
    let text = fs::read_to_string(spec).with_context(|| format!("reading {}", spec.display()))?;
    let spec: DataSpec = toml::from_str(&text).with_context(|| format!("parsing {}", spec.display()))?;
    let data = spec.generate()?;
    let groups = [("train", &data.train), ("test/clean", &data.test_clean), ("test/blurred", &data.test_blurred)];
    for (dir, seqs) in groups {
        for seq in seqs.iter() {
            write_sequence_dir(out.join(dir).join(&seq.name), seq)?;
        }
    }
    eprintln!(
        "wrote {} train and {} matched test sequences to {}",
        data.train.len(),
        data.test_clean.len(),
        out.display()
    );
    Ok(())
}

fn train(config: &Path, data: &Path, out: &Path) -> Result<()> {
    let run = RunConfig::load(config).with_context(|| format!("loading {}", config.display()))?;
    let root = if data.join("train").is_dir() { data.join("train") } else { data.to_owned() };
    let seqs = load_dataset(&root)?;
    fs::create_dir_all(out)?;
    let mut log = LossLog::new(BufWriter::new(File::create(out.join("loss.csv"))?))?;
    let mut trainer = Trainer::new(&run)?;
    let every = run.train.checkpoint_every;
    trainer.fit(&seqs, |t, r| {
        log.record(r)?;
        if every > 0 && r.step % every == 0 {
            t.model.save(out.join(format!("step_{:06}.ckpt", r.step)))?;
        }
        if r.step % 50 == 0 || r.step == run.train.steps {
            eprintln!("step {:>6}  loss {:.4}  mean exit {:.2}", r.step, r.overall, r.mean_exit_layer);
        }
        Ok(())
    })?;
    drop(log);
    trainer.model.save(out.join("model.ckpt"))?;
    Ok(())
}

fn track(ckpt: &Path, seq: &Path, out: &Path, full_depth: bool, diag: Option<&Path>) -> Result<()> {
    let model = Model::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let seq = load_sequence_dir(seq)?;
    let mode = if full_depth { ExitMode::FullDepth } else { ExitMode::Dynamic };
    let run = track_sequence(&model, &seq.frames, &seq.boxes[0], mode)?;
    write_predictions(out, &run.boxes)?;
    if let Some(path) = diag {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "frame_idx,L_e,macs")?;
        for (i, d) in run.diags.iter().enumerate() {
            writeln!(w, "{},{},{}", i + 1, d.exit_layer, d.macs)?;
        }
        w.flush()?;
    }
    Ok(())
}

/// Mean of the `L_e` and `macs` columns of a `track --diag` file.
fn read_diag_means(path: &Path) -> Result<(f64, f64)> {
    let text = fs::read_to_string(path)?;
    let (mut exits, mut macs, mut n) = (0.0, 0.0, 0.0);
    for (i, line) in text.lines().enumerate().skip(1).filter(|(_, l)| !l.trim().is_empty()) {
        let v: Vec<f64> = line
            .split(',')
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .with_context(|| format!("{}:{}: malformed diagnostics line", path.display(), i + 1))?;
        if v.len() != 3 {
            bail!("{}:{}: expected 3 fields", path.display(), i + 1);
        }
        exits += v[1];
        macs += v[2];
        n += 1.0;
    }
    if n == 0.0 {
        bail!("{} has no diagnostics rows", path.display());
    }
    Ok((exits / n, macs / n))
}

fn eval(pred: &Path, gt: &Path, report: &Path, diag: Option<&Path>, curves: Option<&Path>) -> Result<()> {
    let pred = read_predictions(pred)?;
    let gt = read_groundtruth(gt)?;
    let mut r: MetricReport = evaluate(&pred, &gt)?;
    if let Some(path) = diag {
        let (exit, flops) = read_diag_means(path)?;
        r.mean_exit_layer = Some(exit);
        r.mean_flops = Some(flops);
    }
    r.write_csv(File::create(report)?)?;
    if let Some(dir) = curves {
        fs::create_dir_all(dir)?;
        save_curve_png(dir.join("precision.png"), &r.precision_curve)?;
        save_curve_png(dir.join("success.png"), &r.success_curve)?;
    }
    println!("precision@20 {:.4}  success AUC {:.4}", r.precision_at_20, r.success_auc);
    Ok(())
}

fn run_bench(ckpt: &Path, seq: &Path, repeats: usize, frames: Option<&Path>) -> Result<()> {
    let model = Model::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let seq = load_sequence_dir(seq)?;
    let report = bench(&model, &seq, repeats)?;
    if let Some(path) = frames {
        report.write_frames_csv(File::create(path)?, model.cfg.depth, model.cfg.enforced_blocks)?;
    }
    report.write_summary_csv(io::stdout().lock())?;
    Ok(())
}

fn grid(spec: &Path, out: &Path) -> Result<()> {
    let spec = GridSpec::load(spec).with_context(|| format!("loading {}", spec.display()))?;
    let rows = ablation_grid(&spec, Some(out))?;
    write_grid_csv(File::create(out.join("grid.csv"))?, &rows)?;
    for r in rows.iter().filter(|r| r.error.is_some()) {
        eprintln!("cell {} failed: {}", r.cell.name, r.error.as_deref().unwrap_or_default());
    }
    Ok(())
}
