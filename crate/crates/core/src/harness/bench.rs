use std::io::Write;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::pipeline::{flops_estimate, track_frame, track_init, ExitMode, TrackDiag};

use super::Sequence;

/// One tracked frame under dynamic exit, with timings of both modes.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchFrame {
    pub frame: usize,
    pub exit_layer: usize,
    /// Scores of the examined gates, from the first examined block on.
    pub scores: Vec<f64>,
    pub flops_estimate: u64,
    pub macs: u64,
    /// Median over repeats, seconds.
    pub latency_dynamic: f64,
    pub latency_full: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub frames: Vec<BenchFrame>,
    pub mean_latency_dynamic: f64,
    pub mean_latency_full: f64,
    /// Full-depth latency over dynamic latency.
    pub speedup: f64,
    pub mean_flops_dynamic: f64,
    pub mean_flops_full: f64,
    pub mean_blocks_dynamic: f64,
    pub mean_blocks_full: f64,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

struct Pass {
    times: Vec<f64>,
    diags: Vec<TrackDiag>,
}

fn timed_pass(model: &Model, seq: &Sequence, mode: ExitMode) -> Result<Pass> {
    let mut state = track_init(&model.cfg, &seq.frames[0], &seq.boxes[0])?;
    let mut pass = Pass {
        times: Vec::new(),
        diags: Vec::new(),
    };
    for frame in &seq.frames[1..] {
        let start = Instant::now();
        let (_, d) = track_frame(&mut state, frame, model, mode)?;
        pass.times.push(start.elapsed().as_secs_f64());
        pass.diags.push(d);
    }
    Ok(pass)
}

/// Tracks `seq` `repeats` times under dynamic exit and under forced full
/// depth; per-frame latencies are medians over repeats.
pub fn bench(model: &Model, seq: &Sequence, repeats: usize) -> Result<BenchReport> {
    if repeats == 0 || seq.len() < 2 {
        return Err(Error::InvalidArgument("bench needs repeats >= 1 and at least two frames".into()));
    }
    let mut dynamic = Vec::new();
    let mut full = Vec::new();
    for _ in 0..repeats {
        dynamic.push(timed_pass(model, seq, ExitMode::Dynamic)?);
        full.push(timed_pass(model, seq, ExitMode::FullDepth)?);
    }
    let n = seq.len() - 1;
    let med = |passes: &[Pass], i: usize| median(&mut passes.iter().map(|p| p.times[i]).collect::<Vec<_>>());
    let mut frames = Vec::with_capacity(n);
    for i in 0..n {
        let d = &dynamic[0].diags[i];
        frames.push(BenchFrame {
            frame: i + 1,
            exit_layer: d.exit_layer,
            scores: d.trace.scores.clone(),
            flops_estimate: flops_estimate(&model.cfg, d.exit_layer)?,
            macs: d.macs,
            latency_dynamic: med(&dynamic, i),
            latency_full: med(&full, i),
        });
    }
    let mean = |f: &dyn Fn(&BenchFrame) -> f64| frames.iter().map(f).sum::<f64>() / n as f64;
    let mean_latency_dynamic = mean(&|f| f.latency_dynamic);
    let mean_latency_full = mean(&|f| f.latency_full);
    let full_macs = full[0].diags.iter().map(|d| d.macs as f64).sum::<f64>() / n as f64;
    Ok(BenchReport {
        mean_latency_dynamic,
        mean_latency_full,
        speedup: mean_latency_full / mean_latency_dynamic,
        mean_flops_dynamic: mean(&|f| f.macs as f64),
        mean_flops_full: full_macs,
        mean_blocks_dynamic: dynamic[0].diags.iter().map(|d| d.blocks_executed as f64).sum::<f64>() / n as f64,
        mean_blocks_full: full[0].diags.iter().map(|d| d.blocks_executed as f64).sum::<f64>() / n as f64,
        frames,
    })
}

impl BenchReport {
    /// One row per frame: `frame, L_e, flops, macs, latencies, score_<l>...`
    /// for every block that has a gate.
    pub fn write_frames_csv<W: Write>(&self, w: W, depth: usize, enforced: usize) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header: Vec<String> = ["frame", "L_e", "flops_estimate", "macs", "latency_dynamic_s", "latency_full_s"]
            .map(String::from)
            .to_vec();
        header.extend((enforced + 1..=depth).map(|l| format!("score_{l}")));
        out.write_record(&header)?;
        for f in &self.frames {
            let mut row = vec![
                f.frame.to_string(),
                f.exit_layer.to_string(),
                f.flops_estimate.to_string(),
                f.macs.to_string(),
                format!("{:.9}", f.latency_dynamic),
                format!("{:.9}", f.latency_full),
            ];
            row.extend((0..depth - enforced).map(|i| f.scores.get(i).map(|s| s.to_string()).unwrap_or_default()));
            out.write_record(&row)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn write_summary_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["metric", "dynamic", "full_depth"])?;
        let rows = [
            ("mean_latency_s", self.mean_latency_dynamic, self.mean_latency_full),
            ("mean_flops", self.mean_flops_dynamic, self.mean_flops_full),
            ("mean_blocks", self.mean_blocks_dynamic, self.mean_blocks_full),
        ];
        for (name, a, b) in rows {
            out.write_record([name.to_string(), a.to_string(), b.to_string()])?;
        }
        out.write_record(["speedup".to_string(), self.speedup.to_string(), "1".to_string()])?;
        out.flush()?;
        Ok(())
    }
}
