use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::image::Image;

use super::Sequence;

pub const GROUNDTRUTH_FILE: &str = "groundtruth.txt";

fn parse_fields(path: &Path, line_no: usize, line: &str, expect: usize) -> Result<Vec<f64>> {
    let fields: Vec<&str> = line
        .split(|c: char| c == ',' || c == '\t' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .collect();
    if fields.len() != expect {
        return Err(Error::Parse {
            path: path.to_owned(),
            line: line_no,
            detail: format!("expected {expect} fields, found {}", fields.len()),
        });
    }
    fields
        .iter()
        .map(|f| {
            f.parse::<f64>().map_err(|e| Error::Parse {
                path: path.to_owned(),
                line: line_no,
                detail: format!("{f:?}: {e}"),
            })
        })
        .collect()
}

/// Parses `x,y,w,h` lines (top-left corner); commas, tabs or spaces
/// separate fields.
pub fn read_groundtruth(path: impl AsRef<Path>) -> Result<Vec<BBox>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let v = parse_fields(path, i + 1, l, 4)?;
            Ok(BBox::from_top_left(v[0], v[1], v[2], v[3]))
        })
        .collect()
}

pub fn write_groundtruth(path: impl AsRef<Path>, boxes: &[BBox]) -> Result<()> {
    let mut out = fs::File::create(path)?;
    for b in boxes {
        let (x, y, w, h) = b.to_top_left();
        writeln!(out, "{x},{y},{w},{h}")?;
    }
    Ok(())
}

/// Writes `frame_idx,cx,cy,w,h` per frame, centers in frame pixels.
pub fn write_predictions(path: impl AsRef<Path>, boxes: &[BBox]) -> Result<()> {
    let mut out = fs::File::create(path)?;
    for (i, b) in boxes.iter().enumerate() {
        writeln!(out, "{i},{},{},{},{}", b.cx, b.cy, b.w, b.h)?;
    }
    Ok(())
}

/// Reads the output of [`write_predictions`]; frame indices must run
/// `0, 1, 2, ...`.
pub fn read_predictions(path: impl AsRef<Path>) -> Result<Vec<BBox>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let mut boxes = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let v = parse_fields(path, i + 1, line, 5)?;
        if v[0] != boxes.len() as f64 {
            return Err(Error::Parse {
                path: path.to_owned(),
                line: i + 1,
                detail: format!("frame index {} out of order, expected {}", v[0], boxes.len()),
            });
        }
        boxes.push(BBox::new(v[1], v[2], v[3], v[4]));
    }
    Ok(boxes)
}

fn frame_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        })
        .collect();
    paths.sort();
    Ok(paths)
}

/// Loads numbered image files plus `groundtruth.txt`, one line per frame.
pub fn load_sequence_dir(dir: impl AsRef<Path>) -> Result<Sequence> {
    let dir = dir.as_ref();
    let paths = frame_paths(dir)?;
    if paths.is_empty() {
        return Err(Error::InvalidArgument(format!("no frames in {}", dir.display())));
    }
    let gt_path = dir.join(GROUNDTRUTH_FILE);
    let boxes = read_groundtruth(&gt_path)?;
    if boxes.len() < paths.len() {
        return Err(Error::Parse {
            path: gt_path,
            line: boxes.len() + 1,
            detail: format!("missing ground truth for frame {} of {}", boxes.len() + 1, paths.len()),
        });
    }
    let frames = paths.iter().map(Image::load_png).collect::<Result<Vec<_>>>()?;
    Ok(Sequence {
        name: dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        frames,
        boxes: boxes[..paths.len()].to_vec(),
    })
}

pub fn write_sequence_dir(dir: impl AsRef<Path>, seq: &Sequence) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    for (i, f) in seq.frames.iter().enumerate() {
        f.save_png(dir.join(format!("{:08}.png", i + 1)))?;
    }
    write_groundtruth(dir.join(GROUNDTRUTH_FILE), &seq.boxes)
}

/// Every subdirectory of `root` that holds a ground-truth file, sorted by
/// name; `root` itself if it is a sequence.
pub fn load_dataset(root: impl AsRef<Path>) -> Result<Vec<Sequence>> {
    let root = root.as_ref();
    if root.join(GROUNDTRUTH_FILE).is_file() {
        return Ok(vec![load_sequence_dir(root)?]);
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(GROUNDTRUTH_FILE).is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::InvalidArgument(format!("no sequences under {}", root.display())));
    }
    dirs.iter().map(load_sequence_dir).collect()
}
