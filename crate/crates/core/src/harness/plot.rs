use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::Result;

const WIDTH: u32 = 320;
const HEIGHT: u32 = 240;
const MARGIN: u32 = 24;

fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: Rgb<u8>) {
    let steps = (x1 - x0).abs().max((y1 - y0).abs()).max(1);
    for i in 0..=steps {
        let x = x0 + (x1 - x0) * i / steps;
        let y = y0 + (y1 - y0) * i / steps;
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
    }
}

/// Draws `values` (each in `[0, 1]`) against evenly spaced abscissae, with
/// axes and a 0.25 grid, and saves a PNG.
pub fn save_curve_png(path: impl AsRef<Path>, values: &[f64]) -> Result<()> {
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255]));
    let (x0, y0) = (MARGIN as i64, (HEIGHT - MARGIN) as i64);
    let (pw, ph) = ((WIDTH - 2 * MARGIN) as i64, (HEIGHT - 2 * MARGIN) as i64);
    for k in 1..=4 {
        let y = y0 - ph * k / 4;
        line(&mut img, (x0, y), (x0 + pw, y), Rgb([225, 225, 225]));
    }
    line(&mut img, (x0, y0), (x0 + pw, y0), Rgb([0, 0, 0]));
    line(&mut img, (x0, y0), (x0, y0 - ph), Rgb([0, 0, 0]));
    let n = values.len().max(2) as i64 - 1;
    let point = |i: usize| {
        let v = values[i].clamp(0.0, 1.0);
        (x0 + pw * i as i64 / n, y0 - (v * ph as f64).round() as i64)
    };
    for i in 1..values.len() {
        line(&mut img, point(i - 1), point(i), Rgb([200, 30, 30]));
    }
    img.save(path)?;
    Ok(())
}
