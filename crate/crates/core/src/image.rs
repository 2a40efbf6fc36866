//! Planar images with values in `[0, 1]`, square crops with bilinear resize,
//! and PNG I/O.

use std::path::Path;

use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Channel-first image.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::InvalidArgument("image extents must be positive".into()));
        }
        if data.len() != channels * height * width {
            return Err(Error::shape(
                "image",
                format!("{channels}x{height}x{width} needs {} values, got {}", channels * height * width, data.len()),
            ));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Self::new(channels, height, width, vec![value; channels * height * width])
            .expect("positive extents")
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn channel_means(&self) -> Vec<f64> {
        let n = (self.height * self.width) as f64;
        (0..self.channels)
            .map(|c| self.plane(c).iter().sum::<f64>() / n)
            .collect()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.channels, self.height, self.width], self.data.clone())
            .expect("image extents are valid")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.rank() != 3 {
            return Err(Error::shape("image", format!("expected [C,H,W], got {:?}", t.shape())));
        }
        let s = t.shape();
        Self::new(s[0], s[1], s[2], t.data().to_vec())
    }

    pub fn clamp01(&mut self) {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let rgb = image::open(path)?.to_rgb8();
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        let mut img = Image::filled(3, h, w, 0.0);
        for (x, y, px) in rgb.enumerate_pixels() {
            for c in 0..3 {
                img.set(c, y as usize, x as usize, px[c] as f64 / 255.0);
            }
        }
        Ok(img)
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = image::RgbImage::new(self.width as u32, self.height as u32);
        for (x, y, px) in buf.enumerate_pixels_mut() {
            for c in 0..3 {
                let src = if self.channels == 3 { c } else { 0 };
                let v = self.get(src, y as usize, x as usize);
                px[c] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
        buf.save(path)?;
        Ok(())
    }
}

/// A square region of a frame mapped onto an `out_side x out_side` crop.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropWindow {
    pub x0: f64,
    pub y0: f64,
    pub side: f64,
    pub out_side: usize,
}

impl CropWindow {
    /// Window of side `context * sqrt(w * h)` centered on `b`.
    pub fn around(b: &BBox, context: f64, out_side: usize) -> Result<Self> {
        if !(b.w > 0.0 && b.h > 0.0) {
            return Err(Error::InvalidArgument(format!("degenerate box {b:?}")));
        }
        let side = context * (b.w * b.h).sqrt();
        Ok(Self {
            x0: b.cx - side / 2.0,
            y0: b.cy - side / 2.0,
            side,
            out_side,
        })
    }

    /// Maps a box in normalized crop coordinates to frame pixels.
    pub fn to_frame(&self, b: &BBox) -> BBox {
        BBox::new(
            self.x0 + b.cx * self.side,
            self.y0 + b.cy * self.side,
            b.w * self.side,
            b.h * self.side,
        )
    }

    /// Maps a box in frame pixels to normalized crop coordinates.
    pub fn to_crop(&self, b: &BBox) -> BBox {
        BBox::new(
            (b.cx - self.x0) / self.side,
            (b.cy - self.y0) / self.side,
            b.w / self.side,
            b.h / self.side,
        )
    }

    /// Bilinear resample of the window; samples outside the frame take the
    /// frame's per-channel mean.
    pub fn extract(&self, frame: &Image) -> Image {
        let pad = frame.channel_means();
        let n = self.out_side;
        let scale = self.side / n as f64;
        let mut out = Image::filled(frame.channels(), n, n, 0.0);
        let (fw, fh) = (frame.width() as isize, frame.height() as isize);
        for i in 0..n {
            let sy = self.y0 + (i as f64 + 0.5) * scale - 0.5;
            let y0 = sy.floor();
            let fy = sy - y0;
            let y0 = y0 as isize;
            for j in 0..n {
                let sx = self.x0 + (j as f64 + 0.5) * scale - 0.5;
                let x0 = sx.floor();
                let fx = sx - x0;
                let x0 = x0 as isize;
                for c in 0..frame.channels() {
                    let fetch = |y: isize, x: isize| {
                        if y >= 0 && y < fh && x >= 0 && x < fw {
                            frame.get(c, y as usize, x as usize)
                        } else {
                            pad[c]
                        }
                    };
                    let top = fetch(y0, x0) * (1.0 - fx) + fetch(y0, x0 + 1) * fx;
                    let bottom = fetch(y0 + 1, x0) * (1.0 - fx) + fetch(y0 + 1, x0 + 1) * fx;
                    out.set(c, i, j, top * (1.0 - fy) + bottom * fy);
                }
            }
        }
        out
    }
}
