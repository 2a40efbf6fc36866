use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::blur::{apply_blur, sample_blur, AngleLaw, BlurKernel, BlurPolicy};
use crate::error::{Error, Result};
use crate::image::Image;

use super::Sequence;

const RENDER_STREAM: u64 = 0;
const BLUR_STREAM: u64 = 1;
const SUPERSAMPLE: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectKind {
    TexturedRect,
    Disc,
}

/// Generation parameters of one synthetic sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SequenceSpec {
    pub frame_width: usize,
    pub frame_height: usize,
    pub length: usize,
    pub object: ObjectKind,
    /// Range of the initial object sides, in pixels.
    pub min_side: f64,
    pub max_side: f64,
    /// Fixed initial center; drawn uniformly when absent.
    pub start_center: Option<[f64; 2]>,
    /// Fixed initial `[w, h]`; drawn from the side range when absent.
    pub start_size: Option<[f64; 2]>,
    /// Fixed velocity in px/frame; drawn from `max_speed` when absent.
    pub velocity: Option<[f64; 2]>,
    pub max_speed: f64,
    /// Fixed per-frame relative size change; drawn from `max_size_rate`
    /// when absent.
    pub size_rate: Option<[f64; 2]>,
    pub max_size_rate: f64,
    /// Probability that a frame is motion-blurred.
    pub blur_prob: f64,
    pub blur_lengths: Vec<usize>,
    pub distractors: usize,
    /// Per-pixel noise amplitude, redrawn every frame.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SequenceSpec {
    fn default() -> Self {
        Self {
            frame_width: 128,
            frame_height: 128,
            length: 40,
            object: ObjectKind::TexturedRect,
            min_side: 10.0,
            max_side: 30.0,
            start_center: None,
            start_size: None,
            velocity: None,
            max_speed: 3.0,
            size_rate: None,
            max_size_rate: 0.01,
            blur_prob: 0.0,
            blur_lengths: vec![3, 5, 7],
            distractors: 0,
            noise: 0.02,
            seed: 0,
        }
    }
}

impl SequenceSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.length == 0 || self.frame_width == 0 || self.frame_height == 0 {
            return bad("sequence length and frame size must be positive".into());
        }
        if !(self.min_side > 0.0 && self.min_side <= self.max_side) {
            return bad(format!("need 0 < min_side <= max_side, got {} and {}", self.min_side, self.max_side));
        }
        if self.max_side > self.frame_width.min(self.frame_height) as f64 {
            return bad(format!(
                "object side up to {} does not fit a {}x{} frame",
                self.max_side, self.frame_width, self.frame_height
            ));
        }
        if !(0.0..=1.0).contains(&self.blur_prob) {
            return bad(format!("blur_prob {} not in [0, 1]", self.blur_prob));
        }
        if self.blur_prob > 0.0 && (self.blur_lengths.is_empty() || self.blur_lengths.iter().any(|l| l % 2 == 0)) {
            return bad(format!("blur_lengths must be nonempty and odd, got {:?}", self.blur_lengths));
        }
        Ok(())
    }
}

/// Velocity and relative size change per frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MotionLaw {
    pub velocity: [f64; 2],
    pub size_rate: [f64; 2],
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSequence {
    pub frames: Vec<Image>,
    pub gt_boxes: Vec<BBox>,
    pub blur_schedule: Vec<Option<BlurKernel>>,
    pub motion: MotionLaw,
    pub seed: u64,
}

impl SyntheticSequence {
    pub fn into_sequence(self, name: impl Into<String>) -> Sequence {
        Sequence {
            name: name.into(),
            frames: self.frames,
            boxes: self.gt_boxes,
        }
    }
}

#[derive(Clone, Debug)]
struct Appearance {
    kind: ObjectKind,
    color: [f64; 3],
    accent: [f64; 3],
    freq: f64,
    phase: f64,
}

impl Appearance {
    fn draw<R: Rng>(kind: ObjectKind, rng: &mut R) -> Self {
        let bright = |rng: &mut R| {
            let mut c = [rng.gen_range(0.0..0.35), rng.gen_range(0.0..0.35), rng.gen_range(0.0..0.35)];
            c[rng.gen_range(0..3)] = rng.gen_range(0.75..1.0);
            c
        };
        let color = bright(rng);
        let accent = color.map(|v: f64| (v * 0.55).clamp(0.0, 1.0));
        Self {
            kind,
            color,
            accent,
            freq: rng.gen_range(1.5..3.5),
            phase: rng.gen_range(0.0..2.0 * PI),
        }
    }

    /// Color at object-relative coordinates `(u, v)` in `[0,1]^2`, or `None`
    /// outside the shape.
    fn sample(&self, u: f64, v: f64) -> Option<[f64; 3]> {
        if !(0.0..1.0).contains(&u) || !(0.0..1.0).contains(&v) {
            return None;
        }
        if self.kind == ObjectKind::Disc && (u - 0.5).powi(2) + (v - 0.5).powi(2) > 0.25 {
            return None;
        }
        let stripe = (2.0 * PI * self.freq * (u + v) + self.phase).sin() > 0.0;
        Some(if stripe { self.color } else { self.accent })
    }
}

#[derive(Clone, Debug)]
struct Actor {
    look: Appearance,
    b: BBox,
    motion: MotionLaw,
}

impl Actor {
    fn advance(&mut self, spec: &SequenceSpec) {
        let (fw, fh) = (spec.frame_width as f64, spec.frame_height as f64);
        for axis in 0..2 {
            let r = self.motion.size_rate[axis];
            let side = if axis == 0 { &mut self.b.w } else { &mut self.b.h };
            let next = *side * (1.0 + r);
            if next < spec.min_side || next > spec.max_side {
                self.motion.size_rate[axis] = -r;
            } else {
                *side = next;
            }
        }
        let limits = [(self.b.w / 2.0, fw - self.b.w / 2.0), (self.b.h / 2.0, fh - self.b.h / 2.0)];
        for (axis, (lo, hi)) in limits.into_iter().enumerate() {
            let c = if axis == 0 { &mut self.b.cx } else { &mut self.b.cy };
            let mut next = *c + self.motion.velocity[axis];
            if next < lo {
                next = 2.0 * lo - next;
                self.motion.velocity[axis] = -self.motion.velocity[axis];
            } else if next > hi {
                next = 2.0 * hi - next;
                self.motion.velocity[axis] = -self.motion.velocity[axis];
            }
            *c = next.clamp(lo, hi);
        }
    }
}

fn draw_actor<R: Rng>(spec: &SequenceSpec, rng: &mut R) -> Actor {
    let w = rng.gen_range(spec.min_side..=spec.max_side);
    let h = rng.gen_range(spec.min_side..=spec.max_side);
    let (fw, fh) = (spec.frame_width as f64, spec.frame_height as f64);
    let cx = rng.gen_range(w / 2.0..=fw - w / 2.0);
    let cy = rng.gen_range(h / 2.0..=fh - h / 2.0);
    let angle = rng.gen_range(0.0..2.0 * PI);
    let speed = rng.gen_range(0.0..=spec.max_speed);
    let rate = |rng: &mut R| rng.gen_range(-spec.max_size_rate..=spec.max_size_rate);
    Actor {
        look: Appearance::draw(spec.object, rng),
        b: BBox::new(cx, cy, w, h),
        motion: MotionLaw {
            velocity: [speed * angle.cos(), speed * angle.sin()],
            size_rate: [rate(rng), rate(rng)],
        },
    }
}

/// Smooth background: a gray level plus a few low-frequency waves per
/// channel.
fn background<R: Rng>(spec: &SequenceSpec, rng: &mut R) -> Image {
    let (w, h) = (spec.frame_width, spec.frame_height);
    let mut img = Image::filled(3, h, w, 0.0);
    let base = rng.gen_range(0.3..0.6);
    for c in 0..3 {
        let waves: Vec<(f64, f64, f64, f64)> = (0..3)
            .map(|_| {
                (
                    rng.gen_range(0.03..0.08),
                    rng.gen_range(0.5..3.0) / w as f64,
                    rng.gen_range(0.5..3.0) / h as f64,
                    rng.gen_range(0.0..2.0 * PI),
                )
            })
            .collect();
        for y in 0..h {
            for x in 0..w {
                let v: f64 = waves
                    .iter()
                    .map(|(a, fx, fy, p)| a * (2.0 * PI * (fx * x as f64 + fy * y as f64) + p).sin())
                    .sum();
                img.set(c, y, x, base + v);
            }
        }
    }
    img
}

fn paint(img: &mut Image, actor: &Actor) {
    let (x0, y0, x1, y1) = actor.b.corners();
    let xs = (x0.floor().max(0.0) as usize)..(x1.ceil().min(img.width() as f64) as usize);
    let ys = (y0.floor().max(0.0) as usize)..(y1.ceil().min(img.height() as f64) as usize);
    let n = SUPERSAMPLE as f64;
    for y in ys {
        for x in xs.clone() {
            let mut acc = [0.0; 3];
            let mut hits = 0.0;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let px = x as f64 + (sx as f64 + 0.5) / n;
                    let py = y as f64 + (sy as f64 + 0.5) / n;
                    if let Some(col) = actor.look.sample((px - x0) / actor.b.w, (py - y0) / actor.b.h) {
                        (0..3).for_each(|c| acc[c] += col[c]);
                        hits += 1.0;
                    }
                }
            }
            if hits > 0.0 {
                let cover = hits / (n * n);
                for c in 0..3 {
                    let under = img.get(c, y, x);
                    img.set(c, y, x, under * (1.0 - cover) + acc[c] / (n * n));
                }
            }
        }
    }
}

/// Renders a sequence. Scene content and the blur schedule come from two
/// independent streams of `spec.seed`, so changing `blur_prob` leaves the
/// unblurred frames unchanged.
pub fn generate_sequence(spec: &SequenceSpec) -> Result<SyntheticSequence> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(RENDER_STREAM);
    let bg = background(spec, &mut rng);
    let mut target = draw_actor(spec, &mut rng);
    if let Some([w, h]) = spec.start_size {
        target.b.w = w;
        target.b.h = h;
    }
    if let Some([cx, cy]) = spec.start_center {
        target.b.cx = cx;
        target.b.cy = cy;
    }
    let (fw, fh) = (spec.frame_width as f64, spec.frame_height as f64);
    let b = target.b;
    if b.w > fw || b.h > fh || b.cx - b.w / 2.0 < 0.0 || b.cy - b.h / 2.0 < 0.0 || b.cx + b.w / 2.0 > fw || b.cy + b.h / 2.0 > fh {
        return Err(Error::Config(format!("initial object {b:?} does not fit the {fw}x{fh} frame")));
    }
    if let Some(v) = spec.velocity {
        target.motion.velocity = v;
    }
    if let Some(r) = spec.size_rate {
        target.motion.size_rate = r;
    }
    let initial_motion = target.motion;
    let mut distractors: Vec<Actor> = (0..spec.distractors).map(|_| draw_actor(spec, &mut rng)).collect();

    let mut blur_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    blur_rng.set_stream(BLUR_STREAM);
    let policy = BlurPolicy {
        lengths: spec.blur_lengths.clone(),
        angle: AngleLaw::Uniform,
    };

    let mut frames = Vec::with_capacity(spec.length);
    let mut gt_boxes = Vec::with_capacity(spec.length);
    let mut blur_schedule = Vec::with_capacity(spec.length);
    for t in 0..spec.length {
        if t > 0 {
            target.advance(spec);
            distractors.iter_mut().for_each(|d| d.advance(spec));
        }
        let mut img = bg.clone();
        for d in &distractors {
            paint(&mut img, d);
        }
        paint(&mut img, &target);
        for v in img.data_mut() {
            *v += spec.noise * rng.gen_range(-1.0..=1.0);
        }
        img.clamp01();
        let kernel = if spec.blur_prob > 0.0 && blur_rng.gen::<f64>() < spec.blur_prob {
            Some(sample_blur(&mut blur_rng, &policy)?)
        } else {
            None
        };
        if let Some(k) = &kernel {
            img = apply_blur(&img, k);
        }
        frames.push(img);
        gt_boxes.push(target.b);
        blur_schedule.push(kernel);
    }
    Ok(SyntheticSequence {
        frames,
        gt_boxes,
        blur_schedule,
        motion: initial_motion,
        seed: spec.seed,
    })
}
