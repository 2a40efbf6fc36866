//! Linear motion blur and the template-feature blur-robustness loss.

use std::f64::consts::PI;
use std::io::Write;

use rand::Rng;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::numerics::{conv2d, Graph, Tensor, Var};

/// Normalized line-segment kernel, `length x length`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct BlurKernel {
    length: usize,
    angle: f64,
    weights: Vec<f64>,
}

impl BlurKernel {
    pub fn identity() -> Self {
        Self {
            length: 1,
            angle: 0.0,
            weights: vec![1.0],
        }
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn angle(&self) -> f64 {
        self.angle
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.weights[row * self.length + col]
    }

    pub fn is_identity(&self) -> bool {
        self.length == 1
    }
}

/// Integer points of the segment `(x0,y0) -> (x1,y1)` (Bresenham).
fn raster_line(x0: i64, y0: i64, x1: i64, y1: i64) -> Vec<(i64, i64)> {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = ((x1 - x0).signum(), (y1 - y0).signum());
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    let mut pts = Vec::new();
    loop {
        pts.push((x, y));
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
    pts
}

/// Line of `length` pixels through the kernel center at `angle` radians
/// (0 = horizontal, pi/2 = vertical), normalized to unit sum.
pub fn make_kernel(length: usize, angle: f64) -> Result<BlurKernel> {
    if length == 0 || length % 2 == 0 {
        return Err(Error::InvalidArgument(format!(
            "blur kernel length must be odd and positive, got {length}"
        )));
    }
    let angle = angle.rem_euclid(PI);
    if length == 1 {
        return Ok(BlurKernel {
            length,
            angle,
            ..BlurKernel::identity()
        });
    }
    let c = (length / 2) as f64;
    let (dx, dy) = (c * angle.cos(), c * angle.sin());
    // image rows grow downwards, so a positive angle goes up-right
    let end = |sign: f64| ((c + sign * dx).round() as i64, (c - sign * dy).round() as i64);
    let (x0, y0) = end(-1.0);
    let (x1, y1) = end(1.0);
    let mut weights = vec![0.0; length * length];
    for (x, y) in raster_line(x0, y0, x1, y1) {
        weights[y as usize * length + x as usize] = 1.0;
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    Ok(BlurKernel {
        length,
        angle,
        weights,
    })
}

/// Mirror index without repeating the edge sample.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// Channel-wise convolution with reflect padding.
pub fn apply_blur(img: &Image, k: &BlurKernel) -> Image {
    if k.is_identity() {
        return img.clone();
    }
    let n = k.length();
    let r = (n / 2) as isize;
    let (h, w) = (img.height(), img.width());
    let (ph, pw) = (h + n - 1, w + n - 1);
    let kernel = Tensor::new(&[1, 1, n, n], k.weights().to_vec()).expect("kernel shape");
    let mut out = Vec::with_capacity(img.data().len());
    for c in 0..img.channels() {
        let plane = img.plane(c);
        let mut padded = Vec::with_capacity(ph * pw);
        for y in 0..ph as isize {
            let sy = reflect(y - r, h);
            for x in 0..pw as isize {
                padded.push(plane[sy * w + reflect(x - r, w)]);
            }
        }
        let input = Tensor::new(&[1, ph, pw], padded).expect("padded shape");
        // the kernel is symmetric under 180-degree rotation, so correlation
        // and convolution coincide
        let blurred = conv2d(&input, &kernel, 1, 0).expect("valid blur geometry");
        out.extend_from_slice(blurred.data());
    }
    let mut result = Image::new(img.channels(), h, w, out).expect("same extents");
    result.clamp01();
    result
}

#[derive(Clone, Debug, PartialEq)]
pub enum AngleLaw {
    Fixed(f64),
    /// Uniform on `[0, pi)`.
    Uniform,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlurPolicy {
    pub lengths: Vec<usize>,
    pub angle: AngleLaw,
}

impl Default for BlurPolicy {
    fn default() -> Self {
        Self {
            lengths: vec![3, 5, 7],
            angle: AngleLaw::Uniform,
        }
    }
}

/// Draws a kernel with length uniform over `policy.lengths`.
pub fn sample_blur<R: Rng>(rng: &mut R, policy: &BlurPolicy) -> Result<BlurKernel> {
    if policy.lengths.is_empty() {
        return Err(Error::InvalidArgument("blur policy has no lengths".into()));
    }
    let length = policy.lengths[rng.gen_range(0..policy.lengths.len())];
    let angle = match policy.angle {
        AngleLaw::Fixed(a) => a,
        AngleLaw::Uniform => rng.gen_range(0.0..PI),
    };
    make_kernel(length, angle)
}

/// How the squared feature differences are reduced.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Reduction {
    /// Squared Frobenius norm.
    #[default]
    Sum,
    Mean,
}

/// Squared distance between clean and blurred template features.
pub fn blur_loss(g: &mut Graph, clean: Var, blurred: Var, reduction: Reduction) -> Result<Var> {
    if g.shape(clean) != g.shape(blurred) {
        return Err(Error::shape(
            "blur_loss",
            format!("{:?} vs {:?}", g.shape(clean), g.shape(blurred)),
        ));
    }
    let d = g.sub(clean, blurred)?;
    let sq = g.square(d);
    Ok(match reduction {
        Reduction::Sum => g.sum(sq),
        Reduction::Mean => g.mean(sq),
    })
}

/// Writes one `length,angle,row,col,weight` record per kernel entry.
pub fn write_kernel_csv<W: Write>(w: W, kernels: &[BlurKernel]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["length", "angle", "row", "col", "weight"])?;
    for k in kernels {
        for r in 0..k.length() {
            for c in 0..k.length() {
                out.write_record(&[
                    k.length().to_string(),
                    format!("{:.17}", k.angle()),
                    r.to_string(),
                    c.to_string(),
                    format!("{:.17}", k.at(r, c)),
                ])?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const T: f64 = 1.0 / 3.0;

    #[test]
    fn closed_form_kernels() {
        let k = make_kernel(3, 0.0).unwrap();
        assert_eq!(k.weights(), &[0.0, 0.0, 0.0, T, T, T, 0.0, 0.0, 0.0]);
        let k = make_kernel(3, PI / 2.0).unwrap();
        assert_eq!(k.weights(), &[0.0, T, 0.0, 0.0, T, 0.0, 0.0, T, 0.0]);
        for a in [0.0, 0.3, 2.0] {
            assert_eq!(make_kernel(1, a).unwrap().weights(), &[1.0]);
        }
        assert!(make_kernel(4, 0.0).is_err());
        assert!(make_kernel(0, 0.0).is_err());
    }

    #[test]
    fn diagonal_kernel_lies_on_line() {
        let k = make_kernel(5, PI / 4.0).unwrap();
        let nz: Vec<(usize, usize)> = (0..5)
            .flat_map(|r| (0..5).map(move |c| (r, c)))
            .filter(|&(r, c)| k.at(r, c) > 0.0)
            .collect();
        // half-length 2 along the diagonal rounds to one cell per axis
        assert_eq!(nz, vec![(1, 3), (2, 2), (3, 1)]);
        let k = make_kernel(7, PI / 4.0).unwrap();
        let nz = k.weights().iter().filter(|&&w| w > 0.0).count();
        assert_eq!(nz, 5);
        assert!(k.at(3, 3) > 0.0 && k.at(1, 5) > 0.0);
    }

    #[test]
    fn impulse_row_blur() {
        let mut img = Image::filled(1, 1, 5, 0.0);
        img.set(0, 0, 2, 1.0);
        let out = apply_blur(&img, &make_kernel(3, 0.0).unwrap());
        let expect = [0.0, T, T, T, 0.0];
        for (a, b) in out.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn identity_and_constant_images() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data = (0..3 * 9 * 7).map(|_| rng.gen::<f64>()).collect();
        let img = Image::new(3, 9, 7, data).unwrap();
        assert_eq!(apply_blur(&img, &make_kernel(1, 1.0).unwrap()), img);
        let flat = Image::filled(3, 9, 7, 0.37);
        for (l, a) in [(3, 0.2), (5, 1.0), (7, 2.9)] {
            let out = apply_blur(&flat, &make_kernel(l, a).unwrap());
            assert!(out.data().iter().all(|v| (v - 0.37).abs() < 1e-12));
        }
    }

    #[test]
    fn sampling_policy() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let fixed = BlurPolicy {
            lengths: vec![3],
            angle: AngleLaw::Fixed(0.0),
        };
        for _ in 0..10 {
            assert_eq!(sample_blur(&mut rng, &fixed).unwrap(), make_kernel(3, 0.0).unwrap());
        }
        let empty = BlurPolicy {
            lengths: vec![],
            angle: AngleLaw::Uniform,
        };
        assert!(sample_blur(&mut rng, &empty).is_err());

        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..20)
                .map(|_| sample_blur(&mut rng, &BlurPolicy::default()).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(9), draw(9));
    }

    #[test]
    fn length_frequencies_within_three_sigma() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let n = 10_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            let k = sample_blur(&mut rng, &BlurPolicy::default()).unwrap();
            counts[(k.length() - 3) / 2] += 1;
        }
        // binomial(n, 1/3): sigma = sqrt(n p (1-p))
        let sigma = (n as f64 * (1.0 / 3.0) * (2.0 / 3.0)).sqrt();
        for c in counts {
            assert!((c as f64 - n as f64 / 3.0).abs() <= 3.0 * sigma, "{counts:?}");
        }
    }

    #[test]
    fn blur_loss_examples() {
        let mut g = Graph::new();
        let a = g.constant(&Tensor::matrix(2, 3, vec![0.5, -1.0, 2.0, 0.0, 1.0, 3.0]).unwrap());
        let l = blur_loss(&mut g, a, a, Reduction::Sum).unwrap();
        assert_eq!(g.item(l), 0.0);
        let b = g.constant(&Tensor::matrix(2, 3, vec![0.5, -1.0, 2.0, 0.0, 3.0, 3.0]).unwrap());
        let l = blur_loss(&mut g, a, b, Reduction::Sum).unwrap();
        assert_eq!(g.item(l), 4.0);
        let l2 = blur_loss(&mut g, b, a, Reduction::Sum).unwrap();
        assert_eq!(g.item(l2), 4.0);
        let m = blur_loss(&mut g, a, b, Reduction::Mean).unwrap();
        assert!((g.item(m) - 4.0 / 6.0).abs() < 1e-15);
        let c = g.constant(&Tensor::zeros(&[3, 2]));
        assert!(blur_loss(&mut g, a, c, Reduction::Sum).is_err());

        let blurred = Tensor::matrix(2, 3, vec![0.1, 0.2, -0.3, 0.4, 0.0, 1.0]).unwrap();
        let clean = Tensor::matrix(2, 3, vec![1.1, -0.2, 0.3, 0.9, 0.5, -1.0]).unwrap();
        let mut g = Graph::new();
        let cv = g.leaf(&clean.clone().with_requires_grad(true));
        let bv = g.constant(&blurred);
        let l = blur_loss(&mut g, cv, bv, Reduction::Sum).unwrap();
        g.backward(l).unwrap();
        for ((gr, c), b) in g.grad(cv).unwrap().iter().zip(clean.data()).zip(blurred.data()) {
            assert!((gr - 2.0 * (c - b)).abs() < 1e-12);
        }
        let report = grad_check(
            |g, x| {
                let b = g.constant(&blurred);
                blur_loss(g, x, b, Reduction::Sum)
            },
            &clean,
            1e-6,
        )
        .unwrap();
        assert!(report.passed);
    }

    #[test]
    fn kernel_csv_dump() {
        let mut buf = Vec::new();
        write_kernel_csv(&mut buf, &[make_kernel(3, 0.0).unwrap()]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "length,angle,row,col,weight");
        assert_eq!(lines.len(), 10);
        assert!(lines[4].starts_with("3,0.0"));
    }
}
