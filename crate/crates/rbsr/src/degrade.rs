//! Forward degradation simulator: blur, subsample, add noise.
//!
//! `convolve2d` here is true convolution (kernel flipped), matching the
//! analytic model; the network engine's `conv2d` is cross-correlation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{RbsrError, Result};
use crate::imageio::ImageTensor;
use crate::resample::Boundary;

/// Odd-sized square convolution kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct BlurKernel {
    pub size: usize,
    /// Row-major size*size taps.
    pub taps: Vec<f64>,
}

impl BlurKernel {
    pub fn new(size: usize, taps: Vec<f64>) -> Result<Self> {
        if size % 2 == 0 || size == 0 {
            return Err(RbsrError::InvalidArg(format!(
                "kernel size must be odd, got {size}"
            )));
        }
        if taps.len() != size * size {
            return Err(RbsrError::InvalidArg(format!(
                "kernel needs {}x{}={} taps, got {}",
                size,
                size,
                size * size,
                taps.len()
            )));
        }
        Ok(Self { size, taps })
    }

    /// The identity kernel.
    pub fn delta() -> Self {
        Self {
            size: 1,
            taps: vec![1.0],
        }
    }

    pub fn sum(&self) -> f64 {
        self.taps.iter().sum()
    }

    /// Scale taps so they sum to 1.
    pub fn normalize(&mut self) -> Result<()> {
        let s = self.sum();
        if s.abs() < 1e-12 {
            return Err(RbsrError::InvalidArg("cannot normalize zero kernel".into()));
        }
        for t in &mut self.taps {
            *t /= s;
        }
        Ok(())
    }

    pub fn l2_norm(&self) -> f64 {
        self.taps.iter().map(|t| t * t).sum::<f64>().sqrt()
    }

    /// Parse the kernel text format: first token the size, then size^2
    /// whitespace-separated reals, row-major. '#' starts a comment line.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut tokens = text
            .lines()
            .filter(|l| !l.trim_start().starts_with('#'))
            .flat_map(|l| l.split_whitespace());
        let size: usize = tokens
            .next()
            .ok_or_else(|| RbsrError::InvalidArg("empty kernel file".into()))?
            .parse()
            .map_err(|_| RbsrError::InvalidArg("kernel size not an integer".into()))?;
        let taps: Vec<f64> = tokens
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| RbsrError::InvalidArg(format!("bad kernel tap '{t}'")))
            })
            .collect::<Result<_>>()?;
        Self::new(size, taps)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{}\n", self.size);
        for row in self.taps.chunks(self.size) {
            let line: Vec<String> = row.iter().map(|t| format!("{t:.12e}")).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubsamplePhase {
    /// Keep indices 0, s, 2s, ...
    TopLeft,
    /// Keep indices floor(s/2), floor(s/2)+s, ...
    Centered,
}

#[derive(Debug, Clone)]
pub struct DegradationParams {
    pub kernel: BlurKernel,
    pub scale: usize,
    /// Noise standard deviation in [0,1] intensity units.
    pub noise_sigma: f64,
    pub seed: u64,
    pub boundary: Boundary,
    pub phase: SubsamplePhase,
}

impl DegradationParams {
    pub fn new(kernel: BlurKernel, scale: usize) -> Self {
        Self {
            kernel,
            scale,
            noise_sigma: 0.0,
            seed: 0,
            boundary: Boundary::Reflect,
            phase: SubsamplePhase::Centered,
        }
    }
}

/// Gaussian kernel on the centered integer lattice, normalized to sum 1.
pub fn make_gaussian_kernel(sigma: f64, size: usize) -> Result<BlurKernel> {
    if sigma <= 0.0 {
        return Err(RbsrError::InvalidArg(format!("sigma must be > 0, got {sigma}")));
    }
    if size % 2 == 0 || size == 0 {
        return Err(RbsrError::InvalidArg(format!("kernel size must be odd, got {size}")));
    }
    let r = (size / 2) as i64;
    let mut taps = Vec::with_capacity(size * size);
    for dy in -r..=r {
        for dx in -r..=r {
            let d2 = (dx * dx + dy * dy) as f64;
            taps.push((-d2 / (2.0 * sigma * sigma)).exp());
        }
    }
    let mut k = BlurKernel::new(size, taps)?;
    k.normalize()?;
    Ok(k)
}

/// True 2-D convolution (kernel flipped), same-size output, per channel.
pub fn convolve2d(image: &ImageTensor, kernel: &BlurKernel, boundary: Boundary) -> ImageTensor {
    let (c, h, w) = (image.channels, image.height, image.width);
    let r = (kernel.size / 2) as i64;
    let mut out = ImageTensor::zeros(c, h, w);
    out.data
        .par_chunks_mut(w)
        .enumerate()
        .for_each(|(row, dst)| {
            let ci = row / h;
            let y = row % h;
            let src = image.plane(ci);
            for (x, d) in dst.iter_mut().enumerate() {
                let mut acc = 0.0f64;
                // out[y][x] = sum_{a,b} k[a][b] * src[y + r - a][x + r - b]
                for a in 0..kernel.size {
                    let sy = boundary.map(y as i64 + r - a as i64, h);
                    for b in 0..kernel.size {
                        let sx = boundary.map(x as i64 + r - b as i64, w);
                        acc += kernel.taps[a * kernel.size + b] * src[sy * w + sx] as f64;
                    }
                }
                *d = acc as f32;
            }
        });
    out
}

/// Keep every s-th pixel; output dims = floor(dim / s) on both axes.
pub fn subsample(image: &ImageTensor, s: usize, phase: SubsamplePhase) -> Result<ImageTensor> {
    if s == 0 {
        return Err(RbsrError::InvalidArg("scale must be >= 1".into()));
    }
    if image.height < s || image.width < s {
        return Err(RbsrError::Shape(format!(
            "image {}x{} smaller than subsample factor {s}",
            image.width, image.height
        )));
    }
    let offset = match phase {
        SubsamplePhase::TopLeft => 0,
        SubsamplePhase::Centered => s / 2,
    };
    let (oh, ow) = (image.height / s, image.width / s);
    let mut out = ImageTensor::zeros(image.channels, oh, ow);
    for c in 0..image.channels {
        for y in 0..oh {
            for x in 0..ow {
                *out.at_mut(c, y, x) = image.at(c, offset + y * s, offset + x * s);
            }
        }
    }
    Ok(out)
}

/// Deterministic standard-normal draw for one pixel: the generator stream is
/// the pixel index, so values are independent of evaluation order.
fn counter_noise(seed: u64, pixel_index: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(pixel_index);
    StandardNormal.sample(&mut rng)
}

/// Full forward model: subsample(convolve(x, k), s) + noise. No clamping.
pub fn degrade(image: &ImageTensor, params: &DegradationParams) -> Result<ImageTensor> {
    let blurred = convolve2d(image, &params.kernel, params.boundary);
    let mut low = subsample(&blurred, params.scale, params.phase)?;
    if params.noise_sigma > 0.0 {
        let sigma = params.noise_sigma;
        let seed = params.seed;
        low.data.par_iter_mut().enumerate().for_each(|(i, v)| {
            *v += (sigma * counter_noise(seed, i as u64)) as f32;
        });
    }
    Ok(low)
}
