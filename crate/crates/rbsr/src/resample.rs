//! Separable bicubic resampling with optional antialias stretching.
//!
//! Weights use the Keys cubic family; coordinates are center-aligned
//! (source = (dest + 0.5) * in/out - 0.5) and per-pixel tap weights are
//! normalized to sum to 1. Internal math is f64.

use rayon::prelude::*;

use crate::error::{RbsrError, Result};
use crate::imageio::ImageTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Boundary {
    /// Mirror without repeating the edge pixel: -1 -> 1, n -> n-2.
    Reflect,
    /// Clamp to the edge pixel.
    Clamp,
}

impl Boundary {
    /// Map an out-of-range coordinate into [0, n).
    pub fn map(self, idx: i64, n: usize) -> usize {
        let n = n as i64;
        if n == 1 {
            return 0;
        }
        match self {
            Boundary::Clamp => idx.clamp(0, n - 1) as usize,
            Boundary::Reflect => {
                let period = 2 * (n - 1);
                let mut i = idx.rem_euclid(period);
                if i >= n {
                    i = period - i;
                }
                i as usize
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ResampleSpec {
    /// Output size = round(input * scale_num / scale_den).
    pub scale_num: u32,
    pub scale_den: u32,
    /// Cubic family parameter; -0.5 is Catmull-Rom.
    pub kernel_a: f64,
    /// Stretch the kernel by the scale ratio when downscaling.
    pub antialias: bool,
    pub boundary: Boundary,
}

impl ResampleSpec {
    pub fn bicubic(scale_num: u32, scale_den: u32) -> Self {
        Self {
            scale_num,
            scale_den,
            kernel_a: -0.5,
            antialias: true,
            boundary: Boundary::Reflect,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scale_num == 0 || self.scale_den == 0 {
            return Err(RbsrError::InvalidArg("scale terms must be >= 1".into()));
        }
        if self.kernel_a > 0.0 {
            return Err(RbsrError::InvalidArg(format!(
                "cubic parameter a must be <= 0, got {}",
                self.kernel_a
            )));
        }
        Ok(())
    }

    pub fn output_size(&self, input: usize) -> usize {
        (input as f64 * self.scale_num as f64 / self.scale_den as f64).round() as usize
    }
}

/// Keys cubic kernel:
///   (a+2)|t|^3 - (a+3)|t|^2 + 1          for |t| <= 1
///   a|t|^3 - 5a|t|^2 + 8a|t| - 4a        for 1 < |t| < 2
///   0                                    otherwise
pub fn cubic_weight(t: f64, a: f64) -> f64 {
    let t = t.abs();
    if t <= 1.0 {
        ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((a * t - 5.0 * a) * t + 8.0 * a) * t - 4.0 * a
    } else {
        0.0
    }
}

/// Normalized taps for one axis: for each output index, the first source
/// index and a weight per tap (source indices already boundary-mapped).
fn axis_taps(
    in_size: usize,
    out_size: usize,
    a: f64,
    antialias: bool,
    boundary: Boundary,
) -> Vec<(Vec<usize>, Vec<f64>)> {
    let ratio = in_size as f64 / out_size as f64;
    let filter_scale = if antialias && ratio > 1.0 { ratio } else { 1.0 };
    let support = 2.0 * filter_scale;
    (0..out_size)
        .map(|o| {
            let center = (o as f64 + 0.5) * ratio - 0.5;
            let left = (center - support).ceil() as i64;
            let right = (center + support).floor() as i64;
            let mut idx = Vec::with_capacity((right - left + 1) as usize);
            let mut wts = Vec::with_capacity(idx.capacity());
            let mut sum = 0.0;
            for p in left..=right {
                let w = cubic_weight((p as f64 - center) / filter_scale, a);
                idx.push(boundary.map(p, in_size));
                wts.push(w);
                sum += w;
            }
            for w in &mut wts {
                *w /= sum;
            }
            (idx, wts)
        })
        .collect()
}

/// Separable resize, rows then columns.
pub fn resize(image: &ImageTensor, spec: &ResampleSpec) -> Result<ImageTensor> {
    spec.validate()?;
    let out_w = spec.output_size(image.width);
    let out_h = spec.output_size(image.height);
    if out_w == 0 || out_h == 0 {
        return Err(RbsrError::Shape(format!(
            "degenerate output size {out_w}x{out_h} from {}x{}",
            image.width, image.height
        )));
    }
    let (c, h, w) = (image.channels, image.height, image.width);
    let taps_x = axis_taps(w, out_w, spec.kernel_a, spec.antialias, spec.boundary);
    let taps_y = axis_taps(h, out_h, spec.kernel_a, spec.antialias, spec.boundary);

    // Horizontal pass: (h, w) -> (h, out_w), kept in f64.
    let mut mid = vec![0.0f64; c * h * out_w];
    mid.par_chunks_mut(out_w).enumerate().for_each(|(row, dst)| {
        let ci = row / h;
        let y = row % h;
        let src = image.plane(ci);
        for (ox, (idx, wts)) in taps_x.iter().enumerate() {
            let mut acc = 0.0;
            for (i, wv) in idx.iter().zip(wts) {
                acc += src[y * w + i] as f64 * wv;
            }
            dst[ox] = acc;
        }
    });

    // Vertical pass: (h, out_w) -> (out_h, out_w).
    let mut out = ImageTensor::zeros(c, out_h, out_w);
    out.data
        .par_chunks_mut(out_w)
        .enumerate()
        .for_each(|(row, dst)| {
            let ci = row / out_h;
            let oy = row % out_h;
            let (idx, wts) = &taps_y[oy];
            let src = &mid[ci * h * out_w..(ci + 1) * h * out_w];
            for ox in 0..out_w {
                let mut acc = 0.0;
                for (i, wv) in idx.iter().zip(wts) {
                    acc += src[i * out_w + ox] * wv;
                }
                dst[ox] = acc as f32;
            }
        });
    Ok(out)
}

/// The reference x4 degradation: Catmull-Rom, antialiased, reflect boundary.
pub fn downsample_bicubic_x4(image: &ImageTensor) -> Result<ImageTensor> {
    if image.height < 8 || image.width < 8 {
        return Err(RbsrError::Shape(format!(
            "image {}x{} too small for x4 downsampling (needs >= 8x8)",
            image.width, image.height
        )));
    }
    resize(image, &ResampleSpec::bicubic(1, 4))
}

/// Plain bicubic x4 upsampling, the comparison baseline.
pub fn upsample_bicubic_x4(image: &ImageTensor) -> Result<ImageTensor> {
    resize(
        image,
        &ResampleSpec {
            antialias: false,
            ..ResampleSpec::bicubic(4, 1)
        },
    )
}
