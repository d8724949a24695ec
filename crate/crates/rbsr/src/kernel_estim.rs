//! Patchwise blur-kernel estimation from an LR/HR pair.
//!
//! Fits argmin_k ||S(X k) - y||^2 + lambda ||k||^2 where X k is true
//! convolution of the HR patch with k and S the s-fold subsampling.
//! Equations whose kernel support leaves the patch are dropped. The normal
//! equations (A^T A + lambda I) k = A^T y are solved directly (Cholesky)
//! for kernel sizes up to 21, by conjugate gradient above that.

use rayon::prelude::*;

use crate::degrade::{BlurKernel, SubsamplePhase};
use crate::error::{RbsrError, Result};
use crate::imageio::ImageTensor;

#[derive(Debug, Clone)]
pub struct EstimationConfig {
    pub kernel_size: usize,
    /// Tikhonov weight.
    pub lambda: f64,
    pub scale: usize,
    /// Nominal HR patch side; must leave enough equations.
    pub patch_hr: usize,
    /// (rows, cols) of patches for `estimate_patchwise`.
    pub grid: (usize, usize),
    /// Project the solution onto the sum(k)=1 affine subspace.
    pub sum_to_one: bool,
    pub solver_tol: f64,
    pub solver_max_iter: usize,
    pub phase: SubsamplePhase,
}

impl Default for EstimationConfig {
    fn default() -> Self {
        Self {
            kernel_size: 13,
            lambda: 1e-4,
            scale: 4,
            patch_hr: 192,
            grid: (4, 4),
            sum_to_one: false,
            solver_tol: 1e-10,
            solver_max_iter: 2000,
            phase: SubsamplePhase::Centered,
        }
    }
}

impl EstimationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel_size % 2 == 0 || self.kernel_size == 0 {
            return Err(RbsrError::InvalidArg(format!(
                "kernel size must be odd, got {}",
                self.kernel_size
            )));
        }
        if self.lambda < 0.0 {
            return Err(RbsrError::InvalidArg("lambda must be >= 0".into()));
        }
        if self.scale == 0 {
            return Err(RbsrError::InvalidArg("scale must be >= 1".into()));
        }
        if self.patch_hr < self.scale * self.kernel_size {
            return Err(RbsrError::InvalidArg(format!(
                "patch_hr {} < scale*kernel_size = {}",
                self.patch_hr,
                self.scale * self.kernel_size
            )));
        }
        if self.grid.0 == 0 || self.grid.1 == 0 {
            return Err(RbsrError::InvalidArg("grid must be >= 1x1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct EstimatedKernel {
    pub kernel: BlurKernel,
    /// Per-pixel RMS of the fit residual over the used equations.
    pub residual_rms: f64,
    /// CG iterations; 0 for the direct solver.
    pub iterations: usize,
}

/// The linear system for one patch: valid LR samples and their HR centers.
struct PatchSystem<'a> {
    hr: &'a [f64],
    hr_w: usize,
    size: usize,
    /// HR coordinates (i, j) of each retained LR sample.
    centers: Vec<(usize, usize)>,
    /// Observed LR values for those samples.
    y: Vec<f64>,
}

impl<'a> PatchSystem<'a> {
    /// A k: per valid pixel q, sum_{a,b} k[a,b] * hr[i+r-a][j+r-b].
    fn apply_a(&self, k: &[f64]) -> Vec<f64> {
        let r = self.size / 2;
        self.centers
            .iter()
            .map(|&(i, j)| {
                let mut acc = 0.0;
                for a in 0..self.size {
                    let row = (i + r - a) * self.hr_w;
                    for b in 0..self.size {
                        acc += k[a * self.size + b] * self.hr[row + (j + r - b)];
                    }
                }
                acc
            })
            .collect()
    }

    /// A^T v: scatter residual weights back onto kernel taps.
    fn apply_at(&self, v: &[f64]) -> Vec<f64> {
        let r = self.size / 2;
        let mut out = vec![0.0; self.size * self.size];
        for (q, &(i, j)) in self.centers.iter().enumerate() {
            let vq = v[q];
            for a in 0..self.size {
                let row = (i + r - a) * self.hr_w;
                for b in 0..self.size {
                    out[a * self.size + b] += vq * self.hr[row + (j + r - b)];
                }
            }
        }
        out
    }

    /// One design-matrix row (the kernel-support window around (i, j)).
    fn row(&self, q: usize, buf: &mut [f64]) {
        let r = self.size / 2;
        let (i, j) = self.centers[q];
        for a in 0..self.size {
            let row = (i + r - a) * self.hr_w;
            for b in 0..self.size {
                buf[a * self.size + b] = self.hr[row + (j + r - b)];
            }
        }
    }
}

fn build_system<'a>(
    hr: &'a ImageTensor,
    lr: &ImageTensor,
    config: &EstimationConfig,
) -> Result<PatchSystem<'a>> {
    let s = config.scale;
    if lr.height != hr.height / s || lr.width != hr.width / s {
        return Err(RbsrError::Shape(format!(
            "lr {}x{} is not hr {}x{} / {s}",
            lr.width, lr.height, hr.width, hr.height
        )));
    }
    let offset = match config.phase {
        SubsamplePhase::TopLeft => 0,
        SubsamplePhase::Centered => s / 2,
    };
    let r = config.kernel_size / 2;
    let mut centers = Vec::new();
    let mut y = Vec::new();
    for li in 0..lr.height {
        let i = offset + li * s;
        if i < r || i + r >= hr.height {
            continue;
        }
        for lj in 0..lr.width {
            let j = offset + lj * s;
            if j < r || j + r >= hr.width {
                continue;
            }
            centers.push((i, j));
            y.push(lr.at(0, li, lj) as f64);
        }
    }
    let m2 = config.kernel_size * config.kernel_size;
    if centers.len() < m2 {
        return Err(RbsrError::Solver(format!(
            "underdetermined system: {} equations for {m2} unknowns (patch too small)",
            centers.len()
        )));
    }
    Ok(PatchSystem {
        hr: &[],
        hr_w: hr.width,
        size: config.kernel_size,
        centers,
        y,
    })
}

/// In-place Cholesky solve of (G + lambda I) x = b for symmetric G.
fn cholesky_solve(mut g: Vec<f64>, n: usize, lambda: f64, b: &[f64]) -> Result<Vec<f64>> {
    for i in 0..n {
        g[i * n + i] += lambda;
    }
    // decompose: G = L L^T, L lower
    for i in 0..n {
        for j in 0..=i {
            let mut sum = g[i * n + j];
            for k in 0..j {
                sum -= g[i * n + k] * g[j * n + k];
            }
            if i == j {
                if sum <= 0.0 {
                    return Err(RbsrError::Solver(format!(
                        "normal matrix not positive definite at pivot {i}"
                    )));
                }
                g[i * n + i] = sum.sqrt();
            } else {
                g[i * n + j] = sum / g[j * n + j];
            }
        }
    }
    // forward then backward substitution
    let mut x = b.to_vec();
    for i in 0..n {
        for k in 0..i {
            x[i] -= g[i * n + k] * x[k];
        }
        x[i] /= g[i * n + i];
    }
    for i in (0..n).rev() {
        for k in i + 1..n {
            x[i] -= g[k * n + i] * x[k];
        }
        x[i] /= g[i * n + i];
    }
    Ok(x)
}

/// Conjugate gradient on the normal operator N k = A^T A k + lambda k.
fn cg_solve(
    sys: &PatchSystem,
    rhs: &[f64],
    lambda: f64,
    tol: f64,
    max_iter: usize,
) -> Result<(Vec<f64>, usize)> {
    let n = rhs.len();
    let normal = |k: &[f64]| -> Vec<f64> {
        let ak = sys.apply_a(k);
        let mut out = sys.apply_at(&ak);
        for i in 0..n {
            out[i] += lambda * k[i];
        }
        out
    };
    let mut x = vec![0.0; n];
    let mut resid = rhs.to_vec();
    let mut p = resid.clone();
    let mut rs_old: f64 = resid.iter().map(|v| v * v).sum();
    let b_norm = rs_old.sqrt().max(1e-300);
    let mut iterations = 0;
    for _ in 0..max_iter {
        if rs_old.sqrt() <= tol * b_norm {
            break;
        }
        let np = normal(&p);
        let p_np: f64 = p.iter().zip(&np).map(|(a, b)| a * b).sum();
        if p_np.abs() < 1e-300 {
            break;
        }
        let alpha = rs_old / p_np;
        for i in 0..n {
            x[i] += alpha * p[i];
            resid[i] -= alpha * np[i];
        }
        let rs_new: f64 = resid.iter().map(|v| v * v).sum();
        let beta = rs_new / rs_old;
        for i in 0..n {
            p[i] = resid[i] + beta * p[i];
        }
        rs_old = rs_new;
        iterations += 1;
    }
    if rs_old.sqrt() > tol * b_norm && iterations == max_iter {
        return Err(RbsrError::Solver(format!(
            "CG did not reach tol {tol} in {max_iter} iterations (residual {:.3e})",
            rs_old.sqrt() / b_norm
        )));
    }
    Ok((x, iterations))
}

/// Estimate the downsampling kernel relating one HR/LR patch pair.
pub fn estimate_kernel(
    hr_patch: &ImageTensor,
    lr_patch: &ImageTensor,
    config: &EstimationConfig,
) -> Result<EstimatedKernel> {
    config.validate()?;
    let hr_luma = hr_patch.to_luma();
    let lr_luma = lr_patch.to_luma();
    let hr_data: Vec<f64> = hr_luma.data.iter().map(|&v| v as f64).collect();

    let mut sys = build_system(&hr_luma, &lr_luma, config)?;
    sys.hr = &hr_data;

    let m2 = config.kernel_size * config.kernel_size;
    let rhs = sys.apply_at(&sys.y);

    let (mut taps, iterations) = if config.kernel_size <= 21 {
        // explicit A^T A via rank-1 updates over the equation rows
        let mut gram = vec![0.0f64; m2 * m2];
        let mut row = vec![0.0f64; m2];
        for q in 0..sys.centers.len() {
            sys.row(q, &mut row);
            for a in 0..m2 {
                let ra = row[a];
                if ra == 0.0 {
                    continue;
                }
                let dst = &mut gram[a * m2..(a + 1) * m2];
                for (d, rb) in dst.iter_mut().zip(&row) {
                    *d += ra * rb;
                }
            }
        }
        (cholesky_solve(gram, m2, config.lambda, &rhs)?, 0)
    } else {
        cg_solve(&sys, &rhs, config.lambda, config.solver_tol, config.solver_max_iter)?
    };

    if config.sum_to_one {
        let deficit = (1.0 - taps.iter().sum::<f64>()) / m2 as f64;
        for t in &mut taps {
            *t += deficit;
        }
    }

    let fit = sys.apply_a(&taps);
    let sq_sum: f64 = fit
        .iter()
        .zip(&sys.y)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let residual_rms = (sq_sum / sys.y.len() as f64).sqrt();

    Ok(EstimatedKernel {
        kernel: BlurKernel::new(config.kernel_size, taps)?,
        residual_rms,
        iterations,
    })
}

/// Partition the pair into `config.grid` tiles and estimate per tile.
/// Returns a row-major grid.
pub fn estimate_patchwise(
    hr: &ImageTensor,
    lr: &ImageTensor,
    config: &EstimationConfig,
) -> Result<Vec<Vec<EstimatedKernel>>> {
    config.validate()?;
    let s = config.scale;
    if lr.height != hr.height / s || lr.width != hr.width / s {
        return Err(RbsrError::Shape(format!(
            "hr {}x{} is not {s}x lr {}x{}",
            hr.width, hr.height, lr.width, lr.height
        )));
    }
    let (rows, cols) = config.grid;
    let tile_lh = lr.height / rows;
    let tile_lw = lr.width / cols;
    if tile_lh * s < config.scale * config.kernel_size || tile_lw * s < config.scale * config.kernel_size
    {
        return Err(RbsrError::Shape(format!(
            "grid {rows}x{cols} tiles too small for kernel size {}",
            config.kernel_size
        )));
    }

    let jobs: Vec<(usize, usize)> = (0..rows)
        .flat_map(|r| (0..cols).map(move |c| (r, c)))
        .collect();
    let results: Vec<Result<EstimatedKernel>> = jobs
        .par_iter()
        .map(|&(r, c)| {
            let lr_tile = crop(lr, c * tile_lw, r * tile_lh, tile_lw, tile_lh);
            let hr_tile = crop(hr, c * tile_lw * s, r * tile_lh * s, tile_lw * s, tile_lh * s);
            estimate_kernel(&hr_tile, &lr_tile, config)
        })
        .collect();

    let mut grid = Vec::with_capacity(rows);
    let mut it = results.into_iter();
    for _ in 0..rows {
        let mut row = Vec::with_capacity(cols);
        for _ in 0..cols {
            row.push(it.next().unwrap()?);
        }
        grid.push(row);
    }
    Ok(grid)
}

fn crop(img: &ImageTensor, x0: usize, y0: usize, w: usize, h: usize) -> ImageTensor {
    let mut out = ImageTensor::zeros(img.channels, h, w);
    for c in 0..img.channels {
        for y in 0..h {
            for x in 0..w {
                *out.at_mut(c, y, x) = img.at(c, y0 + y, x0 + x);
            }
        }
    }
    out
}

/// Render a kernel grid for inspection: each kernel min-max normalized,
/// magnified x8 nearest-neighbor, tiled with 2-pixel white separators
/// (around the outside as well).
pub fn kernel_grid_render(grid: &[Vec<EstimatedKernel>]) -> Result<ImageTensor> {
    if grid.is_empty() || grid[0].is_empty() {
        return Err(RbsrError::InvalidArg("empty kernel grid".into()));
    }
    let rows = grid.len();
    let cols = grid[0].len();
    let size = grid[0][0].kernel.size;
    const MAG: usize = 8;
    const SEP: usize = 2;
    let tile = size * MAG;
    let out_h = rows * tile + (rows + 1) * SEP;
    let out_w = cols * tile + (cols + 1) * SEP;
    let mut out = ImageTensor::constant(1, out_h, out_w, 1.0);
    for (r, row) in grid.iter().enumerate() {
        for (c, est) in row.iter().enumerate() {
            if est.kernel.size != size {
                return Err(RbsrError::Shape("mixed kernel sizes in grid".into()));
            }
            let k = &est.kernel.taps;
            let lo = k.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = k.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let span = hi - lo;
            let y0 = SEP + r * (tile + SEP);
            let x0 = SEP + c * (tile + SEP);
            for ky in 0..size {
                for kx in 0..size {
                    let v = if span <= 0.0 {
                        0.0
                    } else {
                        ((k[ky * size + kx] - lo) / span) as f32
                    };
                    for my in 0..MAG {
                        for mx in 0..MAG {
                            *out.at_mut(0, y0 + ky * MAG + my, x0 + kx * MAG + mx) = v;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Text dump of a kernel grid: per block a `# row col residual_rms` comment
/// followed by the kernel text format.
pub fn dump_kernel_grid(grid: &[Vec<EstimatedKernel>]) -> String {
    let mut out = String::new();
    for (r, row) in grid.iter().enumerate() {
        for (c, est) in row.iter().enumerate() {
            out.push_str(&format!("# {r} {c} {:.6e}\n", est.residual_rms));
            out.push_str(&est.kernel.to_text());
        }
    }
    out
}
