//! Image-quality metrics, always computed in 64-bit over `[0,1]`-scaled
//! planar data (`[C,H,W]`, channel-major).

use crate::error::{Error, Result};

/// Side of the Gaussian window.
const WINDOW: usize = 11;
/// Standard deviation of the window.
const SIGMA: f64 = 1.5;
/// Luminance stabilizer `(K1*L)^2` with `K1 = 0.01`, `L = 1`.
const C1: f64 = 1e-4;
/// Contrast stabilizer `(K2*L)^2` with `K2 = 0.03`, `L = 1`.
const C2: f64 = 9e-4;

/// Mean squared error over two equally-long value slices.
pub fn mse(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::contract(format!(
            "mse needs equal non-empty lengths, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let sum: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sum / a.len() as f64)
}

/// Peak signal-to-noise ratio in decibels for `[0,1]` data:
/// `10*log10(1/mse)`; identical inputs give positive infinity.
pub fn psnr(a: &[f64], b: &[f64]) -> Result<f64> {
    let e = mse(a, b)?;
    if e == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(-10.0 * e.log10())
}

/// Normalized 1-D Gaussian tap weights; the 2-D window is their outer
/// product, so two valid-region passes equal one direct 11x11 window.
fn gaussian_taps() -> [f64; WINDOW] {
    let mut g = [0.0; WINDOW];
    let mid = (WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - mid;
        *v = (-d * d / (2.0 * SIGMA * SIGMA)).exp();
        sum += *v;
    }
    for v in &mut g {
        *v /= sum;
    }
    g
}

/// Valid-region separable Gaussian filter of one `h x w` plane; the result
/// is `(h-10) x (w-10)`.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64; WINDOW]) -> Vec<f64> {
    let ow = w - (WINDOW - 1);
    let oh = h - (WINDOW - 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                acc += t * plane[y * w + x + k];
            }
            rows[y * ow + x] = acc;
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                acc += t * rows[(y + k) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize, taps: &[f64; WINDOW]) -> f64 {
    let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let mu_a = filter_valid(a, h, w, taps);
    let mu_b = filter_valid(b, h, w, taps);
    let m_aa = filter_valid(&aa, h, w, taps);
    let m_bb = filter_valid(&bb, h, w, taps);
    let m_ab = filter_valid(&ab, h, w, taps);
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = m_aa[i] - ma * ma;
        let vb = m_bb[i] - mb * mb;
        let cov = m_ab[i] - ma * mb;
        total += ((2.0 * ma * mb + C1) * (2.0 * cov + C2))
            / ((ma * ma + mb * mb + C1) * (va + vb + C2));
    }
    total / mu_a.len() as f64
}

/// Structural similarity with the 11x11 Gaussian window (sigma 1.5),
/// averaged over all fully-contained windows and over channels.
pub fn ssim(a: &[f64], b: &[f64], c: usize, h: usize, w: usize) -> Result<f64> {
    if a.len() != b.len() || a.len() != c * h * w || c == 0 {
        return Err(Error::contract(format!(
            "ssim needs two {c}x{h}x{w} images, got lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    if h < WINDOW || w < WINDOW {
        return Err(Error::contract(format!(
            "ssim needs extents of at least {WINDOW}, got {h}x{w}"
        )));
    }
    let taps = gaussian_taps();
    let plane = h * w;
    let mut total = 0.0;
    for ch in 0..c {
        total += ssim_plane(
            &a[ch * plane..(ch + 1) * plane],
            &b[ch * plane..(ch + 1) * plane],
            h,
            w,
            &taps,
        );
    }
    Ok(total / c as f64)
}
