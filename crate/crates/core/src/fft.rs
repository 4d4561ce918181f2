//! Discrete Fourier transforms on split real/imaginary f64 buffers.
//!
//! Power-of-two lengths go through an iterative radix-2 Cooley–Tukey FFT;
//! everything else falls back to the direct O(L^2) sum. Both compute the
//! unnormalized forward transform `X[k] = sum_n x[n] exp(-2*pi*i*k*n/L)`.

use std::f64::consts::PI;

fn is_pow2(n: usize) -> bool {
    n != 0 && n & (n - 1) == 0
}

/// Forward transform of a single line of length `n` with stride `stride`
/// (so rows and columns of a plane can share one code path).
fn dft_line(re: &mut [f64], im: &mut [f64], offset: usize, n: usize, stride: usize) {
    if n <= 1 {
        return;
    }
    if is_pow2(n) {
        fft_line(re, im, offset, n, stride);
        return;
    }
    let mut out_re = vec![0f64; n];
    let mut out_im = vec![0f64; n];
    for k in 0..n {
        let (mut ar, mut ai) = (0f64, 0f64);
        for t in 0..n {
            let ang = -2.0 * PI * (k * t % n) as f64 / n as f64;
            let (s, c) = ang.sin_cos();
            let xr = re[offset + t * stride];
            let xi = im[offset + t * stride];
            ar += xr * c - xi * s;
            ai += xr * s + xi * c;
        }
        out_re[k] = ar;
        out_im[k] = ai;
    }
    for k in 0..n {
        re[offset + k * stride] = out_re[k];
        im[offset + k * stride] = out_im[k];
    }
}

/// Iterative radix-2 FFT over a strided line; `n` must be a power of two.
fn fft_line(re: &mut [f64], im: &mut [f64], offset: usize, n: usize, stride: usize) {
    // Bit-reversal permutation.
    let mut j = 0usize;
    for i in 0..n {
        if i < j {
            re.swap(offset + i * stride, offset + j * stride);
            im.swap(offset + i * stride, offset + j * stride);
        }
        let mut m = n >> 1;
        while m >= 1 && j & m != 0 {
            j ^= m;
            m >>= 1;
        }
        j |= m;
    }
    let mut len = 2;
    while len <= n {
        let ang = -2.0 * PI / len as f64;
        let (wr, wi) = (ang.cos(), ang.sin());
        let mut start = 0;
        while start < n {
            let (mut cr, mut ci) = (1f64, 0f64);
            for k in 0..len / 2 {
                let a = offset + (start + k) * stride;
                let b = offset + (start + k + len / 2) * stride;
                let tr = re[b] * cr - im[b] * ci;
                let ti = re[b] * ci + im[b] * cr;
                re[b] = re[a] - tr;
                im[b] = im[a] - ti;
                re[a] += tr;
                im[a] += ti;
                let ncr = cr * wr - ci * wi;
                ci = cr * wi + ci * wr;
                cr = ncr;
            }
            start += len;
        }
        len <<= 1;
    }
}

/// In-place forward 2-D DFT of an `h x w` plane stored row-major in `re`/`im`.
pub fn dft2d_in_place(re: &mut [f64], im: &mut [f64], h: usize, w: usize) {
    assert_eq!(re.len(), h * w);
    assert_eq!(im.len(), h * w);
    for row in 0..h {
        dft_line(re, im, row * w, w, 1);
    }
    for col in 0..w {
        dft_line(re, im, col, h, w);
    }
}
