//! Structural similarity with the usual 11x11 Gaussian window.

use stylestego_nn::Tensor;

use crate::error::{Result, StegoError};

pub const WINDOW: usize = 11;
pub const SIGMA: f64 = 1.5;
pub const K1: f64 = 0.01;
pub const K2: f64 = 0.03;

/// Normalised 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps() -> [f64; WINDOW] {
    let c = (WINDOW / 2) as f64;
    let mut taps = [0.0; WINDOW];
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - c;
        *t = (-d * d / (2.0 * SIGMA * SIGMA)).exp();
    }
    let s: f64 = taps.iter().sum();
    taps.map(|t| t / s)
}

/// Valid-mode separable filtering of one `h x w` plane.
fn blur(plane: &[f64], h: usize, w: usize, taps: &[f64; WINDOW]) -> Vec<f64> {
    let ow = w - WINDOW + 1;
    let oh = h - WINDOW + 1;
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..WINDOW).map(|k| taps[k] * plane[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..WINDOW).map(|k| taps[k] * rows[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM of two `[h, w, c]` images with values in [-1, 1], computed on
/// [0, 1] intensities over all fully contained windows and averaged over
/// channels.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(StegoError::Shape(format!("ssim of {:?} and {:?}", a.shape(), b.shape())));
    }
    let (h, w, c) = a.hwc()?;
    if h < WINDOW || w < WINDOW {
        return Err(StegoError::Shape(format!("ssim needs images of at least {WINDOW}x{WINDOW}, got {h}x{w}")));
    }
    let taps = gaussian_taps();
    let (c1, c2) = (K1 * K1, K2 * K2);
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        let plane = |t: &Tensor| -> Vec<f64> { t.data().iter().skip(ch).step_by(c).map(|v| (v + 1.0) / 2.0).collect() };
        let (x, y) = (plane(a), plane(b));
        let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(u, v)| u * v).collect() };
        let mx = blur(&x, h, w, &taps);
        let my = blur(&y, h, w, &taps);
        let mxx = blur(&prod(&x, &x), h, w, &taps);
        let myy = blur(&prod(&y, &y), h, w, &taps);
        let mxy = blur(&prod(&x, &y), h, w, &taps);
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = mxx[i] - ux * ux;
            let vy = myy[i] - uy * uy;
            let cov = mxy[i] - ux * uy;
            total += ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}
