//! PSNR and SSIM.

use crate::error::{check_len, Error, Result};
use crate::raster::Image;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricResult {
    /// Decibels; `f64::INFINITY` for a perfect reconstruction.
    pub psnr: f64,
    pub ssim: f64,
}

pub fn mse(a: &[f64], b: &[f64]) -> Result<f64> {
    check_len(a.len(), b.len())?;
    if a.is_empty() {
        return Err(Error::invalid("empty images"));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

/// `10·log₁₀(peak² / MSE)`; `peak` defaults to `max(x)`.
pub fn psnr(x_hat: &Image, x: &Image, peak: Option<f64>) -> Result<f64> {
    if x_hat.side() != x.side() {
        return Err(Error::Shape(format!("psnr: {} vs {} sides", x_hat.side(), x.side())));
    }
    let err = mse(x_hat.data(), x.data())?;
    if err == 0.0 {
        return Ok(f64::INFINITY);
    }
    let peak = peak.unwrap_or_else(|| x.max());
    Ok(10.0 * (peak * peak / err).log10())
}

pub(crate) fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode filtering of a `side × side` field.
fn filter_valid(data: &[f64], side: usize, w: &[f64]) -> Vec<f64> {
    let k = w.len();
    let out = side - k + 1;
    let mut rows = vec![0.0; side * out];
    for r in 0..side {
        let src = &data[r * side..(r + 1) * side];
        for c in 0..out {
            rows[r * out + c] = w.iter().zip(&src[c..c + k]).map(|(a, b)| a * b).sum();
        }
    }
    let mut res = vec![0.0; out * out];
    for r in 0..out {
        for c in 0..out {
            res[r * out + c] = (0..k).map(|j| w[j] * rows[(r + j) * out + c]).sum();
        }
    }
    res
}

/// Dynamic range over both images, so the metric is symmetric.
pub(crate) fn joint_range(a: &Image, b: &Image) -> f64 {
    let range = a.max().max(b.max()) - a.min().min(b.min());
    if range > 0.0 {
        range
    } else {
        1.0
    }
}

/// Mean local SSIM over all valid 11×11 Gaussian windows (σ = 1.5,
/// K₁ = 0.01, K₂ = 0.03). The dynamic range defaults to the joint range of
/// the two images.
pub fn ssim(a: &Image, b: &Image, data_range: Option<f64>) -> Result<f64> {
    if a.side() != b.side() {
        return Err(Error::Shape(format!("ssim: {} vs {} sides", a.side(), b.side())));
    }
    let side = a.side();
    if side < SSIM_WINDOW {
        return Err(Error::Shape(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {side}x{side}"
        )));
    }
    let l = data_range.unwrap_or_else(|| joint_range(a, b));
    let c1 = (SSIM_K1 * l).powi(2);
    let c2 = (SSIM_K2 * l).powi(2);
    let w = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let (x, y) = (a.data(), b.data());
    let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(u, v)| u * v).collect() };
    let mu_x = filter_valid(x, side, &w);
    let mu_y = filter_valid(y, side, &w);
    let xx = filter_valid(&prod(x, x), side, &w);
    let yy = filter_valid(&prod(y, y), side, &w);
    let xy = filter_valid(&prod(x, y), side, &w);
    let mut total = 0.0;
    for k in 0..mu_x.len() {
        let (mx, my) = (mu_x[k], mu_y[k]);
        let vx = xx[k] - mx * mx;
        let vy = yy[k] - my * my;
        let cov = xy[k] - mx * my;
        let num = (2.0 * mx * my + c1) * (2.0 * cov + c2);
        let den = (mx * mx + my * my + c1) * (vx + vy + c2);
        total += num / den;
    }
    Ok(total / mu_x.len() as f64)
}

pub fn evaluate_pair(x_hat: &Image, x: &Image, peak: Option<f64>) -> Result<MetricResult> {
    Ok(MetricResult {
        psnr: psnr(x_hat, x, peak)?,
        ssim: ssim(x_hat, x, None)?,
    })
}
