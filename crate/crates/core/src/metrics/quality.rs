//! Masked full-reference image metrics for `[0, 1]` images.

use crate::error::{Error, Result};
use crate::image::Image;

pub const PSNR_CAP_DB: f64 = 99.0;

fn check(a: &Image, b: &Image, mask: &[bool]) -> Result<usize> {
    if !a.same_size(b) || mask.len() != a.len() {
        return Err(Error::data(
            "metrics",
            format!(
                "size mismatch: {}x{} vs {}x{} with mask of {}",
                a.width,
                a.height,
                b.width,
                b.height,
                mask.len()
            ),
        ));
    }
    let n = mask.iter().filter(|&&m| m).count();
    if n == 0 {
        return Err(Error::data("metrics", "empty mask"));
    }
    Ok(n)
}

fn masked_pairs<'a>(a: &'a Image, b: &'a Image, mask: &'a [bool]) -> impl Iterator<Item = (f64, f64)> + 'a {
    a.data
        .iter()
        .zip(&b.data)
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|((&x, &y), _)| (x, y))
}

pub fn mse(a: &Image, b: &Image, mask: &[bool]) -> Result<f64> {
    let n = check(a, b, mask)?;
    Ok(masked_pairs(a, b, mask).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n as f64)
}

/// `10·log10(1/MSE)` over the mask, capped at 99 dB.
pub fn psnr(a: &Image, b: &Image, mask: &[bool]) -> Result<f64> {
    let m = mse(a, b, mask)?;
    if m == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP_DB))
}

pub fn rmse(a: &Image, b: &Image, mask: &[bool]) -> Result<f64> {
    Ok(mse(a, b, mask)?.sqrt())
}

/// Pearson correlation of masked intensities.
pub fn pcc(a: &Image, b: &Image, mask: &[bool]) -> Result<f64> {
    let n = check(a, b, mask)? as f64;
    let (sa, sb) = masked_pairs(a, b, mask).fold((0.0, 0.0), |(p, q), (x, y)| (p + x, q + y));
    let (ma, mb) = (sa / n, sb / n);
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in masked_pairs(a, b, mask) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    if va == 0.0 || vb == 0.0 {
        return Err(Error::data("metrics", "correlation undefined for a constant image"));
    }
    Ok(cov / (va * vb).sqrt())
}

const SSIM_HALF: usize = 3;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn ssim_window() -> [f64; 2 * SSIM_HALF + 1] {
    let mut w = [0.0; 2 * SSIM_HALF + 1];
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - SSIM_HALF as f64;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Per-window SSIM values for every masked pixel whose 7×7 window lies
/// inside the image.
pub fn ssim_map(a: &Image, b: &Image, mask: &[bool]) -> Result<Vec<f64>> {
    check(a, b, mask)?;
    let w = ssim_window();
    let (width, height) = (a.width, a.height);
    let mut out = Vec::new();
    if width < 2 * SSIM_HALF + 1 || height < 2 * SSIM_HALF + 1 {
        return Err(Error::data("metrics", "image smaller than the SSIM window"));
    }
    for y in SSIM_HALF..height - SSIM_HALF {
        for x in SSIM_HALF..width - SSIM_HALF {
            if !mask[y * width + x] {
                continue;
            }
            let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for (j, wy) in w.iter().enumerate() {
                for (i, wx) in w.iter().enumerate() {
                    let k = (y + j - SSIM_HALF) * width + (x + i - SSIM_HALF);
                    let wt = wx * wy;
                    let (p, q) = (a.data[k], b.data[k]);
                    mx += wt * p;
                    my += wt * q;
                    sxx += wt * p * p;
                    syy += wt * q * q;
                    sxy += wt * p * q;
                }
            }
            let vx = (sxx - mx * mx).max(0.0);
            let vy = (syy - my * my).max(0.0);
            let cxy = sxy - mx * my;
            let s = ((2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2))
                / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
            out.push(s);
        }
    }
    if out.is_empty() {
        return Err(Error::data("metrics", "no SSIM window inside the mask"));
    }
    Ok(out)
}

/// Mean single-scale SSIM over masked windows (Gaussian σ = 1.5, 7×7).
pub fn ssim(a: &Image, b: &Image, mask: &[bool]) -> Result<f64> {
    let m = ssim_map(a, b, mask)?;
    Ok(m.iter().sum::<f64>() / m.len() as f64)
}
