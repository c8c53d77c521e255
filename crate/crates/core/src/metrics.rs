//! Image quality metrics: PSNR and single-scale SSIM on [0, 1] RGB patches.

use crate::error::{RestoreError, Result};
use crate::patch::ImagePatch;

/// PSNR cap returned when the MSE is exactly zero.
pub const PSNR_CAP_DB: f64 = 100.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// Peak signal-to-noise ratio in dB over all channels, dynamic range 1.0.
/// Identical images are capped at 100 dB.
pub fn psnr(a: &ImagePatch, b: &ImagePatch) -> Result<f64> {
    if a.data.dim() != b.data.dim() {
        return Err(RestoreError::ShapeMismatch(format!(
            "psnr: {:?} vs {:?}",
            a.data.dim(),
            b.data.dim()
        )));
    }
    let mut se = 0.0;
    for (x, y) in a.data.iter().zip(b.data.iter()) {
        let d = x - y;
        se += d * d;
    }
    let mse = se / a.data.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

/// Single-scale SSIM: 11x11 Gaussian window (sigma 1.5), K1 = 0.01,
/// K2 = 0.03, dynamic range 1.0, computed per channel and averaged.
/// Windows are evaluated fully inside the image (valid positions only).
pub fn ssim(a: &ImagePatch, b: &ImagePatch) -> Result<f64> {
    if a.data.dim() != b.data.dim() {
        return Err(RestoreError::ShapeMismatch(format!(
            "ssim: {:?} vs {:?}",
            a.data.dim(),
            b.data.dim()
        )));
    }
    let (_, h, w) = a.data.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(RestoreError::InvalidInput(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }

    let win = gaussian_window();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let ho = h - SSIM_WINDOW + 1;
    let wo = w - SSIM_WINDOW + 1;

    let mut total = 0.0;
    for c in 0..3 {
        // separable weighted moments: E[x], E[y], E[x^2], E[y^2], E[xy]
        let mx = filter_valid(&a.data, c, &win, |v, _| v);
        let my = filter_valid(&b.data, c, &win, |v, _| v);
        let mxx = filter2_valid(&a.data, &a.data, c, &win);
        let myy = filter2_valid(&b.data, &b.data, c, &win);
        let mxy = filter2_valid(&a.data, &b.data, c, &win);

        let mut acc = 0.0;
        for i in 0..ho * wo {
            let (ux, uy) = (mx[i], my[i]);
            let vx = mxx[i] - ux * ux;
            let vy = myy[i] - uy * uy;
            let cov = mxy[i] - ux * uy;
            let s = ((2.0 * ux * uy + c1) * (2.0 * cov + c2))
                / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
            acc += s;
        }
        total += acc / (ho * wo) as f64;
    }
    Ok(total / 3.0)
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut w = [0.0; SSIM_WINDOW];
    let mut sum = 0.0;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Separable weighted mean of f(pixel) over valid window positions.
fn filter_valid<F>(
    data: &ndarray::Array3<f64>,
    c: usize,
    win: &[f64; SSIM_WINDOW],
    f: F,
) -> Vec<f64>
where
    F: Fn(f64, f64) -> f64,
{
    let (_, h, w) = data.dim();
    let wo = w - SSIM_WINDOW + 1;
    let ho = h - SSIM_WINDOW + 1;
    // horizontal
    let mut tmp = vec![0.0; h * wo];
    for y in 0..h {
        for x in 0..wo {
            let mut acc = 0.0;
            for (k, wk) in win.iter().enumerate() {
                let v = data[[c, y, x + k]];
                acc += wk * f(v, v);
            }
            tmp[y * wo + x] = acc;
        }
    }
    // vertical
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            let mut acc = 0.0;
            for (k, wk) in win.iter().enumerate() {
                acc += wk * tmp[(y + k) * wo + x];
            }
            out[y * wo + x] = acc;
        }
    }
    out
}

/// Separable weighted mean of a*b over valid window positions.
fn filter2_valid(
    a: &ndarray::Array3<f64>,
    b: &ndarray::Array3<f64>,
    c: usize,
    win: &[f64; SSIM_WINDOW],
) -> Vec<f64> {
    let (_, h, w) = a.dim();
    let wo = w - SSIM_WINDOW + 1;
    let ho = h - SSIM_WINDOW + 1;
    let mut tmp = vec![0.0; h * wo];
    for y in 0..h {
        for x in 0..wo {
            let mut acc = 0.0;
            for (k, wk) in win.iter().enumerate() {
                acc += wk * a[[c, y, x + k]] * b[[c, y, x + k]];
            }
            tmp[y * wo + x] = acc;
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            let mut acc = 0.0;
            for (k, wk) in win.iter().enumerate() {
                acc += wk * tmp[(y + k) * wo + x];
            }
            out[y * wo + x] = acc;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_images_hit_the_cap() {
        let img = ImagePatch::synthetic(32, 32, 0);
        assert_eq!(psnr(&img, &img).unwrap(), 100.0);
        assert!((ssim(&img, &img).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_pair_closed_form() {
        // MSE = 0.01 -> 20 dB exactly
        let a = ImagePatch::constant(16, 16, 0.5, "a").unwrap();
        let b = ImagePatch::constant(16, 16, 0.6, "b").unwrap();
        let p = psnr(&a, &b).unwrap();
        assert!((p - 20.0).abs() < 1e-9, "got {p}");
    }

    #[test]
    fn ssim_is_symmetric() {
        let a = ImagePatch::synthetic(24, 24, 1);
        let b = ImagePatch::synthetic(24, 24, 2);
        let ab = ssim(&a, &b).unwrap();
        let ba = ssim(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-12);
        assert!((-1.0..=1.0).contains(&ab));
    }

    #[test]
    fn ssim_rejects_images_below_window_size() {
        let a = ImagePatch::constant(10, 32, 0.5, "a").unwrap();
        assert!(matches!(
            ssim(&a, &a),
            Err(RestoreError::InvalidInput(_))
        ));
    }

    #[test]
    fn psnr_decreases_with_noise_level() {
        let img = ImagePatch::synthetic(48, 48, 4);
        let mut last = f64::INFINITY;
        for sigma in [5.0, 25.0, 50.0] {
            let noisy = crate::distortion::add_gaussian_noise(&img, sigma, 123).unwrap();
            let p = psnr(&img, &noisy).unwrap();
            assert!(p < last, "psnr must fall as noise grows");
            last = p;
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let a = ImagePatch::synthetic(16, 16, 0);
        let b = ImagePatch::synthetic(16, 32, 0);
        assert!(matches!(psnr(&a, &b), Err(RestoreError::ShapeMismatch(_))));
        assert!(matches!(ssim(&a, &b), Err(RestoreError::ShapeMismatch(_))));
    }
}
