//! Synthetic degradation pipeline: Gaussian blur, Gaussian noise, JPEG
//! compression, haze and darkness, composed into seeded degradation chains
//! with mild / moderate / severe parameter sub-ranges.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{RestoreError, Result};
use crate::patch::ImagePatch;

/// Degradation strength group. Training uses the moderate group; testing all three.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Mild,
    Moderate,
    Severe,
}

impl Severity {
    pub fn as_str(&self) -> &'static str {
        match self {
            Severity::Mild => "mild",
            Severity::Moderate => "moderate",
            Severity::Severe => "severe",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mild" => Ok(Severity::Mild),
            "moderate" => Ok(Severity::Moderate),
            "severe" => Ok(Severity::Severe),
            other => Err(RestoreError::InvalidInput(format!(
                "unknown severity '{other}'"
            ))),
        }
    }
}

/// Additional degradation factor appended to the base blur/noise/jpeg chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NewFactor {
    None,
    Haze,
    Darkness,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageKind {
    Blur,
    Noise,
    Jpeg,
    Haze,
    Darkness,
}

impl StageKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            StageKind::Blur => "blur",
            StageKind::Noise => "noise",
            StageKind::Jpeg => "jpeg",
            StageKind::Haze => "haze",
            StageKind::Darkness => "darkness",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "blur" => Ok(StageKind::Blur),
            "noise" => Ok(StageKind::Noise),
            "jpeg" => Ok(StageKind::Jpeg),
            "haze" => Ok(StageKind::Haze),
            "darkness" => Ok(StageKind::Darkness),
            other => Err(RestoreError::InvalidInput(format!(
                "unknown stage kind '{other}'"
            ))),
        }
    }

    /// Full legal parameter range for this kind.
    pub fn full_range(&self) -> (f64, f64) {
        match self {
            StageKind::Blur => (0.0, 5.0),
            StageKind::Noise => (0.0, 50.0),
            StageKind::Jpeg => (10.0, 100.0),
            StageKind::Haze => (0.05, 0.25),
            StageKind::Darkness => (1.5, 2.5),
        }
    }

    /// Sub-range assigned to a severity group. Each full range is cut into
    /// contiguous thirds; JPEG quality is inverted (low quality = severe).
    pub fn severity_range(&self, s: Severity) -> (f64, f64) {
        if let StageKind::Jpeg = self {
            return match s {
                Severity::Severe => (10.0, 40.0),
                Severity::Moderate => (40.0, 70.0),
                Severity::Mild => (70.0, 100.0),
            };
        }
        let (lo, hi) = self.full_range();
        let third = (hi - lo) / 3.0;
        match s {
            Severity::Mild => (lo, lo + third),
            Severity::Moderate => (lo + third, lo + 2.0 * third),
            Severity::Severe => (lo + 2.0 * third, hi),
        }
    }
}

/// One degradation stage with its sampled parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistortionStage {
    pub kind: StageKind,
    pub parameter: f64,
}

/// Ordered degradation stages plus the seed they were sampled from.
/// Base order is fixed: blur, noise, jpeg; a new factor, if any, comes last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradationChain {
    pub stages: Vec<DistortionStage>,
    pub severity: Severity,
    pub seed: u64,
}

impl DegradationChain {
    /// Check stage ordering and that every parameter sits in its severity sub-range.
    pub fn validate(&self) -> Result<()> {
        let kinds: Vec<StageKind> = self.stages.iter().map(|s| s.kind).collect();
        let base = [StageKind::Blur, StageKind::Noise, StageKind::Jpeg];
        if kinds.len() < 3 || kinds[..3] != base {
            return Err(RestoreError::InvalidInput(
                "chain must start with blur, noise, jpeg".into(),
            ));
        }
        if kinds.len() > 4 {
            return Err(RestoreError::InvalidInput("too many stages".into()));
        }
        if kinds.len() == 4 && !matches!(kinds[3], StageKind::Haze | StageKind::Darkness) {
            return Err(RestoreError::InvalidInput(
                "fourth stage must be haze or darkness".into(),
            ));
        }
        for st in &self.stages {
            let (lo, hi) = st.kind.severity_range(self.severity);
            if st.parameter < lo || st.parameter > hi {
                return Err(RestoreError::InvalidInput(format!(
                    "{} parameter {} outside {:?} range [{lo}, {hi}]",
                    st.kind.as_str(),
                    st.parameter,
                    self.severity
                )));
            }
        }
        Ok(())
    }

    /// Compact text form, e.g. `blur:1.25,noise:20.5,jpeg:55`.
    pub fn encode(&self) -> String {
        self.stages
            .iter()
            .map(|s| format!("{}:{}", s.kind.as_str(), s.parameter))
            .collect::<Vec<_>>()
            .join(",")
    }

    pub fn decode(text: &str, severity: Severity, seed: u64) -> Result<Self> {
        let mut stages = Vec::new();
        if !text.is_empty() {
            for part in text.split(',') {
                let (k, v) = part.split_once(':').ok_or_else(|| {
                    RestoreError::InvalidInput(format!("bad chain element '{part}'"))
                })?;
                let kind = StageKind::parse(k)?;
                let parameter: f64 = v.parse().map_err(|_| {
                    RestoreError::InvalidInput(format!("bad chain parameter '{v}'"))
                })?;
                stages.push(DistortionStage { kind, parameter });
            }
        }
        Ok(DegradationChain { stages, severity, seed })
    }
}

/// Isotropic Gaussian blur with symmetric (reflective) padding.
/// Kernel half-width is ceil(3*sigma); sigma = 0 returns the input unchanged.
pub fn gaussian_blur(img: &ImagePatch, sigma: f64) -> Result<ImagePatch> {
    if sigma < 0.0 || !sigma.is_finite() {
        return Err(RestoreError::InvalidParameter(format!(
            "blur sigma must be >= 0, got {sigma}"
        )));
    }
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let half = (3.0 * sigma).ceil() as usize;
    let mut kernel = vec![0.0f64; 2 * half + 1];
    let inv = -0.5 / (sigma * sigma);
    let mut sum = 0.0;
    for (i, k) in kernel.iter_mut().enumerate() {
        let d = i as f64 - half as f64;
        *k = (d * d * inv).exp();
        sum += *k;
    }
    for k in &mut kernel {
        *k /= sum;
    }

    let (_, h, w) = img.data.dim();
    let mut tmp = Array3::<f64>::zeros((3, h, w));
    // horizontal pass
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (i, k) in kernel.iter().enumerate() {
                    let ix = reflect_index(x as isize + i as isize - half as isize, w);
                    acc += k * img.data[[c, y, ix]];
                }
                tmp[[c, y, x]] = acc;
            }
        }
    }
    // vertical pass
    let mut out = Array3::<f64>::zeros((3, h, w));
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (i, k) in kernel.iter().enumerate() {
                    let iy = reflect_index(y as isize + i as isize - half as isize, h);
                    acc += k * tmp[[c, iy, x]];
                }
                out[[c, y, x]] = acc.clamp(0.0, 1.0);
            }
        }
    }
    ImagePatch::new(out, img.id.clone())
}

/// Symmetric reflection (edge repeated): ... c b a | a b c | c b a ...
fn reflect_index(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let mut k = i % period;
    if k < 0 {
        k += period;
    }
    if k < n as isize {
        k as usize
    } else {
        (period - 1 - k) as usize
    }
}

/// Additive i.i.d. zero-mean Gaussian noise. `sigma` is on the 0-255 scale.
pub fn add_gaussian_noise(img: &ImagePatch, sigma: f64, seed: u64) -> Result<ImagePatch> {
    if sigma < 0.0 || !sigma.is_finite() {
        return Err(RestoreError::InvalidParameter(format!(
            "noise sigma must be >= 0, got {sigma}"
        )));
    }
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let normal = Normal::new(0.0, sigma / 255.0).expect("valid stddev");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = img.clone();
    for v in out.data.iter_mut() {
        *v = (*v + normal.sample(&mut rng)).clamp(0.0, 1.0);
    }
    Ok(out)
}

/// Baseline JPEG round trip at the given quality (1-100).
pub fn jpeg_compress(img: &ImagePatch, quality: u32) -> Result<ImagePatch> {
    if !(1..=100).contains(&quality) {
        return Err(RestoreError::InvalidParameter(format!(
            "jpeg quality must be in [1, 100], got {quality}"
        )));
    }
    use image::ImageEncoder;
    let rgb = img.to_rgb8();
    let mut buf = Vec::new();
    let enc = image::codecs::jpeg::JpegEncoder::new_with_quality(&mut buf, quality as u8);
    enc.write_image(
        rgb.as_raw(),
        rgb.width(),
        rgb.height(),
        image::ExtendedColorType::Rgb8,
    )?;
    let decoded = image::load_from_memory_with_format(&buf, image::ImageFormat::Jpeg)?.to_rgb8();
    ImagePatch::from_rgb8(&decoded, img.id.clone())
}

/// Atmospheric scattering: I = J*t + A*(1-t) with global transmission
/// t = exp(-beta * D), constant depth D = 10 and atmospheric light A = 1.
pub fn apply_haze(img: &ImagePatch, beta: f64) -> Result<ImagePatch> {
    if beta < 0.0 || !beta.is_finite() {
        return Err(RestoreError::InvalidParameter(format!(
            "haze beta must be >= 0, got {beta}"
        )));
    }
    if beta == 0.0 {
        return Ok(img.clone());
    }
    let t = (-beta * 10.0).exp();
    let airlight = 1.0 - t;
    let mut out = img.clone();
    for v in out.data.iter_mut() {
        *v = (*v * t + airlight).clamp(0.0, 1.0);
    }
    Ok(out)
}

/// Power-law darkening: out = in^gamma on [0, 1].
pub fn apply_darkness(img: &ImagePatch, gamma: f64) -> Result<ImagePatch> {
    if gamma <= 0.0 || !gamma.is_finite() {
        return Err(RestoreError::InvalidParameter(format!(
            "darkness gamma must be > 0, got {gamma}"
        )));
    }
    if gamma == 1.0 {
        return Ok(img.clone());
    }
    let mut out = img.clone();
    for v in out.data.iter_mut() {
        *v = v.clamp(0.0, 1.0).powf(gamma);
    }
    Ok(out)
}

/// Sample a degradation chain for one severity group. Base parameters are
/// uniform in their severity sub-range; JPEG quality is an integer.
pub fn sample_chain(severity: Severity, new_factor: NewFactor, seed: u64) -> DegradationChain {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stages = Vec::with_capacity(4);

    let (blo, bhi) = StageKind::Blur.severity_range(severity);
    stages.push(DistortionStage { kind: StageKind::Blur, parameter: rng.gen_range(blo..bhi) });

    let (nlo, nhi) = StageKind::Noise.severity_range(severity);
    stages.push(DistortionStage { kind: StageKind::Noise, parameter: rng.gen_range(nlo..nhi) });

    let (qlo, qhi) = StageKind::Jpeg.severity_range(severity);
    // integer quality; the upper edge belongs to mild only (quality 100)
    let hi_int = if severity == Severity::Mild { qhi as u32 } else { qhi as u32 - 1 };
    let q = rng.gen_range(qlo as u32..=hi_int);
    stages.push(DistortionStage { kind: StageKind::Jpeg, parameter: q as f64 });

    match new_factor {
        NewFactor::None => {}
        NewFactor::Haze => {
            let (lo, hi) = StageKind::Haze.severity_range(severity);
            stages.push(DistortionStage { kind: StageKind::Haze, parameter: rng.gen_range(lo..hi) });
        }
        NewFactor::Darkness => {
            let (lo, hi) = StageKind::Darkness.severity_range(severity);
            stages.push(DistortionStage {
                kind: StageKind::Darkness,
                parameter: rng.gen_range(lo..hi),
            });
        }
    }

    DegradationChain { stages, severity, seed }
}

/// Apply every stage of a chain in order. Noise seeds are derived from the
/// chain seed and the stage index, so a chain is a pure function of the input.
pub fn apply_chain(img: &ImagePatch, chain: &DegradationChain) -> Result<ImagePatch> {
    let mut cur = img.clone();
    for (idx, stage) in chain.stages.iter().enumerate() {
        cur = match stage.kind {
            StageKind::Blur => gaussian_blur(&cur, stage.parameter)?,
            StageKind::Noise => {
                add_gaussian_noise(&cur, stage.parameter, derive_seed(chain.seed, idx as u64))?
            }
            StageKind::Jpeg => jpeg_compress(&cur, stage.parameter.round() as u32)?,
            StageKind::Haze => apply_haze(&cur, stage.parameter)?,
            StageKind::Darkness => apply_darkness(&cur, stage.parameter)?,
        };
    }
    Ok(cur)
}

/// SplitMix64 step, used to derive per-stage and per-patch seeds.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::psnr;

    fn fixture(h: usize, w: usize) -> ImagePatch {
        ImagePatch::synthetic(h, w, 3)
    }

    #[test]
    fn blur_sigma_zero_is_identity() {
        let img = fixture(16, 16);
        let out = gaussian_blur(&img, 0.0).unwrap();
        assert_eq!(out.data, img.data);
    }

    #[test]
    fn blur_preserves_constant_images() {
        let img = ImagePatch::constant(24, 24, 0.437, "c").unwrap();
        let out = gaussian_blur(&img, 3.0).unwrap();
        for v in out.data.iter() {
            assert!((v - 0.437).abs() < 1e-12);
        }
    }

    #[test]
    fn blur_impulse_matches_closed_form_kernel() {
        // unit impulse at the center; response must equal the normalized kernel
        let sigma: f64 = 2.0;
        let half = (3.0 * sigma).ceil() as usize; // 6
        let n = 33;
        let mut data = Array3::<f64>::zeros((3, n, n));
        let c = n / 2;
        for ch in 0..3 {
            data[[ch, c, c]] = 1.0;
        }
        let img = ImagePatch::new(data, "impulse").unwrap();
        let out = gaussian_blur(&img, sigma).unwrap();

        // independently computed normalized 2-D kernel
        let mut k1 = vec![0.0; 2 * half + 1];
        let mut s = 0.0;
        for (i, k) in k1.iter_mut().enumerate() {
            let d = i as f64 - half as f64;
            *k = (-d * d / (2.0 * sigma * sigma)).exp();
            s += *k;
        }
        for k in &mut k1 {
            *k /= s;
        }
        let mut max_diff: f64 = 0.0;
        for y in 0..n {
            for x in 0..n {
                let dy = y as isize - c as isize;
                let dx = x as isize - c as isize;
                let expect = if dy.unsigned_abs() <= half && dx.unsigned_abs() <= half {
                    k1[(dy + half as isize) as usize] * k1[(dx + half as isize) as usize]
                } else {
                    0.0
                };
                max_diff = max_diff.max((out.data[[0, y, x]] - expect).abs());
            }
        }
        assert!(max_diff < 1e-6, "max diff {max_diff}");
    }

    #[test]
    fn blur_rejects_negative_sigma() {
        let img = fixture(8, 8);
        assert!(matches!(
            gaussian_blur(&img, -0.1),
            Err(RestoreError::InvalidParameter(_))
        ));
    }

    #[test]
    fn noise_sigma_zero_is_identity_and_seed_is_deterministic() {
        let img = fixture(16, 16);
        assert_eq!(add_gaussian_noise(&img, 0.0, 1).unwrap().data, img.data);
        let a = add_gaussian_noise(&img, 25.0, 42).unwrap();
        let b = add_gaussian_noise(&img, 25.0, 42).unwrap();
        assert_eq!(a.data, b.data);
        let c = add_gaussian_noise(&img, 25.0, 43).unwrap();
        assert_ne!(a.data, c.data);
    }

    #[test]
    fn noise_sample_std_matches_requested_level() {
        let img = ImagePatch::constant(256, 256, 0.5, "gray").unwrap();
        let out = add_gaussian_noise(&img, 25.0, 7).unwrap();
        let diffs: Vec<f64> = out
            .data
            .iter()
            .zip(img.data.iter())
            .map(|(a, b)| a - b)
            .collect();
        let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
        let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>()
            / (diffs.len() - 1) as f64;
        let std = var.sqrt();
        let target = 25.0 / 255.0;
        assert!(
            (std - target).abs() < 0.05 * target,
            "sample std {std} vs target {target}"
        );
    }

    #[test]
    fn jpeg_constant_color_survives_high_quality() {
        let img = ImagePatch::constant(64, 64, 0.5, "c").unwrap();
        let out = jpeg_compress(&img, 90).unwrap();
        assert!(psnr(&img, &out).unwrap() >= 45.0);
    }

    #[test]
    fn jpeg_quality_orders_fidelity() {
        let img = fixture(64, 64);
        let lo = jpeg_compress(&img, 10).unwrap();
        let hi = jpeg_compress(&img, 90).unwrap();
        assert!(psnr(&img, &lo).unwrap() < psnr(&img, &hi).unwrap());
    }

    #[test]
    fn jpeg_rejects_out_of_range_quality() {
        let img = fixture(8, 8);
        assert!(matches!(
            jpeg_compress(&img, 101),
            Err(RestoreError::InvalidParameter(_))
        ));
        assert!(matches!(
            jpeg_compress(&img, 0),
            Err(RestoreError::InvalidParameter(_))
        ));
    }

    #[test]
    fn haze_identity_and_closed_form() {
        let img = fixture(16, 16);
        assert_eq!(apply_haze(&img, 0.0).unwrap().data, img.data);

        let black = ImagePatch::constant(8, 8, 0.0, "b").unwrap();
        let hazed = apply_haze(&black, 0.25).unwrap();
        let expect = 1.0 - (-2.5f64).exp();
        for v in hazed.data.iter() {
            assert!((v - expect).abs() < 1e-6);
        }

        let white = ImagePatch::constant(8, 8, 1.0, "w").unwrap();
        for beta in [0.05, 0.17, 0.25] {
            assert_eq!(apply_haze(&white, beta).unwrap().data, white.data);
        }
    }

    #[test]
    fn darkness_fixed_points_and_closed_form() {
        let img = fixture(16, 16);
        assert_eq!(apply_darkness(&img, 1.0).unwrap().data, img.data);

        let mid = ImagePatch::constant(8, 8, 0.5, "m").unwrap();
        let out = apply_darkness(&mid, 2.0).unwrap();
        for v in out.data.iter() {
            assert!((v - 0.25).abs() < 1e-12);
        }

        let mut extremes = ImagePatch::constant(8, 8, 0.0, "e").unwrap();
        extremes.data[[0, 0, 0]] = 1.0;
        let out = apply_darkness(&extremes, 2.2).unwrap();
        assert_eq!(out.data[[0, 0, 0]], 1.0);
        assert_eq!(out.data[[1, 0, 0]], 0.0);
    }

    #[test]
    fn darkness_never_brightens_for_gamma_above_one() {
        let img = fixture(16, 16);
        let out = apply_darkness(&img, 1.7).unwrap();
        for (o, i) in out.data.iter().zip(img.data.iter()) {
            assert!(o <= i);
        }
    }

    #[test]
    fn sampled_chain_respects_severity_partition() {
        let chain = sample_chain(Severity::Moderate, NewFactor::None, 99);
        assert_eq!(chain.stages.len(), 3);
        chain.validate().unwrap();
        let blur = chain.stages[0].parameter;
        assert!((5.0 / 3.0..10.0 / 3.0).contains(&blur));
        let noise = chain.stages[1].parameter;
        assert!((50.0 / 3.0..100.0 / 3.0).contains(&noise));
        let q = chain.stages[2].parameter;
        assert!((40.0..70.0).contains(&q));
    }

    #[test]
    fn chain_sampling_is_deterministic() {
        let a = sample_chain(Severity::Severe, NewFactor::Darkness, 5);
        let b = sample_chain(Severity::Severe, NewFactor::Darkness, 5);
        assert_eq!(a, b);
    }

    #[test]
    fn new_factor_is_appended_last() {
        let chain = sample_chain(Severity::Mild, NewFactor::Haze, 1);
        assert_eq!(chain.stages.len(), 4);
        assert_eq!(chain.stages[3].kind, StageKind::Haze);
        chain.validate().unwrap();
    }

    #[test]
    fn empty_chain_is_identity() {
        let img = fixture(16, 16);
        let chain = DegradationChain { stages: vec![], severity: Severity::Moderate, seed: 0 };
        let out = apply_chain(&img, &chain).unwrap();
        assert_eq!(out.data, img.data);
    }

    #[test]
    fn identity_composition_without_jpeg() {
        let img = fixture(16, 16);
        let chain = DegradationChain {
            stages: vec![
                DistortionStage { kind: StageKind::Blur, parameter: 0.0 },
                DistortionStage { kind: StageKind::Noise, parameter: 0.0 },
            ],
            severity: Severity::Mild,
            seed: 3,
        };
        let out = apply_chain(&img, &chain).unwrap();
        assert_eq!(out.data, img.data);
    }

    #[test]
    fn noisy_chain_scores_below_codec_only_chain() {
        let img = fixture(64, 64);
        let codec_only = DegradationChain {
            stages: vec![
                DistortionStage { kind: StageKind::Blur, parameter: 0.0 },
                DistortionStage { kind: StageKind::Noise, parameter: 0.0 },
                DistortionStage { kind: StageKind::Jpeg, parameter: 100.0 },
            ],
            severity: Severity::Mild,
            seed: 11,
        };
        let clean_ref = apply_chain(&img, &codec_only).unwrap();
        let base_psnr = psnr(&img, &clean_ref).unwrap();
        assert!(base_psnr >= 45.0, "codec-only residual {base_psnr}");

        for sigma in [10.0, 25.0, 50.0] {
            let noisy = DegradationChain {
                stages: vec![
                    DistortionStage { kind: StageKind::Blur, parameter: 0.0 },
                    DistortionStage { kind: StageKind::Noise, parameter: sigma },
                    DistortionStage { kind: StageKind::Jpeg, parameter: 100.0 },
                ],
                severity: Severity::Mild,
                seed: 11,
            };
            let out = apply_chain(&img, &noisy).unwrap();
            assert!(psnr(&img, &out).unwrap() < base_psnr);
        }
    }

    #[test]
    fn chain_round_trips_through_text() {
        let chain = sample_chain(Severity::Moderate, NewFactor::Darkness, 17);
        let text = chain.encode();
        let back = DegradationChain::decode(&text, chain.severity, chain.seed).unwrap();
        assert_eq!(chain, back);
    }
}
