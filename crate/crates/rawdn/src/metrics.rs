//! PSNR and SSIM on packed frames, plus sequence-level quality reports
//! comparing the noisy input and the model output against ground truth.

use ndarray::{Array2, ArrayView2};
use serde::ser::SerializeSeq;
use serde::{Serialize, Serializer};

use crate::denoise_net::{denoise_sequence, ModelWeights};
use crate::error::{Error, Result};
use crate::noise_model::NoiseParams;
use crate::raw_data::{PackedFrame, Sequence};

/// SSIM window: 11x11 Gaussian, sigma 1.5, on a unit dynamic range.
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
const SSIM_L: f64 = 1.0;

/// Peak signal-to-noise ratio in dB over all samples of a packed frame.
/// Identical frames give `f64::INFINITY`.
pub fn psnr(x: &PackedFrame, reference: &PackedFrame, peak: f64) -> Result<f64> {
    if x.data.dim() != reference.data.dim() {
        return Err(Error::Shape(format!(
            "psnr operands: {:?} vs {:?}",
            x.data.dim(),
            reference.data.dim()
        )));
    }
    let mut sum = 0.0f64;
    for (a, b) in x.data.iter().zip(reference.data.iter()) {
        let d = f64::from(*a) - f64::from(*b);
        sum += d * d;
    }
    let mse = sum / x.data.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut taps = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - c;
        *t = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *t;
    }
    for t in &mut taps {
        *t /= sum;
    }
    taps
}

/// Separable valid-mode correlation with the Gaussian window: [h,w] ->
/// [h-10, w-10].
fn window_filter(img: &ArrayView2<f64>, taps: &[f64; SSIM_WINDOW]) -> Array2<f64> {
    let (h, w) = img.dim();
    let wo = w - (SSIM_WINDOW - 1);
    let ho = h - (SSIM_WINDOW - 1);
    let mut rows = Array2::<f64>::zeros((h, wo));
    for i in 0..h {
        for j in 0..wo {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                acc += t * img[[i, j + k]];
            }
            rows[[i, j]] = acc;
        }
    }
    let mut out = Array2::<f64>::zeros((ho, wo));
    for i in 0..ho {
        for j in 0..wo {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                acc += t * rows[[i + k, j]];
            }
            out[[i, j]] = acc;
        }
    }
    out
}

/// Mean structural similarity over all channels, valid windows only.
pub fn ssim(x: &PackedFrame, reference: &PackedFrame) -> Result<f64> {
    if x.data.dim() != reference.data.dim() {
        return Err(Error::Shape(format!(
            "ssim operands: {:?} vs {:?}",
            x.data.dim(),
            reference.data.dim()
        )));
    }
    let (c, h, w) = x.data.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Shape(format!(
            "ssim needs frames of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let taps = gaussian_taps();
    let c1 = (SSIM_K1 * SSIM_L) * (SSIM_K1 * SSIM_L);
    let c2 = (SSIM_K2 * SSIM_L) * (SSIM_K2 * SSIM_L);
    let mut total = 0.0;
    for ch in 0..c {
        let a = x.data.index_axis(ndarray::Axis(0), ch).mapv(f64::from);
        let b = reference.data.index_axis(ndarray::Axis(0), ch).mapv(f64::from);
        let mu_a = window_filter(&a.view(), &taps);
        let mu_b = window_filter(&b.view(), &taps);
        let aa = window_filter(&(&a * &a).view(), &taps);
        let bb = window_filter(&(&b * &b).view(), &taps);
        let ab = window_filter(&(&a * &b).view(), &taps);
        let mut acc = 0.0;
        let n = mu_a.len();
        for (((((ma, mb), saa), sbb), sab), _) in mu_a
            .iter()
            .zip(mu_b.iter())
            .zip(aa.iter())
            .zip(bb.iter())
            .zip(ab.iter())
            .zip(0..n)
        {
            let va = saa - ma * ma;
            let vb = sbb - mb * mb;
            let cov = sab - ma * mb;
            let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
            let den = (ma * ma + mb * mb + c1) * (va + vb + c2);
            acc += num / den;
        }
        total += acc / n as f64;
    }
    Ok(total / c as f64)
}

fn ser_db<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else {
        s.serialize_str("inf")
    }
}

fn ser_db_vec<S: Serializer>(v: &[f64], s: S) -> std::result::Result<S::Ok, S::Error> {
    let mut seq = s.serialize_seq(Some(v.len()))?;
    for x in v {
        if x.is_finite() {
            seq.serialize_element(x)?;
        } else {
            seq.serialize_element("inf")?;
        }
    }
    seq.end()
}

/// Per-frame scores and their arithmetic means for one comparison column.
#[derive(Debug, Clone, Serialize)]
pub struct SeqScores {
    #[serde(serialize_with = "ser_db_vec")]
    pub psnr_per_frame: Vec<f64>,
    pub ssim_per_frame: Vec<f64>,
    #[serde(serialize_with = "ser_db")]
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

impl SeqScores {
    fn from_frames(psnr_per_frame: Vec<f64>, ssim_per_frame: Vec<f64>) -> SeqScores {
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        SeqScores {
            mean_psnr: mean(&psnr_per_frame),
            mean_ssim: mean(&ssim_per_frame),
            psnr_per_frame,
            ssim_per_frame,
        }
    }
}

/// One noise level's "noisy input" and "model output" columns.
#[derive(Debug, Clone, Serialize)]
pub struct LevelReport {
    pub level: String,
    pub noisy: SeqScores,
    pub model: SeqScores,
}

#[derive(Debug, Clone, Serialize)]
pub struct QualityReport {
    pub levels: Vec<LevelReport>,
    pub mean: LevelReport,
}

/// An aligned noisy/clean pair with the noise parameters the model should
/// assume.
#[derive(Debug, Clone)]
pub struct EvalPair {
    pub noisy: Sequence,
    pub clean: Sequence,
    pub params: NoiseParams,
}

fn level_label(params: &NoiseParams) -> String {
    params
        .iso
        .clone()
        .unwrap_or_else(|| format!("a={:.6},b={:.6}", params.a, params.b))
}

/// Run the model over every pair and score both the raw noisy input and the
/// model output against the clean reference, grouped by noise level.
pub fn evaluate(w: &ModelWeights, pairs: &[EvalPair]) -> Result<QualityReport> {
    if pairs.is_empty() {
        return Err(Error::Invalid("evaluate needs at least one pair".into()));
    }
    // level -> (noisy psnr, noisy ssim, model psnr, model ssim), per frame
    let mut grouped: std::collections::BTreeMap<String, [Vec<f64>; 4]> = Default::default();
    for pair in pairs {
        if pair.noisy.len() != pair.clean.len() {
            return Err(Error::Shape("noisy/clean sequence lengths differ".into()));
        }
        let denoised = denoise_sequence(&pair.noisy, &pair.params, w)?;
        let bucket = grouped.entry(level_label(&pair.params)).or_default();
        for t in 0..pair.clean.len() {
            let clean = &pair.clean.frames[t];
            bucket[0].push(psnr(&pair.noisy.frames[t], clean, 1.0)?);
            bucket[1].push(ssim(&pair.noisy.frames[t], clean)?);
            bucket[2].push(psnr(&denoised.frames[t], clean, 1.0)?);
            bucket[3].push(ssim(&denoised.frames[t], clean)?);
        }
    }
    let mut levels = Vec::new();
    let mut all: [Vec<f64>; 4] = Default::default();
    for (level, cols) in grouped {
        for (dst, src) in all.iter_mut().zip(cols.iter()) {
            dst.extend_from_slice(src);
        }
        let [np, ns, mp, ms] = cols;
        levels.push(LevelReport {
            level,
            noisy: SeqScores::from_frames(np, ns),
            model: SeqScores::from_frames(mp, ms),
        });
    }
    let [np, ns, mp, ms] = all;
    let mean = LevelReport {
        level: "all".into(),
        noisy: SeqScores::from_frames(np, ns),
        model: SeqScores::from_frames(mp, ms),
    };
    Ok(QualityReport { levels, mean })
}
