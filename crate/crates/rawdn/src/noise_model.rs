//! Heteroscedastic shot/read noise: per-pixel variance maps, Gaussian noise
//! synthesis, and least-squares calibration of (a, b) from flat-field stacks.
//!
//! The observation model is z = y + n with n ~ N(0, a*y + b): `a` scales the
//! signal-dependent (shot) variance, `b` is the signal-independent (read)
//! variance, both in normalized intensity units.

use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raw_data::{PackedFrame, Sequence};

/// Floor applied to every variance value; guards against negative variances
/// from negative noisy proxies, which the model itself does not rule out.
pub const EPS_VAR: f64 = 1e-8;

/// Per-pixel per-channel noise variance, same shape as a packed frame.
pub type VarianceMap = Array3<f64>;

/// Shot/read noise coefficients for one camera/ISO setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseParams {
    pub a: f64,
    pub b: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iso: Option<String>,
}

impl NoiseParams {
    pub fn new(a: f64, b: f64) -> Result<Self> {
        if !(a.is_finite() && b.is_finite()) || a < 0.0 || b < 0.0 {
            return Err(Error::Invalid(format!(
                "noise coefficients must be finite and nonnegative, got a={a}, b={b}"
            )));
        }
        Ok(NoiseParams { a, b, iso: None })
    }

    pub fn with_iso(mut self, iso: &str) -> Self {
        self.iso = Some(iso.to_string());
        self
    }

    /// Synthetic per-"ISO" presets, ordered from lowest to highest noise.
    /// The coefficients are artifact-local stand-ins; real values come from
    /// camera calibration.
    pub fn presets() -> Vec<NoiseParams> {
        vec![
            NoiseParams { a: 0.0008, b: 0.00003, iso: Some("synth-1600".into()) },
            NoiseParams { a: 0.0020, b: 0.00008, iso: Some("synth-3200".into()) },
            NoiseParams { a: 0.0050, b: 0.0002, iso: Some("synth-6400".into()) },
            NoiseParams { a: 0.0100, b: 0.0004, iso: Some("synth-25600".into()) },
        ]
    }

    /// The noisiest preset; validation and acceptance runs use it.
    pub fn max_preset() -> NoiseParams {
        Self::presets().pop().expect("presets nonempty")
    }
}

/// Entrywise a*max(v,0) + b, floored at [`EPS_VAR`].
pub fn variance_map(frame: &PackedFrame, params: &NoiseParams) -> VarianceMap {
    frame
        .data
        .mapv(|v| (params.a * f64::from(v).max(0.0) + params.b).max(EPS_VAR))
}

/// Same rule on an f64 plane already in memory.
pub fn variance_of(data: &Array3<f64>, params: &NoiseParams) -> VarianceMap {
    data.mapv(|v| (params.a * v.max(0.0) + params.b).max(EPS_VAR))
}

/// Add zero-mean Gaussian noise with per-pixel std sqrt(a*y + b).
///
/// Samples come from a ChaCha12 stream seeded with `seed`, drawn in frame
/// order and channel-planar row-major order within each frame, so output is
/// bit-reproducible across platforms. No clipping is applied; clamping to
/// [0,1] happens only at final image export.
pub fn add_noise(clean: &Sequence, params: &NoiseParams, seed: u64) -> Result<Sequence> {
    if params.a == 0.0 && params.b == 0.0 {
        return Err(Error::DegenerateNoiseParams);
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let frames = clean
        .frames
        .iter()
        .map(|frame| {
            let data = frame.data.mapv(|y| {
                let var = (params.a * f64::from(y).max(0.0) + params.b).max(0.0);
                let n: f64 = StandardNormal.sample(&mut rng);
                (f64::from(y) + n * var.sqrt()) as f32
            });
            PackedFrame { data }
        })
        .collect();
    Ok(Sequence {
        frames,
        noise: Some(params.clone()),
        source_pattern: clean.source_pattern,
    })
}

/// Fit of (a, b) from flat-field stacks, with the least-squares residual.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub a: f64,
    pub b: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iso: Option<String>,
    /// Root-mean-square residual of the variance fit.
    pub residual: f64,
}

impl CalibrationResult {
    pub fn params(&self) -> NoiseParams {
        NoiseParams { a: self.a, b: self.b, iso: self.iso.clone() }
    }
}

/// Calibrate (a, b) from flat-field stacks: each stack is a sequence of
/// frames of one constant scene. Per stack, the mean intensity and the mean
/// per-pixel temporal variance give one (mean, variance) point; the points
/// are fit by least squares to variance = a*mean + b.
pub fn calibrate(flat_stacks: &[Sequence]) -> Result<CalibrationResult> {
    if flat_stacks.len() < 2 {
        return Err(Error::RankDeficient(format!(
            "calibration needs at least 2 flat stacks, got {}",
            flat_stacks.len()
        )));
    }
    let mut points = Vec::with_capacity(flat_stacks.len());
    for (idx, stack) in flat_stacks.iter().enumerate() {
        let t = stack.len();
        if t < 16 {
            return Err(Error::Invalid(format!(
                "flat stack {idx} has {t} frames, need at least 16"
            )));
        }
        let (c, h, w) = stack.frames[0].data.dim();
        let npix = c * h * w;
        let mut mean = vec![0.0f64; npix];
        for frame in &stack.frames {
            for (m, v) in mean.iter_mut().zip(frame.data.iter()) {
                *m += f64::from(*v);
            }
        }
        for m in &mut mean {
            *m /= t as f64;
        }
        // Unbiased temporal variance per pixel, averaged over the stack.
        let mut var_sum = 0.0f64;
        for frame in &stack.frames {
            for (m, v) in mean.iter().zip(frame.data.iter()) {
                let d = f64::from(*v) - m;
                var_sum += d * d;
            }
        }
        let var = var_sum / ((t - 1) as f64) / (npix as f64);
        let grand_mean = mean.iter().sum::<f64>() / npix as f64;
        points.push((grand_mean, var));
    }

    // Least squares for var = a*mean + b.
    let n = points.len() as f64;
    let sx: f64 = points.iter().map(|p| p.0).sum();
    let sy: f64 = points.iter().map(|p| p.1).sum();
    let sxx: f64 = points.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = points.iter().map(|p| p.0 * p.1).sum();
    let det = n * sxx - sx * sx;
    let spread = sxx / n - (sx / n) * (sx / n);
    if spread < 1e-12 {
        return Err(Error::RankDeficient(
            "flat stacks must cover at least 2 distinct intensity levels".into(),
        ));
    }
    let a = ((n * sxy - sx * sy) / det).max(0.0);
    let b = ((sy * sxx - sx * sxy) / det).max(0.0);
    let residual = (points
        .iter()
        .map(|(x, y)| {
            let e = y - (a * x + b);
            e * e
        })
        .sum::<f64>()
        / n)
        .sqrt();
    Ok(CalibrationResult { a, b, iso: None, residual })
}
