//! The cascaded denoising network: fusion, denoising, and refinement stages,
//! per-frame recurrence with noise-variance propagation, and the coarse-to-
//! fine multi-scale orchestration with weights shared across scales.
//!
//! Two execution paths exist: a plain-array inference path (`step`,
//! `denoise_sequence`) and a tape-recorded path (`step_on_tape`) used by the
//! training engine; both compose the same primitives and a test pins them to
//! identical outputs.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array3, Array4, ArrayD, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::color_transform::{
    color_forward, color_inverse, transform_variance, ColorKernel,
};
use crate::error::{Error, Result};
use crate::nn::{downsample2_forward, upsample2_forward, ConvStage, OutActivation};
use crate::noise_model::{variance_of, NoiseParams, VarianceMap, EPS_VAR};
use crate::raw_data::{PackedFrame, Sequence};
use crate::tape::{Tape, Var};

/// Architecture hyperparameters. The stage wiring is fixed; only hidden
/// widths and the scale count vary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    pub fusion_hidden: usize,
    pub denoise_hidden: usize,
    pub refine_hidden: usize,
    pub scales: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig { fusion_hidden: 16, denoise_hidden: 32, refine_hidden: 16, scales: 3 }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scales == 0 {
            return Err(Error::Config("scale count must be at least 1".into()));
        }
        if self.fusion_hidden == 0 || self.denoise_hidden == 0 || self.refine_hidden == 0 {
            return Err(Error::Config("hidden widths must be nonzero".into()));
        }
        Ok(())
    }
}

/// Stage input widths follow from the wiring: fusion sees |z - y_prev| and
/// the input variance (8 ch), denoising and refinement each see two images
/// plus the fused variance (12 ch).
pub const FUSION_IN: usize = 8;
pub const DENOISE_IN: usize = 12;
pub const REFINE_IN: usize = 12;

/// The full parameter set: the color kernel plus the three stages' tensors.
/// One instance serves every scale (weight sharing by construction).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub color: ColorKernel,
    pub fusion: ConvStage,
    pub denoise: ConvStage,
    pub refine: ConvStage,
    pub config: NetConfig,
}

/// Fixed tensor order used by checkpoints, gradients, and the optimizer.
pub const TENSOR_NAMES: [&str; 19] = [
    "color.M",
    "fusion.layer1.kernel",
    "fusion.layer1.bias",
    "fusion.layer2.kernel",
    "fusion.layer2.bias",
    "fusion.out.kernel",
    "fusion.out.bias",
    "denoise.layer1.kernel",
    "denoise.layer1.bias",
    "denoise.layer2.kernel",
    "denoise.layer2.bias",
    "denoise.out.kernel",
    "denoise.out.bias",
    "refine.layer1.kernel",
    "refine.layer1.bias",
    "refine.layer2.kernel",
    "refine.layer2.bias",
    "refine.out.kernel",
    "refine.out.bias",
];

impl ModelWeights {
    /// Fresh weights: color kernel from the published init, hidden layers
    /// uniform fan-in scaled, output layers zero (gamma and omega start at
    /// 0.5, the denoise residual at 0).
    pub fn init<R: Rng>(config: NetConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        Ok(ModelWeights {
            color: ColorKernel::default_init(),
            fusion: ConvStage::init(FUSION_IN, config.fusion_hidden, 1, OutActivation::Sigmoid, rng),
            denoise: ConvStage::init(
                DENOISE_IN,
                config.denoise_hidden,
                4,
                OutActivation::None,
                rng,
            ),
            refine: ConvStage::init(REFINE_IN, config.refine_hidden, 1, OutActivation::Sigmoid, rng),
            config,
        })
    }

    /// Snapshot of all tensors in [`TENSOR_NAMES`] order.
    pub fn to_named(&self) -> Vec<(&'static str, ArrayD<f64>)> {
        let mut out = Vec::with_capacity(19);
        out.push(("color.M", self.color.m.clone().into_dyn()));
        for (prefix, stage) in
            [("fusion", &self.fusion), ("denoise", &self.denoise), ("refine", &self.refine)]
        {
            let _ = prefix;
            out.push((TENSOR_NAMES[out.len()], stage.k1.clone().into_dyn()));
            out.push((TENSOR_NAMES[out.len()], stage.b1.clone().into_dyn()));
            out.push((TENSOR_NAMES[out.len()], stage.k2.clone().into_dyn()));
            out.push((TENSOR_NAMES[out.len()], stage.b2.clone().into_dyn()));
            out.push((TENSOR_NAMES[out.len()], stage.k3.clone().into_dyn()));
            out.push((TENSOR_NAMES[out.len()], stage.b3.clone().into_dyn()));
        }
        out
    }

    /// Rebuild weights from tensors in [`TENSOR_NAMES`] order.
    pub fn from_named(config: NetConfig, tensors: &[ArrayD<f64>]) -> Result<Self> {
        if tensors.len() != TENSOR_NAMES.len() {
            return Err(Error::Format(format!(
                "expected {} tensors, got {}",
                TENSOR_NAMES.len(),
                tensors.len()
            )));
        }
        let template = {
            let mut rng = rand::rngs::mock::StepRng::new(0, 0);
            ModelWeights::init(config, &mut rng)?
        };
        let expected: Vec<Vec<usize>> =
            template.to_named().iter().map(|(_, t)| t.shape().to_vec()).collect();
        for (i, t) in tensors.iter().enumerate() {
            if t.shape() != expected[i].as_slice() {
                return Err(Error::TensorShape {
                    name: TENSOR_NAMES[i].to_string(),
                    found: t.shape().to_vec(),
                    expected: expected[i].clone(),
                });
            }
        }
        let to4 = |t: &ArrayD<f64>| -> Array4<f64> {
            t.clone().into_dimensionality().expect("rank checked")
        };
        let to1 = |t: &ArrayD<f64>| -> Array1<f64> {
            t.clone().into_dimensionality().expect("rank checked")
        };
        let stage = |base: usize, activation: OutActivation| ConvStage {
            k1: to4(&tensors[base]),
            b1: to1(&tensors[base + 1]),
            k2: to4(&tensors[base + 2]),
            b2: to1(&tensors[base + 3]),
            k3: to4(&tensors[base + 4]),
            b3: to1(&tensors[base + 5]),
            activation,
        };
        Ok(ModelWeights {
            color: ColorKernel::new(
                tensors[0].clone().into_dimensionality().expect("rank checked"),
            )?,
            fusion: stage(1, OutActivation::Sigmoid),
            denoise: stage(7, OutActivation::None),
            refine: stage(13, OutActivation::Sigmoid),
            config,
        })
    }

    pub fn param_count(&self) -> usize {
        16 + self.fusion.param_count() + self.denoise.param_count() + self.refine.param_count()
    }
}

/// Per-scale recurrent state: the previous fused frame and its propagated
/// variance, both in the decorrelated (YUVW) domain.
#[derive(Debug, Clone)]
pub struct ScaleState {
    pub prev_fused: Array3<f64>,
    pub prev_variance: VarianceMap,
}

#[derive(Debug, Clone)]
pub struct DenoiserState {
    pub scales: Vec<ScaleState>,
    pub frame_index: usize,
}

/// Test hooks: force constant fusion/refinement weights instead of the
/// network predictions.
#[derive(Debug, Clone, Copy, Default)]
pub struct StepOverrides {
    pub gamma: Option<f64>,
    pub omega: Option<f64>,
}

fn check_same_shape(a: &Array3<f64>, b: &Array3<f64>, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

/// Predict the fusion weight map from |z - y_prev| and the input variance.
pub fn fusion_weights(
    z: &Array3<f64>,
    prev_fused: &Array3<f64>,
    sigma_hat_sq: &VarianceMap,
    w: &ModelWeights,
) -> Result<Array3<f64>> {
    check_same_shape(z, prev_fused, "fusion_weights image operands")?;
    check_same_shape(z, sigma_hat_sq, "fusion_weights variance operand")?;
    let diff = (z - prev_fused).mapv(f64::abs);
    let input = ndarray::concatenate(ndarray::Axis(0), &[diff.view(), sigma_hat_sq.view()])
        .expect("shape checked");
    Ok(w.fusion.forward(&input.view()))
}

/// Per-pixel convex combination y = y_prev*(1-gamma) + z*gamma; the single
/// gamma channel broadcasts over all image channels.
pub fn fuse(z: &Array3<f64>, prev_fused: &Array3<f64>, gamma: &Array3<f64>) -> Result<Array3<f64>> {
    check_same_shape(z, prev_fused, "fuse image operands")?;
    if gamma.iter().any(|&g| !(0.0..=1.0).contains(&g)) {
        return Err(Error::Invalid("fusion weight outside [0,1]".into()));
    }
    let (c, h, w) = z.dim();
    let g = gamma.index_axis(ndarray::Axis(0), 0);
    Ok(Array3::from_shape_fn((c, h, w), |(ch, i, j)| {
        let gv = g[[i, j]];
        prev_fused[[ch, i, j]] * (1.0 - gv) + z[[ch, i, j]] * gv
    }))
}

/// Variance recursion: gamma^2 * var_z + (1-gamma)^2 * var_prev, floored at
/// [`EPS_VAR`].
pub fn propagate_variance(
    gamma: &Array3<f64>,
    var_z: &VarianceMap,
    var_prev: &VarianceMap,
) -> Result<VarianceMap> {
    check_same_shape(var_z, var_prev, "propagate_variance operands")?;
    let (c, h, w) = var_z.dim();
    let g = gamma.index_axis(ndarray::Axis(0), 0);
    Ok(Array3::from_shape_fn((c, h, w), |(ch, i, j)| {
        let gv = g[[i, j]];
        (gv * gv * var_z[[ch, i, j]] + (1.0 - gv) * (1.0 - gv) * var_prev[[ch, i, j]])
            .max(EPS_VAR)
    }))
}

/// Denoising stage: a residual on the fused frame predicted from
/// (fused, z, fused variance).
pub fn denoise_stage(
    fused: &Array3<f64>,
    z: &Array3<f64>,
    var_fused: &VarianceMap,
    w: &ModelWeights,
) -> Result<Array3<f64>> {
    check_same_shape(fused, z, "denoise_stage image operands")?;
    check_same_shape(fused, var_fused, "denoise_stage variance operand")?;
    let input = ndarray::concatenate(
        ndarray::Axis(0),
        &[fused.view(), z.view(), var_fused.view()],
    )
    .expect("shape checked");
    let residual = w.denoise.forward(&input.view());
    Ok(fused + &residual)
}

/// Predict the refinement weight map from (denoised, fused, fused variance).
pub fn refine_weights(
    denoised: &Array3<f64>,
    fused: &Array3<f64>,
    var_fused: &VarianceMap,
    w: &ModelWeights,
) -> Result<Array3<f64>> {
    check_same_shape(denoised, fused, "refine_weights image operands")?;
    check_same_shape(denoised, var_fused, "refine_weights variance operand")?;
    let input = ndarray::concatenate(
        ndarray::Axis(0),
        &[denoised.view(), fused.view(), var_fused.view()],
    )
    .expect("shape checked");
    Ok(w.refine.forward(&input.view()))
}

/// Final convex recombination of the fused (detailed) and denoised (smooth)
/// frames: y = fused*(1-omega) + denoised*omega.
pub fn refine(
    fused: &Array3<f64>,
    denoised: &Array3<f64>,
    omega: &Array3<f64>,
) -> Result<Array3<f64>> {
    check_same_shape(fused, denoised, "refine image operands")?;
    if omega.iter().any(|&o| !(0.0..=1.0).contains(&o)) {
        return Err(Error::Invalid("refinement weight outside [0,1]".into()));
    }
    fuse(denoised, fused, omega)
}

fn constant_map(h: usize, w: usize, v: f64) -> Array3<f64> {
    Array3::from_elem((1, h, w), v)
}

fn check_pyramid_dims(h: usize, w: usize, scales: usize) -> Result<()> {
    let div = 1usize << (scales - 1);
    if !h.is_multiple_of(div) || !w.is_multiple_of(div) || h / div == 0 || w / div == 0 {
        return Err(Error::Shape(format!(
            "packed dims {h}x{w} must be divisible by 2^(S-1) = {div} with nonzero quotient"
        )));
    }
    Ok(())
}

fn frame_to_f64(frame: &PackedFrame) -> Array3<f64> {
    frame.data.mapv(f64::from)
}

fn frame_from_f64(data: &Array3<f64>) -> Result<PackedFrame> {
    PackedFrame::new(data.mapv(|v| v as f32))
}

/// One recurrent step: returns the denoised frame (packed RGGB domain) and
/// the new per-scale state. Pass `None` for the first frame.
pub fn step(
    state: Option<&DenoiserState>,
    z_frame: &PackedFrame,
    params: &NoiseParams,
    w: &ModelWeights,
    overrides: &StepOverrides,
) -> Result<(PackedFrame, DenoiserState)> {
    let (out, state) = step_f64(state, &frame_to_f64(z_frame), params, w, overrides)?;
    Ok((frame_from_f64(&out)?, state))
}

/// [`step`] in the double-precision domain, without the f32 frame cast;
/// gradient verification differentiates losses built on this path.
pub fn step_f64(
    state: Option<&DenoiserState>,
    z_raw: &Array3<f64>,
    params: &NoiseParams,
    w: &ModelWeights,
    overrides: &StepOverrides,
) -> Result<(Array3<f64>, DenoiserState)> {
    let scales = w.config.scales;
    let (_, h0, w0) = z_raw.dim();
    check_pyramid_dims(h0, w0, scales)?;

    // Noise variance of the observation, estimated from the noisy frame
    // itself, then both image and variance move to the decorrelated domain.
    let sigma_raw = variance_of(z_raw, params);
    let z0 = color_forward(&z_raw.view(), &w.color);
    let var0 = transform_variance(&sigma_raw, &w.color);

    // Scale pyramid: 2x2 mean images; variance of a 4-sample mean is the
    // mean variance divided by 4.
    let mut zs = vec![z0];
    let mut vars = vec![var0];
    for s in 1..scales {
        zs.push(downsample2_forward(&zs[s - 1].view()));
        vars.push(downsample2_forward(&vars[s - 1].view()).mapv(|v| (v / 4.0).max(EPS_VAR)));
    }

    if let Some(st) = state {
        if st.scales.len() != scales {
            return Err(Error::Shape("state scale count mismatch".into()));
        }
        if st.scales[0].prev_fused.dim() != zs[0].dim() {
            return Err(Error::Shape(format!(
                "state shape {:?} does not match frame shape {:?}",
                st.scales[0].prev_fused.dim(),
                zs[0].dim()
            )));
        }
    }

    let mut new_scales = Vec::with_capacity(scales);
    let mut denoised_pyr = Vec::with_capacity(scales);
    for s in 0..scales {
        let (y_bar, var_bar) = match state {
            // First frame: the previous fused frame is the observation
            // itself, so fusion reduces to the identity and the variance is
            // taken directly (the recursion assumes independent operands).
            None => (zs[s].clone(), vars[s].clone()),
            Some(st) => {
                let prev = &st.scales[s];
                let (_, hs, ws) = zs[s].dim();
                let gamma = match overrides.gamma {
                    Some(g) => constant_map(hs, ws, g),
                    None => fusion_weights(&zs[s], &prev.prev_fused, &vars[s], w)?,
                };
                let y_bar = fuse(&zs[s], &prev.prev_fused, &gamma)?;
                let var_bar = propagate_variance(&gamma, &vars[s], &prev.prev_variance)?;
                (y_bar, var_bar)
            }
        };
        let y_tilde = denoise_stage(&y_bar, &zs[s], &var_bar, w)?;
        denoised_pyr.push(y_tilde);
        new_scales.push(ScaleState { prev_fused: y_bar, prev_variance: var_bar });
    }

    // Coarse-to-fine: replace each finer result's low frequencies with the
    // coarser (more denoised) result.
    let mut y_hat = denoised_pyr[scales - 1].clone();
    for s in (0..scales.saturating_sub(1)).rev() {
        let low = downsample2_forward(&denoised_pyr[s].view());
        let corr = upsample2_forward(&(&y_hat - &low).view());
        y_hat = &denoised_pyr[s] + &corr;
    }

    // Refinement at the finest scale only.
    let (_, hf, wf) = y_hat.dim();
    let omega = match overrides.omega {
        Some(o) => constant_map(hf, wf, o),
        None => refine_weights(&y_hat, &new_scales[0].prev_fused, &new_scales[0].prev_variance, w)?,
    };
    let refined = refine(&new_scales[0].prev_fused, &y_hat, &omega)?;

    let out_raw = color_inverse(&refined.view(), &w.color)?;
    let frame_index = state.map_or(0, |s| s.frame_index + 1);
    Ok((out_raw, DenoiserState { scales: new_scales, frame_index }))
}

/// Fold [`step`] over a sequence.
pub fn denoise_sequence(
    seq: &Sequence,
    params: &NoiseParams,
    w: &ModelWeights,
) -> Result<Sequence> {
    denoise_sequence_with(seq, params, w, &StepOverrides::default())
}

pub fn denoise_sequence_with(
    seq: &Sequence,
    params: &NoiseParams,
    w: &ModelWeights,
    overrides: &StepOverrides,
) -> Result<Sequence> {
    let mut state: Option<DenoiserState> = None;
    let mut frames = Vec::with_capacity(seq.len());
    for frame in &seq.frames {
        let (out, new_state) = step(state.as_ref(), frame, params, w, overrides)?;
        frames.push(out);
        state = Some(new_state);
    }
    Sequence::new(frames, None, seq.source_pattern)
}

// ---------------------------------------------------------------------------
// Tape path (training)
// ---------------------------------------------------------------------------

/// Handles to the 19 parameter tensors on a tape, in [`TENSOR_NAMES`] order.
/// Each tensor is inserted exactly once; every scale reuses the same handles,
/// which realizes cross-scale weight sharing.
#[derive(Debug, Clone)]
pub struct TapeWeights {
    pub vars: Vec<Var>,
    pub config: NetConfig,
}

impl TapeWeights {
    pub fn insert(tape: &mut Tape, w: &ModelWeights) -> TapeWeights {
        let vars = w.to_named().into_iter().map(|(_, t)| tape.param(t)).collect();
        TapeWeights { vars, config: w.config }
    }

    fn m(&self) -> Var {
        self.vars[0]
    }

    fn stage(&self, base: usize) -> [Var; 6] {
        [
            self.vars[base],
            self.vars[base + 1],
            self.vars[base + 2],
            self.vars[base + 3],
            self.vars[base + 4],
            self.vars[base + 5],
        ]
    }
}

fn stage_on_tape(tape: &mut Tape, sv: [Var; 6], activation: OutActivation, input: Var) -> Var {
    let h1 = tape.conv3x3(input, sv[0], sv[1]);
    let h1 = tape.relu(h1);
    let h2 = tape.conv3x3(h1, sv[2], sv[3]);
    let h2 = tape.relu(h2);
    let out = tape.conv3x3(h2, sv[4], sv[5]);
    match activation {
        OutActivation::Sigmoid => tape.sigmoid(out),
        OutActivation::None => out,
    }
}

/// Per-scale recurrent state as tape handles; keeps the temporal recurrence
/// differentiable across frames.
#[derive(Debug, Clone)]
pub struct TapeState {
    pub scales: Vec<(Var, Var)>, // (fused, variance) per scale
}

/// Tape twin of [`step`]: records one recurrent step and returns the output
/// frame (packed RGGB domain) plus the new state handles.
pub fn step_on_tape(
    tape: &mut Tape,
    tw: &TapeWeights,
    state: Option<&TapeState>,
    z_raw: Var,
    sigma_raw: Var,
) -> (Var, TapeState) {
    let scales = tw.config.scales;
    let m = tw.m();
    let z0 = tape.matvec(m, z_raw);
    let var0 = tape.sq_matvec(m, sigma_raw);
    let var0 = tape.max_scalar(var0, EPS_VAR);

    let mut zs = vec![z0];
    let mut vars = vec![var0];
    for s in 1..scales {
        let zd = tape.downsample2(zs[s - 1]);
        zs.push(zd);
        let vd = tape.downsample2(vars[s - 1]);
        let vd = tape.mul_scalar(vd, 0.25);
        let vd = tape.max_scalar(vd, EPS_VAR);
        vars.push(vd);
    }

    let mut new_scales = Vec::with_capacity(scales);
    let mut denoised_pyr = Vec::with_capacity(scales);
    for s in 0..scales {
        let (y_bar, var_bar) = match state {
            None => (zs[s], vars[s]),
            Some(st) => {
                let (prev_fused, prev_var) = st.scales[s];
                let diff = tape.sub(zs[s], prev_fused);
                let diff = tape.abs(diff);
                let fin = tape.concat_channels(&[diff, vars[s]]);
                let gamma = stage_on_tape(tape, tw.stage(1), OutActivation::Sigmoid, fin);
                let gbar = tape.one_minus(gamma);
                let a = tape.broadcast_mul(prev_fused, gbar);
                let b = tape.broadcast_mul(zs[s], gamma);
                let y_bar = tape.add(a, b);
                let g2 = tape.mul(gamma, gamma);
                let gb2 = tape.mul(gbar, gbar);
                let t1 = tape.broadcast_mul(vars[s], g2);
                let t2 = tape.broadcast_mul(prev_var, gb2);
                let var_bar = tape.add(t1, t2);
                let var_bar = tape.max_scalar(var_bar, EPS_VAR);
                (y_bar, var_bar)
            }
        };
        let din = tape.concat_channels(&[y_bar, zs[s], var_bar]);
        let residual = stage_on_tape(tape, tw.stage(7), OutActivation::None, din);
        let y_tilde = tape.add(y_bar, residual);
        denoised_pyr.push(y_tilde);
        new_scales.push((y_bar, var_bar));
    }

    let mut y_hat = denoised_pyr[scales - 1];
    for s in (0..scales.saturating_sub(1)).rev() {
        let low = tape.downsample2(denoised_pyr[s]);
        let diff = tape.sub(y_hat, low);
        let corr = tape.upsample2(diff);
        y_hat = tape.add(denoised_pyr[s], corr);
    }

    let (fused0, var_bar0) = new_scales[0];
    let rin = tape.concat_channels(&[y_hat, fused0, var_bar0]);
    let omega = stage_on_tape(tape, tw.stage(13), OutActivation::Sigmoid, rin);
    let obar = tape.one_minus(omega);
    let a = tape.broadcast_mul(fused0, obar);
    let b = tape.broadcast_mul(y_hat, omega);
    let refined = tape.add(a, b);

    let out = tape.matvec_inv(m, refined);
    (out, TapeState { scales: new_scales })
}

/// Record a full sequence pass and return the per-frame outputs (packed RGGB
/// domain) plus the final state.
pub fn sequence_on_tape(
    tape: &mut Tape,
    tw: &TapeWeights,
    noisy: &Sequence,
    params: &NoiseParams,
) -> (Vec<Var>, Option<TapeState>) {
    let mut state: Option<TapeState> = None;
    let mut outputs = Vec::with_capacity(noisy.len());
    for frame in &noisy.frames {
        let z_raw = frame_to_f64(frame);
        let sigma = variance_of(&z_raw, params);
        let z_var = tape.input(z_raw.into_dyn());
        let s_var = tape.input(sigma.into_dyn());
        let (out, new_state) = step_on_tape(tape, tw, state.as_ref(), z_var, s_var);
        outputs.push(out);
        state = Some(new_state);
    }
    (outputs, state)
}

// ---------------------------------------------------------------------------
// Checkpoint serialization
// ---------------------------------------------------------------------------

const RVDW_MAGIC: [u8; 4] = *b"RVDW";
const RVDW_VERSION: u32 = 1;

/// Sidecar JSON recorded next to a checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: NetConfig,
    pub eps_var: f64,
}

pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".json");
    std::path::PathBuf::from(os)
}

/// Write weights as a named-tensor checkpoint plus a JSON sidecar with the
/// architecture hyperparameters.
pub fn save_weights<P: AsRef<Path>>(w: &ModelWeights, path: P) -> Result<()> {
    let path = path.as_ref();
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(&RVDW_MAGIC)?;
    out.write_all(&RVDW_VERSION.to_le_bytes())?;
    let named = w.to_named();
    out.write_all(&(named.len() as u32).to_le_bytes())?;
    for (name, tensor) in &named {
        let bytes = name.as_bytes();
        out.write_all(&(bytes.len() as u16).to_le_bytes())?;
        out.write_all(bytes)?;
        out.write_all(&(tensor.ndim() as u32).to_le_bytes())?;
        for &d in tensor.shape() {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in tensor.iter() {
            out.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    out.flush()?;
    let meta = CheckpointMeta { config: w.config, eps_var: EPS_VAR };
    let sidecar = File::create(sidecar_path(path))?;
    serde_json::to_writer_pretty(BufWriter::new(sidecar), &meta)?;
    Ok(())
}

fn read_exact_or_truncated<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Truncated(format!("checkpoint ended inside {what}")))
}

/// Load a checkpoint using the architecture recorded in its sidecar.
pub fn load_weights<P: AsRef<Path>>(path: P) -> Result<ModelWeights> {
    let path = path.as_ref();
    let sidecar = sidecar_path(path);
    let meta: CheckpointMeta = serde_json::from_reader(BufReader::new(
        File::open(&sidecar).map_err(|e| {
            Error::Format(format!("missing checkpoint sidecar {}: {e}", sidecar.display()))
        })?,
    ))?;
    load_weights_with_config(path, meta.config)
}

/// Load a checkpoint and validate every tensor against `config`.
pub fn load_weights_with_config<P: AsRef<Path>>(
    path: P,
    config: NetConfig,
) -> Result<ModelWeights> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact_or_truncated(&mut r, &mut magic, "magic")?;
    if magic != RVDW_MAGIC {
        return Err(Error::BadMagic { expected: RVDW_MAGIC, found: magic });
    }
    let mut buf4 = [0u8; 4];
    read_exact_or_truncated(&mut r, &mut buf4, "version")?;
    let version = u32::from_le_bytes(buf4);
    if version != RVDW_VERSION {
        return Err(Error::VersionMismatch { expected: RVDW_VERSION, found: version });
    }
    read_exact_or_truncated(&mut r, &mut buf4, "tensor count")?;
    let count = u32::from_le_bytes(buf4) as usize;

    let mut by_name: std::collections::HashMap<String, ArrayD<f64>> = Default::default();
    for _ in 0..count {
        let mut buf2 = [0u8; 2];
        read_exact_or_truncated(&mut r, &mut buf2, "tensor name length")?;
        let name_len = u16::from_le_bytes(buf2) as usize;
        let mut name_bytes = vec![0u8; name_len];
        read_exact_or_truncated(&mut r, &mut name_bytes, "tensor name")?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        if !TENSOR_NAMES.contains(&name.as_str()) {
            return Err(Error::UnknownTensor(name));
        }
        read_exact_or_truncated(&mut r, &mut buf4, "tensor rank")?;
        let rank = u32::from_le_bytes(buf4) as usize;
        if rank > 8 {
            return Err(Error::Format(format!("implausible tensor rank {rank}")));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            read_exact_or_truncated(&mut r, &mut buf4, "tensor dims")?;
            dims.push(u32::from_le_bytes(buf4) as usize);
        }
        let len: usize = dims.iter().product();
        let mut data = vec![0u8; len * 4];
        read_exact_or_truncated(&mut r, &mut data, &format!("tensor {name}"))?;
        let values: Vec<f64> = data
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect();
        let tensor = ArrayD::from_shape_vec(IxDyn(&dims), values)
            .map_err(|_| Error::Format(format!("tensor {name} shape/data mismatch")))?;
        by_name.insert(name, tensor);
    }

    let mut ordered = Vec::with_capacity(TENSOR_NAMES.len());
    for name in TENSOR_NAMES {
        let tensor = by_name
            .remove(name)
            .ok_or_else(|| Error::Format(format!("checkpoint is missing tensor {name}")))?;
        ordered.push(tensor);
    }
    ModelWeights::from_named(config, &ordered)
}

// ---------------------------------------------------------------------------
// Resource counting
// ---------------------------------------------------------------------------

/// Exact parameter count.
pub fn count_params(w: &ModelWeights) -> usize {
    w.param_count()
}

/// Multiply-accumulate count for one T-frame sequence of raw H x W mosaics:
/// the point-wise color transforms plus all stage convolutions, summed over
/// the scale pyramid.
pub fn count_macs(w: &ModelWeights, raw_h: usize, raw_w: usize, frames: usize) -> u64 {
    let (hp, wp) = (raw_h / 2, raw_w / 2);
    let finest = (hp * wp) as u64;
    let mut pyramid = 0u64;
    for s in 0..w.config.scales {
        pyramid += ((hp >> s) * (wp >> s)) as u64;
    }
    // Forward + inverse color transform and the variance transform are
    // 4x4 point-wise multiplies at the finest scale.
    let color = 3 * 16 * finest;
    let fusion = w.fusion.macs_per_pixel() as u64 * pyramid;
    let denoise = w.denoise.macs_per_pixel() as u64 * pyramid;
    let refine = w.refine.macs_per_pixel() as u64 * finest;
    (color + fusion + denoise + refine) * frames as u64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raw_data::BayerPattern;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn small_config() -> NetConfig {
        NetConfig { fusion_hidden: 4, denoise_hidden: 6, refine_hidden: 4, scales: 2 }
    }

    fn rand_weights(seed: u64, config: NetConfig) -> ModelWeights {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut w = ModelWeights::init(config, &mut rng).unwrap();
        // Also randomize the zero-initialized output layers so the stages do
        // something nontrivial.
        for k in [&mut w.fusion.k3, &mut w.denoise.k3, &mut w.refine.k3] {
            k.mapv_inplace(|_| rng.gen_range(-0.2..0.2));
        }
        w
    }

    fn zero_weights(config: NetConfig) -> ModelWeights {
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        ModelWeights::init(config, &mut rng).unwrap()
    }

    fn rand_frame(seed: u64, h: usize, w: usize) -> PackedFrame {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        PackedFrame::new(Array3::from_shape_fn((4, h, w), |_| rng.gen_range(0.05..0.95))).unwrap()
    }

    fn rand_image(seed: u64, c: usize, h: usize, w: usize) -> Array3<f64> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        Array3::from_shape_fn((c, h, w), |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn fusion_weights_zero_stage_gives_half() {
        let w = zero_weights(small_config());
        let z = rand_image(1, 4, 8, 8);
        let prev = rand_image(2, 4, 8, 8);
        let var = Array3::from_elem((4, 8, 8), 0.01);
        let gamma = fusion_weights(&z, &prev, &var, &w).unwrap();
        assert_eq!(gamma.dim(), (1, 8, 8));
        assert!(gamma.iter().all(|&g| g == 0.5));
    }

    #[test]
    fn fusion_weights_in_open_interval_and_deterministic() {
        let w = rand_weights(3, small_config());
        let z = rand_image(1, 4, 8, 8);
        let prev = rand_image(2, 4, 8, 8);
        let var = Array3::from_elem((4, 8, 8), 0.01);
        let g1 = fusion_weights(&z, &prev, &var, &w).unwrap();
        let g2 = fusion_weights(&z, &prev, &var, &w).unwrap();
        assert_eq!(g1, g2);
        assert!(g1.iter().all(|&g| g > 0.0 && g < 1.0));
    }

    #[test]
    fn fuse_endpoints_and_midpoint() {
        let z = Array3::from_elem((4, 2, 2), 0.4);
        let prev = Array3::from_elem((4, 2, 2), 0.2);
        let ones = Array3::from_elem((1, 2, 2), 1.0);
        let zeros = Array3::from_elem((1, 2, 2), 0.0);
        let half = Array3::from_elem((1, 2, 2), 0.5);
        assert_eq!(fuse(&z, &prev, &ones).unwrap(), z);
        assert_eq!(fuse(&z, &prev, &zeros).unwrap(), prev);
        let mid = fuse(&z, &prev, &half).unwrap();
        assert!(mid.iter().all(|&v| (v - 0.3).abs() < 1e-15));
    }

    #[test]
    fn fuse_rejects_out_of_range_gamma() {
        let z = Array3::from_elem((4, 1, 1), 0.4);
        let g = Array3::from_elem((1, 1, 1), 1.5);
        assert!(matches!(fuse(&z, &z, &g), Err(Error::Invalid(_))));
    }

    #[test]
    fn fuse_output_bounded_by_operands() {
        let z = rand_image(4, 4, 4, 4);
        let prev = rand_image(5, 4, 4, 4);
        let gamma = rand_image(6, 1, 4, 4); // in [0,1)
        let out = fuse(&z, &prev, &gamma).unwrap();
        for ((c, i, j), &v) in out.indexed_iter() {
            let lo = z[[c, i, j]].min(prev[[c, i, j]]);
            let hi = z[[c, i, j]].max(prev[[c, i, j]]);
            assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        }
    }

    #[test]
    fn propagate_variance_endpoints_and_midpoint() {
        let var_z = Array3::from_elem((4, 2, 2), 0.04);
        let var_prev = Array3::from_elem((4, 2, 2), 0.02);
        let ones = Array3::from_elem((1, 2, 2), 1.0);
        let half = Array3::from_elem((1, 2, 2), 0.5);
        assert_eq!(propagate_variance(&ones, &var_z, &var_prev).unwrap(), var_z);
        let mid = propagate_variance(&half, &var_z, &var_prev).unwrap();
        assert!(mid.iter().all(|&v| (v - 0.015).abs() < 1e-15));
    }

    #[test]
    fn propagate_variance_running_mean_closed_form() {
        // With gamma_t = 1/(t+1) and constant input variance, the fused
        // variance is sigma^2/(t+1); oracle is the direct loop.
        let sigma2 = 0.0054;
        let var_z = Array3::from_elem((4, 2, 2), sigma2);
        let mut var_bar = var_z.clone();
        for t in 1..=64usize {
            let g = Array3::from_elem((1, 2, 2), 1.0 / (t as f64 + 1.0));
            var_bar = propagate_variance(&g, &var_z, &var_bar).unwrap();
            let expect = sigma2 / (t as f64 + 1.0);
            for &v in var_bar.iter() {
                assert!((v - expect).abs() < 1e-12, "t={t}: {v} vs {expect}");
            }
        }
    }

    #[test]
    fn propagate_variance_bounded_by_max_operand() {
        let var_z = rand_image(7, 4, 3, 3).mapv(|v| v * 0.01 + 1e-4);
        let var_prev = rand_image(8, 4, 3, 3).mapv(|v| v * 0.01 + 1e-4);
        let gamma = rand_image(9, 1, 3, 3);
        let out = propagate_variance(&gamma, &var_z, &var_prev).unwrap();
        for ((c, i, j), &v) in out.indexed_iter() {
            assert!(v <= var_z[[c, i, j]].max(var_prev[[c, i, j]]) + 1e-15);
        }
    }

    #[test]
    fn denoise_stage_zero_weights_is_identity() {
        let w = zero_weights(small_config());
        let fused = rand_image(10, 4, 8, 8);
        let z = rand_image(11, 4, 8, 8);
        let var = Array3::from_elem((4, 8, 8), 0.01);
        let out = denoise_stage(&fused, &z, &var, &w).unwrap();
        assert_eq!(out, fused);
    }

    #[test]
    fn refine_endpoints() {
        let fused = rand_image(12, 4, 2, 2);
        let denoised = rand_image(13, 4, 2, 2);
        let ones = Array3::from_elem((1, 2, 2), 1.0);
        let zeros = Array3::from_elem((1, 2, 2), 0.0);
        assert_eq!(refine(&fused, &denoised, &ones).unwrap(), denoised);
        assert_eq!(refine(&fused, &denoised, &zeros).unwrap(), fused);
        let omega = rand_image(14, 1, 2, 2);
        let same = refine(&fused, &fused, &omega).unwrap();
        for (a, b) in same.iter().zip(fused.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn first_frame_fused_state_equals_transformed_input() {
        let w = rand_weights(20, small_config());
        let frame = rand_frame(21, 8, 8);
        let params = NoiseParams::new(0.01, 0.0004).unwrap();
        let (_, state) = step(None, &frame, &params, &w, &StepOverrides::default()).unwrap();
        let z = color_forward(&frame.data.mapv(f64::from).view(), &w.color);
        assert_eq!(state.scales[0].prev_fused, z, "first-frame fused state must be exact");
        assert_eq!(state.frame_index, 0);
    }

    #[test]
    fn single_scale_matches_direct_stage_composition() {
        let cfg = NetConfig { scales: 1, ..small_config() };
        let w = rand_weights(22, cfg);
        let params = NoiseParams::new(0.01, 0.0004).unwrap();
        let f0 = rand_frame(23, 6, 6);
        let f1 = rand_frame(24, 6, 6);
        let ov = StepOverrides::default();
        let (_, s0) = step(None, &f0, &params, &w, &ov).unwrap();
        let (out, _) = step(Some(&s0), &f1, &params, &w, &ov).unwrap();

        // Direct composition without any pyramid machinery.
        let z_raw = f1.data.mapv(f64::from);
        let sigma = variance_of(&z_raw, &params);
        let z = color_forward(&z_raw.view(), &w.color);
        let var = transform_variance(&sigma, &w.color);
        let gamma = fusion_weights(&z, &s0.scales[0].prev_fused, &var, &w).unwrap();
        let fused = fuse(&z, &s0.scales[0].prev_fused, &gamma).unwrap();
        let var_bar = propagate_variance(&gamma, &var, &s0.scales[0].prev_variance).unwrap();
        let denoised = denoise_stage(&fused, &z, &var_bar, &w).unwrap();
        let omega = refine_weights(&denoised, &fused, &var_bar, &w).unwrap();
        let refined = refine(&fused, &denoised, &omega).unwrap();
        let expect = color_inverse(&refined.view(), &w.color).unwrap();
        for (a, b) in out.data.iter().zip(expect.iter()) {
            assert!((f64::from(*a) - b).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_weight_static_scene_has_no_drift() {
        let w = zero_weights(small_config());
        let params = NoiseParams::new(0.01, 0.0004).unwrap();
        let frame = rand_frame(25, 8, 8);
        let seq = Sequence::new(vec![frame.clone(); 6], None, BayerPattern::Rggb).unwrap();
        let out = denoise_sequence(&seq, &params, &w).unwrap();
        for f in &out.frames {
            for (a, b) in f.data.iter().zip(frame.data.iter()) {
                assert!((a - b).abs() < 1e-5, "static scene must be a fixed point");
            }
        }
    }

    #[test]
    fn running_mean_oracle_with_overrides() {
        // gamma_t = 1/(t+1), zero denoise residual, omega = 0: output t is
        // the running mean of the inputs.
        let w = zero_weights(small_config());
        let params = NoiseParams::new(0.01, 0.0004).unwrap();
        let frames: Vec<PackedFrame> = (0..5).map(|i| rand_frame(30 + i, 8, 8)).collect();
        let mut state: Option<DenoiserState> = None;
        for (t, frame) in frames.iter().enumerate() {
            let ov = StepOverrides {
                gamma: if t == 0 { None } else { Some(1.0 / (t as f64 + 1.0)) },
                omega: Some(0.0),
            };
            let (out, ns) = step(state.as_ref(), frame, &params, &w, &ov).unwrap();
            state = Some(ns);
            let mut mean = Array3::<f64>::zeros((4, 8, 8));
            for f in &frames[..=t] {
                mean = mean + f.data.mapv(f64::from);
            }
            mean /= (t + 1) as f64;
            for (a, b) in out.data.iter().zip(mean.iter()) {
                assert!((f64::from(*a) - b).abs() < 1e-6, "frame {t}");
            }
        }
    }

    #[test]
    fn denoise_sequence_is_deterministic_and_length_preserving() {
        let w = rand_weights(40, small_config());
        let params = NoiseParams::new(0.01, 0.0004).unwrap();
        let frames: Vec<PackedFrame> = (0..3).map(|i| rand_frame(50 + i, 8, 8)).collect();
        let seq = Sequence::new(frames, None, BayerPattern::Rggb).unwrap();
        let a = denoise_sequence(&seq, &params, &w).unwrap();
        let b = denoise_sequence(&seq, &params, &w).unwrap();
        assert_eq!(a.frames, b.frames);
        assert_eq!(a.len(), seq.len());
    }

    #[test]
    fn single_frame_sequence_round_trips_with_zero_weights() {
        let w = zero_weights(small_config());
        let params = NoiseParams::new(0.01, 0.0004).unwrap();
        let frame = rand_frame(60, 8, 8);
        let seq = Sequence::new(vec![frame.clone()], None, BayerPattern::Rggb).unwrap();
        let out = denoise_sequence(&seq, &params, &w).unwrap();
        for (a, b) in out.frames[0].data.iter().zip(frame.data.iter()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn step_rejects_bad_pyramid_dims() {
        let w = rand_weights(70, NetConfig { scales: 3, ..small_config() });
        let params = NoiseParams::new(0.01, 0.0004).unwrap();
        let frame = rand_frame(71, 6, 6); // not divisible by 4
        assert!(matches!(
            step(None, &frame, &params, &w, &StepOverrides::default()),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn step_rejects_state_shape_mismatch() {
        let w = rand_weights(72, small_config());
        let params = NoiseParams::new(0.01, 0.0004).unwrap();
        let (_, state) =
            step(None, &rand_frame(73, 8, 8), &params, &w, &StepOverrides::default()).unwrap();
        let err = step(Some(&state), &rand_frame(74, 4, 4), &params, &w, &StepOverrides::default());
        assert!(matches!(err, Err(Error::Shape(_))));
    }

    #[test]
    fn tape_and_plain_paths_agree() {
        let w = rand_weights(80, small_config());
        let params = NoiseParams::new(0.01, 0.0004).unwrap();
        let frames: Vec<PackedFrame> = (0..3).map(|i| rand_frame(90 + i, 8, 8)).collect();
        let seq = Sequence::new(frames, None, BayerPattern::Rggb).unwrap();

        let plain = denoise_sequence(&seq, &params, &w).unwrap();

        let mut tape = Tape::new();
        let tw = TapeWeights::insert(&mut tape, &w);
        let (outputs, _) = sequence_on_tape(&mut tape, &tw, &seq, &params);
        for (t, var) in outputs.iter().enumerate() {
            let taped = tape.value(*var);
            for (a, b) in plain.frames[t].data.iter().zip(taped.iter()) {
                assert!((f64::from(*a) - b).abs() < 1e-6, "frame {t} diverges");
            }
        }
    }

    #[test]
    fn tape_weights_are_shared_across_scales() {
        // The tape holds exactly one param node per tensor no matter how
        // many scales reuse it, so one update reflects at all scales.
        let w = rand_weights(100, NetConfig { scales: 3, ..small_config() });
        let params = NoiseParams::new(0.01, 0.0004).unwrap();
        let frame = rand_frame(101, 8, 8);
        let seq = Sequence::new(vec![frame], None, BayerPattern::Rggb).unwrap();
        let mut tape = Tape::new();
        let before = tape.len();
        let tw = TapeWeights::insert(&mut tape, &w);
        assert_eq!(tape.len() - before, TENSOR_NAMES.len());
        let (_, _) = sequence_on_tape(&mut tape, &tw, &seq, &params);
        assert_eq!(tw.vars.len(), TENSOR_NAMES.len());
    }

    #[test]
    fn checkpoint_round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.rvdw");
        let p2 = dir.path().join("b.rvdw");
        let w = rand_weights(110, small_config());
        save_weights(&w, &p1).unwrap();
        let loaded = load_weights(&p1).unwrap();
        save_weights(&loaded, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn checkpoint_truncation_detected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.rvdw");
        let w = rand_weights(111, small_config());
        save_weights(&w, &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_weights(&p), Err(Error::Truncated(_))));
    }

    #[test]
    fn checkpoint_width_mismatch_names_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.rvdw");
        let w = rand_weights(112, small_config());
        save_weights(&w, &p).unwrap();
        let wide = NetConfig { denoise_hidden: 32, ..small_config() };
        match load_weights_with_config(&p, wide) {
            Err(Error::TensorShape { name, .. }) => assert!(name.starts_with("denoise.")),
            other => panic!("expected tensor shape error, got {other:?}"),
        }
    }

    #[test]
    fn checkpoint_bad_magic_detected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.rvdw");
        std::fs::write(&p, b"NOPE").unwrap();
        assert!(matches!(
            load_weights_with_config(&p, small_config()),
            Err(Error::BadMagic { .. })
        ));
    }

    #[test]
    fn param_count_default_config() {
        let w = zero_weights(NetConfig::default());
        // Shape-walking oracle, layer by layer:
        // fusion  8->16->16->1 : 1168 + 2320 + 145   = 3633
        // denoise 12->32->32->4: 3488 + 9248 + 1156  = 13892
        // refine  12->16->16->1: 1744 + 2320 + 145   = 4209
        // color 4x4             : 16
        assert_eq!(count_params(&w), 3633 + 13892 + 4209 + 16);
    }

    #[test]
    fn macs_scale_exactly_4x_with_doubled_dims() {
        let w = zero_weights(NetConfig::default());
        let base = count_macs(&w, 64, 64, 8);
        assert_eq!(count_macs(&w, 128, 128, 8), 4 * base);
        assert_eq!(count_macs(&w, 64, 64, 16), 2 * base);
    }
}
