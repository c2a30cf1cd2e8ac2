//! Training: L1 reconstruction loss plus the orthonormality penalty, exact
//! gradients through the full temporal recurrence and all scales, an Adam
//! loop with a two-step learning-rate decay, synthetic scene generation,
//! crop sampling, and a finite-difference verification of every gradient
//! entry.

use ndarray::{s, Array2, Array3, ArrayD};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::color_transform::{orthonormality_loss, ColorKernel};
use crate::denoise_net::{
    sequence_on_tape, step_f64, DenoiserState, ModelWeights, NetConfig, StepOverrides,
    TapeWeights, TENSOR_NAMES,
};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalPair};
use crate::noise_model::{add_noise, NoiseParams};
use crate::raw_data::{BayerPattern, PackedFrame, Sequence};
use crate::tape::{Tape, Var};

/// Orthonormality level above which the color kernel is projected back onto
/// the orthonormal manifold after an optimizer step.
pub const PROJECT_THRESHOLD: f64 = 1e-3;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Raw-domain crop edge; packed crops are half this.
    pub crop: usize,
    /// Frames per training sequence.
    pub seq_len: usize,
    /// Crops sampled from each scene.
    pub crops_per_scene: usize,
    pub fusion_hidden: usize,
    pub denoise_hidden: usize,
    pub refine_hidden: usize,
    pub scales: usize,
    pub seed: u64,
    /// Validate every this many epochs.
    pub validation_interval: usize,
    /// Learning-rate drop points as fractions of total iterations.
    pub decay_points: [f64; 2],
    pub decay_factor: f64,
}

impl TrainConfig {
    /// Full-size settings: batch 8, lr 1e-4, 128-pixel raw crops, 25-frame
    /// clips, 16 crops per scene.
    pub fn full() -> TrainConfig {
        TrainConfig {
            batch_size: 8,
            learning_rate: 1e-4,
            epochs: 3000,
            crop: 128,
            seq_len: 25,
            crops_per_scene: 16,
            fusion_hidden: 16,
            denoise_hidden: 32,
            refine_hidden: 16,
            scales: 3,
            seed: 0,
            validation_interval: 25,
            decay_points: [0.7, 0.9],
            decay_factor: 0.1,
        }
    }

    /// Shrunk settings sized for a single commodity CPU core.
    pub fn desk() -> TrainConfig {
        TrainConfig {
            epochs: 200,
            crop: 64,
            seq_len: 8,
            crops_per_scene: 4,
            fusion_hidden: 8,
            denoise_hidden: 16,
            refine_hidden: 8,
            validation_interval: 25,
            ..TrainConfig::full()
        }
    }

    pub fn net_config(&self) -> NetConfig {
        NetConfig {
            fusion_hidden: self.fusion_hidden,
            denoise_hidden: self.denoise_hidden,
            refine_hidden: self.refine_hidden,
            scales: self.scales,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.net_config().validate()?;
        if self.batch_size == 0 || self.epochs == 0 || self.crops_per_scene == 0 {
            return Err(Error::Config("batch, epochs, crops per scene must be nonzero".into()));
        }
        if self.seq_len < 2 {
            return Err(Error::Config("sequence length must be at least 2".into()));
        }
        let align = 2 << (self.scales - 1);
        if self.crop == 0 || !self.crop.is_multiple_of(align) {
            return Err(Error::Config(format!(
                "crop {} must be divisible by {align} for {} scales",
                self.crop, self.scales
            )));
        }
        if self.learning_rate <= 0.0
            || self.decay_factor <= 0.0
            || !self.learning_rate.is_finite()
            || !self.decay_factor.is_finite()
        {
            return Err(Error::Config("learning rate and decay factor must be positive".into()));
        }
        Ok(())
    }
}

/// One noisy/clean pair for training or validation.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub noisy: Sequence,
    pub clean: Sequence,
    pub params: NoiseParams,
    /// Sub-seed used to draw this example's noise field.
    pub noise_seed: u64,
    /// Raw-domain crop origin (always even; CFA phase is preserved).
    pub raw_offset: (usize, usize),
}

impl TrainExample {
    pub fn eval_pair(&self) -> EvalPair {
        EvalPair { noisy: self.noisy.clone(), clean: self.clean.clone(), params: self.params.clone() }
    }
}

fn box_blur(img: &Array2<f64>, radius: usize) -> Array2<f64> {
    let (h, w) = img.dim();
    let norm = (2 * radius + 1) as f64;
    let mut rows = Array2::<f64>::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for k in 0..(2 * radius + 1) {
                let jj = (j + k).saturating_sub(radius).min(w - 1);
                acc += img[[i, jj]];
            }
            rows[[i, j]] = acc / norm;
        }
    }
    let mut out = Array2::<f64>::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for k in 0..(2 * radius + 1) {
                let ii = (i + k).saturating_sub(radius).min(h - 1);
                acc += rows[[ii, j]];
            }
            out[[i, j]] = acc / norm;
        }
    }
    out
}

/// Deterministic synthetic clean scene: a band-limited random texture
/// translated by integer per-frame shifts of at most `motion` packed pixels.
/// `raw_h`/`raw_w` are raw-domain dimensions; frames are packed.
pub fn synth_scene(
    seed: u64,
    frames: usize,
    raw_h: usize,
    raw_w: usize,
    motion: usize,
) -> Result<Sequence> {
    if !raw_h.is_multiple_of(2) || !raw_w.is_multiple_of(2) || raw_h == 0 || raw_w == 0 {
        return Err(Error::Shape(format!("raw scene dims {raw_h}x{raw_w} must be even")));
    }
    if frames == 0 {
        return Err(Error::Invalid("scene needs at least one frame".into()));
    }
    let (h, w) = (raw_h / 2, raw_w / 2);
    let pad = motion * frames;
    let (fh, fw) = (h + 2 * pad, w + 2 * pad);
    let mut rng = ChaCha12Rng::seed_from_u64(seed);

    // Shared luma structure plus per-channel variation, low-pass filtered.
    let luma = Array2::from_shape_fn((fh, fw), |_| rng.gen_range(0.0..1.0));
    let luma = box_blur(&box_blur(&luma, 2), 2);
    let mut field = Array3::<f64>::zeros((4, fh, fw));
    for c in 0..4 {
        let chroma = Array2::from_shape_fn((fh, fw), |_| rng.gen_range(0.0..1.0));
        let chroma = box_blur(&box_blur(&chroma, 2), 2);
        for i in 0..fh {
            for j in 0..fw {
                field[[c, i, j]] = 0.6 * luma[[i, j]] + 0.4 * chroma[[i, j]];
            }
        }
    }
    let lo = field.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = field.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);
    field.mapv_inplace(|v| 0.05 + 0.9 * (v - lo) / span);

    let mut oi = pad as isize;
    let mut oj = pad as isize;
    let m = motion as isize;
    let mut out = Vec::with_capacity(frames);
    for t in 0..frames {
        if t > 0 && motion > 0 {
            oi = (oi + rng.gen_range(-m..=m)).clamp(0, 2 * pad as isize);
            oj = (oj + rng.gen_range(-m..=m)).clamp(0, 2 * pad as isize);
        }
        let (i0, j0) = (oi as usize, oj as usize);
        let crop = field.slice(s![.., i0..i0 + h, j0..j0 + w]).mapv(|v| v as f32);
        out.push(PackedFrame::new(crop)?);
    }
    Sequence::new(out, None, BayerPattern::Rggb)
}

/// Draw `crops_per_scene` noisy/clean training examples from one clean scene
/// at random spatio-temporal positions.
pub fn sample_crops(
    clean: &Sequence,
    cfg: &TrainConfig,
    params: &NoiseParams,
    seed: u64,
) -> Result<Vec<TrainExample>> {
    let cp = cfg.crop / 2; // packed crop edge
    let (h, w) = (clean.height(), clean.width());
    if cp > h || cp > w {
        return Err(Error::Shape(format!(
            "crop {} (packed {cp}) exceeds scene {h}x{w} (packed)",
            cfg.crop
        )));
    }
    if clean.len() < cfg.seq_len {
        return Err(Error::Shape(format!(
            "scene has {} frames, need {}",
            clean.len(),
            cfg.seq_len
        )));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(cfg.crops_per_scene);
    for _ in 0..cfg.crops_per_scene {
        let t0 = rng.gen_range(0..=clean.len() - cfg.seq_len);
        let i0 = rng.gen_range(0..=h - cp);
        let j0 = rng.gen_range(0..=w - cp);
        let frames: Vec<PackedFrame> = (t0..t0 + cfg.seq_len)
            .map(|t| {
                PackedFrame::new(
                    clean.frames[t].data.slice(s![.., i0..i0 + cp, j0..j0 + cp]).to_owned(),
                )
            })
            .collect::<Result<_>>()?;
        let clean_crop = Sequence::new(frames, None, clean.source_pattern)?;
        let noise_seed: u64 = rng.gen();
        let noisy = add_noise(&clean_crop, params, noise_seed)?;
        out.push(TrainExample {
            noisy,
            clean: clean_crop,
            params: params.clone(),
            noise_seed,
            raw_offset: (2 * i0, 2 * j0),
        });
    }
    Ok(out)
}

/// Mean over frames of the mean absolute per-sample error, in the packed
/// RGGB domain.
pub fn reconstruction_loss(pred: &Sequence, truth: &Sequence) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::Shape("sequence lengths differ".into()));
    }
    let mut acc = 0.0;
    for (p, t) in pred.frames.iter().zip(&truth.frames) {
        if p.data.dim() != t.data.dim() {
            return Err(Error::Shape("frame shapes differ".into()));
        }
        let mut s = 0.0;
        for (a, b) in p.data.iter().zip(t.data.iter()) {
            s += (f64::from(*a) - f64::from(*b)).abs();
        }
        acc += s / p.data.len() as f64;
    }
    Ok(acc / pred.len() as f64)
}

/// Reconstruction loss plus the orthonormality penalty, unweighted.
pub fn total_loss(pred: &Sequence, truth: &Sequence, kernel: &ColorKernel) -> Result<f64> {
    Ok(reconstruction_loss(pred, truth)? + orthonormality_loss(kernel))
}

/// Gradients in [`TENSOR_NAMES`] order, with the loss values they came from.
#[derive(Debug, Clone)]
pub struct GradResult {
    pub loss: f64,
    pub l_r: f64,
    pub l_c: f64,
    pub grads: Vec<ArrayD<f64>>,
}

fn record_loss(tape: &mut Tape, tw: &TapeWeights, example: &TrainExample) -> (Var, Var, Var) {
    let (outputs, _) = sequence_on_tape(tape, tw, &example.noisy, &example.params);
    let n = outputs.len();
    let mut sum: Option<Var> = None;
    for (out, truth) in outputs.iter().zip(&example.clean.frames) {
        let t = tape.input(truth.data.mapv(f64::from).into_dyn());
        let li = tape.l1_mean(*out, t);
        sum = Some(match sum {
            None => li,
            Some(acc) => tape.add(acc, li),
        });
    }
    let l_r = tape.mul_scalar(sum.expect("nonempty sequence"), 1.0 / n as f64);
    let l_c = tape.frob_orth(tw.vars[0]);
    let loss = tape.add(l_r, l_c);
    (loss, l_r, l_c)
}

/// Exact gradients of the total loss with respect to every parameter,
/// propagated through the full recurrence and all scales.
pub fn backward(example: &TrainExample, w: &ModelWeights) -> Result<GradResult> {
    if example.noisy.len() != example.clean.len() || example.noisy.is_empty() {
        return Err(Error::Shape("example sequences must be nonempty and aligned".into()));
    }
    let mut tape = Tape::new();
    let tw = TapeWeights::insert(&mut tape, w);
    let (loss, l_r, l_c) = record_loss(&mut tape, &tw, example);
    let loss_v = tape.value(loss).first().copied().unwrap_or(f64::NAN);
    if !loss_v.is_finite() {
        return Err(Error::NonFinite { iter: 0, tensor: "loss".into() });
    }
    let l_r_v = tape.value(l_r).first().copied().unwrap_or(0.0);
    let l_c_v = tape.value(l_c).first().copied().unwrap_or(0.0);
    let mut slots = tape.backward(loss);
    let mut grads = Vec::with_capacity(tw.vars.len());
    for (i, v) in tw.vars.iter().enumerate() {
        let g = slots[v.0]
            .take()
            .unwrap_or_else(|| ArrayD::zeros(tape.value(*v).shape()));
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { iter: 0, tensor: TENSOR_NAMES[i].to_string() });
        }
        grads.push(g);
    }
    Ok(GradResult { loss: loss_v, l_r: l_r_v, l_c: l_c_v, grads })
}

/// Adam with the standard moment defaults.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
    t: i32,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(tensors: &[ArrayD<f64>]) -> Adam {
        Adam {
            m: tensors.iter().map(|t| ArrayD::zeros(t.shape())).collect(),
            v: tensors.iter().map(|t| ArrayD::zeros(t.shape())).collect(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(&mut self, tensors: &mut [ArrayD<f64>], grads: &[ArrayD<f64>], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for ((theta, g), (m, v)) in
            tensors.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            azip(m, g, |m, g| *m = self.beta1 * *m + (1.0 - self.beta1) * g);
            azip(v, g, |v, g| *v = self.beta2 * *v + (1.0 - self.beta2) * g * g);
            for ((t, m), v) in theta.iter_mut().zip(m.iter()).zip(v.iter()) {
                *t -= lr * (m / bc1) / ((v / bc2).sqrt() + self.eps);
            }
        }
    }
}

fn azip(dst: &mut ArrayD<f64>, src: &ArrayD<f64>, f: impl Fn(&mut f64, f64)) {
    for (d, s) in dst.iter_mut().zip(src.iter()) {
        f(d, *s);
    }
}

/// One JSON-lines training log record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogRecord {
    pub iter: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub l_r: f64,
    pub l_c: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub psnr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ssim: Option<f64>,
}

/// Run the training loop. Validation scores (when `val_set` is nonempty) are
/// logged every `validation_interval` epochs and after the final epoch.
pub fn train(
    cfg: &TrainConfig,
    train_set: &[TrainExample],
    val_set: &[TrainExample],
) -> Result<(ModelWeights, Vec<LogRecord>)> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Invalid("training set is empty".into()));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let mut w = ModelWeights::init(cfg.net_config(), &mut rng)?;
    let mut tensors: Vec<ArrayD<f64>> = w.to_named().into_iter().map(|(_, t)| t).collect();
    let mut adam = Adam::new(&tensors);

    let batches_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let total_iters = cfg.epochs * batches_per_epoch;
    let drops = [
        (cfg.decay_points[0] * total_iters as f64).floor() as usize,
        (cfg.decay_points[1] * total_iters as f64).floor() as usize,
    ];

    let mut log = Vec::new();
    let mut iter = 0usize;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let val_pairs: Vec<EvalPair> = val_set.iter().map(TrainExample::eval_pair).collect();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let mut lr = cfg.learning_rate;
            for d in drops {
                if iter >= d {
                    lr *= cfg.decay_factor;
                }
            }
            // Batch elements in parallel; the reduction below walks results
            // in batch order, so the gradient sum is thread-count invariant.
            let results: Vec<Result<GradResult>> =
                batch.par_iter().map(|&i| backward(&train_set[i], &w)).collect();
            let mut mean_grads: Option<Vec<ArrayD<f64>>> = None;
            let mut loss_sum = 0.0;
            let mut lr_sum = 0.0;
            let mut lc_sum = 0.0;
            for r in results {
                let r = r.map_err(|e| match e {
                    Error::NonFinite { tensor, .. } => Error::NonFinite { iter, tensor },
                    other => other,
                })?;
                loss_sum += r.loss;
                lr_sum += r.l_r;
                lc_sum += r.l_c;
                match &mut mean_grads {
                    None => mean_grads = Some(r.grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&r.grads) {
                            *a += g;
                        }
                    }
                }
            }
            let mut grads = mean_grads.expect("nonempty batch");
            let bn = batch.len() as f64;
            for g in &mut grads {
                g.mapv_inplace(|v| v / bn);
            }
            adam.step(&mut tensors, &grads, lr);
            w = ModelWeights::from_named(cfg.net_config(), &tensors)?;
            // Safety valve: snap the color kernel back to the orthonormal
            // manifold if the penalty no longer keeps it there.
            if orthonormality_loss(&w.color) > PROJECT_THRESHOLD {
                w.color = w.color.orthonormalized();
                tensors[0] = w.color.m.clone().into_dyn();
            }
            log.push(LogRecord {
                iter,
                epoch,
                lr,
                loss: loss_sum / bn,
                l_r: lr_sum / bn,
                l_c: lc_sum / bn,
                psnr: None,
                ssim: None,
            });
            iter += 1;
        }
        let validate = !val_pairs.is_empty()
            && ((epoch + 1) % cfg.validation_interval == 0 || epoch + 1 == cfg.epochs);
        if validate {
            let report = evaluate(&w, &val_pairs)?;
            let last = log.last_mut().expect("at least one iteration");
            last.psnr = Some(report.mean.model.mean_psnr);
            last.ssim = Some(report.mean.model.mean_ssim);
        }
    }
    Ok((w, log))
}

// ---------------------------------------------------------------------------
// Finite-difference gradient verification
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub max_rel_err: f64,
    pub worst_tensor: String,
    pub entries_checked: usize,
    pub entries_skipped: usize,
    /// Entries re-verified with a smaller step after the primary step
    /// straddled a ReLU/L1 kink.
    pub entries_refined: usize,
}

/// Total loss of one example along the plain double-precision path; the
/// quantity the finite differences probe.
pub fn plain_loss(example: &TrainExample, w: &ModelWeights) -> Result<f64> {
    let mut state: Option<DenoiserState> = None;
    let ov = StepOverrides::default();
    let mut acc = 0.0;
    for (z, truth) in example.noisy.frames.iter().zip(&example.clean.frames) {
        let z64 = z.data.mapv(f64::from);
        let (out, ns) = step_f64(state.as_ref(), &z64, &example.params, w, &ov)?;
        state = Some(ns);
        let t64 = truth.data.mapv(f64::from);
        acc += (&out - &t64).mapv(f64::abs).mean().expect("nonempty");
    }
    Ok(acc / example.noisy.len() as f64 + orthonormality_loss(&w.color))
}

/// Weights with every tensor (including the normally zero-initialized output
/// layers) randomized, so no gradient path is trivially inactive and the
/// loss surface is well-conditioned for central differences.
pub fn randomized_weights(seed: u64, config: NetConfig) -> Result<ModelWeights> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut w = ModelWeights::init(config, &mut rng)?;
    for stage in [&mut w.fusion, &mut w.denoise, &mut w.refine] {
        stage.k3.mapv_inplace(|_| rng.gen_range(-0.3..0.3));
        stage.b3.mapv_inplace(|_| rng.gen_range(-0.1..0.1));
    }
    w.color.m.mapv_inplace(|v| v + rng.gen_range(-0.05..0.05));
    Ok(w)
}

/// Verify every analytic gradient entry against central finite differences
/// (step 1e-4) on a small randomized configuration: 8x8 packed crops, 3
/// frames, 2 scales. Entries with |g| <= 1e-8 are skipped.
pub fn gradcheck(seed: u64) -> Result<GradcheckReport> {
    let config = NetConfig { fusion_hidden: 4, denoise_hidden: 6, refine_hidden: 4, scales: 2 };
    let w = randomized_weights(seed, config)?;
    let params = NoiseParams::new(0.01, 0.0004)?;
    let clean = synth_scene(seed ^ 0x9e3779b97f4a7c15, 3, 16, 16, 1)?;
    let noisy = add_noise(&clean, &params, seed.wrapping_add(1))?;
    let example =
        TrainExample { noisy, clean, params, noise_seed: seed.wrapping_add(1), raw_offset: (0, 0) };

    let analytic = backward(&example, &w)?;
    let base: Vec<ArrayD<f64>> = w.to_named().into_iter().map(|(_, t)| t).collect();
    let h = 1e-4;

    let jobs: Vec<(usize, usize)> = base
        .iter()
        .enumerate()
        .flat_map(|(ti, t)| (0..t.len()).map(move |ei| (ti, ei)))
        .collect();
    // (tensor index, Some((relative error, was refined)) or None if skipped)
    type EntryCheck = Result<(usize, Option<(f64, bool)>)>;
    let results: Vec<EntryCheck> = jobs
        .par_iter()
        .map(|&(ti, ei)| {
            let g = analytic.grads[ti].as_slice().expect("contiguous")[ei];
            let probe = |delta: f64| -> Result<f64> {
                let mut tensors = base.clone();
                tensors[ti].as_slice_mut().expect("contiguous")[ei] += delta;
                let wp = ModelWeights::from_named(config, &tensors)?;
                plain_loss(&example, &wp)
            };
            let fd = (probe(h)? - probe(-h)?) / (2.0 * h);
            if g.abs() <= 1e-8 && fd.abs() <= 1e-6 {
                return Ok((ti, None));
            }
            let rel = (g - fd).abs() / g.abs().max(fd.abs());
            if rel <= 1e-4 {
                return Ok((ti, Some((rel, false))));
            }
            // The loss is piecewise smooth (ReLU, absolute values); a step
            // that straddles a kink makes the difference quotient wrong even
            // for an exact gradient. Re-probe with a 100x smaller step and
            // keep the better agreement.
            let h2 = h / 100.0;
            let fd2 = (probe(h2)? - probe(-h2)?) / (2.0 * h2);
            let rel2 = (g - fd2).abs() / g.abs().max(fd2.abs());
            Ok((ti, Some((rel.min(rel2), true))))
        })
        .collect();

    let mut max_rel = 0.0f64;
    let mut worst = String::new();
    let mut checked = 0usize;
    let mut skipped = 0usize;
    let mut refined = 0usize;
    for r in results {
        let (ti, entry) = r?;
        let Some((rel, was_refined)) = entry else {
            skipped += 1;
            continue;
        };
        checked += 1;
        if was_refined {
            refined += 1;
        }
        if rel > max_rel {
            max_rel = rel;
            worst = TENSOR_NAMES[ti].to_string();
        }
    }
    Ok(GradcheckReport {
        max_rel_err: max_rel,
        worst_tensor: worst,
        entries_checked: checked,
        entries_skipped: skipped,
        entries_refined: refined,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synth_scene_static_when_motion_zero() {
        let s = synth_scene(7, 4, 32, 32, 0).unwrap();
        for f in &s.frames[1..] {
            assert_eq!(f.data, s.frames[0].data);
        }
        assert!(s.frames[0].data.iter().all(|&v| (0.05..=0.95).contains(&v)));
    }

    #[test]
    fn synth_scene_deterministic_and_moving() {
        let a = synth_scene(9, 4, 32, 32, 2).unwrap();
        let b = synth_scene(9, 4, 32, 32, 2).unwrap();
        for (x, y) in a.frames.iter().zip(&b.frames) {
            assert_eq!(x.data, y.data);
        }
        let mad: f32 = a.frames[1]
            .data
            .iter()
            .zip(a.frames[0].data.iter())
            .map(|(x, y)| (x - y).abs())
            .sum::<f32>()
            / a.frames[0].data.len() as f32;
        assert!(mad > 0.0, "motion >= 1 must change frames");
    }

    #[test]
    fn sample_crops_count_alignment_and_noise_reproducibility() {
        let cfg = TrainConfig { crop: 16, seq_len: 3, crops_per_scene: 16, ..TrainConfig::desk() };
        let scene = synth_scene(11, 6, 48, 48, 1).unwrap();
        let params = NoiseParams::new(0.01, 0.0004).unwrap();
        let crops = sample_crops(&scene, &cfg, &params, 5).unwrap();
        assert_eq!(crops.len(), 16);
        for ex in &crops {
            assert_eq!(ex.raw_offset.0 % 2, 0);
            assert_eq!(ex.raw_offset.1 % 2, 0);
            assert_eq!(ex.noisy.len(), 3);
            // Re-adding noise from the recorded sub-seed reproduces the
            // noisy crop exactly.
            let again = add_noise(&ex.clean, &ex.params, ex.noise_seed).unwrap();
            for (a, b) in again.frames.iter().zip(&ex.noisy.frames) {
                assert_eq!(a.data, b.data);
            }
        }
    }

    #[test]
    fn sample_crops_rejects_oversized_crop() {
        let cfg = TrainConfig { crop: 64, seq_len: 2, ..TrainConfig::desk() };
        let scene = synth_scene(11, 3, 32, 32, 0).unwrap();
        let params = NoiseParams::new(0.01, 0.0004).unwrap();
        assert!(sample_crops(&scene, &cfg, &params, 0).is_err());
    }

    #[test]
    fn reconstruction_loss_hand_values() {
        let a = synth_scene(1, 2, 16, 16, 0).unwrap();
        assert_eq!(reconstruction_loss(&a, &a).unwrap(), 0.0);
        let shifted = Sequence::new(
            a.frames
                .iter()
                .map(|f| PackedFrame::new(f.data.mapv(|v| v + 0.01)).unwrap())
                .collect(),
            None,
            BayerPattern::Rggb,
        )
        .unwrap();
        let l = reconstruction_loss(&shifted, &a).unwrap();
        assert!((l - 0.01).abs() < 1e-6, "constant offset: {l}");
        // Half the samples offset by 0.2, half exact -> 0.1.
        let mut mixed = a.frames[0].data.clone();
        let n = mixed.len();
        for (i, v) in mixed.iter_mut().enumerate() {
            if i < n / 2 {
                *v += 0.2;
            }
        }
        let half = Sequence::new(
            vec![PackedFrame::new(mixed).unwrap(), a.frames[1].clone()],
            None,
            BayerPattern::Rggb,
        )
        .unwrap();
        let l = reconstruction_loss(&half, &a).unwrap();
        assert!((l - 0.05).abs() < 1e-6, "one frame half-offset: {l}");
    }

    #[test]
    fn total_loss_is_sum_of_parts() {
        let a = synth_scene(2, 2, 16, 16, 0).unwrap();
        let k = ColorKernel::default_init();
        let t = total_loss(&a, &a, &k).unwrap();
        assert!((t - orthonormality_loss(&k)).abs() < 1e-15);
        assert!(t > 1e-6 && t < 1e-3);
        let ortho = k.orthonormalized();
        assert!(total_loss(&a, &a, &ortho).unwrap() < 1e-12);
    }

    #[test]
    fn backward_is_deterministic() {
        let config = NetConfig { fusion_hidden: 4, denoise_hidden: 6, refine_hidden: 4, scales: 2 };
        let w = randomized_weights(3, config).unwrap();
        let params = NoiseParams::new(0.01, 0.0004).unwrap();
        let clean = synth_scene(4, 3, 16, 16, 1).unwrap();
        let noisy = add_noise(&clean, &params, 5).unwrap();
        let ex = TrainExample { noisy, clean, params, noise_seed: 5, raw_offset: (0, 0) };
        let a = backward(&ex, &w).unwrap();
        let b = backward(&ex, &w).unwrap();
        assert_eq!(a.loss, b.loss);
        for (x, y) in a.grads.iter().zip(&b.grads) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn backward_stationary_path_has_zero_denoise_output_gradient() {
        // Zero output layers, identical noise-free "noisy" and clean scene:
        // the prediction equals the truth, so no reconstruction gradient
        // reaches the denoise output layer.
        let config = NetConfig { fusion_hidden: 4, denoise_hidden: 6, refine_hidden: 4, scales: 2 };
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let mut w = ModelWeights::init(config, &mut rng).unwrap();
        // An identity color kernel makes the untrained pipeline a bitwise
        // identity, so the L1 subgradients vanish exactly.
        w.color = ColorKernel::identity();
        let clean = synth_scene(7, 3, 16, 16, 0).unwrap();
        let params = NoiseParams::new(0.01, 0.0004).unwrap();
        let ex = TrainExample {
            noisy: clean.clone(),
            clean,
            params,
            noise_seed: 0,
            raw_offset: (0, 0),
        };
        let g = backward(&ex, &w).unwrap();
        assert!(g.l_r < 1e-9, "static identity run must have near-zero L_r, got {}", g.l_r);
        let idx = TENSOR_NAMES.iter().position(|n| *n == "denoise.out.kernel").unwrap();
        assert!(g.grads[idx].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn plain_loss_matches_tape_loss() {
        let config = NetConfig { fusion_hidden: 4, denoise_hidden: 6, refine_hidden: 4, scales: 2 };
        let w = randomized_weights(8, config).unwrap();
        let params = NoiseParams::new(0.01, 0.0004).unwrap();
        let clean = synth_scene(9, 3, 16, 16, 1).unwrap();
        let noisy = add_noise(&clean, &params, 10).unwrap();
        let ex = TrainExample { noisy, clean, params, noise_seed: 10, raw_offset: (0, 0) };
        let plain = plain_loss(&ex, &w).unwrap();
        let taped = backward(&ex, &w).unwrap().loss;
        assert!(
            (plain - taped).abs() < 1e-12,
            "plain {plain} vs taped {taped}: paths must agree"
        );
    }

    #[test]
    fn adam_zero_gradients_leave_parameters_unchanged() {
        let config = NetConfig { fusion_hidden: 4, denoise_hidden: 6, refine_hidden: 4, scales: 2 };
        let w = randomized_weights(12, config).unwrap();
        let mut tensors: Vec<ArrayD<f64>> = w.to_named().into_iter().map(|(_, t)| t).collect();
        let zeros: Vec<ArrayD<f64>> =
            tensors.iter().map(|t| ArrayD::zeros(t.shape())).collect();
        let before = tensors.clone();
        let mut adam = Adam::new(&tensors);
        adam.step(&mut tensors, &zeros, 1e-2);
        adam.step(&mut tensors, &zeros, 1e-2);
        assert_eq!(tensors, before);
    }

    #[test]
    fn lr_schedule_drops_at_decay_points() {
        // 10 examples, batch 10 -> 1 iter/epoch, 20 epochs -> drops at
        // iters 14 and 18.
        let cfg = TrainConfig {
            epochs: 20,
            crop: 8,
            seq_len: 2,
            crops_per_scene: 10,
            batch_size: 10,
            fusion_hidden: 2,
            denoise_hidden: 2,
            refine_hidden: 2,
            scales: 1,
            seed: 1,
            validation_interval: 1000,
            ..TrainConfig::desk()
        };
        let scene = synth_scene(20, 4, 16, 16, 0).unwrap();
        let params = NoiseParams::new(0.01, 0.0004).unwrap();
        let data = sample_crops(&scene, &cfg, &params, 2).unwrap();
        let (_, log) = train(&cfg, &data, &[]).unwrap();
        assert_eq!(log.len(), 20);
        let lr0 = cfg.learning_rate;
        assert!((log[13].lr - lr0).abs() < 1e-18);
        assert!((log[14].lr - lr0 * 0.1).abs() < 1e-18, "0.75N: {}", log[14].lr);
        assert!((log[17].lr - lr0 * 0.1).abs() < 1e-18);
        assert!((log[19].lr - lr0 * 0.01).abs() < 1e-18, "0.95N: {}", log[19].lr);
    }

    #[test]
    fn train_is_reproducible_and_loss_falls() {
        let cfg = TrainConfig {
            epochs: 12,
            crop: 32,
            seq_len: 3,
            crops_per_scene: 4,
            batch_size: 4,
            fusion_hidden: 4,
            denoise_hidden: 6,
            refine_hidden: 4,
            scales: 2,
            seed: 3,
            validation_interval: 6,
            ..TrainConfig::desk()
        };
        let scene = synth_scene(21, 6, 64, 64, 1).unwrap();
        let params = NoiseParams::max_preset();
        let data = sample_crops(&scene, &cfg, &params, 4).unwrap();
        let val = sample_crops(&scene, &cfg, &params, 5).unwrap();
        let (w1, log1) = train(&cfg, &data, &val).unwrap();
        let (w2, log2) = train(&cfg, &data, &val).unwrap();
        assert_eq!(w1.to_named(), w2.to_named(), "fixed seed must reproduce weights");
        assert_eq!(serde_json::to_string(&log1).unwrap(), serde_json::to_string(&log2).unwrap());
        // Adam's normalized first steps inflate the tiny initial L_c before
        // the penalty pulls it back, so the monotone signal is L_r.
        assert!(log1.last().unwrap().l_r < log1.first().unwrap().l_r);
        assert!(log1.iter().all(|r| r.l_c < 1e-3));
        assert!(log1.iter().any(|r| r.psnr.is_some()), "validation records present");
    }

    #[test]
    fn gradcheck_passes_and_is_fast_enough() {
        let start = std::time::Instant::now();
        let report = gradcheck(7).unwrap();
        assert!(
            report.max_rel_err < 1e-4,
            "max rel err {} at {}",
            report.max_rel_err,
            report.worst_tensor
        );
        assert!(report.entries_checked > 1000, "checked {}", report.entries_checked);
        assert!(start.elapsed().as_secs() < 120);
    }
}
