//! Convolution and resampling primitives with exact hand-written backward
//! passes. Convolutions use im2col + GEMM; padding is reflective so stage
//! outputs preserve spatial size without dark borders.

use ndarray::{Array1, Array2, Array3, Array4, ArrayView3, ArrayView4};
use rand::Rng;

/// Reflect (without edge repeat) an out-of-range index into [0, n).
#[inline]
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let n = n as isize;
    let mut i = i;
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * n - 2 - i;
    }
    debug_assert!(i >= 0 && i < n);
    i as usize
}

/// Lay out 3x3 reflect-padded patches as a [cin*9, h*w] matrix.
fn im2col3x3(input: &ArrayView3<f64>) -> Array2<f64> {
    let (cin, h, w) = input.dim();
    let mut cols = Array2::<f64>::zeros((cin * 9, h * w));
    for c in 0..cin {
        for ky in 0..3usize {
            for kx in 0..3usize {
                let row = c * 9 + ky * 3 + kx;
                let mut out_row = cols.row_mut(row);
                let out_slice = out_row.as_slice_mut().expect("contiguous");
                for y in 0..h {
                    let sy = reflect(y as isize + ky as isize - 1, h);
                    let src = input.index_axis(ndarray::Axis(0), c);
                    for x in 0..w {
                        let sx = reflect(x as isize + kx as isize - 1, w);
                        out_slice[y * w + x] = src[[sy, sx]];
                    }
                }
            }
        }
    }
    cols
}

/// 3x3 convolution with reflect padding: [cin,h,w] -> [cout,h,w].
pub fn conv3x3_forward(
    input: &ArrayView3<f64>,
    kernel: &ArrayView4<f64>,
    bias: &Array1<f64>,
) -> Array3<f64> {
    let (cin, h, w) = input.dim();
    let (cout, kcin, kh, kw) = kernel.dim();
    assert_eq!((kcin, kh, kw), (cin, 3, 3), "kernel/input channel mismatch");
    let cols = im2col3x3(input);
    let kmat = kernel
        .to_shape((cout, cin * 9))
        .expect("kernel contiguous")
        .to_owned();
    let mut out = kmat.dot(&cols); // [cout, h*w]
    for (mut row, b) in out.rows_mut().into_iter().zip(bias.iter()) {
        row.mapv_inplace(|v| v + b);
    }
    out.into_shape_with_order((cout, h, w)).expect("shape")
}

/// Gradients of [`conv3x3_forward`] w.r.t. input, kernel, and bias.
pub fn conv3x3_backward(
    input: &ArrayView3<f64>,
    kernel: &ArrayView4<f64>,
    gout: &ArrayView3<f64>,
) -> (Array3<f64>, Array4<f64>, Array1<f64>) {
    let (cin, h, w) = input.dim();
    let (cout, _, _, _) = kernel.dim();
    let cols = im2col3x3(input);
    let gmat = gout
        .to_shape((cout, h * w))
        .expect("grad contiguous")
        .to_owned();

    let gbias = gmat.sum_axis(ndarray::Axis(1));
    let gkernel = gmat
        .dot(&cols.t())
        .into_shape_with_order((cout, cin, 3, 3))
        .expect("shape");

    let kmat = kernel
        .to_shape((cout, cin * 9))
        .expect("kernel contiguous")
        .to_owned();
    let gcols = kmat.t().dot(&gmat); // [cin*9, h*w]
    let mut ginput = Array3::<f64>::zeros((cin, h, w));
    for c in 0..cin {
        for ky in 0..3usize {
            for kx in 0..3usize {
                let row = gcols.row(c * 9 + ky * 3 + kx);
                let row = row.as_slice().expect("contiguous");
                for y in 0..h {
                    let sy = reflect(y as isize + ky as isize - 1, h);
                    for x in 0..w {
                        let sx = reflect(x as isize + kx as isize - 1, w);
                        ginput[[c, sy, sx]] += row[y * w + x];
                    }
                }
            }
        }
    }
    (ginput, gkernel, gbias)
}

/// 2x2 mean pooling: [c,h,w] -> [c,h/2,w/2]. Requires even h, w.
pub fn downsample2_forward(input: &ArrayView3<f64>) -> Array3<f64> {
    let (c, h, w) = input.dim();
    assert!(h % 2 == 0 && w % 2 == 0, "downsample needs even dims, got {h}x{w}");
    let (oh, ow) = (h / 2, w / 2);
    Array3::from_shape_fn((c, oh, ow), |(ch, i, j)| {
        0.25 * (input[[ch, 2 * i, 2 * j]]
            + input[[ch, 2 * i, 2 * j + 1]]
            + input[[ch, 2 * i + 1, 2 * j]]
            + input[[ch, 2 * i + 1, 2 * j + 1]])
    })
}

pub fn downsample2_backward(gout: &ArrayView3<f64>) -> Array3<f64> {
    let (c, oh, ow) = gout.dim();
    let mut g = Array3::<f64>::zeros((c, oh * 2, ow * 2));
    for ch in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let v = 0.25 * gout[[ch, i, j]];
                g[[ch, 2 * i, 2 * j]] = v;
                g[[ch, 2 * i, 2 * j + 1]] = v;
                g[[ch, 2 * i + 1, 2 * j]] = v;
                g[[ch, 2 * i + 1, 2 * j + 1]] = v;
            }
        }
    }
    g
}

/// Interpolation taps for 2x bilinear upsampling along one axis
/// (half-pixel-center convention, edges clamped). Weights sum to one, so
/// constants are reproduced exactly.
fn up2_taps(n_in: usize) -> Vec<(usize, usize, f64, f64)> {
    let n_out = n_in * 2;
    (0..n_out)
        .map(|d| {
            let src = (d as f64 + 0.5) / 2.0 - 0.5;
            let i0 = src.floor();
            let frac = src - i0;
            let a = (i0 as isize).clamp(0, n_in as isize - 1) as usize;
            let b = (i0 as isize + 1).clamp(0, n_in as isize - 1) as usize;
            (a, b, 1.0 - frac, frac)
        })
        .collect()
}

/// 2x bilinear upsampling: [c,h,w] -> [c,2h,2w].
pub fn upsample2_forward(input: &ArrayView3<f64>) -> Array3<f64> {
    let (c, h, w) = input.dim();
    let ty = up2_taps(h);
    let tx = up2_taps(w);
    Array3::from_shape_fn((c, 2 * h, 2 * w), |(ch, y, x)| {
        let (y0, y1, wy0, wy1) = ty[y];
        let (x0, x1, wx0, wx1) = tx[x];
        wy0 * (wx0 * input[[ch, y0, x0]] + wx1 * input[[ch, y0, x1]])
            + wy1 * (wx0 * input[[ch, y1, x0]] + wx1 * input[[ch, y1, x1]])
    })
}

pub fn upsample2_backward(gout: &ArrayView3<f64>, in_h: usize, in_w: usize) -> Array3<f64> {
    let (c, oh, ow) = gout.dim();
    assert_eq!((oh, ow), (2 * in_h, 2 * in_w));
    let ty = up2_taps(in_h);
    let tx = up2_taps(in_w);
    let mut g = Array3::<f64>::zeros((c, in_h, in_w));
    for ch in 0..c {
        for y in 0..oh {
            let (y0, y1, wy0, wy1) = ty[y];
            for x in 0..ow {
                let (x0, x1, wx0, wx1) = tx[x];
                let v = gout[[ch, y, x]];
                g[[ch, y0, x0]] += wy0 * wx0 * v;
                g[[ch, y0, x1]] += wy0 * wx1 * v;
                g[[ch, y1, x0]] += wy1 * wx0 * v;
                g[[ch, y1, x1]] += wy1 * wx1 * v;
            }
        }
    }
    g
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Output nonlinearity of a stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutActivation {
    Sigmoid,
    None,
}

/// Two 3x3 conv + ReLU layers and a 3x3 output layer, the building block of
/// the fusion, denoising, and refinement stages.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvStage {
    pub k1: Array4<f64>,
    pub b1: Array1<f64>,
    pub k2: Array4<f64>,
    pub b2: Array1<f64>,
    pub k3: Array4<f64>,
    pub b3: Array1<f64>,
    pub activation: OutActivation,
}

impl ConvStage {
    pub fn c_in(&self) -> usize {
        self.k1.dim().1
    }

    pub fn c_hidden(&self) -> usize {
        self.k1.dim().0
    }

    pub fn c_out(&self) -> usize {
        self.k3.dim().0
    }

    /// Uniform fan-in init for the hidden layers; the output layer is
    /// zero-initialized so an untrained stage emits 0 (sigmoid 0.5).
    pub fn init<R: Rng>(
        c_in: usize,
        c_hidden: usize,
        c_out: usize,
        activation: OutActivation,
        rng: &mut R,
    ) -> Self {
        let uniform = |fan_in: usize, shape: (usize, usize, usize, usize), rng: &mut R| {
            let s = 1.0 / (fan_in as f64).sqrt();
            Array4::from_shape_fn(shape, |_| rng.gen_range(-s..s))
        };
        ConvStage {
            k1: uniform(c_in * 9, (c_hidden, c_in, 3, 3), rng),
            b1: Array1::zeros(c_hidden),
            k2: uniform(c_hidden * 9, (c_hidden, c_hidden, 3, 3), rng),
            b2: Array1::zeros(c_hidden),
            k3: Array4::zeros((c_out, c_hidden, 3, 3)),
            b3: Array1::zeros(c_out),
            activation,
        }
    }

    /// Plain inference-path forward.
    pub fn forward(&self, input: &ArrayView3<f64>) -> Array3<f64> {
        let h1 = conv3x3_forward(input, &self.k1.view(), &self.b1).mapv(|v| v.max(0.0));
        let h2 = conv3x3_forward(&h1.view(), &self.k2.view(), &self.b2).mapv(|v| v.max(0.0));
        let out = conv3x3_forward(&h2.view(), &self.k3.view(), &self.b3);
        match self.activation {
            OutActivation::Sigmoid => out.mapv(sigmoid),
            OutActivation::None => out,
        }
    }

    pub fn param_count(&self) -> usize {
        self.k1.len() + self.b1.len() + self.k2.len() + self.b2.len() + self.k3.len() + self.b3.len()
    }

    /// Multiply-accumulates for one forward pass over `pixels` positions.
    pub fn macs_per_pixel(&self) -> usize {
        let l1 = self.k1.dim().0 * self.k1.dim().1 * 9;
        let l2 = self.k2.dim().0 * self.k2.dim().1 * 9;
        let l3 = self.k3.dim().0 * self.k3.dim().1 * 9;
        l1 + l2 + l3
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array1, Array3, Array4};
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn rand3(shape: (usize, usize, usize), rng: &mut ChaCha12Rng) -> Array3<f64> {
        Array3::from_shape_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn conv_single_param_count_example() {
        // 3x3 conv, 8 -> 16 channels with bias: 8*16*9 + 16 = 1168.
        assert_eq!(16 * 8 * 9 + 16, 1168);
    }

    #[test]
    fn conv_identity_kernel() {
        // Kernel with a centered 1 copies the input.
        let mut k = Array4::<f64>::zeros((1, 1, 3, 3));
        k[[0, 0, 1, 1]] = 1.0;
        let b = Array1::zeros(1);
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let x = rand3((1, 5, 4), &mut rng);
        let y = conv3x3_forward(&x.view(), &k.view(), &b);
        assert_eq!(y, x);
    }

    #[test]
    fn conv_constant_input_reflect_padding() {
        // With reflect padding a constant input stays constant (no border
        // falloff): output = sum(kernel)*c + bias everywhere.
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let k = Array4::from_shape_fn((2, 3, 3, 3), |_| rng.gen_range(-1.0..1.0));
        let b = Array1::from_vec(vec![0.3, -0.1]);
        let x = Array3::from_elem((3, 6, 6), 0.7);
        let y = conv3x3_forward(&x.view(), &k.view(), &b);
        for o in 0..2 {
            let expect = k.index_axis(ndarray::Axis(0), o).sum() * 0.7 + b[o];
            for v in y.index_axis(ndarray::Axis(0), o).iter() {
                assert!((v - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_matches_finite_difference() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let x = rand3((2, 4, 5), &mut rng);
        let k = Array4::from_shape_fn((3, 2, 3, 3), |_| rng.gen_range(-1.0..1.0));
        let b = Array1::from_shape_fn(3, |_| rng.gen_range(-1.0..1.0));
        let gout = rand3((3, 4, 5), &mut rng);

        let loss = |x: &Array3<f64>, k: &Array4<f64>, b: &Array1<f64>| -> f64 {
            (conv3x3_forward(&x.view(), &k.view(), b) * &gout).sum()
        };
        let (gx, gk, gb) = conv3x3_backward(&x.view(), &k.view(), &gout.view());

        let h = 1e-6;
        for idx in [(0usize, 0usize, 0usize), (1, 3, 4), (0, 2, 2)] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = (loss(&xp, &k, &b) - loss(&xm, &k, &b)) / (2.0 * h);
            assert!((fd - gx[idx]).abs() < 1e-6, "input grad at {idx:?}");
        }
        for idx in [(0usize, 0usize, 0usize, 0usize), (2, 1, 2, 2), (1, 0, 1, 0)] {
            let mut kp = k.clone();
            kp[idx] += h;
            let mut km = k.clone();
            km[idx] -= h;
            let fd = (loss(&x, &kp, &b) - loss(&x, &km, &b)) / (2.0 * h);
            assert!((fd - gk[idx]).abs() < 1e-6, "kernel grad at {idx:?}");
        }
        for i in 0..3 {
            let mut bp = b.clone();
            bp[i] += h;
            let mut bm = b.clone();
            bm[i] -= h;
            let fd = (loss(&x, &k, &bp) - loss(&x, &k, &bm)) / (2.0 * h);
            assert!((fd - gb[i]).abs() < 1e-6, "bias grad at {i}");
        }
    }

    #[test]
    fn downsample_constant_exact() {
        let x = Array3::from_elem((4, 6, 8), 0.42);
        let y = downsample2_forward(&x.view());
        assert_eq!(y.dim(), (4, 3, 4));
        assert!(y.iter().all(|&v| v == 0.42));
    }

    #[test]
    fn upsample_constant_exact() {
        let x = Array3::from_elem((4, 3, 4), 0.42);
        let y = upsample2_forward(&x.view());
        assert_eq!(y.dim(), (4, 6, 8));
        assert!(y.iter().all(|&v| (v - 0.42).abs() < 1e-15));
    }

    #[test]
    fn resample_backward_is_transpose() {
        // <down(x), g> == <x, down^T(g)> and likewise for upsampling.
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let x = rand3((2, 4, 6), &mut rng);
        let g = rand3((2, 2, 3), &mut rng);
        let lhs = (downsample2_forward(&x.view()) * &g).sum();
        let rhs = (&x * &downsample2_backward(&g.view())).sum();
        assert!((lhs - rhs).abs() < 1e-12);

        let xu = rand3((2, 2, 3), &mut rng);
        let gu = rand3((2, 4, 6), &mut rng);
        let lhs = (upsample2_forward(&xu.view()) * &gu).sum();
        let rhs = (&xu * &upsample2_backward(&gu.view(), 2, 3)).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn stage_zero_output_layer_is_neutral() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let stage = ConvStage::init(8, 4, 1, OutActivation::Sigmoid, &mut rng);
        let x = rand3((8, 4, 4), &mut rng);
        let y = stage.forward(&x.view());
        assert!(y.iter().all(|&v| v == 0.5), "zero-init output layer must give sigmoid(0)");
    }
}
