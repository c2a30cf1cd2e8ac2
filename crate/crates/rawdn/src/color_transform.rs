//! Learnable orthonormal channel decorrelation: a point-wise 4x4 transform
//! from (R, G1, G2, B) to (Y, U, V, W), its true inverse, the Frobenius
//! reversibility penalty, and exact variance mapping through the transform.

use ndarray::{Array2, Array3, ArrayView3};

use crate::error::{Error, Result};
use crate::noise_model::{VarianceMap, EPS_VAR};

/// Condition-number estimate above which the kernel is treated as singular.
pub const COND_LIMIT: f64 = 1e8;

/// The trainable 4x4 decorrelation matrix. Rows map channel vectors
/// (R,G1,G2,B) to (Y,U,V,W).
#[derive(Debug, Clone, PartialEq)]
pub struct ColorKernel {
    pub m: Array2<f64>,
}

impl ColorKernel {
    pub fn new(m: Array2<f64>) -> Result<Self> {
        if m.dim() != (4, 4) {
            return Err(Error::Shape(format!("color kernel must be 4x4, got {:?}", m.dim())));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("color kernel contains non-finite entries".into()));
        }
        Ok(ColorKernel { m })
    }

    /// Published initialization: nearly-orthonormal RG1G2B -> YUVW rows.
    pub fn default_init() -> Self {
        let m = Array2::from_shape_vec(
            (4, 4),
            vec![
                0.5, 0.5, 0.5, 0.5, //
                -0.5, 0.5, 0.5, -0.5, //
                0.65, 0.2784, -0.2784, -0.65, //
                -0.2784, 0.65, -0.65, 0.2784,
            ],
        )
        .expect("static shape");
        ColorKernel { m }
    }

    pub fn identity() -> Self {
        ColorKernel { m: Array2::eye(4) }
    }

    /// Explicit 4x4 inverse (partial-pivot Gaussian elimination). The kernel
    /// is only approximately orthonormal during training, so the transpose is
    /// not used as the inverse.
    pub fn inverse(&self) -> Result<Array2<f64>> {
        let inv = invert4(&self.m).ok_or(Error::Singular(f64::INFINITY))?;
        let cond = norm1(&self.m) * norm1(&inv);
        if cond > COND_LIMIT {
            return Err(Error::Singular(cond));
        }
        Ok(inv)
    }

    /// Row-wise Gram-Schmidt projection onto the orthonormal manifold; the
    /// training loop applies this only when the penalty exceeds its safety
    /// threshold.
    pub fn orthonormalized(&self) -> ColorKernel {
        let mut m = self.m.clone();
        for i in 0..4 {
            for j in 0..i {
                let dot = m.row(i).dot(&m.row(j));
                let prev = m.row(j).to_owned();
                m.row_mut(i).zip_mut_with(&prev, |a, &b| *a -= dot * b);
            }
            let norm = m.row(i).dot(&m.row(i)).sqrt();
            m.row_mut(i).mapv_inplace(|v| v / norm);
        }
        ColorKernel { m }
    }
}

fn norm1(m: &Array2<f64>) -> f64 {
    (0..4)
        .map(|j| (0..4).map(|i| m[[i, j]].abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

fn invert4(m: &Array2<f64>) -> Option<Array2<f64>> {
    let n = 4;
    let mut a = m.clone();
    let mut inv = Array2::<f64>::eye(n);
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[[i, col]].abs().partial_cmp(&a[[j, col]].abs()).unwrap())?;
        if a[[pivot, col]].abs() < 1e-300 {
            return None;
        }
        if pivot != col {
            for k in 0..n {
                a.swap([pivot, k], [col, k]);
                inv.swap([pivot, k], [col, k]);
            }
        }
        let d = a[[col, col]];
        for k in 0..n {
            a[[col, k]] /= d;
            inv[[col, k]] /= d;
        }
        for row in 0..n {
            if row != col {
                let f = a[[row, col]];
                if f != 0.0 {
                    for k in 0..n {
                        a[[row, k]] -= f * a[[col, k]];
                        inv[[row, k]] -= f * inv[[col, k]];
                    }
                }
            }
        }
    }
    Some(inv)
}

/// Multiply every pixel's channel vector by `m`: [4,h,w] -> [4,h,w].
pub fn apply_matrix(m: &Array2<f64>, img: &ArrayView3<f64>) -> Array3<f64> {
    let (c, h, w) = img.dim();
    debug_assert_eq!(c, 4);
    let flat = img.to_shape((c, h * w)).expect("contiguous");
    m.dot(&flat).into_shape_with_order((4, h, w)).expect("shape")
}

/// Forward transform RG1G2B -> YUVW.
pub fn color_forward(img: &ArrayView3<f64>, kernel: &ColorKernel) -> Array3<f64> {
    apply_matrix(&kernel.m, img)
}

/// Inverse transform YUVW -> RG1G2B via the explicit matrix inverse.
pub fn color_inverse(img: &ArrayView3<f64>, kernel: &ColorKernel) -> Result<Array3<f64>> {
    Ok(apply_matrix(&kernel.inverse()?, img))
}

/// Reversibility penalty ||M M^T - I||_F.
pub fn orthonormality_loss(kernel: &ColorKernel) -> f64 {
    let g = kernel.m.dot(&kernel.m.t());
    let mut sum = 0.0;
    for i in 0..4 {
        for j in 0..4 {
            let d = g[[i, j]] - if i == j { 1.0 } else { 0.0 };
            sum += d * d;
        }
    }
    sum.sqrt()
}

/// Map per-channel variances through the transform. Output variances are
/// (M o M) v per pixel (entrywise squaring), the exact variance of a linear
/// combination of independent channel noises, floored at [`EPS_VAR`].
pub fn transform_variance(v: &VarianceMap, kernel: &ColorKernel) -> VarianceMap {
    let sq = kernel.m.mapv(|x| x * x);
    apply_matrix(&sq, &v.view()).mapv(|x| x.max(EPS_VAR))
}
