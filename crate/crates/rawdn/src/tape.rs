//! Minimal reverse-mode autodiff tape over `ndarray` tensors.
//!
//! The training engine records the whole recurrent pipeline (all frames, all
//! scales) on one tape and walks it backward once, giving exact gradients of
//! the total loss with respect to every parameter. Nodes are appended in
//! topological order, so the reverse walk is a single pass. All operations
//! are sequential and deterministic.

use ndarray::{Array2, ArrayD, Axis, IxDyn};

use crate::color_transform::ColorKernel;
use crate::nn::{self, sigmoid};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub usize);

/// Context handed to a node's backward function.
struct BackCtx<'a> {
    values: &'a [ArrayD<f64>],
    node: usize,
    parents: &'a [usize],
    gout: &'a ArrayD<f64>,
    /// Which parents actually require a gradient.
    need: &'a [bool],
}

impl BackCtx<'_> {
    fn parent(&self, i: usize) -> &ArrayD<f64> {
        &self.values[self.parents[i]]
    }

    fn own(&self) -> &ArrayD<f64> {
        &self.values[self.node]
    }
}

type BackFn = Box<dyn Fn(&BackCtx) -> Vec<Option<ArrayD<f64>>>>;

pub struct Tape {
    values: Vec<ArrayD<f64>>,
    parents: Vec<Vec<usize>>,
    backs: Vec<Option<BackFn>>,
    needs_grad: Vec<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { values: Vec::new(), parents: Vec::new(), backs: Vec::new(), needs_grad: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.values[v.0]
    }

    fn push(
        &mut self,
        value: ArrayD<f64>,
        parents: Vec<usize>,
        back: Option<BackFn>,
    ) -> Var {
        let needs = parents.iter().any(|&p| self.needs_grad[p]);
        self.values.push(value);
        self.parents.push(parents);
        self.backs.push(if needs { back } else { None });
        self.needs_grad.push(needs);
        Var(self.values.len() - 1)
    }

    /// Constant input; no gradient flows into it.
    pub fn input(&mut self, value: ArrayD<f64>) -> Var {
        self.values.push(value);
        self.parents.push(Vec::new());
        self.backs.push(None);
        self.needs_grad.push(false);
        Var(self.values.len() - 1)
    }

    /// Trainable leaf; its gradient is retained by `backward`.
    pub fn param(&mut self, value: ArrayD<f64>) -> Var {
        self.values.push(value);
        self.parents.push(Vec::new());
        self.backs.push(None);
        self.needs_grad.push(true);
        Var(self.values.len() - 1)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = &self.values[a.0] + &self.values[b.0];
        self.push(
            v,
            vec![a.0, b.0],
            Some(Box::new(|ctx: &BackCtx| {
                vec![Some(ctx.gout.clone()), Some(ctx.gout.clone())]
            })),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = &self.values[a.0] - &self.values[b.0];
        self.push(
            v,
            vec![a.0, b.0],
            Some(Box::new(|ctx: &BackCtx| {
                vec![Some(ctx.gout.clone()), Some(ctx.gout.mapv(|g| -g))]
            })),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = &self.values[a.0] * &self.values[b.0];
        self.push(
            v,
            vec![a.0, b.0],
            Some(Box::new(|ctx: &BackCtx| {
                vec![
                    Some(ctx.gout * ctx.parent(1)),
                    Some(ctx.gout * ctx.parent(0)),
                ]
            })),
        )
    }

    pub fn mul_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.values[a.0].mapv(|x| x * s);
        self.push(
            v,
            vec![a.0],
            Some(Box::new(move |ctx: &BackCtx| vec![Some(ctx.gout.mapv(|g| g * s))])),
        )
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.values[a.0].mapv(|x| x + s);
        self.push(
            v,
            vec![a.0],
            Some(Box::new(|ctx: &BackCtx| vec![Some(ctx.gout.clone())])),
        )
    }

    /// 1 - x, the complement of a convex weight.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let v = self.values[a.0].mapv(|x| 1.0 - x);
        self.push(
            v,
            vec![a.0],
            Some(Box::new(|ctx: &BackCtx| vec![Some(ctx.gout.mapv(|g| -g))])),
        )
    }

    /// Elementwise floor: max(x, s). Gradient passes only where x > s.
    pub fn max_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.values[a.0].mapv(|x| x.max(s));
        self.push(
            v,
            vec![a.0],
            Some(Box::new(move |ctx: &BackCtx| {
                let mut g = ctx.gout.clone();
                g.zip_mut_with(ctx.parent(0), |gv, &x| {
                    if x <= s {
                        *gv = 0.0;
                    }
                });
                vec![Some(g)]
            })),
        )
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.values[a.0].mapv(f64::abs);
        self.push(
            v,
            vec![a.0],
            Some(Box::new(|ctx: &BackCtx| {
                let mut g = ctx.gout.clone();
                g.zip_mut_with(ctx.parent(0), |gv, &x| *gv *= x.signum() * f64::from(x != 0.0));
                vec![Some(g)]
            })),
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.values[a.0].mapv(|x| x.max(0.0));
        self.push(
            v,
            vec![a.0],
            Some(Box::new(|ctx: &BackCtx| {
                let mut g = ctx.gout.clone();
                g.zip_mut_with(ctx.parent(0), |gv, &x| {
                    if x <= 0.0 {
                        *gv = 0.0;
                    }
                });
                vec![Some(g)]
            })),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.values[a.0].mapv(sigmoid);
        self.push(
            v,
            vec![a.0],
            Some(Box::new(|ctx: &BackCtx| {
                let mut g = ctx.gout.clone();
                g.zip_mut_with(ctx.own(), |gv, &y| *gv *= y * (1.0 - y));
                vec![Some(g)]
            })),
        )
    }

    /// Multiply a [c,h,w] image by a [1,h,w] map, broadcasting over channels.
    pub fn broadcast_mul(&mut self, img: Var, map: Var) -> Var {
        let iv = &self.values[img.0];
        let mv = &self.values[map.0];
        let c = iv.shape()[0];
        let mut out = iv.clone();
        for ch in 0..c {
            out.index_axis_mut(Axis(0), ch)
                .zip_mut_with(&mv.index_axis(Axis(0), 0), |o, &m| *o *= m);
        }
        self.push(
            out,
            vec![img.0, map.0],
            Some(Box::new(|ctx: &BackCtx| {
                let iv = ctx.parent(0);
                let mv = ctx.parent(1);
                let c = iv.shape()[0];
                let gimg = if ctx.need[0] {
                    let mut g = ctx.gout.clone();
                    for ch in 0..c {
                        g.index_axis_mut(Axis(0), ch)
                            .zip_mut_with(&mv.index_axis(Axis(0), 0), |o, &m| *o *= m);
                    }
                    Some(g)
                } else {
                    None
                };
                let gmap = if ctx.need[1] {
                    let mut g = ArrayD::<f64>::zeros(mv.shape());
                    for ch in 0..c {
                        let prod = &ctx.gout.index_axis(Axis(0), ch)
                            * &iv.index_axis(Axis(0), ch);
                        g.index_axis_mut(Axis(0), 0).zip_mut_with(&prod, |o, &p| *o += p);
                    }
                    Some(g)
                } else {
                    None
                };
                vec![gimg, gmap]
            })),
        )
    }

    /// Concatenate along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|v| self.values[v.0].view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("compatible shapes");
        let sizes: Vec<usize> = parts.iter().map(|v| self.values[v.0].shape()[0]).collect();
        self.push(
            out,
            parts.iter().map(|v| v.0).collect(),
            Some(Box::new(move |ctx: &BackCtx| {
                let mut grads = Vec::with_capacity(sizes.len());
                let mut offset = 0;
                for (i, &sz) in sizes.iter().enumerate() {
                    if ctx.need[i] {
                        let slice = ctx
                            .gout
                            .slice_axis(Axis(0), ndarray::Slice::from(offset..offset + sz));
                        grads.push(Some(slice.to_owned()));
                    } else {
                        grads.push(None);
                    }
                    offset += sz;
                }
                grads
            })),
        )
    }

    /// 3x3 convolution with reflect padding.
    pub fn conv3x3(&mut self, input: Var, kernel: Var, bias: Var) -> Var {
        let x = as3(&self.values[input.0]);
        let k = as4(&self.values[kernel.0]);
        let b = self.values[bias.0]
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .expect("bias rank 1")
            .to_owned();
        let out = nn::conv3x3_forward(&x, &k, &b).into_dyn();
        self.push(
            out,
            vec![input.0, kernel.0, bias.0],
            Some(Box::new(|ctx: &BackCtx| {
                let x = as3(ctx.parent(0));
                let k = as4(ctx.parent(1));
                let g = as3(ctx.gout);
                let (gx, gk, gb) = nn::conv3x3_backward(&x, &k, &g);
                vec![
                    if ctx.need[0] { Some(gx.into_dyn()) } else { None },
                    if ctx.need[1] { Some(gk.into_dyn()) } else { None },
                    if ctx.need[2] { Some(gb.into_dyn()) } else { None },
                ]
            })),
        )
    }

    /// Per-pixel channel transform y = M x for a [4,4] matrix.
    pub fn matvec(&mut self, m: Var, img: Var) -> Var {
        let mv = as2(&self.values[m.0]);
        let x = as3(&self.values[img.0]);
        let out = crate::color_transform::apply_matrix(&mv.to_owned(), &x).into_dyn();
        self.push(
            out,
            vec![m.0, img.0],
            Some(Box::new(|ctx: &BackCtx| {
                let m = as2(ctx.parent(0)).to_owned();
                let x = as3(ctx.parent(1));
                let (_, h, w) = x.dim();
                let xf = x.to_shape((4, h * w)).expect("contiguous").to_owned();
                let gf = as3(ctx.gout).to_shape((4, h * w)).expect("contiguous").to_owned();
                let gm = if ctx.need[0] { Some(gf.dot(&xf.t()).into_dyn()) } else { None };
                let gx = if ctx.need[1] {
                    Some(
                        m.t()
                            .dot(&gf)
                            .into_shape_with_order((4, h, w))
                            .expect("shape")
                            .into_dyn(),
                    )
                } else {
                    None
                };
                vec![gm, gx]
            })),
        )
    }

    /// Per-pixel inverse channel transform y = M^{-1} x. The inverse is an
    /// explicit 4x4 inverse; gradient to M goes through the inversion.
    pub fn matvec_inv(&mut self, m: Var, img: Var) -> Var {
        let kernel = ColorKernel::new(as2(&self.values[m.0]).to_owned()).expect("4x4");
        let inv = kernel.inverse().expect("invertible during training");
        let x = as3(&self.values[img.0]);
        let out = crate::color_transform::apply_matrix(&inv, &x).into_dyn();
        self.push(
            out,
            vec![m.0, img.0],
            Some(Box::new(|ctx: &BackCtx| {
                let kernel = ColorKernel::new(as2(ctx.parent(0)).to_owned()).expect("4x4");
                let a = kernel.inverse().expect("invertible");
                let x = as3(ctx.parent(1));
                let (_, h, w) = x.dim();
                let xf = x.to_shape((4, h * w)).expect("contiguous").to_owned();
                let gf = as3(ctx.gout).to_shape((4, h * w)).expect("contiguous").to_owned();
                let gx = if ctx.need[1] {
                    Some(
                        a.t()
                            .dot(&gf)
                            .into_shape_with_order((4, h, w))
                            .expect("shape")
                            .into_dyn(),
                    )
                } else {
                    None
                };
                let gm = if ctx.need[0] {
                    // d(M^{-1}) = -M^{-1} dM M^{-1}  =>  gM = -A^T (gY X^T) A^T
                    let gy_xt = gf.dot(&xf.t());
                    Some(a.t().dot(&gy_xt).dot(&a.t()).mapv(|v| -v).into_dyn())
                } else {
                    None
                };
                vec![gm, gx]
            })),
        )
    }

    /// Variance transform y = (M o M) x (entrywise-squared matrix).
    pub fn sq_matvec(&mut self, m: Var, v: Var) -> Var {
        let mv = as2(&self.values[m.0]).mapv(|x| x * x);
        let x = as3(&self.values[v.0]);
        let out = crate::color_transform::apply_matrix(&mv, &x).into_dyn();
        self.push(
            out,
            vec![m.0, v.0],
            Some(Box::new(|ctx: &BackCtx| {
                let m = as2(ctx.parent(0)).to_owned();
                let x = as3(ctx.parent(1));
                let (_, h, w) = x.dim();
                let xf = x.to_shape((4, h * w)).expect("contiguous").to_owned();
                let gf = as3(ctx.gout).to_shape((4, h * w)).expect("contiguous").to_owned();
                let gm = if ctx.need[0] {
                    let gs = gf.dot(&xf.t());
                    Some((2.0 * &m * &gs).into_dyn())
                } else {
                    None
                };
                let gx = if ctx.need[1] {
                    let sq = m.mapv(|v| v * v);
                    Some(
                        sq.t()
                            .dot(&gf)
                            .into_shape_with_order((4, h, w))
                            .expect("shape")
                            .into_dyn(),
                    )
                } else {
                    None
                };
                vec![gm, gx]
            })),
        )
    }

    pub fn downsample2(&mut self, img: Var) -> Var {
        let x = as3(&self.values[img.0]);
        let out = nn::downsample2_forward(&x).into_dyn();
        self.push(
            out,
            vec![img.0],
            Some(Box::new(|ctx: &BackCtx| {
                let g = as3(ctx.gout);
                vec![Some(nn::downsample2_backward(&g).into_dyn())]
            })),
        )
    }

    pub fn upsample2(&mut self, img: Var) -> Var {
        let x = as3(&self.values[img.0]);
        let out = nn::upsample2_forward(&x).into_dyn();
        self.push(
            out,
            vec![img.0],
            Some(Box::new(|ctx: &BackCtx| {
                let shape = ctx.parent(0).shape();
                let (h, w) = (shape[1], shape[2]);
                let g = as3(ctx.gout);
                vec![Some(nn::upsample2_backward(&g, h, w).into_dyn())]
            })),
        )
    }

    /// Mean absolute error over all elements; returns a scalar node.
    pub fn l1_mean(&mut self, a: Var, b: Var) -> Var {
        let diff = &self.values[a.0] - &self.values[b.0];
        let n = diff.len() as f64;
        let loss = diff.mapv(f64::abs).sum() / n;
        self.push(
            ndarray::arr0(loss).into_dyn(),
            vec![a.0, b.0],
            Some(Box::new(move |ctx: &BackCtx| {
                let g = ctx.gout.first().copied().unwrap_or(0.0) / n;
                let mut ga = ctx.parent(0) - ctx.parent(1);
                ga.mapv_inplace(|d| g * d.signum() * f64::from(d != 0.0));
                let gb = ga.mapv(|v| -v);
                vec![
                    if ctx.need[0] { Some(ga) } else { None },
                    if ctx.need[1] { Some(gb) } else { None },
                ]
            })),
        )
    }

    /// Orthonormality penalty ||M M^T - I||_F as a scalar node.
    pub fn frob_orth(&mut self, m: Var) -> Var {
        let mv = as2(&self.values[m.0]).to_owned();
        let k = ColorKernel::new(mv).expect("4x4");
        let loss = crate::color_transform::orthonormality_loss(&k);
        self.push(
            ndarray::arr0(loss).into_dyn(),
            vec![m.0],
            Some(Box::new(|ctx: &BackCtx| {
                let m = as2(ctx.parent(0)).to_owned();
                let n = ctx.own().first().copied().unwrap_or(0.0);
                if n == 0.0 {
                    return vec![Some(ArrayD::zeros(ctx.parent(0).shape()))];
                }
                let g = ctx.gout.first().copied().unwrap_or(0.0);
                let mut a = m.dot(&m.t());
                for i in 0..4 {
                    a[[i, i]] -= 1.0;
                }
                // d||A||_F/dM = 2 A M / ||A||_F for symmetric A.
                let gm = a.dot(&m).mapv(|v| 2.0 * v * g / n);
                vec![Some(gm.into_dyn())]
            })),
        )
    }

    /// Reverse pass from a scalar loss node. Returns one gradient slot per
    /// node; only leaves created with `param` retain their gradients.
    pub fn backward(&self, loss: Var) -> Vec<Option<ArrayD<f64>>> {
        assert_eq!(self.values[loss.0].len(), 1, "loss must be scalar");
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; self.values.len()];
        grads[loss.0] = Some(ArrayD::ones(IxDyn(self.values[loss.0].shape())));
        for i in (0..=loss.0).rev() {
            if !self.needs_grad[i] {
                continue;
            }
            let Some(back) = &self.backs[i] else {
                continue; // parameter leaf: keep its gradient
            };
            let Some(g) = grads[i].take() else {
                continue; // node not on any path to the loss
            };
            let parents = &self.parents[i];
            let need: Vec<bool> = parents.iter().map(|&p| self.needs_grad[p]).collect();
            let ctx = BackCtx { values: &self.values, node: i, parents, gout: &g, need: &need };
            let pgrads = back(&ctx);
            debug_assert_eq!(pgrads.len(), parents.len());
            for (&p, pg) in parents.iter().zip(pgrads) {
                if let Some(pg) = pg {
                    if self.needs_grad[p] {
                        match &mut grads[p] {
                            Some(acc) => *acc += &pg,
                            slot => *slot = Some(pg),
                        }
                    }
                }
            }
        }
        grads
    }
}

fn as2(v: &ArrayD<f64>) -> ndarray::ArrayView2<'_, f64> {
    v.view().into_dimensionality().expect("rank 2")
}

fn as3(v: &ArrayD<f64>) -> ndarray::ArrayView3<'_, f64> {
    v.view().into_dimensionality().expect("rank 3")
}

fn as4(v: &ArrayD<f64>) -> ndarray::ArrayView4<'_, f64> {
    v.view().into_dimensionality().expect("rank 4")
}

pub fn to2(v: &ArrayD<f64>) -> Array2<f64> {
    as2(v).to_owned()
}
