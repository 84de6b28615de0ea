//! Reverse-mode autodiff over a linear tape.
//!
//! Every operation appends its result tensor plus a record of how it was
//! produced. `backward` walks the records in reverse, accumulating gradients
//! by the sum rule; a node's gradient buffer is dropped as soon as it has
//! been propagated, so only leaves keep theirs. Ids are plain indices into
//! the owning tape — they must not be mixed across tapes.

use super::conv::{self, ConvGeom, Pad};
use super::resample::{self, Scale};
use super::{Shape, Tensor};
use crate::{Error, Result};

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct TensorId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: TensorId,
        w: TensorId,
        b: TensorId,
        geom: ConvGeom,
    },
    LeakyRelu {
        x: TensorId,
        slope: f32,
    },
    Tanh {
        x: TensorId,
    },
    InstanceNorm {
        x: TensorId,
        // (mean, 1/sqrt(var+eps)) per (b, c) plane, cached by the forward pass.
        stats: Vec<(f32, f32)>,
    },
    Add {
        a: TensorId,
        b: TensorId,
    },
    Mul {
        a: TensorId,
        b: TensorId,
    },
    ConcatC {
        a: TensorId,
        b: TensorId,
    },
    Resize {
        x: TensorId,
        scale: Scale,
    },
    Mse {
        pred: TensorId,
        target: TensorId,
    },
    Clamp01 {
        x: TensorId,
    },
    Affine {
        x: TensorId,
        mul: f32,
    },
    Relu {
        x: TensorId,
    },
    Softplus {
        x: TensorId,
    },
    MeanAll {
        x: TensorId,
    },
    SumAll {
        x: TensorId,
    },
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Tensor>,
    ops: Vec<Op>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert an input tensor. Only leaves can receive gradients after
    /// `backward`; interior nodes surrender theirs once propagated.
    pub fn leaf(&mut self, mut t: Tensor, requires_grad: bool) -> TensorId {
        t.requires_grad = requires_grad;
        t.grad = None;
        self.push(t, Op::Leaf)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> TensorId {
        self.leaf(t, false)
    }

    fn push(&mut self, t: Tensor, op: Op) -> TensorId {
        self.nodes.push(t);
        self.ops.push(op);
        TensorId(self.nodes.len() - 1)
    }

    fn result(&mut self, shape: Shape, data: Vec<f32>, op: Op, requires_grad: bool) -> TensorId {
        let mut t = Tensor::new(shape, data).expect("op produced a consistent buffer");
        t.requires_grad = requires_grad;
        self.push(t, op)
    }

    pub fn tensor(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0]
    }

    pub fn shape(&self, id: TensorId) -> Shape {
        self.nodes[id.0].shape
    }

    pub fn data(&self, id: TensorId) -> &[f32] {
        &self.nodes[id.0].data
    }

    /// Scalar value of a [1,1,1,1] node.
    pub fn scalar_value(&self, id: TensorId) -> f32 {
        self.nodes[id.0].data[0]
    }

    /// Copy of the node's value with no grad tracking attached.
    pub fn detach(&self, id: TensorId) -> Tensor {
        Tensor {
            shape: self.nodes[id.0].shape,
            data: self.nodes[id.0].data.clone(),
            requires_grad: false,
            grad: None,
        }
    }

    /// Gradient accumulated on a leaf by the last `backward` call.
    pub fn grad(&self, id: TensorId) -> Option<&[f32]> {
        self.nodes[id.0].grad.as_deref()
    }

    fn requires(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn add_grad(&mut self, id: TensorId, contribution: Vec<f32>) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut self.nodes[id.0].grad {
            Some(g) => {
                for (g, c) in g.iter_mut().zip(&contribution) {
                    *g += c;
                }
            }
            slot @ None => *slot = Some(contribution),
        }
    }

    // ---- operations ------------------------------------------------------

    /// 2-D convolution, square kernel, symmetric zero padding.
    pub fn conv2d(
        &mut self,
        x: TensorId,
        w: TensorId,
        b: TensorId,
        stride: usize,
        padding: usize,
    ) -> Result<TensorId> {
        self.conv2d_padded(x, w, b, stride, Pad::same(padding))
    }

    /// Convolution with per-edge padding (needed by even kernels that must
    /// preserve extents).
    pub fn conv2d_padded(
        &mut self,
        x: TensorId,
        w: TensorId,
        b: TensorId,
        stride: usize,
        pad: Pad,
    ) -> Result<TensorId> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        let bs = self.shape(b);
        if ws.h != ws.w {
            return Err(Error::BadShape {
                op: "conv2d",
                shape: ws,
                why: "kernel must be square".into(),
            });
        }
        if ws.c != xs.c {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                a: xs,
                b: ws,
            });
        }
        if bs != Shape::new(1, ws.b, 1, 1) {
            return Err(Error::BadShape {
                op: "conv2d",
                shape: bs,
                why: format!("bias must be 1x{}x1x1", ws.b),
            });
        }
        let geom = ConvGeom::new(xs, ws.b, ws.h, stride, pad).ok_or(Error::BadShape {
            op: "conv2d",
            shape: xs,
            why: format!("kernel {0}x{0} stride {stride} does not fit", ws.h),
        })?;
        let y = conv::forward(self.data(x), xs, self.data(w), self.data(b), &geom);
        let shape = Shape::new(xs.b, geom.out_c, geom.out_h, geom.out_w);
        let req = self.requires(x) || self.requires(w) || self.requires(b);
        Ok(self.result(shape, y, Op::Conv2d { x, w, b, geom }, req))
    }

    /// max(x, slope*x); the derivative at exactly 0 is defined as 1.
    pub fn leaky_relu(&mut self, x: TensorId, slope: f32) -> TensorId {
        let data = self.data(x).iter().map(|&v| if v >= 0.0 { v } else { slope * v }).collect();
        let req = self.requires(x);
        self.result(self.shape(x), data, Op::LeakyRelu { x, slope }, req)
    }

    pub fn tanh(&mut self, x: TensorId) -> TensorId {
        let data = self.data(x).iter().map(|v| v.tanh()).collect();
        let req = self.requires(x);
        self.result(self.shape(x), data, Op::Tanh { x }, req)
    }

    /// Per-(batch, channel) normalization over the spatial plane, no affine
    /// parameters.
    pub fn instance_norm(&mut self, x: TensorId, eps: f32) -> TensorId {
        let s = self.shape(x);
        let hw = s.plane().max(1);
        let xv = self.data(x);
        let mut data = vec![0.0f32; xv.len()];
        let mut stats = Vec::with_capacity(s.b * s.c);
        for p in 0..s.b * s.c {
            let src = &xv[p * hw..(p + 1) * hw];
            let mean = (src.iter().map(|&v| f64::from(v)).sum::<f64>() / hw as f64) as f32;
            let var = (src
                .iter()
                .map(|&v| {
                    let d = f64::from(v) - f64::from(mean);
                    d * d
                })
                .sum::<f64>()
                / hw as f64) as f32;
            let inv = 1.0 / (var + eps).sqrt();
            for (d, &v) in data[p * hw..(p + 1) * hw].iter_mut().zip(src) {
                *d = (v - mean) * inv;
            }
            stats.push((mean, inv));
        }
        let req = self.requires(x);
        self.result(s, data, Op::InstanceNorm { x, stats }, req)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.zip_op(a, b, "add", |x, y| x + y, Op::Add { a, b })
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.zip_op(a, b, "mul", |x, y| x * y, Op::Mul { a, b })
    }

    fn zip_op(
        &mut self,
        a: TensorId,
        b: TensorId,
        name: &'static str,
        f: impl Fn(f32, f32) -> f32,
        op: Op,
    ) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::ShapeMismatch { op: name, a: sa, b: sb });
        }
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let req = self.requires(a) || self.requires(b);
        Ok(self.result(sa, data, op, req))
    }

    /// Concatenate along the channel axis.
    pub fn concat_channels(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.b != sb.b || sa.h != sb.h || sa.w != sb.w {
            return Err(Error::ShapeMismatch {
                op: "concat_channels",
                a: sa,
                b: sb,
            });
        }
        let plane = sa.plane();
        let shape = Shape::new(sa.b, sa.c + sb.c, sa.h, sa.w);
        let mut data = Vec::with_capacity(shape.numel());
        for bi in 0..sa.b {
            data.extend_from_slice(&self.data(a)[bi * sa.c * plane..(bi + 1) * sa.c * plane]);
            data.extend_from_slice(&self.data(b)[bi * sb.c * plane..(bi + 1) * sb.c * plane]);
        }
        let req = self.requires(a) || self.requires(b);
        Ok(self.result(shape, data, Op::ConcatC { a, b }, req))
    }

    /// Bicubic resample by 2x or 0.5x (see the resample module for the exact
    /// kernel contract).
    pub fn bicubic_resize(&mut self, x: TensorId, scale: Scale) -> Result<TensorId> {
        let s = self.shape(x);
        // Reuse the value-level validation.
        let t = resample::resize(self.tensor(x), scale)?;
        let req = self.requires(x);
        debug_assert_eq!(t.shape.b, s.b);
        Ok(self.result(t.shape, t.data, Op::Resize { x, scale }, req))
    }

    /// Mean squared error over all elements; returns a scalar node.
    pub fn mse(&mut self, pred: TensorId, target: TensorId) -> Result<TensorId> {
        let (sp, st) = (self.shape(pred), self.shape(target));
        if sp != st {
            return Err(Error::ShapeMismatch {
                op: "mse",
                a: sp,
                b: st,
            });
        }
        let sum: f64 = self
            .data(pred)
            .iter()
            .zip(self.data(target))
            .map(|(&p, &t)| {
                let d = f64::from(p) - f64::from(t);
                d * d
            })
            .sum();
        let v = (sum / sp.numel() as f64) as f32;
        let req = self.requires(pred) || self.requires(target);
        Ok(self.result(
            Shape::new(1, 1, 1, 1),
            vec![v],
            Op::Mse { pred, target },
            req,
        ))
    }

    pub fn clamp01(&mut self, x: TensorId) -> TensorId {
        let data = self.data(x).iter().map(|v| v.clamp(0.0, 1.0)).collect();
        let req = self.requires(x);
        self.result(self.shape(x), data, Op::Clamp01 { x }, req)
    }

    /// mul*x + add, elementwise with scalar coefficients.
    pub fn affine(&mut self, x: TensorId, mul: f32, add: f32) -> TensorId {
        let data = self.data(x).iter().map(|&v| mul * v + add).collect();
        let req = self.requires(x);
        self.result(self.shape(x), data, Op::Affine { x, mul }, req)
    }

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        let data = self.data(x).iter().map(|&v| v.max(0.0)).collect();
        let req = self.requires(x);
        self.result(self.shape(x), data, Op::Relu { x }, req)
    }

    /// ln(1 + e^x), evaluated stably.
    pub fn softplus(&mut self, x: TensorId) -> TensorId {
        let data = self
            .data(x)
            .iter()
            .map(|&v| (-v.abs()).exp().ln_1p() + v.max(0.0))
            .collect();
        let req = self.requires(x);
        self.result(self.shape(x), data, Op::Softplus { x }, req)
    }

    pub fn mean_all(&mut self, x: TensorId) -> TensorId {
        let n = self.shape(x).numel() as f64;
        let v = (self.data(x).iter().map(|&v| f64::from(v)).sum::<f64>() / n) as f32;
        let req = self.requires(x);
        self.result(Shape::new(1, 1, 1, 1), vec![v], Op::MeanAll { x }, req)
    }

    pub fn sum_all(&mut self, x: TensorId) -> TensorId {
        let v = self.data(x).iter().map(|&v| f64::from(v)).sum::<f64>() as f32;
        let req = self.requires(x);
        self.result(Shape::new(1, 1, 1, 1), vec![v], Op::SumAll { x }, req)
    }

    // ---- backward --------------------------------------------------------

    /// Reverse pass from a scalar loss. Gradients accumulate on every leaf
    /// inserted with `requires_grad = true`; everything else is transient.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        let ls = self.shape(loss);
        if ls.numel() != 1 {
            return Err(Error::NonScalarLoss { shape: ls });
        }
        if !self.requires(loss) {
            // Loss does not depend on any tracked leaf; nothing to do.
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if matches!(self.ops[i], Op::Leaf) {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            self.propagate(i, g);
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, g: Vec<f32>) {
        match &self.ops[i] {
            Op::Leaf => unreachable!("leaves are skipped"),
            &Op::Conv2d { x, w, b, ref geom } => {
                let geom = *geom;
                let want = (self.requires(x), self.requires(w), self.requires(b));
                let grads = conv::backward(self.data(x), self.shape(x), self.data(w), &g, &geom, want);
                if let Some(dx) = grads.dx {
                    self.add_grad(x, dx);
                }
                if let Some(dw) = grads.dw {
                    self.add_grad(w, dw);
                }
                if let Some(db) = grads.db {
                    self.add_grad(b, db);
                }
            }
            &Op::LeakyRelu { x, slope } => {
                let dx = self
                    .data(x)
                    .iter()
                    .zip(&g)
                    .map(|(&v, &gi)| if v >= 0.0 { gi } else { slope * gi })
                    .collect();
                self.add_grad(x, dx);
            }
            &Op::Tanh { x } => {
                let dx = self.nodes[i]
                    .data
                    .iter()
                    .zip(&g)
                    .map(|(&y, &gi)| gi * (1.0 - y * y))
                    .collect();
                self.add_grad(x, dx);
            }
            Op::InstanceNorm { x, stats } => {
                let x = *x;
                let s = self.shape(x);
                let hw = s.plane().max(1);
                let y = &self.nodes[i].data;
                let mut dx = vec![0.0f32; y.len()];
                for (p, &(_, inv)) in stats.iter().enumerate() {
                    let yp = &y[p * hw..(p + 1) * hw];
                    let gp = &g[p * hw..(p + 1) * hw];
                    let mean_g = (gp.iter().map(|&v| f64::from(v)).sum::<f64>() / hw as f64) as f32;
                    let mean_gy = (gp
                        .iter()
                        .zip(yp)
                        .map(|(&a, &b)| f64::from(a) * f64::from(b))
                        .sum::<f64>()
                        / hw as f64) as f32;
                    for ((d, &gi), &yi) in dx[p * hw..(p + 1) * hw].iter_mut().zip(gp).zip(yp) {
                        *d = inv * (gi - mean_g - yi * mean_gy);
                    }
                }
                self.add_grad(x, dx);
            }
            &Op::Add { a, b } => {
                self.add_grad(a, g.clone());
                self.add_grad(b, g);
            }
            &Op::Mul { a, b } => {
                let da: Vec<f32> = self.data(b).iter().zip(&g).map(|(&bv, &gi)| bv * gi).collect();
                let db: Vec<f32> = self.data(a).iter().zip(&g).map(|(&av, &gi)| av * gi).collect();
                self.add_grad(a, da);
                self.add_grad(b, db);
            }
            &Op::ConcatC { a, b } => {
                let (sa, sb) = (self.shape(a), self.shape(b));
                let plane = sa.plane();
                let (ca, cb) = (sa.c * plane, sb.c * plane);
                let mut da = Vec::with_capacity(sa.numel());
                let mut db = Vec::with_capacity(sb.numel());
                for bi in 0..sa.b {
                    let base = bi * (ca + cb);
                    da.extend_from_slice(&g[base..base + ca]);
                    db.extend_from_slice(&g[base + ca..base + ca + cb]);
                }
                self.add_grad(a, da);
                self.add_grad(b, db);
            }
            &Op::Resize { x, scale } => {
                let dx = resample::resize_adjoint(&g, self.shape(x), scale);
                self.add_grad(x, dx);
            }
            &Op::Mse { pred, target } => {
                let gs = g[0];
                let n = self.shape(pred).numel() as f32;
                let scale = gs * 2.0 / n;
                let dpred: Vec<f32> = self
                    .data(pred)
                    .iter()
                    .zip(self.data(target))
                    .map(|(&p, &t)| scale * (p - t))
                    .collect();
                if self.requires(target) {
                    let dtarget = dpred.iter().map(|&v| -v).collect();
                    self.add_grad(target, dtarget);
                }
                self.add_grad(pred, dpred);
            }
            &Op::Clamp01 { x } => {
                let dx = self
                    .data(x)
                    .iter()
                    .zip(&g)
                    .map(|(&v, &gi)| if (0.0..=1.0).contains(&v) { gi } else { 0.0 })
                    .collect();
                self.add_grad(x, dx);
            }
            &Op::Affine { x, mul } => {
                let dx = g.iter().map(|&gi| mul * gi).collect();
                self.add_grad(x, dx);
            }
            &Op::Relu { x } => {
                let dx = self
                    .data(x)
                    .iter()
                    .zip(&g)
                    .map(|(&v, &gi)| if v > 0.0 { gi } else { 0.0 })
                    .collect();
                self.add_grad(x, dx);
            }
            &Op::Softplus { x } => {
                let dx = self
                    .data(x)
                    .iter()
                    .zip(&g)
                    .map(|(&v, &gi)| {
                        let sig = if v >= 0.0 {
                            1.0 / (1.0 + (-v).exp())
                        } else {
                            let e = v.exp();
                            e / (1.0 + e)
                        };
                        gi * sig
                    })
                    .collect();
                self.add_grad(x, dx);
            }
            &Op::MeanAll { x } => {
                let n = self.shape(x).numel() as f32;
                let v = g[0] / n;
                self.add_grad(x, vec![v; self.shape(x).numel()]);
            }
            &Op::SumAll { x } => {
                self.add_grad(x, vec![g[0]; self.shape(x).numel()]);
            }
        }
    }
}
