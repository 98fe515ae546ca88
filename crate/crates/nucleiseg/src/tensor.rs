//! Dense N-d array with reverse-mode gradient propagation.
//!
//! Values are `f64` throughout. Feature maps are canonically N×C×H×W in
//! row-major order. Every forward op that has a differentiable parent
//! records a backward closure; [`Tensor::backward`] runs the tape in
//! reverse topological order and *accumulates* into leaf gradients.

use std::cell::{Ref, RefCell};
use std::collections::HashSet;
use std::rc::Rc;

use crate::error::{Error, Result};

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish_non_exhaustive()
    }
}

#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

struct Inner {
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Vec<f64>>,
    requires_grad: bool,
    /// Parents (for traversal) plus the closure that maps this node's
    /// output gradient into parent gradient contributions.
    op: Option<Node>,
}

struct Node {
    parents: Vec<Tensor>,
    backward: Box<dyn Fn(&[f64])>,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum PoolMode {
    Avg,
    Max,
}

fn check_finite(data: &[f64], what: &str) {
    debug_assert!(
        data.iter().all(|v| v.is_finite()),
        "non-finite value produced by {what}"
    );
}

impl Tensor {
    // ---- constructors ----

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Tensor {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        let n = data.len();
        Tensor {
            inner: Rc::new(Inner {
                shape: shape.to_vec(),
                data: RefCell::new(data),
                grad: RefCell::new(vec![0.0; n]),
                requires_grad: false,
                op: None,
            }),
        }
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::from_vec(shape, vec![0.0; shape.iter().product()])
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        Tensor::from_vec(shape, vec![value; shape.iter().product()])
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::from_vec(&[1], vec![value])
    }

    /// Leaf that participates in gradient propagation.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Tensor {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, data.len(), "shape {shape:?} vs {} values", data.len());
        Tensor {
            inner: Rc::new(Inner {
                shape: shape.to_vec(),
                data: RefCell::new(data),
                grad: RefCell::new(vec![0.0; numel]),
                requires_grad: true,
                op: None,
            }),
        }
    }

    fn from_op(shape: Vec<usize>, data: Vec<f64>, parents: Vec<Tensor>, backward: impl Fn(&[f64]) + 'static) -> Tensor {
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        let n = data.len();
        let op = if requires_grad {
            Some(Node {
                parents,
                backward: Box::new(backward),
            })
        } else {
            None
        };
        Tensor {
            inner: Rc::new(Inner {
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(vec![0.0; n]),
                requires_grad,
                op,
            }),
        }
    }

    // ---- accessors ----

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.inner.data.borrow()
    }

    pub fn grad(&self) -> Ref<'_, Vec<f64>> {
        self.inner.grad.borrow()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.inner.data.borrow()[0]
    }

    pub fn zero_grad(&self) {
        self.inner.grad.borrow_mut().fill(0.0);
    }

    /// In-place data update, used by the optimizer. Detached from the tape.
    pub fn update_data(&self, mut f: impl FnMut(usize, f64, f64) -> f64) {
        let grad = self.inner.grad.borrow();
        let mut data = self.inner.data.borrow_mut();
        for i in 0..data.len() {
            data[i] = f(i, data[i], grad[i]);
        }
    }

    pub fn set_data(&self, values: &[f64]) {
        let mut data = self.inner.data.borrow_mut();
        assert_eq!(data.len(), values.len());
        data.copy_from_slice(values);
    }

    pub(crate) fn accum_grad(&self, delta: &[f64]) {
        let mut g = self.inner.grad.borrow_mut();
        debug_assert_eq!(g.len(), delta.len());
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += di;
        }
    }

    fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.inner.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::Dimension(format!(
                "expected 4-d N×C×H×W tensor, got shape {:?}",
                self.inner.shape
            ))),
        }
    }

    // ---- backward ----

    /// Propagates d(self)/d(leaf) into every `requires_grad` leaf.
    /// Gradients accumulate; call `zero_grad` between passes.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward requires a scalar root, got shape {:?}",
                self.inner.shape
            )));
        }
        let order = self.topo_order();
        self.inner.grad.borrow_mut()[0] = 1.0;
        for t in order.iter().rev() {
            if let Some(node) = &t.inner.op {
                let gout = t.inner.grad.borrow().clone();
                (node.backward)(&gout);
            }
        }
        Ok(())
    }

    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut seen: HashSet<*const Inner> = HashSet::new();
        // iterative post-order; (tensor, child cursor)
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        seen.insert(Rc::as_ptr(&self.inner));
        while let Some((t, cursor)) = stack.pop() {
            let parents: &[Tensor] = t.inner.op.as_ref().map_or(&[], |n| &n.parents);
            if cursor < parents.len() {
                let next = parents[cursor].clone();
                stack.push((t, cursor + 1));
                if next.requires_grad() && seen.insert(Rc::as_ptr(&next.inner)) {
                    stack.push((next, 0));
                }
            } else {
                order.push(t);
            }
        }
        order
    }

    // ---- elementwise ----

    pub fn sigmoid(&self) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect();
        check_finite(&data, "sigmoid");
        let x = self.clone();
        let saved = data.clone();
        Tensor::from_op(self.shape().to_vec(), data, vec![self.clone()], move |gout| {
            let delta: Vec<f64> = gout
                .iter()
                .zip(&saved)
                .map(|(&g, &y)| g * y * (1.0 - y))
                .collect();
            x.accum_grad(&delta);
        })
    }

    pub fn relu(&self) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|&v| v.max(0.0)).collect();
        let x = self.clone();
        Tensor::from_op(self.shape().to_vec(), data, vec![self.clone()], move |gout| {
            let xd = x.data();
            let delta: Vec<f64> = gout
                .iter()
                .zip(xd.iter())
                .map(|(&g, &v)| if v > 0.0 { g } else { 0.0 })
                .collect();
            drop(xd);
            x.accum_grad(&delta);
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape() != other.shape() {
            return Err(Error::Dimension(format!(
                "add: shapes {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let data: Vec<f64> = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(&a, &b)| a + b)
            .collect();
        check_finite(&data, "add");
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            move |gout| {
                if a.requires_grad() {
                    a.accum_grad(gout);
                }
                if b.requires_grad() {
                    b.accum_grad(gout);
                }
            },
        ))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape() != other.shape() {
            return Err(Error::Dimension(format!(
                "mul: shapes {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let data: Vec<f64> = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(&a, &b)| a * b)
            .collect();
        check_finite(&data, "mul");
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            move |gout| {
                if a.requires_grad() {
                    let bd = b.data();
                    let delta: Vec<f64> = gout.iter().zip(bd.iter()).map(|(&g, &v)| g * v).collect();
                    drop(bd);
                    a.accum_grad(&delta);
                }
                if b.requires_grad() {
                    let ad = a.data();
                    let delta: Vec<f64> = gout.iter().zip(ad.iter()).map(|(&g, &v)| g * v).collect();
                    drop(ad);
                    b.accum_grad(&delta);
                }
            },
        ))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|&v| v * c).collect();
        let x = self.clone();
        Tensor::from_op(self.shape().to_vec(), data, vec![self.clone()], move |gout| {
            let delta: Vec<f64> = gout.iter().map(|&g| g * c).collect();
            x.accum_grad(&delta);
        })
    }

    /// Broadcast multiply of an N×C×H×W map by N×C×1×1 channel weights or
    /// N×1×H×W spatial weights.
    pub fn mul_broadcast(&self, weights: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = self.dims4()?;
        let (wn, wc, wh, ww) = weights.dims4()?;
        let channel_wise = wc == c && wh == 1 && ww == 1;
        let spatial_wise = wc == 1 && wh == h && ww == w;
        if wn != n || !(channel_wise || spatial_wise) {
            return Err(Error::Dimension(format!(
                "mul_broadcast: {:?} cannot broadcast over {:?}",
                weights.shape(),
                self.shape()
            )));
        }
        let hw = h * w;
        let xd = self.data();
        let wd = weights.data();
        let mut data = vec![0.0; n * c * hw];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * hw;
                for p in 0..hw {
                    let wv = if channel_wise { wd[ni * c + ci] } else { wd[ni * hw + p] };
                    data[base + p] = xd[base + p] * wv;
                }
            }
        }
        drop(xd);
        drop(wd);
        check_finite(&data, "mul_broadcast");
        let (x, wt) = (self.clone(), weights.clone());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), weights.clone()],
            move |gout| {
                if x.requires_grad() {
                    let wd = wt.data();
                    let mut delta = vec![0.0; n * c * hw];
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * hw;
                            for p in 0..hw {
                                let wv = if channel_wise { wd[ni * c + ci] } else { wd[ni * hw + p] };
                                delta[base + p] = gout[base + p] * wv;
                            }
                        }
                    }
                    drop(wd);
                    x.accum_grad(&delta);
                }
                if wt.requires_grad() {
                    let xd = x.data();
                    let mut delta = vec![0.0; wt.numel()];
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * hw;
                            for p in 0..hw {
                                let idx = if channel_wise { ni * c + ci } else { ni * hw + p };
                                delta[idx] += gout[base + p] * xd[base + p];
                            }
                        }
                    }
                    drop(xd);
                    wt.accum_grad(&delta);
                }
            },
        ))
    }

    // ---- reductions ----

    pub fn sum(&self) -> Tensor {
        let total: f64 = self.data().iter().sum();
        let x = self.clone();
        let n = self.numel();
        Tensor::from_op(vec![1], vec![total], vec![self.clone()], move |gout| {
            x.accum_grad(&vec![gout[0]; n]);
        })
    }

    /// Per-channel reduction over the spatial extent: N×C×H×W → N×C×1×1.
    pub fn global_pool(&self, mode: PoolMode) -> Result<Tensor> {
        let (n, c, h, w) = self.dims4()?;
        let hw = h * w;
        let xd = self.data();
        let mut data = vec![0.0; n * c];
        let mut argmax = vec![0usize; n * c];
        for i in 0..n * c {
            let block = &xd[i * hw..(i + 1) * hw];
            match mode {
                PoolMode::Avg => data[i] = block.iter().sum::<f64>() / hw as f64,
                PoolMode::Max => {
                    let (mut best, mut at) = (f64::NEG_INFINITY, 0);
                    for (p, &v) in block.iter().enumerate() {
                        if v > best {
                            best = v;
                            at = p;
                        }
                    }
                    data[i] = best;
                    argmax[i] = at;
                }
            }
        }
        drop(xd);
        let x = self.clone();
        Ok(Tensor::from_op(
            vec![n, c, 1, 1],
            data,
            vec![self.clone()],
            move |gout| {
                let mut delta = vec![0.0; n * c * hw];
                for i in 0..n * c {
                    match mode {
                        PoolMode::Avg => {
                            let g = gout[i] / hw as f64;
                            for p in 0..hw {
                                delta[i * hw + p] = g;
                            }
                        }
                        PoolMode::Max => delta[i * hw + argmax[i]] = gout[i],
                    }
                }
                x.accum_grad(&delta);
            },
        ))
    }

    /// Reduction across channels: N×C×H×W → N×1×H×W. Max ties go to the
    /// lowest channel index.
    pub fn reduce_over_channels(&self, mode: PoolMode) -> Result<Tensor> {
        let (n, c, h, w) = self.dims4()?;
        let hw = h * w;
        let xd = self.data();
        let mut data = vec![0.0; n * hw];
        let mut argmax = vec![0usize; n * hw];
        for ni in 0..n {
            for p in 0..hw {
                match mode {
                    PoolMode::Avg => {
                        let mut s = 0.0;
                        for ci in 0..c {
                            s += xd[(ni * c + ci) * hw + p];
                        }
                        data[ni * hw + p] = s / c as f64;
                    }
                    PoolMode::Max => {
                        let (mut best, mut at) = (f64::NEG_INFINITY, 0);
                        for ci in 0..c {
                            let v = xd[(ni * c + ci) * hw + p];
                            if v > best {
                                best = v;
                                at = ci;
                            }
                        }
                        data[ni * hw + p] = best;
                        argmax[ni * hw + p] = at;
                    }
                }
            }
        }
        drop(xd);
        let x = self.clone();
        Ok(Tensor::from_op(
            vec![n, 1, h, w],
            data,
            vec![self.clone()],
            move |gout| {
                let mut delta = vec![0.0; n * c * hw];
                for ni in 0..n {
                    for p in 0..hw {
                        let g = gout[ni * hw + p];
                        match mode {
                            PoolMode::Avg => {
                                let share = g / c as f64;
                                for ci in 0..c {
                                    delta[(ni * c + ci) * hw + p] += share;
                                }
                            }
                            PoolMode::Max => {
                                delta[(ni * c + argmax[ni * hw + p]) * hw + p] += g;
                            }
                        }
                    }
                }
                x.accum_grad(&delta);
            },
        ))
    }

    // ---- shape ops ----

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::Dimension(format!(
                "reshape: {:?} to {:?}",
                self.shape(),
                shape
            )));
        }
        let x = self.clone();
        Ok(Tensor::from_op(
            shape.to_vec(),
            self.data().clone(),
            vec![self.clone()],
            move |gout| x.accum_grad(gout),
        ))
    }

    // ---- conv / linear / pooling / resize ----

    pub fn conv2d(
        &self,
        weight: &Tensor,
        bias: &Tensor,
        stride: usize,
        pad: usize,
        dilation: usize,
    ) -> Result<Tensor> {
        let (n, cin, h, w) = self.dims4()?;
        let (cout, wcin, kh, kw) = weight.dims4()?;
        if wcin != cin {
            return Err(Error::Dimension(format!(
                "conv2d: input has {cin} channels, kernel expects {wcin}"
            )));
        }
        if bias.shape() != [cout] {
            return Err(Error::Dimension(format!(
                "conv2d: bias shape {:?}, expected [{cout}]",
                bias.shape()
            )));
        }
        if stride == 0 || dilation == 0 || kh == 0 || kw == 0 {
            return Err(Error::Config("conv2d: stride, dilation, kernel must be >= 1".into()));
        }
        let eff_kh = dilation * (kh - 1) + 1;
        let eff_kw = dilation * (kw - 1) + 1;
        if h + 2 * pad < eff_kh || w + 2 * pad < eff_kw {
            return Err(Error::Dimension(format!(
                "conv2d: effective kernel {eff_kh}×{eff_kw} exceeds padded input {}×{}",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        let oh = (h + 2 * pad - eff_kh) / stride + 1;
        let ow = (w + 2 * pad - eff_kw) / stride + 1;
        let k = cin * kh * kw;
        let l = oh * ow;

        let xd = self.data();
        let wd = weight.data();
        let bd = bias.data();
        let mut out = vec![0.0; n * cout * l];
        let mut col = vec![0.0; k * l];
        for ni in 0..n {
            im2col(&xd[ni * cin * h * w..], cin, h, w, kh, kw, stride, pad, dilation, &mut col);
            let dst = &mut out[ni * cout * l..(ni + 1) * cout * l];
            for (co, chunk) in dst.chunks_mut(l).enumerate() {
                chunk.fill(bd[co]);
            }
            matmul_acc(dst, &wd, &col, cout, k, l);
        }
        drop(xd);
        drop(wd);
        drop(bd);
        check_finite(&out, "conv2d");

        let (x, wt, bt) = (self.clone(), weight.clone(), bias.clone());
        Ok(Tensor::from_op(
            vec![n, cout, oh, ow],
            out,
            vec![self.clone(), weight.clone(), bias.clone()],
            move |gout| {
                let xd = x.data();
                let wd = wt.data();
                let mut col = vec![0.0; k * l];
                let mut dw = vec![0.0; cout * k];
                let mut db = vec![0.0; cout];
                let mut dx = vec![0.0; n * cin * h * w];
                let mut dcol = vec![0.0; k * l];
                for ni in 0..n {
                    let gy = &gout[ni * cout * l..(ni + 1) * cout * l];
                    im2col(&xd[ni * cin * h * w..], cin, h, w, kh, kw, stride, pad, dilation, &mut col);
                    // dW += gy · colᵀ ; db += row sums of gy
                    matmul_abt_acc(&mut dw, gy, &col, cout, l, k);
                    for co in 0..cout {
                        db[co] += gy[co * l..(co + 1) * l].iter().sum::<f64>();
                    }
                    if x.requires_grad() {
                        // dcol = Wᵀ · gy, then scatter back to image layout
                        dcol.fill(0.0);
                        matmul_atb_acc(&mut dcol, &wd, gy, cout, k, l);
                        col2im(&dcol, cin, h, w, kh, kw, stride, pad, dilation, &mut dx[ni * cin * h * w..(ni + 1) * cin * h * w]);
                    }
                }
                drop(xd);
                drop(wd);
                if x.requires_grad() {
                    x.accum_grad(&dx);
                }
                if wt.requires_grad() {
                    wt.accum_grad(&dw);
                }
                if bt.requires_grad() {
                    bt.accum_grad(&db);
                }
            },
        ))
    }

    /// Fully connected layer: x[N,Cin] · w[Cout,Cin]ᵀ + b.
    pub fn linear(&self, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let (n, cin) = match self.shape()[..] {
            [n, c] => (n, c),
            _ => {
                return Err(Error::Dimension(format!(
                    "linear: expected 2-d input, got {:?}",
                    self.shape()
                )))
            }
        };
        let (cout, wcin) = match weight.shape()[..] {
            [o, i] => (o, i),
            _ => {
                return Err(Error::Dimension(format!(
                    "linear: expected 2-d weight, got {:?}",
                    weight.shape()
                )))
            }
        };
        if wcin != cin || bias.shape() != [cout] {
            return Err(Error::Dimension(format!(
                "linear: x {:?}, w {:?}, b {:?}",
                self.shape(),
                weight.shape(),
                bias.shape()
            )));
        }
        let xd = self.data();
        let wd = weight.data();
        let bd = bias.data();
        let mut out = vec![0.0; n * cout];
        for ni in 0..n {
            for co in 0..cout {
                let mut s = bd[co];
                for ci in 0..cin {
                    s += xd[ni * cin + ci] * wd[co * cin + ci];
                }
                out[ni * cout + co] = s;
            }
        }
        drop(xd);
        drop(wd);
        drop(bd);
        check_finite(&out, "linear");
        let (x, wt, bt) = (self.clone(), weight.clone(), bias.clone());
        Ok(Tensor::from_op(
            vec![n, cout],
            out,
            vec![self.clone(), weight.clone(), bias.clone()],
            move |gout| {
                let xd = x.data();
                let wd = wt.data();
                if x.requires_grad() {
                    let mut dx = vec![0.0; n * cin];
                    for ni in 0..n {
                        for co in 0..cout {
                            let g = gout[ni * cout + co];
                            for ci in 0..cin {
                                dx[ni * cin + ci] += g * wd[co * cin + ci];
                            }
                        }
                    }
                    x.accum_grad(&dx);
                }
                if wt.requires_grad() {
                    let mut dw = vec![0.0; cout * cin];
                    let mut db = vec![0.0; cout];
                    for ni in 0..n {
                        for co in 0..cout {
                            let g = gout[ni * cout + co];
                            db[co] += g;
                            for ci in 0..cin {
                                dw[co * cin + ci] += g * xd[ni * cin + ci];
                            }
                        }
                    }
                    wt.accum_grad(&dw);
                    bt.accum_grad(&db);
                }
                drop(xd);
                drop(wd);
            },
        ))
    }

    /// Max pooling with ceil-mode extents (−∞ fill on the bottom/right), so
    /// odd spatial sizes survive repeated halving. Gradient goes to the
    /// first maximum in row-major window order.
    pub fn maxpool2d(&self, k: usize, stride: usize) -> Result<Tensor> {
        let (n, c, h, w) = self.dims4()?;
        if k > h || k > w {
            return Err(Error::Dimension(format!(
                "maxpool2d: window {k}×{k} larger than input {h}×{w}"
            )));
        }
        let oh = (h - k).div_ceil(stride) + 1;
        let ow = (w - k).div_ceil(stride) + 1;
        let xd = self.data();
        let mut out = vec![0.0; n * c * oh * ow];
        let mut arg = vec![0usize; n * c * oh * ow];
        for i in 0..n * c {
            let plane = &xd[i * h * w..(i + 1) * h * w];
            for yo in 0..oh {
                for xo in 0..ow {
                    let (mut best, mut at) = (f64::NEG_INFINITY, 0);
                    for dy in 0..k {
                        let y = yo * stride + dy;
                        if y >= h {
                            break;
                        }
                        for dx in 0..k {
                            let xp = xo * stride + dx;
                            if xp >= w {
                                break;
                            }
                            let v = plane[y * w + xp];
                            if v > best {
                                best = v;
                                at = y * w + xp;
                            }
                        }
                    }
                    out[i * oh * ow + yo * ow + xo] = best;
                    arg[i * oh * ow + yo * ow + xo] = at;
                }
            }
        }
        drop(xd);
        let x = self.clone();
        Ok(Tensor::from_op(
            vec![n, c, oh, ow],
            out,
            vec![self.clone()],
            move |gout| {
                let mut delta = vec![0.0; n * c * h * w];
                for i in 0..n * c {
                    for p in 0..oh * ow {
                        delta[i * h * w + arg[i * oh * ow + p]] += gout[i * oh * ow + p];
                    }
                }
                x.accum_grad(&delta);
            },
        ))
    }

    /// Bilinear resize with the half-pixel-center convention.
    pub fn upsample_bilinear(&self, out_h: usize, out_w: usize) -> Result<Tensor> {
        let (n, c, h, w) = self.dims4()?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::Dimension("upsample_bilinear: zero output extent".into()));
        }
        let map_h = bilinear_axis(h, out_h);
        let map_w = bilinear_axis(w, out_w);
        let xd = self.data();
        let mut out = vec![0.0; n * c * out_h * out_w];
        for i in 0..n * c {
            let plane = &xd[i * h * w..(i + 1) * h * w];
            let dst = &mut out[i * out_h * out_w..(i + 1) * out_h * out_w];
            for (yo, &(y0, y1, wy)) in map_h.iter().enumerate() {
                for (xo, &(x0, x1, wx)) in map_w.iter().enumerate() {
                    let top = plane[y0 * w + x0] * (1.0 - wx) + plane[y0 * w + x1] * wx;
                    let bot = plane[y1 * w + x0] * (1.0 - wx) + plane[y1 * w + x1] * wx;
                    dst[yo * out_w + xo] = top * (1.0 - wy) + bot * wy;
                }
            }
        }
        drop(xd);
        let x = self.clone();
        Ok(Tensor::from_op(
            vec![n, c, out_h, out_w],
            out,
            vec![self.clone()],
            move |gout| {
                let mut delta = vec![0.0; n * c * h * w];
                for i in 0..n * c {
                    let src = &gout[i * out_h * out_w..(i + 1) * out_h * out_w];
                    let dst = &mut delta[i * h * w..(i + 1) * h * w];
                    for (yo, &(y0, y1, wy)) in map_h.iter().enumerate() {
                        for (xo, &(x0, x1, wx)) in map_w.iter().enumerate() {
                            let g = src[yo * out_w + xo];
                            dst[y0 * w + x0] += g * (1.0 - wy) * (1.0 - wx);
                            dst[y0 * w + x1] += g * (1.0 - wy) * wx;
                            dst[y1 * w + x0] += g * wy * (1.0 - wx);
                            dst[y1 * w + x1] += g * wy * wx;
                        }
                    }
                }
                x.accum_grad(&delta);
            },
        ))
    }

    // ---- normalization ----

    /// Batch normalization over N,H,W per channel using the batch statistics.
    /// Returns the normalized tensor plus the (biased) batch mean/variance so
    /// the caller can maintain running estimates.
    pub fn batch_norm_train(
        &self,
        gamma: &Tensor,
        beta: &Tensor,
        eps: f64,
    ) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
        let (n, c, h, w) = self.dims4()?;
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(Error::Dimension(format!(
                "batch_norm: gamma {:?}, beta {:?}, expected [{c}]",
                gamma.shape(),
                beta.shape()
            )));
        }
        let m = (n * h * w) as f64;
        let hw = h * w;
        let xd = self.data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ci in 0..c {
            let mut s = 0.0;
            for ni in 0..n {
                let base = (ni * c + ci) * hw;
                s += xd[base..base + hw].iter().sum::<f64>();
            }
            mean[ci] = s / m;
            let mut v = 0.0;
            for ni in 0..n {
                let base = (ni * c + ci) * hw;
                for p in 0..hw {
                    let d = xd[base + p] - mean[ci];
                    v += d * d;
                }
            }
            var[ci] = v / m;
        }
        let gd = gamma.data();
        let bd = beta.data();
        let mut out = vec![0.0; n * c * hw];
        let mut xhat = vec![0.0; n * c * hw];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * hw;
                let inv = 1.0 / (var[ci] + eps).sqrt();
                for p in 0..hw {
                    let xh = (xd[base + p] - mean[ci]) * inv;
                    xhat[base + p] = xh;
                    out[base + p] = gd[ci] * xh + bd[ci];
                }
            }
        }
        drop(xd);
        drop(gd);
        drop(bd);
        check_finite(&out, "batch_norm_train");
        let (x, gt, bt) = (self.clone(), gamma.clone(), beta.clone());
        let (mean_s, var_s) = (mean.clone(), var.clone());
        let var_c = var.clone();
        let out = Tensor::from_op(
            vec![n, c, h, w],
            out,
            vec![self.clone(), gamma.clone(), beta.clone()],
            move |gout| {
                let gd = gt.data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * hw;
                        for p in 0..hw {
                            dgamma[ci] += gout[base + p] * xhat[base + p];
                            dbeta[ci] += gout[base + p];
                        }
                    }
                }
                if x.requires_grad() {
                    // dx = γ/σ · (g − mean(g) − x̂·mean(g·x̂)) per channel
                    let mut dx = vec![0.0; n * c * hw];
                    for ci in 0..c {
                        let inv = 1.0 / (var_c[ci] + eps).sqrt();
                        let g_mean = dbeta[ci] / m;
                        let gx_mean = dgamma[ci] / m;
                        for ni in 0..n {
                            let base = (ni * c + ci) * hw;
                            for p in 0..hw {
                                dx[base + p] =
                                    gd[ci] * inv * (gout[base + p] - g_mean - xhat[base + p] * gx_mean);
                            }
                        }
                    }
                    x.accum_grad(&dx);
                }
                drop(gd);
                if gt.requires_grad() {
                    gt.accum_grad(&dgamma);
                }
                if bt.requires_grad() {
                    bt.accum_grad(&dbeta);
                }
            },
        );
        Ok((out, mean_s, var_s))
    }

    /// Batch normalization with fixed (running) statistics; the statistics
    /// are treated as constants for the gradient.
    pub fn batch_norm_eval(
        &self,
        gamma: &Tensor,
        beta: &Tensor,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Tensor> {
        let (n, c, h, w) = self.dims4()?;
        if gamma.shape() != [c] || beta.shape() != [c] || mean.len() != c || var.len() != c {
            return Err(Error::Dimension(format!(
                "batch_norm_eval: channel count {c} vs gamma {:?}, stats {}",
                gamma.shape(),
                mean.len()
            )));
        }
        let hw = h * w;
        let xd = self.data();
        let gd = gamma.data();
        let bd = beta.data();
        let mut out = vec![0.0; n * c * hw];
        let inv: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * hw;
                for p in 0..hw {
                    out[base + p] = gd[ci] * (xd[base + p] - mean[ci]) * inv[ci] + bd[ci];
                }
            }
        }
        drop(xd);
        drop(gd);
        drop(bd);
        check_finite(&out, "batch_norm_eval");
        let (x, gt, bt) = (self.clone(), gamma.clone(), beta.clone());
        let mean_s = mean.to_vec();
        Ok(Tensor::from_op(
            vec![n, c, h, w],
            out,
            vec![self.clone(), gamma.clone(), beta.clone()],
            move |gout| {
                let gd = gt.data();
                if x.requires_grad() {
                    let mut dx = vec![0.0; n * c * hw];
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * hw;
                            for p in 0..hw {
                                dx[base + p] = gout[base + p] * gd[ci] * inv[ci];
                            }
                        }
                    }
                    x.accum_grad(&dx);
                }
                if gt.requires_grad() {
                    let xd = x.data();
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * hw;
                            for p in 0..hw {
                                dgamma[ci] += gout[base + p] * (xd[base + p] - mean_s[ci]) * inv[ci];
                                dbeta[ci] += gout[base + p];
                            }
                        }
                    }
                    drop(xd);
                    gt.accum_grad(&dgamma);
                    bt.accum_grad(&dbeta);
                }
                drop(gd);
            },
        ))
    }
}

/// Channel concatenation; argument order fixes channel order, gradients
/// slice back to each input.
pub fn concat_channels(xs: &[Tensor]) -> Result<Tensor> {
    if xs.is_empty() {
        return Err(Error::Usage("concat_channels: empty input list".into()));
    }
    let (n, _, h, w) = xs[0].dims4()?;
    let mut channels = Vec::with_capacity(xs.len());
    for x in xs {
        let (xn, xc, xh, xw) = x.dims4()?;
        if xn != n || xh != h || xw != w {
            return Err(Error::Dimension(format!(
                "concat_channels: {:?} incompatible with {:?}",
                x.shape(),
                xs[0].shape()
            )));
        }
        channels.push(xc);
    }
    let ctot: usize = channels.iter().sum();
    let hw = h * w;
    let mut data = vec![0.0; n * ctot * hw];
    for ni in 0..n {
        let mut coff = 0;
        for (x, &xc) in xs.iter().zip(&channels) {
            let src = x.data();
            let src = &src[ni * xc * hw..(ni + 1) * xc * hw];
            data[(ni * ctot + coff) * hw..(ni * ctot + coff + xc) * hw].copy_from_slice(src);
            coff += xc;
        }
    }
    let parents: Vec<Tensor> = xs.to_vec();
    let captured: Vec<Tensor> = xs.to_vec();
    Ok(Tensor::from_op(
        vec![n, ctot, h, w],
        data,
        parents,
        move |gout| {
            for ni in 0..n {
                let mut coff = 0;
                for (x, &xc) in captured.iter().zip(&channels) {
                    if x.requires_grad() {
                        let mut g = x.inner.grad.borrow_mut();
                        let dst = &mut g[ni * xc * hw..(ni + 1) * xc * hw];
                        let src = &gout[(ni * ctot + coff) * hw..(ni * ctot + coff + xc) * hw];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                    coff += xc;
                }
            }
        },
    ))
}

/// Extracts channels `[from, to)` as a new tensor (used by tests for the
/// concat round-trip and by the network to split fused maps).
pub fn slice_channels(x: &Tensor, from: usize, to: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if from >= to || to > c {
        return Err(Error::Dimension(format!(
            "slice_channels: [{from}, {to}) out of range for C={c}"
        )));
    }
    let hw = h * w;
    let nc = to - from;
    let xd = x.data();
    let mut data = vec![0.0; n * nc * hw];
    for ni in 0..n {
        data[ni * nc * hw..(ni + 1) * nc * hw]
            .copy_from_slice(&xd[(ni * c + from) * hw..(ni * c + to) * hw]);
    }
    drop(xd);
    let xc = x.clone();
    Ok(Tensor::from_op(
        vec![n, nc, h, w],
        data,
        vec![x.clone()],
        move |gout| {
            let mut delta = vec![0.0; n * c * hw];
            for ni in 0..n {
                delta[(ni * c + from) * hw..(ni * c + to) * hw]
                    .copy_from_slice(&gout[ni * nc * hw..(ni + 1) * nc * hw]);
            }
            xc.accum_grad(&delta);
        },
    ))
}

/// Custom-op escape hatch for modules that implement their own analytic
/// backward (the loss terms use this).
pub(crate) fn make_op(
    shape: Vec<usize>,
    data: Vec<f64>,
    parents: Vec<Tensor>,
    backward: impl Fn(&[f64]) + 'static,
) -> Tensor {
    Tensor::from_op(shape, data, parents, backward)
}

// ---- low-level kernels ----

/// Precomputes (lo index, hi index, hi weight) per output coordinate for one
/// bilinear axis, half-pixel centers, edge clamped.
fn bilinear_axis(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(in_len - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// c[m×n] += a[m×k]·b[k×n]
fn matmul_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av != 0.0 {
                let brow = &b[p * n..(p + 1) * n];
                for (cj, bj) in crow.iter_mut().zip(brow) {
                    *cj += av * bj;
                }
            }
        }
    }
}

/// c[m×k] += a[m×n]·b[k×n]ᵀ  (row-dot-row form)
fn matmul_abt_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            // 4 independent accumulators so the dot product pipelines
            let mut acc = [0.0f64; 4];
            let mut j = 0;
            while j + 4 <= n {
                acc[0] += arow[j] * brow[j];
                acc[1] += arow[j + 1] * brow[j + 1];
                acc[2] += arow[j + 2] * brow[j + 2];
                acc[3] += arow[j + 3] * brow[j + 3];
                j += 4;
            }
            let mut s = acc[0] + acc[1] + acc[2] + acc[3];
            while j < n {
                s += arow[j] * brow[j];
                j += 1;
            }
            c[i * k + p] += s;
        }
    }
}

/// c[k×n] += a[m×k]ᵀ·b[m×n]
fn matmul_atb_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av != 0.0 {
                let crow = &mut c[p * n..(p + 1) * n];
                for (cj, bj) in crow.iter_mut().zip(brow) {
                    *cj += av * bj;
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    dilation: usize,
    col: &mut [f64],
) {
    let oh = (h + 2 * pad - (dilation * (kh - 1) + 1)) / stride + 1;
    let ow = (w + 2 * pad - (dilation * (kw - 1) + 1)) / stride + 1;
    let l = oh * ow;
    for ci in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = &mut col[((ci * kh + ky) * kw + kx) * l..((ci * kh + ky) * kw + kx + 1) * l];
                for yo in 0..oh {
                    let y = (yo * stride + ky * dilation) as isize - pad as isize;
                    if y < 0 || y >= h as isize {
                        row[yo * ow..(yo + 1) * ow].fill(0.0);
                        continue;
                    }
                    let src = &x[(ci * h + y as usize) * w..(ci * h + y as usize + 1) * w];
                    for xo in 0..ow {
                        let xc = (xo * stride + kx * dilation) as isize - pad as isize;
                        row[yo * ow + xo] = if xc < 0 || xc >= w as isize {
                            0.0
                        } else {
                            src[xc as usize]
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    col: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    dilation: usize,
    x: &mut [f64],
) {
    let oh = (h + 2 * pad - (dilation * (kh - 1) + 1)) / stride + 1;
    let ow = (w + 2 * pad - (dilation * (kw - 1) + 1)) / stride + 1;
    let l = oh * ow;
    for ci in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = &col[((ci * kh + ky) * kw + kx) * l..((ci * kh + ky) * kw + kx + 1) * l];
                for yo in 0..oh {
                    let y = (yo * stride + ky * dilation) as isize - pad as isize;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    let dst = &mut x[(ci * h + y as usize) * w..(ci * h + y as usize + 1) * w];
                    for xo in 0..ow {
                        let xc = (xo * stride + kx * dilation) as isize - pad as isize;
                        if xc >= 0 && (xc as usize) < w {
                            dst[xc as usize] += row[yo * ow + xo];
                        }
                    }
                }
            }
        }
    }
}

// ---- gradient verification ----

/// Compares analytic gradients against central finite differences on a
/// random subsample of coordinates (all of them when the tensor is small).
/// Returns the maximum relative error observed.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64, seed: u64) -> f64
where
    F: Fn(&Tensor) -> Tensor,
{
    use rand::{Rng, SeedableRng};
    let n = x.numel();
    x.zero_grad();
    let y = f(x);
    y.backward().expect("finite_diff_check: f must return a scalar");
    let analytic = x.grad().clone();

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let sample: Vec<usize> = if n <= 64 {
        (0..n).collect()
    } else {
        (0..64).map(|_| rng.gen_range(0..n)).collect()
    };

    let mut max_rel = 0.0f64;
    for &i in &sample {
        let orig = x.data()[i];
        set_coord(x, i, orig + eps);
        let fp = f(x).item();
        set_coord(x, i, orig - eps);
        let fm = f(x).item();
        set_coord(x, i, orig);
        let numeric = (fp - fm) / (2.0 * eps);
        let denom = analytic[i].abs().max(numeric.abs());
        if denom > 1e-7 {
            max_rel = max_rel.max((analytic[i] - numeric).abs() / denom);
        }
    }
    max_rel
}

fn set_coord(x: &Tensor, i: usize, v: f64) {
    x.inner.data.borrow_mut()[i] = v;
}
