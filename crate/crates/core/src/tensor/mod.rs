//! Reverse-mode automatic differentiation over dense row-major tensors.
//!
//! A [`Tape`] owns every tensor produced during a forward pass. Ops record
//! themselves in topological order; [`Tape::backward`] walks the record in
//! reverse, accumulating (never overwriting) gradients, so shared
//! subexpressions receive the sum of their downstream contributions.
//!
//! A tape is confined to one execution context; models keep their
//! parameters outside the tape and insert them as leaves per pass.

pub mod adam;
pub mod conv;

use ndarray::{ArrayD, Axis, IxDyn};

use crate::error::{Error, Result};
use crate::rng::index_rng;
use crate::scalar::Scalar;

pub use adam::AdamState;

/// Handle to a tensor on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

struct Node<T: Scalar> {
    value: ArrayD<T>,
    requires_grad: bool,
    op: Op<T>,
}

enum Op<T: Scalar> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MaxElem(Var, Var),
    MulScalar(Var, T),
    AddScalar(Var),
    Matmul(Var, Var),
    Conv2d { x: Var, w: Var, stride: usize, pad: usize },
    ConvTranspose2d { x: Var, w: Var, stride: usize, pad: usize },
    MaxPool2 { x: Var, arg: Vec<usize> },
    Relu(Var),
    Reshape(Var),
    BroadcastTo(Var),
    Sign(Var),
    Clip { x: Var, lo: T, hi: T },
    Exp(Var),
    Log(Var),
    SumAll(Var),
    MeanAll(Var),
    SoftmaxLast(Var),
    ConcreteMax { logits: Var, tau: f64, draws: usize, seed: u64, winners: Vec<u32> },
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<ArrayD<T>>>,
    backward_done: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new(), backward_done: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a leaf tensor. Only leaves may request gradients directly.
    pub fn leaf(&mut self, value: ArrayD<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Insert a constant (leaf without gradient).
    pub fn constant(&mut self, value: ArrayD<T>) -> Var {
        self.push(value, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &ArrayD<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> T {
        *self.nodes[v.0].value.iter().next().expect("empty tensor")
    }

    /// Gradient of the last `backward` call w.r.t. `v`, if it was tracked.
    pub fn grad(&self, v: Var) -> Option<&ArrayD<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn push(&mut self, value: ArrayD<T>, requires_grad: bool, op: Op<T>) -> Var {
        #[cfg(debug_assertions)]
        {
            if let Some(bad) = value.iter().find(|x| !x.is_finite()) {
                let name = match op {
                    Op::Leaf => "leaf",
                    _ => "op",
                };
                debug_assert!(false, "non-finite value {bad} produced by {name}");
            }
        }
        self.nodes.push(Node { value, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        Ok(self.push(v, self.rg(&[a, b]), Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        Ok(self.push(v, self.rg(&[a, b]), Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        Ok(self.push(v, self.rg(&[a, b]), Op::Mul(a, b)))
    }

    /// Elementwise maximum. On ties the gradient goes to the first operand.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("maximum", a, b)?;
        let mut v = self.nodes[a.0].value.clone();
        v.zip_mut_with(&self.nodes[b.0].value, |x, &y| {
            if y > *x {
                *x = y;
            }
        });
        Ok(self.push(v, self.rg(&[a, b]), Op::MaxElem(a, b)))
    }

    pub fn mul_scalar(&mut self, a: Var, c: T) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x * c);
        let rg = self.rg(&[a]);
        self.push(v, rg, Op::MulScalar(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x + c);
        let rg = self.rg(&[a]);
        self.push(v, rg, Op::AddScalar(a))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.mul_scalar(a, T::of_f64(-1.0))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| if x > T::zero() { x } else { T::zero() });
        let rg = self.rg(&[a]);
        self.push(v, rg, Op::Relu(a))
    }

    /// sign(x) with sign(0) = 0; gradient is zero everywhere.
    pub fn sign(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| {
            if x > T::zero() {
                T::one()
            } else if x < T::zero() {
                -T::one()
            } else {
                T::zero()
            }
        });
        let rg = self.rg(&[a]);
        self.push(v, rg, Op::Sign(a))
    }

    /// Clamp to [lo, hi]; gradient passes through inside the range (inclusive).
    pub fn clip(&mut self, a: Var, lo: T, hi: T) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| {
            if x < lo {
                lo
            } else if x > hi {
                hi
            } else {
                x
            }
        });
        let rg = self.rg(&[a]);
        self.push(v, rg, Op::Clip { x: a, lo, hi })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.exp());
        let rg = self.rg(&[a]);
        self.push(v, rg, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.ln());
        let rg = self.rg(&[a]);
        self.push(v, rg, Op::Log(a))
    }

    // ---- shape ----

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.nodes[a.0].value.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let v = self.nodes[a.0]
            .value
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("checked reshape");
        let rg = self.rg(&[a]);
        Ok(self.push(v, rg, Op::Reshape(a)))
    }

    /// Broadcast to a larger shape following numpy right-aligned rules.
    /// The backward pass sums over the broadcast axes.
    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.nodes[a.0]
            .value
            .broadcast(IxDyn(shape))
            .ok_or_else(|| Error::ShapeMismatch {
                op: "broadcast_to",
                lhs: self.shape(a).to_vec(),
                rhs: shape.to_vec(),
            })?
            .to_owned();
        let rg = self.rg(&[a]);
        Ok(self.push(v, rg, Op::BroadcastTo(a)))
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.sum();
        let rg = self.rg(&[a]);
        self.push(ArrayD::from_elem(IxDyn(&[1]), s), rg, Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = T::from_usize(self.nodes[a.0].value.len()).unwrap();
        let s = self.nodes[a.0].value.sum() / n;
        let rg = self.rg(&[a]);
        self.push(ArrayD::from_elem(IxDyn(&[1]), s), rg, Op::MeanAll(a))
    }

    // ---- linear algebra ----

    /// 2-D matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch { op: "matmul", lhs: sa, rhs: sb });
        }
        let am = self.nodes[a.0].value.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let bm = self.nodes[b.0].value.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let v = am.dot(&bm).into_dyn();
        Ok(self.push(v, self.rg(&[a, b]), Op::Matmul(a, b)))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let xv = self.view4("conv2d", x)?;
        let wv = self.view4("conv2d", w)?;
        let v = conv::conv2d_forward(&xv, &wv, stride, pad)?.into_dyn();
        Ok(self.push(v, self.rg(&[x, w]), Op::Conv2d { x, w, stride, pad }))
    }

    pub fn conv_transpose2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let xv = self.view4("conv_transpose2d", x)?;
        let wv = self.view4("conv_transpose2d", w)?;
        let v = conv::conv_transpose2d_forward(&xv, &wv, stride, pad)?.into_dyn();
        Ok(self.push(v, self.rg(&[x, w]), Op::ConvTranspose2d { x, w, stride, pad }))
    }

    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let xv = self.view4("maxpool2", x)?;
        let (v, arg) = conv::maxpool2_forward(&xv)?;
        Ok(self.push(v.into_dyn(), self.rg(&[x]), Op::MaxPool2 { x, arg }))
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax_last(&mut self, a: Var) -> Var {
        let v = softmax_value(&self.nodes[a.0].value);
        let rg = self.rg(&[a]);
        self.push(v, rg, Op::SoftmaxLast(a))
    }

    /// Elementwise max of `draws` Concrete (Gumbel-softmax) samples over the
    /// last axis of a 2-D logits tensor. Sample `m` of row `n` draws its
    /// Gumbel noise from a stream keyed by (`seed`, `n`, `m`), so the op
    /// replays exactly given the same seed; the backward pass regenerates
    /// the noise instead of storing per-draw softmaxes.
    pub fn concrete_max(&mut self, logits: Var, tau: f64, draws: usize, seed: u64) -> Result<Var> {
        if self.shape(logits).len() != 2 {
            return Err(Error::invalid(
                "concrete_max",
                format!("want 2-D logits, got {:?}", self.shape(logits)),
            ));
        }
        if tau <= 0.0 || draws == 0 {
            return Err(Error::invalid("concrete_max", format!("tau={tau}, draws={draws}")));
        }
        let (n, d) = (self.shape(logits)[0], self.shape(logits)[1]);
        let lv = &self.nodes[logits.0].value;
        let ls = lv.as_slice().expect("logits must be standard layout");
        let mut out = vec![T::zero(); n * d];
        let mut winners = vec![0u32; n * d];
        let mut scratch = vec![0f64; d];
        for ni in 0..n {
            let row = &ls[ni * d..(ni + 1) * d];
            let orow = &mut out[ni * d..(ni + 1) * d];
            let wrow = &mut winners[ni * d..(ni + 1) * d];
            let mut first = true;
            for m in 0..draws {
                concrete_sample(row, tau, seed, ni as u64, m as u64, &mut scratch);
                for j in 0..d {
                    let s = T::of_f64(scratch[j]);
                    if first || s > orow[j] {
                        orow[j] = s;
                        wrow[j] = m as u32;
                    }
                }
                first = false;
            }
        }
        let v = ArrayD::from_shape_vec(IxDyn(&[n, d]), out).unwrap();
        let rg = self.rg(&[logits]);
        Ok(self.push(v, rg, Op::ConcreteMax { logits, tau, draws, seed, winners }))
    }

    fn view4(&self, op: &'static str, v: Var) -> Result<ndarray::ArrayView4<'_, T>> {
        self.nodes[v.0]
            .value
            .view()
            .into_dimensionality::<ndarray::Ix4>()
            .map_err(|_| Error::invalid(op, format!("want 4-D (N,C,H,W), got {:?}", self.shape(v))))
    }

    // ---- backward ----

    /// Populate gradients of every `requires_grad` leaf w.r.t. a scalar loss.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.backward_done = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(ArrayD::from_elem(self.nodes[loss.0].value.raw_dim(), T::one()));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].clone() else { continue };
            self.propagate(i, g);
        }
        // Disconnected requires_grad leaves get explicit zeros.
        for i in 0..self.nodes.len() {
            if self.nodes[i].requires_grad
                && matches!(self.nodes[i].op, Op::Leaf)
                && self.grads[i].is_none()
            {
                self.grads[i] = Some(ArrayD::zeros(self.nodes[i].value.raw_dim()));
            }
        }
        Ok(())
    }

    fn acc(&mut self, v: Var, g: ArrayD<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => acc.zip_mut_with(&g, |a, &b| *a = *a + b),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&mut self, i: usize, g: ArrayD<T>) {
        // Move the op out so the arms can call `&mut self` helpers.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            &Op::Add(a, b) => {
                self.acc(a, g.clone());
                self.acc(b, g);
            }
            &Op::Sub(a, b) => {
                self.acc(a, g.clone());
                self.acc(b, g.mapv(|x| -x));
            }
            &Op::Mul(a, b) => {
                let ga = &g * &self.nodes[b.0].value;
                let gb = g * &self.nodes[a.0].value;
                self.acc(a, ga);
                self.acc(b, gb);
            }
            &Op::MaxElem(a, b) => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                let mut ga = g.clone();
                ga.zip_mut_with(&(av - bv), |x, &d| {
                    if d < T::zero() {
                        *x = T::zero();
                    }
                });
                let mut gb = g;
                gb.zip_mut_with(&(av - bv), |x, &d| {
                    if d >= T::zero() {
                        *x = T::zero();
                    }
                });
                self.acc(a, ga);
                self.acc(b, gb);
            }
            &Op::MulScalar(a, c) => self.acc(a, g.mapv(|x| x * c)),
            &Op::AddScalar(a) => self.acc(a, g),
            &Op::Relu(a) => {
                let mut ga = g;
                ga.zip_mut_with(&self.nodes[a.0].value, |x, &v| {
                    if v <= T::zero() {
                        *x = T::zero();
                    }
                });
                self.acc(a, ga);
            }
            &Op::Sign(a) => self.acc(a, ArrayD::zeros(self.nodes[a.0].value.raw_dim())),
            &Op::Clip { x, lo, hi } => {
                let mut ga = g;
                ga.zip_mut_with(&self.nodes[x.0].value, |gx, &v| {
                    if v < lo || v > hi {
                        *gx = T::zero();
                    }
                });
                self.acc(x, ga);
            }
            &Op::Exp(a) => {
                let ga = g * &self.nodes[i].value;
                self.acc(a, ga);
            }
            &Op::Log(a) => {
                let ga = g / &self.nodes[a.0].value;
                self.acc(a, ga);
            }
            &Op::Reshape(a) => {
                let shape = self.nodes[a.0].value.raw_dim();
                self.acc(a, g.into_shape_with_order(shape).expect("reshape grad"));
            }
            &Op::BroadcastTo(a) => {
                let src = self.nodes[a.0].value.shape().to_vec();
                let mut ga = g;
                while ga.ndim() > src.len() {
                    ga = ga.sum_axis(Axis(0));
                }
                for (ax, &sd) in src.iter().enumerate() {
                    if sd == 1 && ga.shape()[ax] != 1 {
                        ga = ga.sum_axis(Axis(ax)).insert_axis(Axis(ax));
                    }
                }
                self.acc(a, ga);
            }
            &Op::SumAll(a) => {
                let c = *g.iter().next().unwrap();
                self.acc(a, ArrayD::from_elem(self.nodes[a.0].value.raw_dim(), c));
            }
            &Op::MeanAll(a) => {
                let n = T::from_usize(self.nodes[a.0].value.len()).unwrap();
                let c = *g.iter().next().unwrap() / n;
                self.acc(a, ArrayD::from_elem(self.nodes[a.0].value.raw_dim(), c));
            }
            &Op::Matmul(a, b) => {
                let am = self.nodes[a.0].value.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let bm = self.nodes[b.0].value.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let gm = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let ga = gm.dot(&bm.t()).into_dyn();
                let gb = am.t().dot(&gm).into_dyn();
                self.acc(a, ga);
                self.acc(b, gb);
            }
            &Op::Conv2d { x, w, stride, pad } => {
                let xv = self.view4("conv2d", x).unwrap();
                let wv = self.view4("conv2d", w).unwrap();
                let gv = g.view().into_dimensionality::<ndarray::Ix4>().unwrap();
                let (dx, dw) = conv::conv2d_backward(&xv, &wv, &gv, stride, pad);
                self.acc(x, dx.into_dyn());
                self.acc(w, dw.into_dyn());
            }
            &Op::ConvTranspose2d { x, w, stride, pad } => {
                let xv = self.view4("conv_transpose2d", x).unwrap();
                let wv = self.view4("conv_transpose2d", w).unwrap();
                let gv = g.view().into_dimensionality::<ndarray::Ix4>().unwrap();
                let (dx, dw) = conv::conv_transpose2d_backward(&xv, &wv, &gv, stride, pad);
                self.acc(x, dx.into_dyn());
                self.acc(w, dw.into_dyn());
            }
            Op::MaxPool2 { x, arg } => {
                let x = *x;
                let shape = {
                    let s = self.nodes[x.0].value.shape();
                    (s[0], s[1], s[2], s[3])
                };
                let gv = g.view().into_dimensionality::<ndarray::Ix4>().unwrap();
                let dx = conv::maxpool2_backward(&gv, arg, shape);
                self.acc(x, dx.into_dyn());
            }
            &Op::SoftmaxLast(a) => {
                let y = &self.nodes[i].value;
                let d = *y.shape().last().unwrap();
                let rows = y.len() / d;
                let ys = y.as_slice().unwrap();
                let gs = g.as_standard_layout();
                let gs = gs.as_slice().unwrap();
                let mut ga = vec![T::zero(); y.len()];
                for r in 0..rows {
                    let (yr, gr) = (&ys[r * d..(r + 1) * d], &gs[r * d..(r + 1) * d]);
                    let dot = yr.iter().zip(gr).fold(T::zero(), |acc, (&yv, &gv)| acc + yv * gv);
                    for j in 0..d {
                        ga[r * d + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.acc(a, ArrayD::from_shape_vec(y.raw_dim(), ga).unwrap());
            }
            Op::ConcreteMax { logits, tau, draws, seed, winners } => {
                let (logits, tau, draws, seed) = (*logits, *tau, *draws, *seed);
                let lv = &self.nodes[logits.0].value;
                let (n, d) = (lv.shape()[0], lv.shape()[1]);
                let ls = lv.as_slice().unwrap();
                let gsl = g.as_standard_layout();
                let gs = gsl.as_slice().unwrap();
                let mut ga = vec![T::zero(); n * d];
                let mut scratch = vec![0f64; d];
                for ni in 0..n {
                    let row = &ls[ni * d..(ni + 1) * d];
                    let grow = &gs[ni * d..(ni + 1) * d];
                    let wrow = &winners[ni * d..(ni + 1) * d];
                    let garow = &mut ga[ni * d..(ni + 1) * d];
                    for m in 0..draws {
                        concrete_sample(row, tau, seed, ni as u64, m as u64, &mut scratch);
                        let mut c = 0f64;
                        for j in 0..d {
                            if wrow[j] == m as u32 {
                                c += grow[j].as_f64() * scratch[j];
                            }
                        }
                        if c == 0.0 && !wrow.iter().any(|&w| w == m as u32) {
                            continue;
                        }
                        for j in 0..d {
                            let won = if wrow[j] == m as u32 { grow[j].as_f64() } else { 0.0 };
                            let dl = scratch[j] * (won - c) / tau;
                            garow[j] = garow[j] + T::of_f64(dl);
                        }
                    }
                }
                self.acc(logits, ArrayD::from_shape_vec(IxDyn(&[n, d]), ga).unwrap());
            }
        }
        self.nodes[i].op = op;
    }
}

/// Stable softmax over the last axis, out of tape.
pub fn softmax_value<T: Scalar>(x: &ArrayD<T>) -> ArrayD<T> {
    let d = *x.shape().last().expect("softmax on 0-d tensor");
    let rows = x.len() / d;
    let xs = x.as_standard_layout();
    let xs = xs.as_slice().unwrap();
    let mut out = vec![T::zero(); x.len()];
    for r in 0..rows {
        let row = &xs[r * d..(r + 1) * d];
        let mx = row.iter().cloned().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for j in 0..d {
            let e = (row[j] - mx).exp();
            out[r * d + j] = e;
            sum = sum + e;
        }
        for j in 0..d {
            out[r * d + j] = out[r * d + j] / sum;
        }
    }
    ArrayD::from_shape_vec(x.raw_dim(), out).unwrap()
}

/// One Concrete sample: softmax((logits + gumbel) / tau), computed in f64.
/// Deterministic in (seed, row, draw).
pub fn concrete_sample<T: Scalar>(
    logits: &[T],
    tau: f64,
    seed: u64,
    row: u64,
    draw: u64,
    out: &mut [f64],
) {
    use rand::Rng;
    let mut rng = index_rng(seed, row, draw);
    let mut mx = f64::NEG_INFINITY;
    for (j, &l) in logits.iter().enumerate() {
        let nu: f64 = rng.gen::<f64>().max(1e-300);
        let gumbel = -(-nu.ln()).ln();
        let v = (l.as_f64() + gumbel) / tau;
        out[j] = v;
        if v > mx {
            mx = v;
        }
    }
    let mut sum = 0f64;
    for v in out.iter_mut() {
        *v = (*v - mx).exp();
        sum += *v;
    }
    for v in out.iter_mut() {
        *v /= sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};

    fn arr(vals: &[f64]) -> ArrayD<f64> {
        ArrayD::from_shape_vec(IxDyn(&[vals.len()]), vals.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(arr(&[0.0, 0.0, 0.0, 0.0]));
        let y = t.softmax_last(x);
        for &v in t.value(y).iter() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn relu_definition() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(arr(&[-1.0, 0.0, 2.0]));
        let y = t.relu(x);
        assert_eq!(t.value(y), &arr(&[0.0, 0.0, 2.0]));
    }

    #[test]
    fn sign_of_zero_is_zero() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(arr(&[-2.0, 0.0, 3.0]));
        let y = t.sign(x);
        assert_eq!(t.value(y), &arr(&[-1.0, 0.0, 1.0]));
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(arr(&[1.0, 2.0, 3.0]), true);
        let sq = t.mul(x, x).unwrap();
        let loss = t.sum_all(sq);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), &arr(&[2.0, 4.0, 6.0]));
    }

    #[test]
    fn disconnected_leaf_gets_zero_grad() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(arr(&[1.0]), true);
        let y = t.leaf(arr(&[5.0]), true);
        let loss = t.sum_all(x);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(y).unwrap(), &arr(&[0.0]));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(arr(&[1.0, 2.0]), true);
        assert!(matches!(t.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn backward_twice_rejected() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(arr(&[1.0]), true);
        let loss = t.sum_all(x);
        t.backward(loss).unwrap();
        assert!(matches!(t.backward(loss), Err(Error::BackwardTwice)));
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // loss = x*x + x*x -> grad 4x
        let mut t = Tape::<f64>::new();
        let x = t.leaf(arr(&[3.0]), true);
        let a = t.mul(x, x).unwrap();
        let b = t.mul(x, x).unwrap();
        let s = t.add(a, b).unwrap();
        let loss = t.sum_all(s);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), &arr(&[12.0]));
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut t = Tape::<f64>::new();
        let a = t.constant(arr(&[1.0, 2.0]));
        let b = t.constant(arr(&[1.0, 2.0, 3.0]));
        let e = t.add(a, b).unwrap_err().to_string();
        assert!(e.contains("add") && e.contains('2') && e.contains('3'), "{e}");
    }

    #[test]
    fn concrete_draws_replay_deterministically() {
        let mut t = Tape::<f64>::new();
        let l = ArrayD::from_shape_vec(IxDyn(&[1, 6]), vec![0.3, -1.0, 0.5, 2.0, 0.0, -0.2]).unwrap();
        let a = t.constant(l.clone());
        let z1 = t.concrete_max(a, 0.5, 3, 42).unwrap();
        let v1 = t.value(z1).clone();
        let mut t2 = Tape::<f64>::new();
        let b = t2.constant(l);
        let z2 = t2.concrete_max(b, 0.5, 3, 42).unwrap();
        assert_eq!(&v1, t2.value(z2));
    }
}
