//! Dense 2-D tensors with tape-based reverse-mode differentiation.
//!
//! Every value is a row-major `f64` matrix. Scalars are `1×1`, vectors are
//! `1×n` rows. A [`Tape`] records each op together with a closure that maps
//! the output gradient to gradients of its inputs; [`Tape::backward`] replays
//! the closures in reverse creation order, which is a reverse topological
//! order because nodes can only reference nodes created before them.

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use ndarray::{concatenate, s, Array2, Axis};
use thiserror::Error;

pub type Matrix = Array2<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: axis {axis} is empty or out of range for shape {shape:?}")]
    EmptyAxis {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("index {index} out of range for {len} rows")]
    Index { index: usize, len: usize },
    #[error("{0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// A parameter-like value that may carry an accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub value: Matrix,
    pub requires_grad: bool,
    pub grad: Option<Matrix>,
}

impl Tensor {
    pub fn new(value: Matrix, requires_grad: bool) -> Self {
        Self {
            value,
            requires_grad,
            grad: None,
        }
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value.shape().to_vec()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the stored gradient (gradients accumulate until reset).
    pub fn accumulate(&mut self, g: &Matrix) {
        match &mut self.grad {
            Some(existing) => *existing += g,
            None => self.grad = Some(g.clone()),
        }
    }
}

type BackwardFn = Box<dyn Fn(&Matrix, &mut GradSink<'_>)>;

struct Node {
    value: Rc<Matrix>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

/// Receives input gradients produced by one node's backward closure.
pub struct GradSink<'a> {
    grads: &'a mut [Option<Matrix>],
    requires: &'a [bool],
}

impl GradSink<'_> {
    pub fn accumulate(&mut self, id: usize, g: Matrix) {
        if !self.requires[id] {
            return;
        }
        match &mut self.grads[id] {
            Some(existing) => *existing += &g,
            slot @ None => *slot = Some(g),
        }
    }

    pub fn wants(&self, id: usize) -> bool {
        self.requires[id]
    }
}

/// Records a computation for later differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tape({} nodes)", self.nodes.borrow().len())
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Matrix> {
        self.grads[var.id].as_ref()
    }

    /// Gradient of `var`, or zeros of its shape when nothing reached it.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Matrix {
        match &self.grads[var.id] {
            Some(g) => g.clone(),
            None => Matrix::zeros(var.value().dim()),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Matrix, requires_grad: bool, backward: Option<BackwardFn>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value: Rc::new(value),
            requires_grad,
            backward: if requires_grad { backward } else { None },
        });
        Var { tape: self, id }
    }

    pub fn leaf(&self, value: Matrix) -> Var<'_> {
        self.push(value, true, None)
    }

    pub fn constant(&self, value: Matrix) -> Var<'_> {
        self.push(value, false, None)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Matrix::from_elem((1, 1), value))
    }

    fn value_of(&self, id: usize) -> Rc<Matrix> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Records a user-defined op. `backward` receives the output gradient and
    /// must return one optional gradient per parent, each shaped like that
    /// parent's value.
    pub fn custom<'t, F>(&'t self, parents: &[Var<'t>], value: Matrix, backward: F) -> Var<'t>
    where
        F: Fn(&Matrix) -> Vec<Option<Matrix>> + 'static,
    {
        let ids: Vec<usize> = parents.iter().map(|p| p.id).collect();
        let requires = ids.iter().any(|&id| self.requires(id));
        self.push(
            value,
            requires,
            Some(Box::new(move |g, sink| {
                for (id, pg) in ids.iter().zip(backward(g)) {
                    if let Some(pg) = pg {
                        sink.accumulate(*id, pg);
                    }
                }
            })),
        )
    }

    /// Reverse-mode sweep from a scalar `loss`. The tape is left untouched so
    /// repeated calls return identical gradients; accumulation across calls is
    /// the caller's job (see [`Tensor::accumulate`]).
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let shape = nodes[loss.id].value.shape().to_vec();
        if shape != [1, 1] {
            return Err(TensorError::NonScalarLoss(shape));
        }
        let requires: Vec<bool> = nodes.iter().map(|n| n.requires_grad).collect();
        let mut grads: Vec<Option<Matrix>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Matrix::ones((1, 1)));
        for id in (0..=loss.id).rev() {
            let Some(backward) = &nodes[id].backward else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            {
                let mut sink = GradSink {
                    grads: &mut grads,
                    requires: &requires,
                };
                backward(&g, &mut sink);
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    Scalar,
    Row,
    Col,
}

fn broadcast_kind(op: &'static str, a: &Matrix, b: &Matrix) -> Result<Broadcast> {
    let (ar, ac) = a.dim();
    let (br, bc) = b.dim();
    if (ar, ac) == (br, bc) {
        Ok(Broadcast::Same)
    } else if (br, bc) == (1, 1) {
        Ok(Broadcast::Scalar)
    } else if br == 1 && bc == ac {
        Ok(Broadcast::Row)
    } else if bc == 1 && br == ar {
        Ok(Broadcast::Col)
    } else {
        Err(TensorError::Shape {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        })
    }
}

fn reduce_to(g: Matrix, kind: Broadcast) -> Matrix {
    match kind {
        Broadcast::Same => g,
        Broadcast::Scalar => Matrix::from_elem((1, 1), g.sum()),
        Broadcast::Row => g.sum_axis(Axis(0)).insert_axis(Axis(0)),
        Broadcast::Col => g.sum_axis(Axis(1)).insert_axis(Axis(1)),
    }
}

pub(crate) fn log_sigmoid(x: f64) -> f64 {
    // -softplus(-x), written so neither branch overflows
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_axis(op: &'static str, m: &Matrix, axis: usize) -> Result<()> {
    if axis >= 2 || m.len_of(Axis(axis)) == 0 {
        return Err(TensorError::EmptyAxis {
            op,
            axis,
            shape: m.shape().to_vec(),
        });
    }
    Ok(())
}

/// Index of the first maximum in each lane along `axis`.
fn argmax_lanes(m: &Matrix, axis: usize) -> Vec<usize> {
    m.lanes(Axis(axis))
        .into_iter()
        .map(|lane| {
            let mut best = 0;
            for (i, &v) in lane.iter().enumerate() {
                if v > lane[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
    out
}

// fallible shape checks rule out the std::ops traits
#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Matrix> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn rows(&self) -> usize {
        self.value().nrows()
    }

    pub fn cols(&self) -> usize {
        self.value().ncols()
    }

    /// The single element of a `1×1` value.
    pub fn item(&self) -> f64 {
        self.value()[[0, 0]]
    }

    fn unary<F, D>(self, f: F, df: D) -> Var<'t>
    where
        F: Fn(f64) -> f64,
        D: Fn(f64, f64) -> f64 + 'static,
    {
        let x = self.value();
        let y = x.mapv(&f);
        let yc = Rc::new(y.clone());
        let id = self.id;
        self.tape.push(
            y,
            self.tape.requires(id),
            Some(Box::new(move |g, sink| {
                let mut gx = g.clone();
                ndarray::Zip::from(&mut gx)
                    .and(&*x)
                    .and(&*yc)
                    .for_each(|g, &x, &y| *g *= df(x, y));
                sink.accumulate(id, gx);
            })),
        )
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(f64::tanh, |_, y| 1.0 - y * y)
    }

    /// `log(sigmoid(x))`, stable for large negative `x`.
    pub fn log_sigmoid(self) -> Var<'t> {
        self.unary(log_sigmoid, |x, _| sigmoid(-x))
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn neg(self) -> Var<'t> {
        self.unary(|x| -x, |_, _| -1.0)
    }

    pub fn scale(self, k: f64) -> Var<'t> {
        self.unary(move |x| k * x, move |_, _| k)
    }

    fn binary(self, other: Var<'t>, op: &'static str, mul: bool) -> Result<Var<'t>> {
        let a = self.value();
        let b = other.value();
        let kind = broadcast_kind(op, &a, &b)?;
        let value = if mul { &*a * &*b } else { &*a + &*b };
        let (ia, ib) = (self.id, other.id);
        let requires = self.tape.requires(ia) || self.tape.requires(ib);
        Ok(self.tape.push(
            value,
            requires,
            Some(Box::new(move |g, sink| {
                if mul {
                    if sink.wants(ia) {
                        sink.accumulate(ia, g * &*b);
                    }
                    if sink.wants(ib) {
                        sink.accumulate(ib, reduce_to(g * &*a, kind));
                    }
                } else {
                    sink.accumulate(ia, g.clone());
                    if sink.wants(ib) {
                        sink.accumulate(ib, reduce_to(g.clone(), kind));
                    }
                }
            })),
        ))
    }

    /// Elementwise sum; `other` may be equal-shaped, `1×1`, a `1×n` row or an
    /// `m×1` column.
    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", false)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other.neg(), "sub", false)
    }

    /// Elementwise product with the same broadcasting rules as [`Var::add`].
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", true)
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let a = self.value();
        let b = other.value();
        if a.ncols() != b.nrows() {
            return Err(TensorError::Shape {
                op: "matmul",
                left: a.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        let value = a.dot(&*b);
        let (ia, ib) = (self.id, other.id);
        let requires = self.tape.requires(ia) || self.tape.requires(ib);
        Ok(self.tape.push(
            value,
            requires,
            Some(Box::new(move |g, sink| {
                if sink.wants(ia) {
                    sink.accumulate(ia, g.dot(&b.t()));
                }
                if sink.wants(ib) {
                    sink.accumulate(ib, a.t().dot(g));
                }
            })),
        ))
    }

    /// Sum of all elements, as a `1×1` value.
    pub fn sum(self) -> Var<'t> {
        let x = self.value();
        let dim = x.dim();
        let id = self.id;
        self.tape.push(
            Matrix::from_elem((1, 1), x.sum()),
            self.tape.requires(id),
            Some(Box::new(move |g, sink| {
                sink.accumulate(id, Matrix::from_elem(dim, g[[0, 0]]));
            })),
        )
    }

    pub fn mean(self) -> Result<Var<'t>> {
        let n = self.value().len();
        if n == 0 {
            return Err(TensorError::EmptyAxis {
                op: "mean",
                axis: 0,
                shape: self.shape(),
            });
        }
        Ok(self.sum().scale(1.0 / n as f64))
    }

    /// Sum along `axis`, keeping it as a length-1 dimension.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        check_axis("sum_axis", &x, axis)?;
        let dim = x.dim();
        let id = self.id;
        let value = x.sum_axis(Axis(axis)).insert_axis(Axis(axis));
        Ok(self.tape.push(
            value,
            self.tape.requires(id),
            Some(Box::new(move |g, sink| {
                let full = g
                    .broadcast(dim)
                    .expect("reduced axis broadcasts back")
                    .to_owned();
                sink.accumulate(id, full);
            })),
        ))
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'t>> {
        let n = self.value().len_of(Axis(axis.min(1)));
        Ok(self.sum_axis(axis)?.scale(1.0 / n.max(1) as f64))
    }

    /// Max along `axis`; the gradient flows only to the first maximal element.
    pub fn max_axis(self, axis: usize) -> Result<(Var<'t>, Vec<usize>)> {
        let x = self.value();
        check_axis("max_axis", &x, axis)?;
        let idx = argmax_lanes(&x, axis);
        let dim = x.dim();
        let value = if axis == 0 {
            Matrix::from_shape_fn((1, dim.1), |(_, j)| x[[idx[j], j]])
        } else {
            Matrix::from_shape_fn((dim.0, 1), |(i, _)| x[[i, idx[i]]])
        };
        let id = self.id;
        let routes = idx.clone();
        let var = self.tape.push(
            value,
            self.tape.requires(id),
            Some(Box::new(move |g, sink| {
                let mut gx = Matrix::zeros(dim);
                for (lane, &k) in routes.iter().enumerate() {
                    if axis == 0 {
                        gx[[k, lane]] += g[[0, lane]];
                    } else {
                        gx[[lane, k]] += g[[lane, 0]];
                    }
                }
                sink.accumulate(id, gx);
            })),
        );
        Ok((var, idx))
    }

    /// Non-differentiable first-index argmax along `axis`.
    pub fn argmax(&self, axis: usize) -> Result<Vec<usize>> {
        let x = self.value();
        check_axis("argmax", &x, axis)?;
        Ok(argmax_lanes(&x, axis))
    }

    /// Softmax along `axis` with max subtraction.
    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        check_axis("softmax", &x, axis)?;
        let y = if axis == 1 {
            softmax_rows(&x)
        } else {
            softmax_rows(&x.t().to_owned()).t().to_owned()
        };
        let yc = Rc::new(y.clone());
        let id = self.id;
        Ok(self.tape.push(
            y,
            self.tape.requires(id),
            Some(Box::new(move |g, sink| {
                let gy = g * &*yc;
                let dot = gy.sum_axis(Axis(axis)).insert_axis(Axis(axis));
                let gx = &gy - &(&*yc * &dot);
                sink.accumulate(id, gx);
            })),
        ))
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(self) -> Result<Var<'t>> {
        let x = self.value();
        check_axis("log_softmax", &x, 1)?;
        let mut y = (*x).clone();
        for mut row in y.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.mapv_inplace(|v| v - lse);
        }
        let p = Rc::new(y.mapv(f64::exp));
        let id = self.id;
        Ok(self.tape.push(
            y,
            self.tape.requires(id),
            Some(Box::new(move |g, sink| {
                let total = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                sink.accumulate(id, g - &(&*p * &total));
            })),
        ))
    }

    /// `Σ_r weights[r] · (−log_softmax(self)[r, targets[r]])` as a `1×1` value.
    pub fn cross_entropy(self, targets: &[usize], weights: &[f64]) -> Result<Var<'t>> {
        let x = self.value();
        let (rows, cols) = x.dim();
        if targets.len() != rows || weights.len() != rows {
            return Err(TensorError::Contract(format!(
                "cross_entropy: {rows} rows but {} targets and {} weights",
                targets.len(),
                weights.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= cols) {
            return Err(TensorError::Index {
                index: bad,
                len: cols,
            });
        }
        let p = softmax_rows(&x);
        let mut loss = 0.0;
        for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
            if w != 0.0 {
                let row = x.row(r);
                let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                loss += w * (lse - row[t]);
            }
        }
        let targets = targets.to_vec();
        let weights = weights.to_vec();
        let id = self.id;
        Ok(self.tape.push(
            Matrix::from_elem((1, 1), loss),
            self.tape.requires(id),
            Some(Box::new(move |g, sink| {
                let mut gx = p.clone();
                for (r, (&t, &w)) in targets.iter().zip(&weights).enumerate() {
                    gx[[r, t]] -= 1.0;
                    gx.row_mut(r).mapv_inplace(|v| v * w * g[[0, 0]]);
                }
                sink.accumulate(id, gx);
            })),
        ))
    }

    /// Rows `indices` of `self` (embedding lookup); gradient is scatter-added.
    pub fn gather_rows(self, indices: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let (rows, cols) = x.dim();
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(TensorError::Index {
                index: bad,
                len: rows,
            });
        }
        let value = x.select(Axis(0), indices);
        let indices = indices.to_vec();
        let id = self.id;
        Ok(self.tape.push(
            value,
            self.tape.requires(id),
            Some(Box::new(move |g, sink| {
                let mut gx = Matrix::zeros((rows, cols));
                for (r, &i) in indices.iter().enumerate() {
                    let mut dst = gx.row_mut(i);
                    dst += &g.row(r);
                }
                sink.accumulate(id, gx);
            })),
        ))
    }

    pub fn slice_rows(self, start: usize, len: usize) -> Result<Var<'t>> {
        self.slice(0, start, len)
    }

    pub fn slice_cols(self, start: usize, len: usize) -> Result<Var<'t>> {
        self.slice(1, start, len)
    }

    fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let x = self.value();
        let dim = x.dim();
        let extent = if axis == 0 { dim.0 } else { dim.1 };
        if start + len > extent || len == 0 {
            return Err(TensorError::Contract(format!(
                "slice [{start}, {}) out of range for axis {axis} of {:?}",
                start + len,
                x.shape()
            )));
        }
        let value = if axis == 0 {
            x.slice(s![start..start + len, ..]).to_owned()
        } else {
            x.slice(s![.., start..start + len]).to_owned()
        };
        let id = self.id;
        Ok(self.tape.push(
            value,
            self.tape.requires(id),
            Some(Box::new(move |g, sink| {
                let mut gx = Matrix::zeros(dim);
                if axis == 0 {
                    gx.slice_mut(s![start..start + len, ..]).assign(g);
                } else {
                    gx.slice_mut(s![.., start..start + len]).assign(g);
                }
                sink.accumulate(id, gx);
            })),
        ))
    }

    /// Replaces entries where `mask` is true with `fill`; those entries get no
    /// gradient.
    pub fn masked_fill(self, mask: &Array2<bool>, fill: f64) -> Result<Var<'t>> {
        let x = self.value();
        if x.dim() != mask.dim() {
            return Err(TensorError::Shape {
                op: "masked_fill",
                left: x.shape().to_vec(),
                right: mask.shape().to_vec(),
            });
        }
        let mut value = (*x).clone();
        ndarray::Zip::from(&mut value).and(mask).for_each(|v, &m| {
            if m {
                *v = fill
            }
        });
        let mask = mask.clone();
        let id = self.id;
        Ok(self.tape.push(
            value,
            self.tape.requires(id),
            Some(Box::new(move |g, sink| {
                let mut gx = g.clone();
                ndarray::Zip::from(&mut gx).and(&mask).for_each(|v, &m| {
                    if m {
                        *v = 0.0
                    }
                });
                sink.accumulate(id, gx);
            })),
        ))
    }
}

fn concat<'t>(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
    let first = parts
        .first()
        .ok_or_else(|| TensorError::Contract("concat of zero tensors".into()))?;
    let tape = first.tape;
    let values: Vec<Rc<Matrix>> = parts.iter().map(|p| p.value()).collect();
    let views: Vec<_> = values.iter().map(|v| v.view()).collect();
    let value = concatenate(Axis(axis), &views).map_err(|_| TensorError::Shape {
        op: "concat",
        left: values[0].shape().to_vec(),
        right: values.last().map(|v| v.shape().to_vec()).unwrap_or_default(),
    })?;
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    let extents: Vec<usize> = values.iter().map(|v| v.len_of(Axis(axis))).collect();
    let requires = ids.iter().any(|&id| tape.requires(id));
    Ok(tape.push(
        value,
        requires,
        Some(Box::new(move |g, sink| {
            let mut offset = 0;
            for (&id, &len) in ids.iter().zip(&extents) {
                if sink.wants(id) {
                    let part = if axis == 0 {
                        g.slice(s![offset..offset + len, ..]).to_owned()
                    } else {
                        g.slice(s![.., offset..offset + len]).to_owned()
                    };
                    sink.accumulate(id, part);
                }
                offset += len;
            }
        })),
    ))
}

/// Horizontal concatenation of equal-height values.
pub fn concat_cols<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    concat(parts, 1)
}

/// Vertical concatenation of equal-width values.
pub fn concat_rows<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    concat(parts, 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn matmul_values() {
        let tape = Tape::new();
        let a = tape.constant(array![[1.0, 0.0], [0.0, 1.0]]);
        let b = tape.constant(array![[3.0], [4.0]]);
        assert_eq!(*a.matmul(b).unwrap().value(), array![[3.0], [4.0]]);
        let c = tape.constant(array![[1.0, 2.0]]);
        assert_eq!(c.matmul(b).unwrap().item(), 11.0);
    }

    #[test]
    fn matmul_shape_error() {
        let tape = Tape::new();
        let a = tape.constant(Matrix::zeros((2, 3)));
        let b = tape.constant(Matrix::zeros((2, 3)));
        assert!(matches!(a.matmul(b), Err(TensorError::Shape { .. })));
        assert!(matches!(a.add(tape.constant(Matrix::zeros((3, 2)))), Err(TensorError::Shape { .. })));
    }

    #[test]
    fn stable_activations() {
        let tape = Tape::new();
        assert_eq!(tape.scalar(0.0).sigmoid().item(), 0.5);
        let ls = tape.scalar(-100.0).log_sigmoid().item();
        assert!((ls + 100.0).abs() < 1e-12, "{ls}");
        assert!(tape.scalar(800.0).log_sigmoid().item().abs() < 1e-300);
        let x = tape.leaf(array![[0.3]]);
        let y = x.tanh();
        let g = tape.backward(y).unwrap();
        let expected = 1.0 - 0.3f64.tanh().powi(2);
        assert!((g.get(x).unwrap()[[0, 0]] - expected).abs() < 1e-8);
    }

    #[test]
    fn max_routes_to_first_tie() {
        let tape = Tape::new();
        let x = tape.leaf(array![[2.0], [7.0], [7.0]]);
        let (m, idx) = x.max_axis(0).unwrap();
        assert_eq!(m.item(), 7.0);
        assert_eq!(idx, vec![1]);
        let g = tape.backward(m).unwrap();
        assert_eq!(*g.get(x).unwrap(), array![[0.0], [1.0], [0.0]]);

        let y = tape.leaf(array![[1.0, 5.0, 2.0]]);
        let (m, _) = y.max_axis(1).unwrap();
        let g = tape.backward(m).unwrap();
        assert_eq!(*g.get(y).unwrap(), array![[0.0, 1.0, 0.0]]);
    }

    #[test]
    fn empty_axis_is_rejected() {
        let tape = Tape::new();
        let x = tape.leaf(Matrix::zeros((0, 3)));
        assert!(matches!(x.max_axis(0), Err(TensorError::EmptyAxis { .. })));
        assert!(matches!(x.softmax(2), Err(TensorError::EmptyAxis { .. })));
    }

    #[test]
    fn softmax_examples() {
        let tape = Tape::new();
        let s = tape.constant(array![[0.0, 0.0, 0.0]]).softmax(1).unwrap();
        for v in s.value().iter() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = tape.constant(array![[1000.0, 0.0]]).softmax(1).unwrap();
        let v = s.value();
        assert!((v[[0, 0]] - 1.0).abs() < 1e-12 && v[[0, 1]] >= 0.0 && v.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn backward_simple_losses() {
        let tape = Tape::new();
        let w = tape.leaf(array![[1.0, 2.0]]);
        let g = tape.backward(w.sum()).unwrap();
        assert_eq!(*g.get(w).unwrap(), array![[1.0, 1.0]]);
        let g = tape.backward(w.mul(w).unwrap().sum()).unwrap();
        assert_eq!(*g.get(w).unwrap(), array![[2.0, 4.0]]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::new();
        let w = tape.leaf(array![[1.0, 2.0]]);
        assert!(matches!(tape.backward(w), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn fan_out_accumulates() {
        let tape = Tape::new();
        let w = tape.leaf(array![[3.0]]);
        let y = w.add(w).unwrap().add(w).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(w).unwrap()[[0, 0]], 3.0);
    }

    #[test]
    fn broadcast_gradients_reduce() {
        let tape = Tape::new();
        let x = tape.leaf(Matrix::ones((3, 2)));
        let row = tape.leaf(array![[1.0, 2.0]]);
        let col = tape.leaf(array![[1.0], [2.0], [3.0]]);
        let s = tape.leaf(array![[2.0]]);
        let y = x.add(row).unwrap().mul(col).unwrap().mul(s).unwrap().sum();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(row).unwrap().shape(), &[1, 2]);
        assert_eq!(*g.get(col).unwrap(), array![[10.0], [10.0], [10.0]]);
        assert_eq!(g.get(s).unwrap()[[0, 0]], 30.0);
    }

    #[test]
    fn cross_entropy_uniform_is_log_vocab() {
        let tape = Tape::new();
        let logits = tape.leaf(Matrix::zeros((2, 7)));
        let loss = logits.cross_entropy(&[3, 5], &[0.5, 0.5]).unwrap();
        assert!((loss.item() - 7f64.ln()).abs() < 1e-12);
        let mut perfect = Matrix::zeros((1, 4));
        perfect[[0, 2]] = 1e6;
        let loss = tape.constant(perfect).cross_entropy(&[2], &[1.0]).unwrap();
        assert!(loss.item().abs() < 1e-12);
    }

    #[test]
    fn masked_fill_blocks_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(array![[1.0, 2.0, 3.0]]);
        let mask = array![[false, true, false]];
        let y = x.masked_fill(&mask, f64::NEG_INFINITY).unwrap().softmax(1).unwrap();
        assert_eq!(y.value()[[0, 1]], 0.0);
        let picked = y.slice_cols(2, 1).unwrap().sum();
        let g = tape.backward(picked).unwrap();
        assert_eq!(g.get(x).unwrap()[[0, 1]], 0.0);
    }

    #[test]
    fn gather_scatter() {
        let tape = Tape::new();
        let e = tape.leaf(array![[1.0, 1.0], [2.0, 2.0], [3.0, 3.0]]);
        let rows = e.gather_rows(&[2, 0, 2]).unwrap();
        assert_eq!(rows.value()[[0, 0]], 3.0);
        let g = tape.backward(rows.sum()).unwrap();
        assert_eq!(*g.get(e).unwrap(), array![[1.0, 1.0], [0.0, 0.0], [2.0, 2.0]]);
        assert!(matches!(e.gather_rows(&[3]), Err(TensorError::Index { .. })));
    }

    #[test]
    fn concat_splits_gradient() {
        let tape = Tape::new();
        let a = tape.leaf(array![[1.0], [2.0]]);
        let b = tape.leaf(array![[3.0, 4.0], [5.0, 6.0]]);
        let c = concat_cols(&[a, b]).unwrap();
        assert_eq!(c.shape(), vec![2, 3]);
        let w = tape.constant(array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]);
        let g = tape.backward(c.mul(w).unwrap().sum()).unwrap();
        assert_eq!(*g.get(a).unwrap(), array![[1.0], [4.0]]);
        assert_eq!(*g.get(b).unwrap(), array![[2.0, 3.0], [5.0, 6.0]]);
        let r = concat_rows(&[b, b]).unwrap();
        assert_eq!(r.shape(), vec![4, 2]);
    }
}
