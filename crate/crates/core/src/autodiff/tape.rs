//! Recorded forward computation with exact reverse-mode gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::array::{matmul_raw, matmul_ta_raw, Array};
use super::params::{ParamId, ParamStore};
use crate::error::{Result, RgatError};

/// Inputs to `log` are clamped from below at this value.
pub const LOG_FLOOR: f64 = 1e-12;

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.2;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Param(ParamId),
    Constant,
    MatMul { a: Var, b: Var, transpose_b: bool },
    Add(Var, Var),
    Mul { a: Var, b: Var, broadcast_b: bool },
    Concat(Vec<Var>),
    SliceCols { x: Var, start: usize },
    GatherRows { x: Var, index: Vec<usize> },
    ScatterAddRows { x: Var, index: Vec<usize> },
    LeakyRelu { x: Var, slope: f64 },
    Elu(Var),
    Relu(Var),
    Sigmoid(Var),
    Log(Var),
    Dropout { x: Var, mask: Vec<f64> },
    Scale { x: Var, factor: f64 },
    SegmentSoftmax { x: Var, segments: Vec<usize> },
    Reshape(Var),
    Sum(Var),
    SumCols(Var),
}

/// Ordered record of executed primitives.
///
/// Nodes are appended in execution order, so every op's inputs precede it
/// and backward is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Tape {
    values: Vec<Array>,
    ops: Vec<Op>,
}

/// Gradients of a scalar with respect to every node of a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `var`, or `None` if the loss does not depend on it.
    pub fn get(&self, var: Var) -> Option<&Array> {
        self.grads[var.0].as_ref()
    }
}

fn check(cond: bool, op: &'static str, detail: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(RgatError::shape(op, detail()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, var: Var) -> &Array {
        &self.values[var.0]
    }

    fn shape(&self, var: Var) -> &[usize] {
        self.values[var.0].shape()
    }

    fn push(&mut self, value: Array, op: Op) -> Var {
        debug_assert!(value.is_finite(), "non-finite output from {op:?}");
        self.values.push(value);
        self.ops.push(op);
        Var(self.values.len() - 1)
    }

    /// Records the current value of a parameter as a leaf.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    /// Records a leaf that receives no parameter update.
    pub fn constant(&mut self, value: Array) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a . b^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let op = if transpose_b { "matmul_t" } else { "matmul" };
        check(av.shape().len() == 2 && bv.shape().len() == 2, op, || {
            format!("{:?} x {:?}", av.shape(), bv.shape())
        })?;
        let (m, k) = (av.shape()[0], av.shape()[1]);
        let (kb, n) = if transpose_b {
            (bv.shape()[1], bv.shape()[0])
        } else {
            (bv.shape()[0], bv.shape()[1])
        };
        check(k == kb, op, || format!("{:?} x {:?}", av.shape(), bv.shape()))?;
        let data = matmul_raw(av.data(), bv.data(), m, k, n, transpose_b);
        let value = Array::matrix(m, n, data)?;
        Ok(self.push(value, Op::MatMul { a, b, transpose_b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        check(self.shape(a) == self.shape(b), "add", || {
            format!("{:?} + {:?}", self.shape(a), self.shape(b))
        })?;
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        Ok(self.push(value, Op::Add(a, b)))
    }

    /// Elementwise product. `b` may also be a `[rows x 1]` column that is
    /// broadcast across the columns of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let broadcast_b = if av.shape() == bv.shape() {
            false
        } else if bv.cols() == 1 && bv.rows() == av.rows() && bv.shape().len() == av.shape().len()
        {
            true
        } else {
            return Err(RgatError::shape(
                "elementwise_mul",
                format!("{:?} * {:?}", av.shape(), bv.shape()),
            ));
        };
        let cols = av.cols();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(idx, &x)| {
                let y = if broadcast_b {
                    bv.data()[idx / cols]
                } else {
                    bv.data()[idx]
                };
                x * y
            })
            .collect();
        let value = Array::new(av.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Mul { a, b, broadcast_b }))
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        check(!parts.is_empty(), "concat_last_axis", || "no inputs".into())?;
        let rows = self.value(parts[0]).rows();
        let lead = self.shape(parts[0])[..self.shape(parts[0]).len().saturating_sub(1)].to_vec();
        for &p in parts {
            check(self.value(p).rows() == rows, "concat_last_axis", || {
                let shapes: Vec<_> = parts.iter().map(|&q| self.shape(q).to_vec()).collect();
                format!("row mismatch in {shapes:?}")
            })?;
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let mut shape = lead;
        shape.push(total);
        let value = Array::new(shape, data)?;
        Ok(self.push(value, Op::Concat(parts.to_vec())))
    }

    /// Columns `start..start + len` of the last axis.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let cols = xv.cols();
        check(start + len <= cols && len > 0, "slice_last_axis", || {
            format!("{start}..{} of {:?}", start + len, xv.shape())
        })?;
        let rows = xv.rows();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&xv.row(r)[start..start + len]);
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().expect("non-scalar") = len;
        let value = Array::new(shape, data)?;
        Ok(self.push(value, Op::SliceCols { x, start }))
    }

    /// Rows of a matrix selected by `index` (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        check(xv.shape().len() == 2, "gather_rows", || format!("{:?}", xv.shape()))?;
        let (rows, cols) = (xv.rows(), xv.cols());
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(RgatError::shape(
                "gather_rows",
                format!("row {bad} of {:?}", xv.shape()),
            ));
        }
        let mut data = Vec::with_capacity(index.len() * cols);
        for &i in index {
            data.extend_from_slice(xv.row(i));
        }
        let value = Array::matrix(index.len(), cols, data)?;
        Ok(self.push(
            value,
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
        ))
    }

    /// Sums row `i` of `x` into output row `index[i]`; output has `out_rows` rows.
    pub fn scatter_add_rows(&mut self, x: Var, index: &[usize], out_rows: usize) -> Result<Var> {
        let xv = self.value(x);
        check(
            xv.shape().len() == 2 && xv.rows() == index.len(),
            "scatter_add_rows",
            || format!("{:?} with {} indices", xv.shape(), index.len()),
        )?;
        if let Some(&bad) = index.iter().find(|&&i| i >= out_rows) {
            return Err(RgatError::shape(
                "scatter_add_rows",
                format!("target row {bad} >= {out_rows}"),
            ));
        }
        let cols = xv.cols();
        let mut data = vec![0.0; out_rows * cols];
        for (r, &t) in index.iter().enumerate() {
            for (o, v) in data[t * cols..(t + 1) * cols].iter_mut().zip(xv.row(r)) {
                *o += v;
            }
        }
        let value = Array::matrix(out_rows, cols, data)?;
        Ok(self.push(
            value,
            Op::ScatterAddRows {
                x,
                index: index.to_vec(),
            },
        ))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let value = self
            .value(x)
            .map(|v| if v > 0.0 { v } else { slope * v });
        self.push(value, Op::LeakyRelu { x, slope })
    }

    pub fn elu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > 0.0 { v } else { v.exp_m1() });
        self.push(value, Op::Elu(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(value, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        self.push(value, Op::Sigmoid(x))
    }

    /// Natural log with the input clamped at [`LOG_FLOOR`].
    pub fn log(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(LOG_FLOOR).ln());
        self.push(value, Op::Log(x))
    }

    /// Inverted dropout with a mask drawn from `seed`. The mask is kept for backward.
    pub fn dropout(&mut self, x: Var, rate: f64, seed: u64) -> Result<Var> {
        check((0.0..1.0).contains(&rate), "dropout", || format!("rate {rate}"))?;
        if rate == 0.0 {
            return Ok(x);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = 1.0 / (1.0 - rate);
        let xv = self.value(x);
        let mask: Vec<f64> = (0..xv.len())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let data = xv.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Array::new(xv.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Dropout { x, mask }))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x).map(|v| v * factor);
        self.push(value, Op::Scale { x, factor })
    }

    /// Softmax of the entries of `x` within groups sharing a segment id.
    /// `x` must hold one value per segment entry (shape `[n]` or `[n x 1]`).
    pub fn segment_softmax(&mut self, x: Var, segments: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        check(
            xv.len() == segments.len() && xv.cols() * xv.rows() == xv.len(),
            "segment_softmax",
            || format!("{:?} with {} segment ids", xv.shape(), segments.len()),
        )?;
        let value = Array::new(xv.shape().to_vec(), segment_softmax(xv.data(), segments))?;
        Ok(self.push(
            value,
            Op::SegmentSoftmax {
                x,
                segments: segments.to_vec(),
            },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape(x)))
    }

    /// Sum of all entries as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let value = Array::scalar(self.value(x).sum());
        self.push(value, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Sum over the last axis, keeping it with size 1.
    pub fn sum_cols(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = (0..xv.rows()).map(|r| xv.row(r).iter().sum()).collect();
        let mut shape = xv.shape().to_vec();
        match shape.last_mut() {
            Some(last) => *last = 1,
            None => shape.push(1),
        }
        let value = Array::new(shape, data).expect("row sums");
        self.push(value, Op::SumCols(x))
    }

    /// Gradients of the scalar `loss` w.r.t. every node.
    pub fn gradients(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        check(lv.len() == 1, "backward", || {
            format!("loss must be scalar, got {:?}", lv.shape())
        })?;
        let mut grads: Vec<Option<Array>> = vec![None; self.values.len()];
        grads[loss.0] = Some(Array::full(lv.shape(), 1.0));

        for node in (0..=loss.0).rev() {
            let Some(g) = grads[node].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[node] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Accumulates d(loss)/d(param) into the store for every parameter leaf.
    /// Parameters that do not reach the loss receive nothing (their gradient stays zero).
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.gradients(loss)?;
        for (node, op) in self.ops.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (op, &grads.grads[node]) {
                store.accumulate_grad(*id, g);
            }
        }
        Ok(())
    }

    fn propagate(&self, node: usize, g: &Array, grads: &mut [Option<Array>]) {
        let out = &self.values[node];
        let mut send = |target: Var, delta: Array| match &mut grads[target.0] {
            Some(existing) => existing.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        };
        let like = |v: Var, data: Vec<f64>| {
            Array::new(self.values[v.0].shape().to_vec(), data).expect("grad shape")
        };
        let unary = |x: Var, f: &dyn Fn(f64, f64, f64) -> f64| {
            let xv = &self.values[x.0];
            let data = xv
                .data()
                .iter()
                .zip(out.data())
                .zip(g.data())
                .map(|((&xi, &yi), &gi)| f(xi, yi, gi))
                .collect();
            like(x, data)
        };

        match &self.ops[node] {
            Op::Param(_) | Op::Constant => {}
            Op::MatMul { a, b, transpose_b } => {
                let (av, bv) = (&self.values[a.0], &self.values[b.0]);
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = out.shape()[1];
                // out = a . b        : da = g . b^T,  db = a^T . g
                // out = a . b^T      : da = g . b,    db = g^T . a
                let da = matmul_raw(g.data(), bv.data(), m, n, k, !transpose_b);
                let db = if *transpose_b {
                    matmul_ta_raw(g.data(), av.data(), m, n, k)
                } else {
                    matmul_ta_raw(av.data(), g.data(), m, k, n)
                };
                send(*a, like(*a, da));
                send(*b, like(*b, db));
            }
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Mul { a, b, broadcast_b } => {
                let (av, bv) = (&self.values[a.0], &self.values[b.0]);
                let cols = av.cols();
                if *broadcast_b {
                    let da = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, gi)| gi * bv.data()[i / cols])
                        .collect();
                    let mut db = vec![0.0; bv.len()];
                    for (i, (gi, ai)) in g.data().iter().zip(av.data()).enumerate() {
                        db[i / cols] += gi * ai;
                    }
                    send(*a, like(*a, da));
                    send(*b, like(*b, db));
                } else {
                    let da = g.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
                    let db = g.data().iter().zip(av.data()).map(|(x, y)| x * y).collect();
                    send(*a, like(*a, da));
                    send(*b, like(*b, db));
                }
            }
            Op::Concat(parts) => {
                let rows = out.rows();
                let total = out.cols();
                let mut offset = 0;
                for &p in parts {
                    let c = self.values[p.0].cols();
                    let mut data = Vec::with_capacity(rows * c);
                    for r in 0..rows {
                        data.extend_from_slice(&g.data()[r * total + offset..r * total + offset + c]);
                    }
                    send(p, like(p, data));
                    offset += c;
                }
            }
            Op::SliceCols { x, start } => {
                let xv = &self.values[x.0];
                let (cols, len) = (xv.cols(), out.cols());
                let mut data = vec![0.0; xv.len()];
                for r in 0..xv.rows() {
                    data[r * cols + start..r * cols + start + len]
                        .copy_from_slice(&g.data()[r * len..(r + 1) * len]);
                }
                send(*x, like(*x, data));
            }
            Op::GatherRows { x, index } => {
                let xv = &self.values[x.0];
                let cols = xv.cols();
                let mut data = vec![0.0; xv.len()];
                for (r, &i) in index.iter().enumerate() {
                    for (d, gv) in data[i * cols..(i + 1) * cols]
                        .iter_mut()
                        .zip(&g.data()[r * cols..(r + 1) * cols])
                    {
                        *d += gv;
                    }
                }
                send(*x, like(*x, data));
            }
            Op::ScatterAddRows { x, index } => {
                let cols = out.cols();
                let mut data = Vec::with_capacity(index.len() * cols);
                for &t in index {
                    data.extend_from_slice(&g.data()[t * cols..(t + 1) * cols]);
                }
                send(*x, like(*x, data));
            }
            Op::LeakyRelu { x, slope } => {
                let s = *slope;
                send(*x, unary(*x, &|xi, _, gi| if xi > 0.0 { gi } else { s * gi }));
            }
            Op::Elu(x) => send(*x, unary(*x, &|xi, yi, gi| if xi > 0.0 { gi } else { gi * (yi + 1.0) })),
            Op::Relu(x) => send(*x, unary(*x, &|xi, _, gi| if xi > 0.0 { gi } else { 0.0 })),
            Op::Sigmoid(x) => send(*x, unary(*x, &|_, yi, gi| gi * yi * (1.0 - yi))),
            Op::Log(x) => send(
                *x,
                unary(*x, &|xi, _, gi| if xi > LOG_FLOOR { gi / xi } else { 0.0 }),
            ),
            Op::Dropout { x, mask } => {
                let data = g.data().iter().zip(mask).map(|(a, b)| a * b).collect();
                send(*x, like(*x, data));
            }
            Op::Scale { x, factor } => {
                let f = *factor;
                send(*x, g.map(|v| v * f));
            }
            Op::SegmentSoftmax { x, segments } => {
                let n_seg = segments.iter().max().map_or(0, |m| m + 1);
                let mut dot = vec![0.0; n_seg];
                for ((&s, &y), &gi) in segments.iter().zip(out.data()).zip(g.data()) {
                    dot[s] += y * gi;
                }
                let data = segments
                    .iter()
                    .zip(out.data())
                    .zip(g.data())
                    .map(|((&s, &y), &gi)| y * (gi - dot[s]))
                    .collect();
                send(*x, like(*x, data));
            }
            Op::Reshape(x) => send(*x, like(*x, g.data().to_vec())),
            Op::Sum(x) => {
                let n = self.values[x.0].len();
                send(*x, like(*x, vec![g.item(); n]));
            }
            Op::SumCols(x) => {
                let xv = &self.values[x.0];
                let cols = xv.cols();
                let data = (0..xv.len()).map(|i| g.data()[i / cols]).collect();
                send(*x, like(*x, data));
            }
        }
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

/// Max-subtracted softmax within each segment.
pub fn segment_softmax(x: &[f64], segments: &[usize]) -> Vec<f64> {
    let n_seg = segments.iter().max().map_or(0, |m| m + 1);
    let mut max = vec![f64::NEG_INFINITY; n_seg];
    for (&s, &v) in segments.iter().zip(x) {
        max[s] = max[s].max(v);
    }
    let mut denom = vec![0.0; n_seg];
    let exps: Vec<f64> = segments
        .iter()
        .zip(x)
        .map(|(&s, &v)| {
            let e = (v - max[s]).exp();
            denom[s] += e;
            e
        })
        .collect();
    exps.iter()
        .zip(segments)
        .map(|(e, &s)| e / denom[s])
        .collect()
}
