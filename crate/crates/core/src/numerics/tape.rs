//! Reverse-mode differentiation over [`Tensor2`] values.
//!
//! Every primitive writes its result into a new value slot and, while the
//! tape is recording, appends one [`Op`] naming its operand slots. Backward
//! replays the op list in exact reverse order, accumulating into fresh
//! zero-initialised gradient buffers.

use std::borrow::Cow;

use super::tensor::{gemm, Layout, Tensor2};
use super::NumericsError;

/// Handle to a value stored on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Slot(usize);

impl Slot {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    MatMul { a: Slot, b: Slot, b_t: bool },
    Add { a: Slot, b: Slot },
    AddRow { a: Slot, row: Slot },
    Mul { a: Slot, b: Slot },
    Scale { a: Slot, factor: f64 },
    AddScaledConst { a: Slot, s: Slot, c: Tensor2, coef: f64 },
    Softmax { a: Slot },
    Silu { a: Slot },
    Softplus { a: Slot },
    LayerNorm { a: Slot, gain: Slot, bias: Slot, xhat: Tensor2, inv_std: Vec<f64> },
    SliceRows { a: Slot, start: usize },
    SliceCols { a: Slot, start: usize },
    ConcatCols { parts: Vec<Slot> },
    AddIntoRows { a: Slot, b: Slot, start: usize },
    Rope { a: Slot, rot: Rotation },
    Sum { a: Slot },
    Mse { pred: Slot, target: Tensor2 },
}

impl Op {
    fn inputs(&self) -> Vec<Slot> {
        match self {
            Op::MatMul { a, b, .. }
            | Op::Add { a, b }
            | Op::Mul { a, b }
            | Op::AddIntoRows { a, b, .. } => vec![*a, *b],
            Op::AddRow { a, row } => vec![*a, *row],
            Op::AddScaledConst { a, s, .. } => vec![*a, *s],
            Op::LayerNorm { a, gain, bias, .. } => vec![*a, *gain, *bias],
            Op::ConcatCols { parts } => parts.clone(),
            Op::Mse { pred, .. } => vec![*pred],
            Op::Scale { a, .. }
            | Op::Softmax { a }
            | Op::Silu { a }
            | Op::Softplus { a }
            | Op::SliceRows { a, .. }
            | Op::SliceCols { a, .. }
            | Op::Rope { a, .. }
            | Op::Sum { a } => vec![*a],
        }
    }
}

/// Per-row rotation angles for the 2-D rotary encoding.
#[derive(Debug, Clone)]
struct Rotation {
    n_heads: usize,
    pairs: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

/// Recording of a differentiable computation.
///
/// Values borrowed with [`Tape::param`] are not copied, so one set of model
/// parameters can back many concurrent tapes.
pub struct Tape<'p> {
    values: Vec<Cow<'p, Tensor2>>,
    needs_grad: Vec<bool>,
    ops: Vec<(Op, Slot)>,
    recording: bool,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            needs_grad: Vec::new(),
            ops: Vec::new(),
            recording: true,
        }
    }

    /// A tape that evaluates values only; `backward` yields zero gradients.
    pub fn inference() -> Self {
        Self {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Number of recorded primitive operations.
    pub fn op_count(&self) -> usize {
        self.ops.len()
    }

    fn push(&mut self, value: Cow<'p, Tensor2>, grad: bool) -> Slot {
        self.values.push(value);
        self.needs_grad.push(grad && self.recording);
        Slot(self.values.len() - 1)
    }

    fn record(&mut self, op: Op, value: Tensor2) -> Slot {
        let grad = self.recording && op.inputs().iter().any(|s| self.needs_grad[s.0]);
        let out = self.push(Cow::Owned(value), grad);
        if grad {
            self.ops.push((op, out));
        }
        out
    }

    /// Differentiable input owned by the tape.
    pub fn leaf(&mut self, value: Tensor2) -> Slot {
        self.push(Cow::Owned(value), true)
    }

    /// Differentiable input borrowed from the caller.
    pub fn param(&mut self, value: &'p Tensor2) -> Slot {
        self.push(Cow::Borrowed(value), true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor2) -> Slot {
        self.push(Cow::Owned(value), false)
    }

    pub fn value(&self, slot: Slot) -> &Tensor2 {
        &self.values[slot.0]
    }

    fn shape(&self, slot: Slot) -> (usize, usize) {
        self.values[slot.0].shape()
    }

    fn shape_err(&self, op: &'static str, a: Slot, b: Slot) -> NumericsError {
        NumericsError::Shape {
            op,
            left: self.shape(a),
            right: self.shape(b),
        }
    }

    pub fn matmul(&mut self, a: Slot, b: Slot) -> Result<Slot, NumericsError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.rows() {
            return Err(self.shape_err("matmul", a, b));
        }
        let mut out = Tensor2::zeros(av.rows(), bv.cols());
        gemm(Layout::of(av, false), Layout::of(bv, false), &mut out, false);
        Ok(self.record(Op::MatMul { a, b, b_t: false }, out))
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Slot, b: Slot) -> Result<Slot, NumericsError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.cols() {
            return Err(self.shape_err("matmul_bt", a, b));
        }
        let mut out = Tensor2::zeros(av.rows(), bv.rows());
        gemm(Layout::of(av, false), Layout::of(bv, true), &mut out, false);
        Ok(self.record(Op::MatMul { a, b, b_t: true }, out))
    }

    pub fn add(&mut self, a: Slot, b: Slot) -> Result<Slot, NumericsError> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err("add", a, b));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        Ok(self.record(Op::Add { a, b }, out))
    }

    /// Adds a `1 × cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Slot, row: Slot) -> Result<Slot, NumericsError> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.rows() != 1 || rv.cols() != av.cols() {
            return Err(self.shape_err("add_row", a, row));
        }
        let mut out = av.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(rv.data()) {
                *o += b;
            }
        }
        Ok(self.record(Op::AddRow { a, row }, out))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Slot, b: Slot) -> Result<Slot, NumericsError> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err("mul", a, b));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let out = Tensor2::from_vec(av.rows(), av.cols(), data)?;
        Ok(self.record(Op::Mul { a, b }, out))
    }

    pub fn scale(&mut self, a: Slot, factor: f64) -> Slot {
        let out = self.value(a).map(|v| v * factor);
        self.record(Op::Scale { a, factor }, out)
    }

    /// `a + coef · s · c` where `s` is a 1×1 slot and `c` a constant.
    pub fn add_scaled_const(
        &mut self,
        a: Slot,
        s: Slot,
        c: &Tensor2,
        coef: f64,
    ) -> Result<Slot, NumericsError> {
        let sv = self.value(s).item().ok_or(NumericsError::Contract(
            "add_scaled_const: scale slot must be 1x1".into(),
        ))?;
        let av = self.value(a);
        if av.shape() != c.shape() {
            return Err(NumericsError::Shape {
                op: "add_scaled_const",
                left: av.shape(),
                right: c.shape(),
            });
        }
        let k = coef * sv;
        let data = av.data().iter().zip(c.data()).map(|(x, y)| x + k * y).collect();
        let out = Tensor2::from_vec(av.rows(), av.cols(), data)?;
        Ok(self.record(
            Op::AddScaledConst {
                a,
                s,
                c: c.clone(),
                coef,
            },
            out,
        ))
    }

    pub fn softmax_rows(&mut self, a: Slot) -> Slot {
        let out = softmax_rows(self.value(a));
        self.record(Op::Softmax { a }, out)
    }

    /// `x · σ(x)`.
    pub fn silu(&mut self, a: Slot) -> Slot {
        let out = self.value(a).map(|x| x * sigmoid(x));
        self.record(Op::Silu { a }, out)
    }

    pub fn softplus(&mut self, a: Slot) -> Slot {
        let out = self.value(a).map(softplus);
        self.record(Op::Softplus { a }, out)
    }

    /// Row-wise layer normalisation with learned `gain` and `bias` rows.
    pub fn layer_norm(
        &mut self,
        a: Slot,
        gain: Slot,
        bias: Slot,
        eps: f64,
    ) -> Result<Slot, NumericsError> {
        let (av, gv, bv) = (self.value(a), self.value(gain), self.value(bias));
        let c = av.cols();
        if gv.shape() != (1, c) || bv.shape() != (1, c) {
            return Err(self.shape_err("layer_norm", a, gain));
        }
        let mut xhat = Tensor2::zeros(av.rows(), c);
        let mut out = Tensor2::zeros(av.rows(), c);
        let mut inv_std = Vec::with_capacity(av.rows());
        for r in 0..av.rows() {
            let row = av.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat.set(r, j, h);
                out.set(r, j, h * gv.data()[j] + bv.data()[j]);
            }
        }
        Ok(self.record(
            Op::LayerNorm {
                a,
                gain,
                bias,
                xhat,
                inv_std,
            },
            out,
        ))
    }

    pub fn slice_rows(&mut self, a: Slot, start: usize, len: usize) -> Result<Slot, NumericsError> {
        let av = self.value(a);
        if start + len > av.rows() {
            return Err(NumericsError::Contract(format!(
                "slice_rows {start}..{} out of bounds for {:?}",
                start + len,
                av.shape()
            )));
        }
        let c = av.cols();
        let out = Tensor2::from_vec(len, c, av.data()[start * c..(start + len) * c].to_vec())?;
        Ok(self.record(Op::SliceRows { a, start }, out))
    }

    pub fn slice_cols(&mut self, a: Slot, start: usize, len: usize) -> Result<Slot, NumericsError> {
        let av = self.value(a);
        if start + len > av.cols() {
            return Err(NumericsError::Contract(format!(
                "slice_cols {start}..{} out of bounds for {:?}",
                start + len,
                av.shape()
            )));
        }
        let mut out = Tensor2::zeros(av.rows(), len);
        for r in 0..av.rows() {
            out.row_mut(r).copy_from_slice(&av.row(r)[start..start + len]);
        }
        Ok(self.record(Op::SliceCols { a, start }, out))
    }

    pub fn concat_cols(&mut self, parts: &[Slot]) -> Result<Slot, NumericsError> {
        let rows = parts
            .first()
            .map(|&s| self.shape(s).0)
            .ok_or_else(|| NumericsError::Contract("concat_cols of nothing".into()))?;
        if let Some(&bad) = parts.iter().find(|&&s| self.shape(s).0 != rows) {
            return Err(self.shape_err("concat_cols", parts[0], bad));
        }
        let cols: usize = parts.iter().map(|&s| self.shape(s).1).sum();
        let mut out = Tensor2::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let pv = self.value(p);
            for r in 0..rows {
                out.row_mut(r)[offset..offset + pv.cols()].copy_from_slice(pv.row(r));
            }
            offset += pv.cols();
        }
        Ok(self.record(
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            out,
        ))
    }

    /// Returns `a` with `b` added onto rows `start..start + b.rows`.
    pub fn add_into_rows(&mut self, a: Slot, b: Slot, start: usize) -> Result<Slot, NumericsError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.cols() || start + bv.rows() > av.rows() {
            return Err(self.shape_err("add_into_rows", a, b));
        }
        let mut out = av.clone();
        let c = av.cols();
        for (o, x) in out.data_mut()[start * c..(start + bv.rows()) * c]
            .iter_mut()
            .zip(bv.data())
        {
            *o += x;
        }
        Ok(self.record(Op::AddIntoRows { a, b, start }, out))
    }

    /// 2-D rotary encoding applied independently to each of `n_heads`
    /// column blocks. Within a head of width `dh` there are `dh/2` rotation
    /// pairs; the first half turn by `θ_f·u`, the second half by `θ_f·v`,
    /// with `θ_f = base^(−2f/(dh/2))`.
    pub fn rope2d(
        &mut self,
        a: Slot,
        coords: &[(f64, f64)],
        n_heads: usize,
        base: f64,
    ) -> Result<Slot, NumericsError> {
        let av = self.value(a);
        if n_heads == 0 || !av.cols().is_multiple_of(n_heads) {
            return Err(NumericsError::Contract(format!(
                "rope2d: {} columns do not split into {n_heads} heads",
                av.cols()
            )));
        }
        let dh = av.cols() / n_heads;
        if !dh.is_multiple_of(4) {
            return Err(NumericsError::Contract(format!(
                "rope2d: head width {dh} must be divisible by 4"
            )));
        }
        if coords.len() != av.rows() {
            return Err(NumericsError::Contract(format!(
                "rope2d: {} coordinates for {} rows",
                coords.len(),
                av.rows()
            )));
        }
        let rot = rotation(coords, dh, n_heads, base);
        let out = apply_rotation(av, &rot, false);
        Ok(self.record(Op::Rope { a, rot }, out))
    }

    pub fn sum(&mut self, a: Slot) -> Slot {
        let out = Tensor2::scalar(self.value(a).sum());
        self.record(Op::Sum { a }, out)
    }

    /// Mean squared error against a constant target of the same shape.
    pub fn mse(&mut self, pred: Slot, target: &Tensor2) -> Result<Slot, NumericsError> {
        let pv = self.value(pred);
        if pv.shape() != target.shape() || pv.is_empty() {
            return Err(NumericsError::Shape {
                op: "mse",
                left: pv.shape(),
                right: target.shape(),
            });
        }
        let n = pv.len() as f64;
        let loss = pv
            .data()
            .iter()
            .zip(target.data())
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>()
            / n;
        Ok(self.record(
            Op::Mse {
                pred,
                target: target.clone(),
            },
            Tensor2::scalar(loss),
        ))
    }

    /// Computes ∂loss/∂slot for every slot on the tape.
    pub fn backward(&self, loss: Slot) -> Result<Gradients, NumericsError> {
        if self.value(loss).shape() != (1, 1) {
            return Err(NumericsError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor2>> = vec![None; self.values.len()];
        grads[loss.0] = Some(Tensor2::scalar(1.0));
        for (op, out) in self.ops.iter().rev() {
            let Some(g) = grads[out.0].take() else {
                continue;
            };
            self.backprop_op(op, *out, &g, &mut grads);
            grads[out.0] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, s: Slot) -> bool {
        self.needs_grad[s.0]
    }

    fn backprop_op(&self, op: &Op, out: Slot, g: &Tensor2, grads: &mut [Option<Tensor2>]) {
        match op {
            Op::MatMul { a, b, b_t } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    // out = A·op(B): dA = G·op(B)ᵀ
                    let ga = buffer(grads, *a, av.shape());
                    gemm(Layout::of(g, false), Layout::of(bv, !*b_t), ga, true);
                }
                if self.wants(*b) {
                    let gb = buffer(grads, *b, bv.shape());
                    if *b_t {
                        // out = A·Bᵀ: dB = Gᵀ·A
                        gemm(Layout::of(g, true), Layout::of(av, false), gb, true);
                    } else {
                        gemm(Layout::of(av, true), Layout::of(g, false), gb, true);
                    }
                }
            }
            Op::Add { a, b } => {
                for s in [*a, *b] {
                    if self.wants(s) {
                        buffer(grads, s, g.shape()).add_assign(g);
                    }
                }
            }
            Op::AddRow { a, row } => {
                if self.wants(*a) {
                    buffer(grads, *a, g.shape()).add_assign(g);
                }
                if self.wants(*row) {
                    let gr = buffer(grads, *row, (1, g.cols()));
                    for r in 0..g.rows() {
                        for (o, x) in gr.data_mut().iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                for (s, other) in [(*a, bv), (*b, av)] {
                    if self.wants(s) {
                        let gs = buffer(grads, s, g.shape());
                        for ((o, x), y) in gs.data_mut().iter_mut().zip(g.data()).zip(other.data()) {
                            *o += x * y;
                        }
                    }
                }
            }
            Op::Scale { a, factor } => {
                if self.wants(*a) {
                    let ga = buffer(grads, *a, g.shape());
                    for (o, x) in ga.data_mut().iter_mut().zip(g.data()) {
                        *o += factor * x;
                    }
                }
            }
            Op::AddScaledConst { a, s, c, coef } => {
                if self.wants(*a) {
                    buffer(grads, *a, g.shape()).add_assign(g);
                }
                if self.wants(*s) {
                    let dot: f64 = g.data().iter().zip(c.data()).map(|(x, y)| x * y).sum();
                    buffer(grads, *s, (1, 1)).data_mut()[0] += coef * dot;
                }
            }
            Op::Softmax { a } => {
                if self.wants(*a) {
                    let y = self.value(out);
                    let ga = buffer(grads, *a, g.shape());
                    for r in 0..g.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for ((o, p), q) in ga.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *o += p * (q - dot);
                        }
                    }
                }
            }
            Op::Silu { a } => {
                if self.wants(*a) {
                    let av = self.value(*a);
                    let ga = buffer(grads, *a, g.shape());
                    for ((o, &x), q) in ga.data_mut().iter_mut().zip(av.data()).zip(g.data()) {
                        let s = sigmoid(x);
                        *o += q * (s + x * s * (1.0 - s));
                    }
                }
            }
            Op::Softplus { a } => {
                if self.wants(*a) {
                    let av = self.value(*a);
                    let ga = buffer(grads, *a, g.shape());
                    for ((o, &x), q) in ga.data_mut().iter_mut().zip(av.data()).zip(g.data()) {
                        *o += q * sigmoid(x);
                    }
                }
            }
            Op::LayerNorm {
                a,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let c = g.cols();
                let gv = self.value(*gain);
                if self.wants(*gain) {
                    let gg = buffer(grads, *gain, (1, c));
                    for r in 0..g.rows() {
                        for j in 0..c {
                            gg.data_mut()[j] += g.get(r, j) * xhat.get(r, j);
                        }
                    }
                }
                if self.wants(*bias) {
                    let gb = buffer(grads, *bias, (1, c));
                    for r in 0..g.rows() {
                        for (o, x) in gb.data_mut().iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                }
                if self.wants(*a) {
                    let ga = buffer(grads, *a, g.shape());
                    let n = c as f64;
                    for r in 0..g.rows() {
                        let dh: Vec<f64> = (0..c).map(|j| g.get(r, j) * gv.data()[j]).collect();
                        let mean_dh = dh.iter().sum::<f64>() / n;
                        let mean_dh_h =
                            dh.iter().zip(xhat.row(r)).map(|(d, h)| d * h).sum::<f64>() / n;
                        for j in 0..c {
                            ga.row_mut(r)[j] +=
                                inv_std[r] * (dh[j] - mean_dh - xhat.get(r, j) * mean_dh_h);
                        }
                    }
                }
            }
            Op::SliceRows { a, start } => {
                if self.wants(*a) {
                    let shape = self.shape(*a);
                    let ga = buffer(grads, *a, shape);
                    let c = shape.1;
                    for (o, x) in ga.data_mut()[start * c..(start + g.rows()) * c]
                        .iter_mut()
                        .zip(g.data())
                    {
                        *o += x;
                    }
                }
            }
            Op::SliceCols { a, start } => {
                if self.wants(*a) {
                    let shape = self.shape(*a);
                    let ga = buffer(grads, *a, shape);
                    for r in 0..g.rows() {
                        for (o, x) in ga.row_mut(r)[*start..start + g.cols()].iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                }
            }
            Op::ConcatCols { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let shape = self.shape(p);
                    if self.wants(p) {
                        let gp = buffer(grads, p, shape);
                        for r in 0..g.rows() {
                            for (o, x) in gp.row_mut(r).iter_mut().zip(&g.row(r)[offset..offset + shape.1]) {
                                *o += x;
                            }
                        }
                    }
                    offset += shape.1;
                }
            }
            Op::AddIntoRows { a, b, start } => {
                if self.wants(*a) {
                    buffer(grads, *a, g.shape()).add_assign(g);
                }
                if self.wants(*b) {
                    let shape = self.shape(*b);
                    let c = shape.1;
                    let gb = buffer(grads, *b, shape);
                    for (o, x) in gb
                        .data_mut()
                        .iter_mut()
                        .zip(&g.data()[start * c..(start + shape.0) * c])
                    {
                        *o += x;
                    }
                }
            }
            Op::Rope { a, rot } => {
                if self.wants(*a) {
                    let back = apply_rotation(g, rot, true);
                    buffer(grads, *a, g.shape()).add_assign(&back);
                }
            }
            Op::Sum { a } => {
                if self.wants(*a) {
                    let shape = self.shape(*a);
                    let k = g.data()[0];
                    for o in buffer(grads, *a, shape).data_mut() {
                        *o += k;
                    }
                }
            }
            Op::Mse { pred, target } => {
                if self.wants(*pred) {
                    let pv = self.value(*pred);
                    let k = 2.0 * g.data()[0] / pv.len() as f64;
                    let gp = buffer(grads, *pred, pv.shape());
                    for ((o, p), t) in gp.data_mut().iter_mut().zip(pv.data()).zip(target.data()) {
                        *o += k * (p - t);
                    }
                }
            }
        }
    }
}

fn buffer(grads: &mut [Option<Tensor2>], s: Slot, shape: (usize, usize)) -> &mut Tensor2 {
    grads[s.0].get_or_insert_with(|| Tensor2::zeros(shape.0, shape.1))
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor2>>,
}

impl Gradients {
    /// Gradient for `slot`, or `None` when the loss does not depend on it.
    pub fn get(&self, slot: Slot) -> Option<&Tensor2> {
        self.grads.get(slot.0).and_then(Option::as_ref)
    }

    /// Gradient for `slot`, materialising zeros of `shape` when absent.
    pub fn get_or_zeros(&self, slot: Slot, shape: (usize, usize)) -> Tensor2 {
        self.get(slot)
            .cloned()
            .unwrap_or_else(|| Tensor2::zeros(shape.0, shape.1))
    }

    pub fn take(&mut self, slot: Slot) -> Option<Tensor2> {
        self.grads.get_mut(slot.0).and_then(Option::take)
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for positive `y`.
pub fn softplus_inverse(y: f64) -> f64 {
    if y > 30.0 {
        y + (-(-y).exp_m1()).ln()
    } else {
        y.exp_m1().ln()
    }
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows(x: &Tensor2) -> Tensor2 {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

fn rotation(coords: &[(f64, f64)], head_dim: usize, n_heads: usize, base: f64) -> Rotation {
    let pairs = head_dim / 2;
    let per_axis = pairs / 2;
    let freqs: Vec<f64> = (0..per_axis)
        .map(|f| base.powf(-2.0 * f as f64 / pairs as f64))
        .collect();
    let mut cos = Vec::with_capacity(coords.len() * pairs);
    let mut sin = Vec::with_capacity(coords.len() * pairs);
    for &(u, v) in coords {
        for axis in [u, v] {
            for &theta in &freqs {
                let (s, c) = (theta * axis).sin_cos();
                cos.push(c);
                sin.push(s);
            }
        }
    }
    Rotation {
        n_heads,
        pairs,
        cos,
        sin,
    }
}

fn apply_rotation(x: &Tensor2, rot: &Rotation, inverse: bool) -> Tensor2 {
    let mut out = x.clone();
    let dh = 2 * rot.pairs;
    let sign = if inverse { -1.0 } else { 1.0 };
    for r in 0..x.rows() {
        let (cs, sn) = (
            &rot.cos[r * rot.pairs..(r + 1) * rot.pairs],
            &rot.sin[r * rot.pairs..(r + 1) * rot.pairs],
        );
        let row = out.row_mut(r);
        for h in 0..rot.n_heads {
            for k in 0..rot.pairs {
                let i = h * dh + 2 * k;
                let (a, b) = (row[i], row[i + 1]);
                let (c, s) = (cs[k], sign * sn[k]);
                row[i] = a * c - b * s;
                row[i + 1] = a * s + b * c;
            }
        }
    }
    out
}
