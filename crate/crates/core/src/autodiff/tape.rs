use super::ops::{self, binary_shape, ElementwiseOp};
use super::{AutodiffError, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf { tracked: bool },
    Binary(ElementwiseOp, Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Scale(Var, f64),
    MulConst(Var, Tensor),
    Conv2d { input: Var, kernel: Var, bias: Option<Var> },
    ConcatChannels(Vec<Var>),
    SliceChannels { input: Var, start: usize },
    GatherRows { input: Var, rows: Vec<usize> },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Records operations in execution order for reverse-mode differentiation.
///
/// Nodes are appended as operations run, so every input precedes the node that
/// consumes it. [`Tape::backward`] walks the list once in reverse and adds the
/// resulting gradients into per-leaf accumulators that persist until
/// [`Tape::zero_grads`].
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Tensor>>,
    checked: bool,
}

fn accumulate(slot: &mut Option<Vec<f64>>, contribution: &[f64]) {
    match slot {
        Some(acc) => {
            for (a, &c) in acc.iter_mut().zip(contribution) {
                *a += c;
            }
        }
        None => *slot = Some(contribution.to_vec()),
    }
}

fn accumulate_scaled(slot: &mut Option<Vec<f64>>, contribution: &[f64], scale: f64) {
    match slot {
        Some(acc) => {
            for (a, &c) in acc.iter_mut().zip(contribution) {
                *a += c * scale;
            }
        }
        None => *slot = Some(contribution.iter().map(|&c| c * scale).collect()),
    }
}

/// Reduces a gradient to a scalar slot when the operand was broadcast.
fn accumulate_operand(slot: &mut Option<Vec<f64>>, operand: &Tensor, grad: Vec<f64>) {
    if operand.is_scalar() && grad.len() != 1 {
        let s: f64 = grad.iter().sum();
        accumulate(slot, &[s]);
    } else {
        match slot {
            Some(acc) => {
                for (a, c) in acc.iter_mut().zip(grad) {
                    *a += c;
                }
            }
            None => *slot = Some(grad),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape that rejects any operation producing a non-finite value.
    pub fn checked() -> Self {
        Tape {
            checked: true,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var, AutodiffError> {
        if self.checked {
            value.check_finite("forward value")?;
        }
        self.nodes.push(Node { value, op });
        self.leaf_grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a value whose gradient is accumulated by [`Tape::backward`].
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf { tracked: true },
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Records a value that takes no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf { tracked: false },
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a tracked leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.leaf_grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn zero_grads(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    pub fn elementwise(&mut self, op: ElementwiseOp, a: Var, b: Option<Var>) -> Result<Var, AutodiffError> {
        let value = ops::elementwise(op, self.value(a), b.map(|b| self.value(b)))?;
        let node = match (op, b) {
            (ElementwiseOp::Sigmoid, _) => Op::Sigmoid(a),
            (ElementwiseOp::Tanh, _) => Op::Tanh(a),
            (_, Some(b)) => Op::Binary(op, a, b),
            (_, None) => unreachable!("binary op validated by ops::elementwise"),
        };
        self.push(value, node)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.elementwise(ElementwiseOp::Add, a, Some(b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.elementwise(ElementwiseOp::Sub, a, Some(b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.elementwise(ElementwiseOp::Mul, a, Some(b))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.elementwise(ElementwiseOp::Sigmoid, a, None)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.elementwise(ElementwiseOp::Tanh, a, None)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var, AutodiffError> {
        let value = self.value(a).map(|x| x * factor);
        self.push(value, Op::Scale(a, factor))
    }

    /// Hadamard product with a constant tensor of the same shape.
    pub fn mul_const(&mut self, a: Var, weights: Tensor) -> Result<Var, AutodiffError> {
        let x = self.value(a);
        binary_shape("mul_const", x, &weights)?;
        if x.shape() != weights.shape() {
            return Err(AutodiffError::ShapeMismatch {
                op: "mul_const",
                left: x.shape().to_vec(),
                right: weights.shape().to_vec(),
            });
        }
        let value = ops::elementwise(ElementwiseOp::Mul, x, Some(&weights))?;
        self.push(value, Op::MulConst(a, weights))
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>) -> Result<Var, AutodiffError> {
        let value = ops::conv2d(self.value(input), self.value(kernel), bias.map(|b| self.value(b)))?;
        self.push(value, Op::Conv2d { input, kernel, bias })
    }

    /// Concatenates tensors along their last axis; leading axes must agree.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        let first = *parts.first().ok_or(AutodiffError::Empty("concat"))?;
        let lead = self.shape(first)[..self.shape(first).len() - 1].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != lead.len() + 1 || s[..lead.len()] != lead[..] {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat",
                    left: self.shape(first).to_vec(),
                    right: s.to_vec(),
                });
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let positions: usize = lead.iter().product();
        let mut data = Vec::with_capacity(positions * total);
        for pos in 0..positions {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[pos * w..(pos + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let value = Tensor::new(shape, data)?;
        self.push(value, Op::ConcatChannels(parts.to_vec()))
    }

    /// Channels `start..start + len` of the last axis.
    pub fn slice_channels(&mut self, input: Var, start: usize, len: usize) -> Result<Var, AutodiffError> {
        let s = self.shape(input).to_vec();
        let width = *s.last().ok_or(AutodiffError::Empty("slice of scalar"))?;
        if len == 0 || start + len > width {
            return Err(AutodiffError::InvalidIndex {
                op: "slice_channels",
                index: start + len,
                bound: width,
            });
        }
        let data: Vec<f64> = self
            .value(input)
            .data()
            .chunks_exact(width)
            .flat_map(|px| px[start..start + len].iter().copied())
            .collect();
        let mut shape = s;
        *shape.last_mut().unwrap() = len;
        let value = Tensor::new(shape, data)?;
        self.push(value, Op::SliceChannels { input, start })
    }

    /// Views `input` as `[N, C]` (C = last axis) and selects rows; result is
    /// `[rows.len(), C]`. Rows may repeat.
    pub fn gather_rows(&mut self, input: Var, rows: &[usize]) -> Result<Var, AutodiffError> {
        let x = self.value(input);
        let width = *x.shape().last().ok_or(AutodiffError::Empty("gather of scalar"))?;
        let n = x.len() / width;
        if rows.is_empty() {
            return Err(AutodiffError::Empty("gather"));
        }
        let mut data = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            if r >= n {
                return Err(AutodiffError::InvalidIndex {
                    op: "gather_rows",
                    index: r,
                    bound: n,
                });
            }
            data.extend_from_slice(&x.data()[r * width..(r + 1) * width]);
        }
        let value = Tensor::new(vec![rows.len(), width], data)?;
        self.push(
            value,
            Op::GatherRows {
                input,
                rows: rows.to_vec(),
            },
        )
    }

    pub fn reshape(&mut self, input: Var, shape: Vec<usize>) -> Result<Var, AutodiffError> {
        let value = self.value(input).clone().reshape(shape)?;
        self.push(value, Op::Reshape(input))
    }

    pub fn sum(&mut self, input: Var) -> Result<Var, AutodiffError> {
        let s = self.value(input).sum();
        self.push(Tensor::scalar(s), Op::Sum(input))
    }

    pub fn mean(&mut self, input: Var) -> Result<Var, AutodiffError> {
        let x = self.value(input);
        let m = x.sum() / x.len() as f64;
        self.push(Tensor::scalar(m), Op::Mean(input))
    }

    /// `sum(x ⊙ x)`.
    pub fn sum_squares(&mut self, input: Var) -> Result<Var, AutodiffError> {
        let sq = self.mul(input, input)?;
        self.sum(sq)
    }

    /// Back-propagates from a scalar `loss`, adding `∂loss/∂leaf` into every
    /// tracked leaf's gradient accumulator.
    pub fn backward(&mut self, loss: Var) -> Result<(), AutodiffError> {
        if self.nodes.is_empty() {
            return Err(AutodiffError::EmptyTape);
        }
        let loss_value = &self.nodes[loss.0].value;
        if !loss_value.is_scalar() {
            return Err(AutodiffError::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(g) = adj[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf { tracked } => {
                    if *tracked {
                        if self.checked {
                            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                                return Err(AutodiffError::NonFinite {
                                    what: "gradient",
                                    index: i,
                                    value: g[i],
                                });
                            }
                        }
                        let shape = node.value.shape().to_vec();
                        match &mut self.leaf_grads[id] {
                            Some(acc) => {
                                for (a, c) in acc.data_mut().iter_mut().zip(&g) {
                                    *a += c;
                                }
                            }
                            slot @ None => *slot = Some(Tensor::new(shape, g)?),
                        }
                    }
                }
                Op::Binary(kind, a, b) => {
                    let (a, b) = (*a, *b);
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    let (ga, gb): (Vec<f64>, Vec<f64>) = match kind {
                        ElementwiseOp::Add => (g.clone(), g),
                        ElementwiseOp::Sub => (g.clone(), g.iter().map(|v| -v).collect()),
                        _ => {
                            let expand = |t: &Tensor, i: usize| {
                                if t.is_scalar() {
                                    t.item()
                                } else {
                                    t.data()[i]
                                }
                            };
                            let ga = g.iter().enumerate().map(|(i, &v)| v * expand(bv, i)).collect();
                            let gb = g.iter().enumerate().map(|(i, &v)| v * expand(av, i)).collect();
                            (ga, gb)
                        }
                    };
                    accumulate_operand(&mut adj[a.0], av, ga);
                    accumulate_operand(&mut adj[b.0], bv, gb);
                }
                Op::Sigmoid(a) => {
                    let y = node.value.data();
                    let ga: Vec<f64> = g.iter().zip(y).map(|(&gv, &s)| gv * s * (1.0 - s)).collect();
                    accumulate(&mut adj[a.0], &ga);
                }
                Op::Tanh(a) => {
                    let y = node.value.data();
                    let ga: Vec<f64> = g.iter().zip(y).map(|(&gv, &t)| gv * (1.0 - t * t)).collect();
                    accumulate(&mut adj[a.0], &ga);
                }
                Op::Scale(a, f) => accumulate_scaled(&mut adj[a.0], &g, *f),
                Op::MulConst(a, w) => {
                    let ga: Vec<f64> = g.iter().zip(w.data()).map(|(&gv, &wv)| gv * wv).collect();
                    accumulate(&mut adj[a.0], &ga);
                }
                Op::Conv2d { input, kernel, bias } => {
                    let gout = Tensor::new(node.value.shape().to_vec(), g)?;
                    let (gi, gk, gb) =
                        ops::conv2d_backward(&self.nodes[input.0].value, &self.nodes[kernel.0].value, &gout)?;
                    accumulate(&mut adj[input.0], gi.data());
                    accumulate(&mut adj[kernel.0], gk.data());
                    if let Some(b) = bias {
                        accumulate(&mut adj[b.0], gb.data());
                    }
                }
                Op::ConcatChannels(parts) => {
                    let widths: Vec<usize> = parts
                        .iter()
                        .map(|p| *self.nodes[p.0].value.shape().last().unwrap())
                        .collect();
                    let total: usize = widths.iter().sum();
                    let positions = g.len() / total;
                    let mut offset = 0;
                    for (&p, &w) in parts.iter().zip(&widths) {
                        let mut gp = Vec::with_capacity(positions * w);
                        for pos in 0..positions {
                            gp.extend_from_slice(&g[pos * total + offset..pos * total + offset + w]);
                        }
                        accumulate(&mut adj[p.0], &gp);
                        offset += w;
                    }
                }
                Op::SliceChannels { input, start } => {
                    let x = &self.nodes[input.0].value;
                    let width = *x.shape().last().unwrap();
                    let len = *node.value.shape().last().unwrap();
                    let slot = adj[input.0].get_or_insert_with(|| vec![0.0; x.len()]);
                    for (dst, src) in slot.chunks_exact_mut(width).zip(g.chunks_exact(len)) {
                        for (d, &s) in dst[*start..*start + len].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                Op::GatherRows { input, rows } => {
                    let x = &self.nodes[input.0].value;
                    let width = *x.shape().last().unwrap();
                    let slot = adj[input.0].get_or_insert_with(|| vec![0.0; x.len()]);
                    for (&r, src) in rows.iter().zip(g.chunks_exact(width)) {
                        for (d, &s) in slot[r * width..(r + 1) * width].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                Op::Reshape(a) => accumulate(&mut adj[a.0], &g),
                Op::Sum(a) => {
                    let n = self.nodes[a.0].value.len();
                    accumulate(&mut adj[a.0], &vec![g[0]; n]);
                }
                Op::Mean(a) => {
                    let n = self.nodes[a.0].value.len();
                    accumulate(&mut adj[a.0], &vec![g[0] / n as f64; n]);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_all_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2, 3], vec![0.5; 6]).unwrap());
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn half_sum_of_squares_gives_identity_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_slice(&[3.0, -1.0]));
        let ss = tape.sum_squares(x).unwrap();
        let loss = tape.scale(ss, 0.5).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[3.0, -1.0]);
    }

    #[test]
    fn repeated_backward_accumulates_until_zeroed() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_slice(&[1.0, 2.0]));
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 2.0]);
        tape.zero_grads();
        assert!(tape.grad(x).is_none());
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_slice(&[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(AutodiffError::NonScalarLoss(_))));
    }

    #[test]
    fn empty_tape_rejected() {
        let mut tape = Tape::new();
        let mut other = Tape::new();
        let v = other.constant(Tensor::scalar(1.0));
        assert!(matches!(tape.backward(v), Err(AutodiffError::EmptyTape)));
    }

    #[test]
    fn constants_take_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_slice(&[2.0]));
        let c = tape.constant(Tensor::from_slice(&[5.0]));
        let y = tape.mul(x, c).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[5.0]);
        assert!(tape.grad(c).is_none());
    }

    #[test]
    fn scalar_broadcast_gradient_is_reduced() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::scalar(2.0));
        let b = tape.leaf(Tensor::from_slice(&[1.0, 3.0, 5.0]));
        let y = tape.mul(a, b).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap().data(), &[9.0]);
        assert_eq!(tape.grad(b).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn gather_with_repeats_sums_gradients() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let g = tape.gather_rows(x, &[2, 0, 2]).unwrap();
        assert_eq!(tape.value(g).data(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let s = tape.sum(g).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn checked_tape_rejects_non_finite_forward() {
        let mut tape = Tape::checked();
        let x = tape.leaf(Tensor::from_slice(&[f64::MAX]));
        assert!(matches!(tape.scale(x, 10.0), Err(AutodiffError::NonFinite { .. })));
    }
}
