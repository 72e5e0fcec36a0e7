//! Computation record and reverse pass.
//!
//! Operations are evaluated eagerly and appended to an explicit record, so a
//! record can be replayed and asserted against in tests. The reverse pass
//! walks the record backwards and accumulates exact gradients.

use std::collections::BTreeMap;

use super::Tensor;
use crate::error::{DiepError, Result};

/// Handle to a recorded value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One recorded operation. Input ids always precede the output id.
#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    /// Input or parameter; its value is never recomputed.
    Leaf,
    /// `[m,k] x [k,n] -> [m,n]`
    MatMul { a: NodeId, b: NodeId },
    /// Elementwise sum of equal shapes.
    Add { a: NodeId, b: NodeId },
    /// Elementwise difference of equal shapes.
    Sub { a: NodeId, b: NodeId },
    /// Elementwise product of equal shapes.
    Mul { a: NodeId, b: NodeId },
    /// Add a `[n]` bias to every row of an `[m,n]` matrix.
    AddBias { a: NodeId, bias: NodeId },
    /// Multiply by a compile-time constant.
    Scale { a: NodeId, factor: f64 },
    /// Multiply a tensor by a recorded scalar.
    MulScalar { a: NodeId, s: NodeId },
    /// Divide a tensor by a recorded scalar.
    DivScalar { a: NodeId, s: NodeId },
    Relu { a: NodeId },
    /// Softmax over all elements, computed with max-subtraction.
    Softmax { a: NodeId },
    /// Keep elements where `keep` is true, replace the rest with `fill`.
    MaskFill {
        a: NodeId,
        keep: Vec<bool>,
        fill: f64,
    },
    /// Select elements of a flat vector by index.
    Gather { a: NodeId, indices: Vec<usize> },
    /// `sum_i weights[i] * items[i]`, one weight per item tensor.
    WeightedSum { items: Vec<NodeId>, weights: NodeId },
    /// Stack 2-D blocks with equal column counts along the row axis.
    ConcatRows { items: Vec<NodeId> },
    /// Row lookup into a `[vocab,d]` table; output `[tokens.len(),d]`.
    Embed { table: NodeId, tokens: Vec<usize> },
    Sum { a: NodeId },
    Mean { a: NodeId },
    /// Square root of the sum of squares; subgradient 0 at the zero tensor.
    FrobeniusNorm { a: NodeId },
    /// Mean negative log-softmax probability of the target classes.
    CrossEntropy { logits: NodeId, targets: Vec<usize> },
}

impl Op {
    /// Ids feeding this operation, used by the reverse pass and tests.
    pub fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b } | Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } => {
                vec![*a, *b]
            }
            Op::AddBias { a, bias } => vec![*a, *bias],
            Op::Scale { a, .. }
            | Op::Relu { a }
            | Op::Softmax { a }
            | Op::MaskFill { a, .. }
            | Op::Gather { a, .. }
            | Op::Sum { a }
            | Op::Mean { a }
            | Op::FrobeniusNorm { a } => vec![*a],
            Op::MulScalar { a, s } | Op::DivScalar { a, s } => vec![*a, *s],
            Op::WeightedSum { items, weights } => {
                let mut v = items.clone();
                v.push(*weights);
                v
            }
            Op::ConcatRows { items } => items.clone(),
            Op::Embed { table, .. } => vec![*table],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients keyed by parameter node id; shapes match the parameters.
#[derive(Debug, Clone)]
pub struct GradientMap {
    grads: BTreeMap<NodeId, Tensor>,
}

impl GradientMap {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    /// Gradient for a parameter that was requested in `backward`.
    pub fn grad(&self, id: NodeId) -> &Tensor {
        self.grads
            .get(&id)
            .expect("gradient map does not contain the requested parameter")
    }

    pub fn ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.grads.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// An append-only computation record with eager evaluation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// All node ids in record order.
    pub fn ids(&self) -> impl Iterator<Item = NodeId> {
        (0..self.nodes.len()).map(NodeId)
    }

    pub fn op(&self, id: NodeId) -> &Op {
        &self.nodes[id.0].op
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { value, op });
        id
    }

    /// Record an input or parameter.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.leaf(Tensor::scalar(v))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape().len() != 2 || vb.shape().len() != 2 || va.shape()[1] != vb.shape()[0] {
            return Err(DiepError::ShapeMismatch {
                op: "matmul",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let value = eval_matmul(va, vb);
        Ok(self.push(value, Op::MatMul { a, b }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(a, b, "add")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(a, b, "sub")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(a, b, "mul")
    }

    fn elementwise(&mut self, a: NodeId, b: NodeId, which: &'static str) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(DiepError::ShapeMismatch {
                op: which,
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let (value, op) = match which {
            "add" => (eval_zip(va, vb, |x, y| x + y), Op::Add { a, b }),
            "sub" => (eval_zip(va, vb, |x, y| x - y), Op::Sub { a, b }),
            _ => (eval_zip(va, vb, |x, y| x * y), Op::Mul { a, b }),
        };
        Ok(self.push(value, op))
    }

    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(bias));
        if va.shape().len() != 2 || vb.shape().len() != 1 || va.shape()[1] != vb.shape()[0] {
            return Err(DiepError::ShapeMismatch {
                op: "add_bias",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let value = eval_add_bias(va, vb);
        Ok(self.push(value, Op::AddBias { a, bias }))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let value = eval_map(self.value(a), |x| x * factor);
        self.push(value, Op::Scale { a, factor })
    }

    pub fn mul_scalar(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        self.require_scalar(s)?;
        let sv = self.value(s).item();
        let value = eval_map(self.value(a), |x| x * sv);
        Ok(self.push(value, Op::MulScalar { a, s }))
    }

    pub fn div_scalar(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        self.require_scalar(s)?;
        let sv = self.value(s).item();
        let value = eval_map(self.value(a), |x| x / sv);
        Ok(self.push(value, Op::DivScalar { a, s }))
    }

    fn require_scalar(&self, s: NodeId) -> Result<()> {
        if !self.value(s).is_scalar() {
            return Err(DiepError::NotScalar {
                shape: self.value(s).shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let value = eval_map(self.value(a), |x| x.max(0.0));
        self.push(value, Op::Relu { a })
    }

    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        if self.value(a).is_empty() {
            return Err(DiepError::EmptyInput { what: "softmax" });
        }
        let value = eval_softmax(self.value(a));
        Ok(self.push(value, Op::Softmax { a }))
    }

    pub fn mask_fill(&mut self, a: NodeId, keep: Vec<bool>, fill: f64) -> Result<NodeId> {
        let va = self.value(a);
        if keep.len() != va.len() {
            return Err(DiepError::ShapeMismatch {
                op: "mask_fill",
                lhs: va.shape().to_vec(),
                rhs: vec![keep.len()],
            });
        }
        let value = eval_mask_fill(va, &keep, fill);
        Ok(self.push(value, Op::MaskFill { a, keep, fill }))
    }

    pub fn gather(&mut self, a: NodeId, indices: Vec<usize>) -> Result<NodeId> {
        let va = self.value(a);
        for &i in &indices {
            if i >= va.len() {
                return Err(DiepError::IndexOutOfRange {
                    what: "gather",
                    index: i,
                    bound: va.len(),
                });
            }
        }
        let value = eval_gather(va, &indices);
        Ok(self.push(value, Op::Gather { a, indices }))
    }

    pub fn weighted_sum(&mut self, items: Vec<NodeId>, weights: NodeId) -> Result<NodeId> {
        if items.is_empty() {
            return Err(DiepError::EmptyInput {
                what: "weighted_sum",
            });
        }
        let w = self.value(weights);
        if w.len() != items.len() {
            return Err(DiepError::ShapeMismatch {
                op: "weighted_sum",
                lhs: vec![items.len()],
                rhs: w.shape().to_vec(),
            });
        }
        let first = self.value(items[0]).shape().to_vec();
        for &it in &items[1..] {
            if self.value(it).shape() != first {
                return Err(DiepError::ShapeMismatch {
                    op: "weighted_sum",
                    lhs: first,
                    rhs: self.value(it).shape().to_vec(),
                });
            }
        }
        let views: Vec<&Tensor> = items.iter().map(|&i| self.value(i)).collect();
        let value = eval_weighted_sum(&views, self.value(weights));
        Ok(self.push(value, Op::WeightedSum { items, weights }))
    }

    pub fn concat_rows(&mut self, items: Vec<NodeId>) -> Result<NodeId> {
        if items.is_empty() {
            return Err(DiepError::EmptyInput {
                what: "concat_rows",
            });
        }
        let cols = {
            let v0 = self.value(items[0]);
            if v0.shape().len() != 2 {
                return Err(DiepError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: v0.shape().to_vec(),
                    rhs: vec![],
                });
            }
            v0.shape()[1]
        };
        for &it in &items {
            let v = self.value(it);
            if v.shape().len() != 2 || v.shape()[1] != cols {
                return Err(DiepError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: vec![cols],
                    rhs: v.shape().to_vec(),
                });
            }
        }
        let views: Vec<&Tensor> = items.iter().map(|&i| self.value(i)).collect();
        let value = eval_concat_rows(&views);
        Ok(self.push(value, Op::ConcatRows { items }))
    }

    pub fn embed(&mut self, table: NodeId, tokens: Vec<usize>) -> Result<NodeId> {
        let vt = self.value(table);
        if vt.shape().len() != 2 {
            return Err(DiepError::ShapeMismatch {
                op: "embed",
                lhs: vt.shape().to_vec(),
                rhs: vec![],
            });
        }
        for &t in &tokens {
            if t >= vt.shape()[0] {
                return Err(DiepError::IndexOutOfRange {
                    what: "embed",
                    index: t,
                    bound: vt.shape()[0],
                });
            }
        }
        let value = eval_embed(vt, &tokens);
        Ok(self.push(value, Op::Embed { table, tokens }))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let value = Tensor::scalar(self.value(a).data().iter().sum());
        self.push(value, Op::Sum { a })
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        if va.is_empty() {
            return Err(DiepError::EmptyInput { what: "mean" });
        }
        let value = Tensor::scalar(va.data().iter().sum::<f64>() / va.len() as f64);
        Ok(self.push(value, Op::Mean { a }))
    }

    pub fn frobenius_norm(&mut self, a: NodeId) -> NodeId {
        let value = Tensor::scalar(self.value(a).norm());
        self.push(value, Op::FrobeniusNorm { a })
    }

    pub fn cross_entropy(&mut self, logits: NodeId, targets: Vec<usize>) -> Result<NodeId> {
        let vl = self.value(logits);
        if vl.shape().len() != 2 || vl.shape()[0] == 0 {
            return Err(DiepError::ShapeMismatch {
                op: "cross_entropy",
                lhs: vl.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let (rows, classes) = (vl.shape()[0], vl.shape()[1]);
        if targets.len() != rows {
            return Err(DiepError::ShapeMismatch {
                op: "cross_entropy",
                lhs: vec![rows],
                rhs: vec![targets.len()],
            });
        }
        for &t in &targets {
            if t >= classes {
                return Err(DiepError::IndexOutOfRange {
                    what: "cross_entropy target",
                    index: t,
                    bound: classes,
                });
            }
        }
        let value = eval_cross_entropy(vl, &targets);
        Ok(self.push(value, Op::CrossEntropy { logits, targets }))
    }

    /// Recompute every non-leaf value from the recorded operations.
    ///
    /// Returns the recomputed values in node order; used to assert that a
    /// record is a faithful, deterministic description of the forward pass.
    pub fn replay(&self) -> Vec<Tensor> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match &node.op {
                Op::Leaf => node.value.clone(),
                Op::MatMul { a, b } => eval_matmul(&values[a.0], &values[b.0]),
                Op::Add { a, b } => eval_zip(&values[a.0], &values[b.0], |x, y| x + y),
                Op::Sub { a, b } => eval_zip(&values[a.0], &values[b.0], |x, y| x - y),
                Op::Mul { a, b } => eval_zip(&values[a.0], &values[b.0], |x, y| x * y),
                Op::AddBias { a, bias } => eval_add_bias(&values[a.0], &values[bias.0]),
                Op::Scale { a, factor } => eval_map(&values[a.0], |x| x * factor),
                Op::MulScalar { a, s } => {
                    let sv = values[s.0].item();
                    eval_map(&values[a.0], |x| x * sv)
                }
                Op::DivScalar { a, s } => {
                    let sv = values[s.0].item();
                    eval_map(&values[a.0], |x| x / sv)
                }
                Op::Relu { a } => eval_map(&values[a.0], |x| x.max(0.0)),
                Op::Softmax { a } => eval_softmax(&values[a.0]),
                Op::MaskFill { a, keep, fill } => eval_mask_fill(&values[a.0], keep, *fill),
                Op::Gather { a, indices } => eval_gather(&values[a.0], indices),
                Op::WeightedSum { items, weights } => {
                    let views: Vec<&Tensor> = items.iter().map(|i| &values[i.0]).collect();
                    eval_weighted_sum(&views, &values[weights.0])
                }
                Op::ConcatRows { items } => {
                    let views: Vec<&Tensor> = items.iter().map(|i| &values[i.0]).collect();
                    eval_concat_rows(&views)
                }
                Op::Embed { table, tokens } => eval_embed(&values[table.0], tokens),
                Op::Sum { a } => Tensor::scalar(values[a.0].data().iter().sum()),
                Op::Mean { a } => {
                    let va = &values[a.0];
                    Tensor::scalar(va.data().iter().sum::<f64>() / va.len() as f64)
                }
                Op::FrobeniusNorm { a } => Tensor::scalar(values[a.0].norm()),
                Op::CrossEntropy { logits, targets } => {
                    eval_cross_entropy(&values[logits.0], targets)
                }
            };
            values.push(v);
        }
        values
    }

    /// Reverse pass from a scalar loss.
    ///
    /// Every id in `wanted` appears in the result exactly once; parameters
    /// with no path to the loss receive zero gradients of their own shape.
    pub fn backward(&self, loss: NodeId, wanted: &[NodeId]) -> Result<GradientMap> {
        if loss.0 >= self.nodes.len() {
            return Err(DiepError::UnknownNode { id: loss.0 });
        }
        for &w in wanted {
            if w.0 >= self.nodes.len() {
                return Err(DiepError::UnknownNode { id: w.0 });
            }
        }
        if !self.value(loss).is_scalar() {
            return Err(DiepError::NotScalar {
                shape: self.value(loss).shape().to_vec(),
            });
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let dy = match &grads[i] {
                Some(g) => g.clone(),
                None => continue,
            };
            self.accumulate(i, &dy, &mut grads);
        }

        let mut map = BTreeMap::new();
        for &w in wanted {
            let g = match grads[w.0].take() {
                Some(data) => Tensor::new(self.value(w).shape().to_vec(), data)
                    .expect("gradient shape matches parameter shape"),
                None => Tensor::zeros(self.value(w).shape().to_vec()),
            };
            map.insert(w, g);
        }
        Ok(GradientMap { grads: map })
    }

    fn accumulate(&self, out: usize, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[out];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[1];
                let ga = acc_slot(grads, a.0, m * k);
                for i in 0..m {
                    for j in 0..n {
                        let d = dy[i * n + j];
                        for p in 0..k {
                            ga[i * k + p] += d * vb.data()[p * n + j];
                        }
                    }
                }
                let gb = acc_slot(grads, b.0, k * n);
                for p in 0..k {
                    for j in 0..n {
                        let mut s = 0.0;
                        for i in 0..m {
                            s += va.data()[i * k + p] * dy[i * n + j];
                        }
                        gb[p * n + j] += s;
                    }
                }
            }
            Op::Add { a, b } => {
                add_into(acc_slot(grads, a.0, dy.len()), dy, 1.0);
                add_into(acc_slot(grads, b.0, dy.len()), dy, 1.0);
            }
            Op::Sub { a, b } => {
                add_into(acc_slot(grads, a.0, dy.len()), dy, 1.0);
                add_into(acc_slot(grads, b.0, dy.len()), dy, -1.0);
            }
            Op::Mul { a, b } => {
                let (va, vb) = (self.value(*a).data().to_vec(), self.value(*b).data().to_vec());
                let ga = acc_slot(grads, a.0, dy.len());
                for (g, (d, y)) in ga.iter_mut().zip(dy.iter().zip(vb.iter())) {
                    *g += d * y;
                }
                let gb = acc_slot(grads, b.0, dy.len());
                for (g, (d, x)) in gb.iter_mut().zip(dy.iter().zip(va.iter())) {
                    *g += d * x;
                }
            }
            Op::AddBias { a, bias } => {
                add_into(acc_slot(grads, a.0, dy.len()), dy, 1.0);
                let n = self.value(*bias).len();
                let gb = acc_slot(grads, bias.0, n);
                for (i, d) in dy.iter().enumerate() {
                    gb[i % n] += d;
                }
            }
            Op::Scale { a, factor } => {
                add_into(acc_slot(grads, a.0, dy.len()), dy, *factor);
            }
            Op::MulScalar { a, s } => {
                let sv = self.value(*s).item();
                let va = self.value(*a).data().to_vec();
                add_into(acc_slot(grads, a.0, dy.len()), dy, sv);
                let gs = acc_slot(grads, s.0, 1);
                gs[0] += dy.iter().zip(va.iter()).map(|(d, x)| d * x).sum::<f64>();
            }
            Op::DivScalar { a, s } => {
                let sv = self.value(*s).item();
                let va = self.value(*a).data().to_vec();
                add_into(acc_slot(grads, a.0, dy.len()), dy, 1.0 / sv);
                let gs = acc_slot(grads, s.0, 1);
                gs[0] -= dy.iter().zip(va.iter()).map(|(d, x)| d * x).sum::<f64>() / (sv * sv);
            }
            Op::Relu { a } => {
                let va = self.value(*a);
                let ga = acc_slot(grads, a.0, dy.len());
                for (i, d) in dy.iter().enumerate() {
                    if va.data()[i] > 0.0 {
                        ga[i] += d;
                    }
                }
            }
            Op::Softmax { a } => {
                let y = node.value.data();
                let dot: f64 = dy.iter().zip(y.iter()).map(|(d, p)| d * p).sum();
                let ga = acc_slot(grads, a.0, dy.len());
                for i in 0..dy.len() {
                    ga[i] += y[i] * (dy[i] - dot);
                }
            }
            Op::MaskFill { a, keep, .. } => {
                let ga = acc_slot(grads, a.0, dy.len());
                for (i, d) in dy.iter().enumerate() {
                    if keep[i] {
                        ga[i] += d;
                    }
                }
            }
            Op::Gather { a, indices } => {
                let ga = acc_slot(grads, a.0, self.value(*a).len());
                for (j, &i) in indices.iter().enumerate() {
                    ga[i] += dy[j];
                }
            }
            Op::WeightedSum { items, weights } => {
                let w = self.value(*weights).data().to_vec();
                for (i, &item) in items.iter().enumerate() {
                    let gi = acc_slot(grads, item.0, dy.len());
                    add_into(gi, dy, w[i]);
                }
                let dots: Vec<f64> = items
                    .iter()
                    .map(|&item| {
                        self.value(item)
                            .data()
                            .iter()
                            .zip(dy.iter())
                            .map(|(x, d)| x * d)
                            .sum()
                    })
                    .collect();
                let gw = acc_slot(grads, weights.0, items.len());
                for (g, d) in gw.iter_mut().zip(dots.iter()) {
                    *g += d;
                }
            }
            Op::ConcatRows { items } => {
                let mut offset = 0;
                for &item in items {
                    let len = self.value(item).len();
                    let gi = acc_slot(grads, item.0, len);
                    add_into(gi, &dy[offset..offset + len], 1.0);
                    offset += len;
                }
            }
            Op::Embed { table, tokens } => {
                let d = self.value(*table).shape()[1];
                let gt = acc_slot(grads, table.0, self.value(*table).len());
                for (row, &tok) in tokens.iter().enumerate() {
                    for j in 0..d {
                        gt[tok * d + j] += dy[row * d + j];
                    }
                }
            }
            Op::Sum { a } => {
                let ga = acc_slot(grads, a.0, self.value(*a).len());
                for g in ga.iter_mut() {
                    *g += dy[0];
                }
            }
            Op::Mean { a } => {
                let n = self.value(*a).len();
                let ga = acc_slot(grads, a.0, n);
                let d = dy[0] / n as f64;
                for g in ga.iter_mut() {
                    *g += d;
                }
            }
            Op::FrobeniusNorm { a } => {
                let norm = node.value.item();
                if norm > 0.0 {
                    let va = self.value(*a);
                    let ga = acc_slot(grads, a.0, va.len());
                    let d = dy[0] / norm;
                    for (g, x) in ga.iter_mut().zip(va.data().iter()) {
                        *g += d * x;
                    }
                }
            }
            Op::CrossEntropy { logits, targets } => {
                let vl = self.value(*logits);
                let (rows, classes) = (vl.shape()[0], vl.shape()[1]);
                let gl = acc_slot(grads, logits.0, rows * classes);
                let scale = dy[0] / rows as f64;
                for r in 0..rows {
                    let row = &vl.data()[r * classes..(r + 1) * classes];
                    let probs = stable_softmax(row);
                    for c in 0..classes {
                        let indicator = if c == targets[r] { 1.0 } else { 0.0 };
                        gl[r * classes + c] += scale * (probs[c] - indicator);
                    }
                }
            }
        }
    }
}

fn acc_slot<'g>(grads: &'g mut [Option<Vec<f64>>], id: usize, len: usize) -> &'g mut Vec<f64> {
    if grads[id].is_none() {
        grads[id] = Some(vec![0.0; len]);
    }
    grads[id].as_mut().expect("slot just created")
}

fn add_into(dst: &mut [f64], src: &[f64], scale: f64) {
    for (d, s) in dst.iter_mut().zip(src.iter()) {
        *d += s * scale;
    }
}

fn eval_matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a.data()[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b.data()[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    Tensor::new(vec![m, n], out).expect("matmul shape")
}

fn eval_zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(x, y)| f(*x, *y))
        .collect();
    Tensor::new(a.shape().to_vec(), data).expect("zip shape")
}

fn eval_map(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(a.shape().to_vec(), a.data().iter().map(|x| f(*x)).collect()).expect("map shape")
}

fn eval_add_bias(a: &Tensor, bias: &Tensor) -> Tensor {
    let n = bias.len();
    let data = a
        .data()
        .iter()
        .enumerate()
        .map(|(i, x)| x + bias.data()[i % n])
        .collect();
    Tensor::new(a.shape().to_vec(), data).expect("add_bias shape")
}

/// Max-subtracted softmax over a flat slice. `-inf` entries map to exactly 0.
fn stable_softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn eval_softmax(a: &Tensor) -> Tensor {
    Tensor::new(a.shape().to_vec(), stable_softmax(a.data())).expect("softmax shape")
}

fn eval_mask_fill(a: &Tensor, keep: &[bool], fill: f64) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(keep.iter())
        .map(|(x, k)| if *k { *x } else { fill })
        .collect();
    Tensor::new(a.shape().to_vec(), data).expect("mask shape")
}

fn eval_gather(a: &Tensor, indices: &[usize]) -> Tensor {
    let data: Vec<f64> = indices.iter().map(|&i| a.data()[i]).collect();
    let shape = if a.shape().len() == 2 && a.shape()[0] == 1 {
        vec![1, indices.len()]
    } else {
        vec![indices.len()]
    };
    Tensor::new(shape, data).expect("gather shape")
}

fn eval_weighted_sum(items: &[&Tensor], weights: &Tensor) -> Tensor {
    let mut out = vec![0.0; items[0].len()];
    for (item, &w) in items.iter().zip(weights.data().iter()) {
        for (o, x) in out.iter_mut().zip(item.data().iter()) {
            *o += w * x;
        }
    }
    Tensor::new(items[0].shape().to_vec(), out).expect("weighted_sum shape")
}

fn eval_concat_rows(items: &[&Tensor]) -> Tensor {
    let cols = items[0].shape()[1];
    let rows: usize = items.iter().map(|t| t.shape()[0]).sum();
    let mut data = Vec::with_capacity(rows * cols);
    for item in items {
        data.extend_from_slice(item.data());
    }
    Tensor::new(vec![rows, cols], data).expect("concat shape")
}

fn eval_embed(table: &Tensor, tokens: &[usize]) -> Tensor {
    let d = table.shape()[1];
    let mut data = Vec::with_capacity(tokens.len() * d);
    for &t in tokens {
        data.extend_from_slice(&table.data()[t * d..(t + 1) * d]);
    }
    Tensor::new(vec![tokens.len(), d], data).expect("embed shape")
}

fn eval_cross_entropy(logits: &Tensor, targets: &[usize]) -> Tensor {
    let (rows, classes) = (logits.shape()[0], logits.shape()[1]);
    let mut total = 0.0;
    for r in 0..rows {
        let row = &logits.data()[r * classes..(r + 1) * classes];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[targets[r]];
    }
    Tensor::scalar(total / rows as f64)
}
