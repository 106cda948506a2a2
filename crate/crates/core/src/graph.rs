//! Dense computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in construction order, so a [`Graph`] is always
//! acyclic and topologically sorted: every parent id is smaller than the id
//! of the node that consumes it. Shapes are checked when a node is added.

use std::borrow::{Borrow, Cow};
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Input,
    Constant(Tensor),
    /// `[m, n] x [n]` or `[m, n] x [n, p]`.
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Scale(NodeId, f64),
    Sum(NodeId),
    Square(NodeId),
    MaxWithZero(NodeId),
    /// Concatenation along the leading axis.
    Concat(Vec<NodeId>),
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Constant(_) => "constant",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Scale(..) => "scale",
            Op::Sum(_) => "sum",
            Op::Square(_) => "square",
            Op::MaxWithZero(_) => "max-with-zero",
            Op::Concat(_) => "concat",
        }
    }

    pub fn parents(&self) -> Vec<NodeId> {
        match self {
            Op::Input | Op::Constant(_) => Vec::new(),
            Op::MatMul(a, b) | Op::Add(a, b) => vec![*a, *b],
            Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Scale(a, _)
            | Op::Sum(a)
            | Op::Square(a)
            | Op::MaxWithZero(a) => vec![*a],
            Op::Concat(parts) => parts.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Node {
    pub op: Op,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Values of every node from one forward pass.
///
/// Bound inputs are borrowed rather than copied.
#[derive(Debug)]
pub struct Evaluation<'a> {
    values: Vec<Cow<'a, Tensor>>,
}

impl<'a> Evaluation<'a> {
    pub fn value(&self, node: NodeId) -> &Tensor {
        &self.values[node.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn into_map(self) -> BTreeMap<NodeId, Tensor> {
        self.values
            .into_iter()
            .enumerate()
            .map(|(i, v)| (NodeId(i), v.into_owned()))
            .collect()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn inputs(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Input))
            .map(|(i, _)| NodeId(i))
    }

    fn push(&mut self, op: Op, shape: Vec<usize>) -> NodeId {
        self.nodes.push(Node { op, shape });
        NodeId(self.nodes.len() - 1)
    }

    fn check(&self, id: NodeId) -> Result<&[usize]> {
        self.nodes
            .get(id.0)
            .map(|n| n.shape.as_slice())
            .ok_or_else(|| Error::InvalidArgument(format!("unknown node {}", id.0)))
    }

    pub fn input(&mut self, shape: &[usize]) -> Result<NodeId> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Shape(format!("invalid input shape {shape:?}")));
        }
        Ok(self.push(Op::Input, shape.to_vec()))
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let shape = value.shape().to_vec();
        self.push(Op::Constant(value), shape)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.check(a)?.to_vec();
        let sb = self.check(b)?.to_vec();
        let shape = match (sa.as_slice(), sb.as_slice()) {
            ([m, n], [k]) if n == k => vec![*m],
            ([m, n], [k, p]) if n == k => vec![*m, *p],
            _ => {
                return Err(Error::Shape(format!(
                    "matmul of {sa:?} and {sb:?}"
                )))
            }
        };
        Ok(self.push(Op::MatMul(a, b), shape))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.check(a)?.to_vec();
        let sb = self.check(b)?;
        if sa != sb {
            return Err(Error::Shape(format!("add of {sa:?} and {sb:?}")));
        }
        Ok(self.push(Op::Add(a, b), sa))
    }

    fn unary(&mut self, a: NodeId, op: Op) -> Result<NodeId> {
        let shape = self.check(a)?.to_vec();
        Ok(self.push(op, shape))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::Sigmoid(a))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        if !factor.is_finite() {
            return Err(Error::InvalidArgument("scale factor must be finite".into()));
        }
        self.unary(a, Op::Scale(a, factor))
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::Square(a))
    }

    pub fn max_with_zero(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::MaxWithZero(a))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        Ok(self.push(Op::Sum(a), vec![1]))
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero nodes".into()))?;
        let tail = self.check(*first)?[1..].to_vec();
        let mut lead = 0;
        for &p in parts {
            let s = self.check(p)?;
            if s[1..] != tail[..] {
                return Err(Error::Shape(format!(
                    "concat trailing dims {:?} vs {tail:?}",
                    &s[1..]
                )));
            }
            lead += s[0];
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        Ok(self.push(Op::Concat(parts.to_vec()), shape))
    }

    /// Evaluates every node. `inputs` must bind each `Input` node to a tensor
    /// of the declared shape.
    pub fn forward_eval<'a, T: Borrow<Tensor>>(
        &self,
        inputs: &'a BTreeMap<NodeId, T>,
    ) -> Result<Evaluation<'a>> {
        let mut values: Vec<Cow<'a, Tensor>> = Vec::with_capacity(self.nodes.len());
        for (idx, node) in self.nodes.iter().enumerate() {
            let value: Cow<'a, Tensor> = match &node.op {
                Op::Input => {
                    let bound = inputs
                        .get(&NodeId(idx))
                        .ok_or(Error::UnboundInput(idx))?
                        .borrow();
                    if bound.shape() != node.shape.as_slice() {
                        return Err(Error::Shape(format!(
                            "input {idx} bound to {:?}, declared {:?}",
                            bound.shape(),
                            node.shape
                        )));
                    }
                    Cow::Borrowed(bound)
                }
                op => {
                    let out = eval_op(op, &node.shape, &values);
                    if out.iter().any(|v| !v.is_finite()) {
                        return Err(Error::NonFinite {
                            node: idx,
                            op: op.name(),
                        });
                    }
                    Cow::Owned(Tensor::from_parts_unchecked(node.shape.clone(), out))
                }
            };
            values.push(value);
        }
        Ok(Evaluation { values })
    }

    /// Vector-Jacobian product: propagates `cotangent` (shaped like `output`)
    /// back to every input node.
    pub fn backward_from(
        &self,
        eval: &Evaluation<'_>,
        output: NodeId,
        cotangent: &[f64],
    ) -> Result<BTreeMap<NodeId, Tensor>> {
        let out_shape = self.check(output)?;
        if eval.len() != self.nodes.len() {
            return Err(Error::InvalidArgument(
                "evaluation does not belong to this graph".into(),
            ));
        }
        if cotangent.len() != out_shape.iter().product::<usize>() {
            return Err(Error::Shape(format!(
                "cotangent of length {} for output shape {out_shape:?}",
                cotangent.len()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(cotangent.to_vec());
        let mut result = BTreeMap::new();

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {
                    result.insert(
                        NodeId(idx),
                        Tensor::from_parts_unchecked(node.shape.clone(), g),
                    );
                }
                Op::Constant(_) => {}
                Op::MatMul(a, b) => {
                    let av = eval.value(*a);
                    let bv = eval.value(*b);
                    let (m, n) = (av.shape()[0], av.shape()[1]);
                    let p = if bv.shape().len() == 2 { bv.shape()[1] } else { 1 };
                    let (ad, bd) = (av.data(), bv.data());
                    let mut ga = vec![0.0; m * n];
                    let mut gb = vec![0.0; n * p];
                    for i in 0..m {
                        for k in 0..p {
                            let gik = g[i * p + k];
                            if gik == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                ga[i * n + j] += gik * bd[j * p + k];
                                gb[j * p + k] += ad[i * n + j] * gik;
                            }
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Relu(a) | Op::MaxWithZero(a) => {
                    let x = eval.value(*a).data();
                    let ga = g
                        .iter()
                        .zip(x)
                        .map(|(gi, xi)| if *xi > 0.0 { *gi } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let y = eval.value(NodeId(idx)).data();
                    let ga = g
                        .iter()
                        .zip(y)
                        .map(|(gi, yi)| gi * yi * (1.0 - yi))
                        .collect();
                    accumulate(&mut grads, *a, ga);
                }
                Op::Scale(a, k) => {
                    accumulate(&mut grads, *a, g.iter().map(|gi| gi * k).collect());
                }
                Op::Sum(a) => {
                    let n = eval.value(*a).numel();
                    accumulate(&mut grads, *a, vec![g[0]; n]);
                }
                Op::Square(a) => {
                    let x = eval.value(*a).data();
                    let ga = g.iter().zip(x).map(|(gi, xi)| 2.0 * xi * gi).collect();
                    accumulate(&mut grads, *a, ga);
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let len = eval.value(*p).numel();
                        accumulate(&mut grads, *p, g[offset..offset + len].to_vec());
                        offset += len;
                    }
                }
            }
        }
        Ok(result)
    }

    /// Gradient of the scalar `seed` node with respect to every input node.
    pub fn backward_grad<T: Borrow<Tensor>>(
        &self,
        inputs: &BTreeMap<NodeId, T>,
        seed: NodeId,
    ) -> Result<BTreeMap<NodeId, Tensor>> {
        let numel = self.check(seed)?.iter().product::<usize>();
        if numel != 1 {
            return Err(Error::NonScalarSeed {
                node: seed.0,
                numel,
            });
        }
        let eval = self.forward_eval(inputs)?;
        let mut grads = self.backward_from(&eval, seed, &[1.0])?;
        // Inputs the seed does not depend on still get an (all-zero) entry.
        for id in self.inputs() {
            grads
                .entry(id)
                .or_insert_with(|| Tensor::zeros(self.shape(id)).expect("validated shape"));
        }
        Ok(grads)
    }

    /// Central-difference estimate of [`Graph::backward_grad`].
    pub fn finite_diff_grad<T: Borrow<Tensor>>(
        &self,
        inputs: &BTreeMap<NodeId, T>,
        seed: NodeId,
        step: f64,
    ) -> Result<BTreeMap<NodeId, Tensor>> {
        if !(step > 0.0 && step.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "finite-difference step must be positive, got {step}"
            )));
        }
        let numel = self.check(seed)?.iter().product::<usize>();
        if numel != 1 {
            return Err(Error::NonScalarSeed {
                node: seed.0,
                numel,
            });
        }
        let mut working: BTreeMap<NodeId, Tensor> = inputs
            .iter()
            .map(|(k, v)| (*k, v.borrow().clone()))
            .collect();
        let mut grads = BTreeMap::new();
        for id in self.inputs() {
            let base = working
                .get(&id)
                .ok_or(Error::UnboundInput(id.0))?
                .clone();
            let mut grad = Vec::with_capacity(base.numel());
            for j in 0..base.numel() {
                let probe = |delta: f64, working: &mut BTreeMap<NodeId, Tensor>| {
                    let mut data = base.data().to_vec();
                    data[j] += delta;
                    working.insert(id, Tensor::new(base.shape().to_vec(), data)?);
                    let eval = self.forward_eval(working)?;
                    Ok::<f64, Error>(eval.value(seed).data()[0])
                };
                let plus = probe(step, &mut working)?;
                let minus = probe(-step, &mut working)?;
                grad.push((plus - minus) / (2.0 * step));
            }
            working.insert(id, base.clone());
            grads.insert(id, Tensor::new(base.shape().to_vec(), grad)?);
        }
        Ok(grads)
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], node: NodeId, g: Vec<f64>) {
    match &mut grads[node.0] {
        Some(existing) => existing.iter_mut().zip(g).for_each(|(e, v)| *e += v),
        slot => *slot = Some(g),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn eval_op(op: &Op, shape: &[usize], values: &[Cow<'_, Tensor>]) -> Vec<f64> {
    let v = |id: &NodeId| values[id.0].as_ref();
    match op {
        Op::Input => unreachable!("inputs are bound, not evaluated"),
        Op::Constant(t) => t.data().to_vec(),
        Op::MatMul(a, b) => {
            let (av, bv) = (v(a), v(b));
            let (m, n) = (av.shape()[0], av.shape()[1]);
            let p = if bv.shape().len() == 2 { bv.shape()[1] } else { 1 };
            let (ad, bd) = (av.data(), bv.data());
            let mut out = vec![0.0; m * p];
            for i in 0..m {
                let row = &ad[i * n..(i + 1) * n];
                for k in 0..p {
                    out[i * p + k] = row
                        .iter()
                        .enumerate()
                        .map(|(j, aij)| aij * bd[j * p + k])
                        .sum();
                }
            }
            debug_assert_eq!(out.len(), shape.iter().product::<usize>());
            out
        }
        Op::Add(a, b) => v(a).data().iter().zip(v(b).data()).map(|(x, y)| x + y).collect(),
        Op::Relu(a) | Op::MaxWithZero(a) => v(a).data().iter().map(|x| x.max(0.0)).collect(),
        Op::Sigmoid(a) => v(a).data().iter().map(|x| sigmoid(*x)).collect(),
        Op::Scale(a, k) => v(a).data().iter().map(|x| x * k).collect(),
        Op::Sum(a) => vec![v(a).data().iter().sum()],
        Op::Square(a) => v(a).data().iter().map(|x| x * x).collect(),
        Op::Concat(parts) => parts
            .iter()
            .flat_map(|p| v(p).data().iter().copied())
            .collect(),
    }
}
