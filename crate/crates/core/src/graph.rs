//! Reverse-mode automatic differentiation over a define-then-run graph.
//!
//! A [`Graph`] is built lazily: operations record structure only, and no
//! arithmetic happens until [`Graph::forward`] binds tensors to the leaves.
//! [`Graph::backward`] then accumulates adjoints in reverse construction
//! order, which is a valid reverse topological order because every node can
//! only reference nodes created before it.
//!
//! The op set is exactly what multilayer perceptrons with square and
//! cross-entropy losses need: elementwise arithmetic, matrix-vector
//! products, `relu`/`sigmoid` nonlinearities, a numerically stabilised
//! `log_softmax`, and scalar reductions. Adjoint accumulation order is fixed
//! by node order, so gradients are bit-reproducible.

use crate::error::{Error, Result};
use crate::scalar::{pairwise_sum, Scalar};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`]. Only valid for the graph that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Recorded operation. Inputs are ids of earlier nodes.
#[derive(Debug, Clone)]
enum Op<S: Scalar> {
    /// Placeholder bound to a tensor at forward time.
    Leaf { name: String },
    /// Elementwise sum of two same-shape tensors.
    Add(NodeId, NodeId),
    /// Elementwise difference.
    Sub(NodeId, NodeId),
    /// Elementwise (Hadamard) product.
    Mul(NodeId, NodeId),
    /// Matrix [m, n] times vector [n] -> vector [m].
    MatVec(NodeId, NodeId),
    /// Elementwise max(x, 0); subgradient at 0 is taken as 0.
    Relu(NodeId),
    /// Elementwise logistic function.
    Sigmoid(NodeId),
    /// log softmax over a vector, stabilised by max subtraction.
    LogSoftmax(NodeId),
    /// Elementwise square.
    Square(NodeId),
    /// Sum of all elements -> scalar.
    Sum(NodeId),
    /// Mean of all elements -> scalar.
    Mean(NodeId),
    /// Elementwise negation.
    Neg(NodeId),
    /// Multiplication by a compile-time constant.
    Scale(NodeId, S),
    /// Selects one element of a vector -> scalar.
    Pick(NodeId, usize),
}

impl<S: Scalar> Op<S> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::MatVec(..) => "matvec",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::LogSoftmax(..) => "log_softmax",
            Op::Square(..) => "square",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Neg(..) => "neg",
            Op::Scale(..) => "scale",
            Op::Pick(..) => "pick",
        }
    }
}

/// Define-then-run computation graph with reverse-mode differentiation.
#[derive(Debug, Clone)]
pub struct Graph<S: Scalar> {
    ops: Vec<Op<S>>,
    /// Forward values, populated by [`Graph::forward`].
    values: Vec<Option<Tensor<S>>>,
    /// Adjoints, populated by [`Graph::backward`].
    adjoints: Vec<Option<Tensor<S>>>,
    forward_done: bool,
    backward_done: bool,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    /// Creates an empty graph.
    pub fn new() -> Self {
        Graph {
            ops: Vec::new(),
            values: Vec::new(),
            adjoints: Vec::new(),
            forward_done: false,
            backward_done: false,
        }
    }

    /// Number of nodes recorded so far.
    pub fn len(&self) -> usize {
        self.ops.len()
    }

    /// True when no nodes have been recorded.
    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    fn push(&mut self, op: Op<S>) -> NodeId {
        // Any structural change invalidates previously computed passes.
        self.forward_done = false;
        self.backward_done = false;
        self.ops.push(op);
        self.values.push(None);
        self.adjoints.push(None);
        NodeId(self.ops.len() - 1)
    }

    fn check_id(&self, id: NodeId, context: &str) -> Result<()> {
        if id.0 >= self.ops.len() {
            return Err(Error::GraphUsage(format!(
                "{context}: node id {} does not belong to this graph ({} nodes recorded)",
                id.0,
                self.ops.len()
            )));
        }
        Ok(())
    }

    // ---- construction ----------------------------------------------------

    /// Declares a named input placeholder. The name appears in diagnostics.
    pub fn leaf(&mut self, name: impl Into<String>) -> NodeId {
        self.push(Op::Leaf { name: name.into() })
    }

    /// Elementwise sum.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_id(a, "add")?;
        self.check_id(b, "add")?;
        Ok(self.push(Op::Add(a, b)))
    }

    /// Elementwise difference `a - b`.
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_id(a, "sub")?;
        self.check_id(b, "sub")?;
        Ok(self.push(Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_id(a, "mul")?;
        self.check_id(b, "mul")?;
        Ok(self.push(Op::Mul(a, b)))
    }

    /// Matrix-vector product; `w` must be rank 2 and `x` rank 1 at forward time.
    pub fn matvec(&mut self, w: NodeId, x: NodeId) -> Result<NodeId> {
        self.check_id(w, "matvec")?;
        self.check_id(x, "matvec")?;
        Ok(self.push(Op::MatVec(w, x)))
    }

    /// Rectified linear unit.
    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.check_id(a, "relu")?;
        Ok(self.push(Op::Relu(a)))
    }

    /// Logistic sigmoid.
    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.check_id(a, "sigmoid")?;
        Ok(self.push(Op::Sigmoid(a)))
    }

    /// Log of the softmax of a vector.
    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.check_id(a, "log_softmax")?;
        Ok(self.push(Op::LogSoftmax(a)))
    }

    /// Elementwise square.
    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.check_id(a, "square")?;
        Ok(self.push(Op::Square(a)))
    }

    /// Sum of all elements, producing a scalar node.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.check_id(a, "sum")?;
        Ok(self.push(Op::Sum(a)))
    }

    /// Mean of all elements, producing a scalar node.
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.check_id(a, "mean")?;
        Ok(self.push(Op::Mean(a)))
    }

    /// Elementwise negation.
    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        self.check_id(a, "neg")?;
        Ok(self.push(Op::Neg(a)))
    }

    /// Multiplies every element by a constant.
    pub fn scale(&mut self, a: NodeId, factor: S) -> Result<NodeId> {
        self.check_id(a, "scale")?;
        Ok(self.push(Op::Scale(a, factor)))
    }

    /// Selects element `index` of a vector, producing a scalar node.
    pub fn pick(&mut self, a: NodeId, index: usize) -> Result<NodeId> {
        self.check_id(a, "pick")?;
        Ok(self.push(Op::Pick(a, index)))
    }

    // ---- execution -------------------------------------------------------

    /// Runs the forward pass, binding tensors to leaves.
    ///
    /// Every leaf must receive exactly one binding; binding a non-leaf or an
    /// unknown node is a usage error. Shapes are checked as each operation
    /// executes, and mismatches name the operation.
    pub fn forward(&mut self, bindings: &[(NodeId, Tensor<S>)]) -> Result<()> {
        for v in &mut self.values {
            *v = None;
        }
        for a in &mut self.adjoints {
            *a = None;
        }
        self.forward_done = false;
        self.backward_done = false;

        for (id, tensor) in bindings {
            self.check_id(*id, "forward binding")?;
            match &self.ops[id.0] {
                Op::Leaf { .. } => {
                    if self.values[id.0].is_some() {
                        return Err(Error::GraphUsage(format!(
                            "forward: leaf {} bound twice",
                            self.describe(*id)
                        )));
                    }
                    self.values[id.0] = Some(tensor.clone());
                }
                op => {
                    return Err(Error::GraphUsage(format!(
                        "forward: node {} is a {} node, not a leaf; only leaves accept bindings",
                        id.0,
                        op.name()
                    )));
                }
            }
        }

        for i in 0..self.ops.len() {
            if matches!(self.ops[i], Op::Leaf { .. }) {
                if self.values[i].is_none() {
                    return Err(Error::GraphUsage(format!(
                        "forward: leaf {} was never bound",
                        self.describe(NodeId(i))
                    )));
                }
                continue;
            }
            let value = self.eval(i)?;
            self.values[i] = Some(value);
        }

        self.forward_done = true;
        Ok(())
    }

    /// Computes the value of node `i` from already-computed inputs.
    fn eval(&self, i: usize) -> Result<Tensor<S>> {
        let val = |id: NodeId| -> &Tensor<S> {
            self.values[id.0]
                .as_ref()
                .expect("inputs precede node in construction order")
        };

        let op = &self.ops[i];
        match op {
            Op::Leaf { .. } => unreachable!("leaves are bound, not evaluated"),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                if ta.shape() != tb.shape() {
                    return Err(Error::shape(
                        op.name(),
                        format!("operands have shapes {:?} and {:?}", ta.shape(), tb.shape()),
                    ));
                }
                let out: Vec<S> = ta
                    .values()
                    .iter()
                    .zip(tb.values())
                    .map(|(&x, &y)| match op {
                        Op::Add(..) => x + y,
                        Op::Sub(..) => x - y,
                        _ => x * y,
                    })
                    .collect();
                Tensor::new(ta.shape().to_vec(), out)
            }
            Op::MatVec(w, x) => {
                let (tw, tx) = (val(*w), val(*x));
                let (rows, cols) = match tw.shape() {
                    [r, c] => (*r, *c),
                    other => {
                        return Err(Error::shape(
                            "matvec",
                            format!("left operand must be rank 2, got shape {other:?}"),
                        ))
                    }
                };
                if tx.shape() != [cols] {
                    return Err(Error::shape(
                        "matvec",
                        format!(
                            "matrix is {rows}x{cols} but vector has shape {:?}",
                            tx.shape()
                        ),
                    ));
                }
                let wv = tw.values();
                let xv = tx.values();
                let mut out = Vec::with_capacity(rows);
                for r in 0..rows {
                    let row = &wv[r * cols..(r + 1) * cols];
                    out.push(crate::scalar::pairwise_dot(row, xv));
                }
                Ok(Tensor::vector(out))
            }
            Op::Relu(a) => {
                let ta = val(*a);
                let out: Vec<S> = ta
                    .values()
                    .iter()
                    .map(|&x| if x > S::zero() { x } else { S::zero() })
                    .collect();
                Tensor::new(ta.shape().to_vec(), out)
            }
            Op::Sigmoid(a) => {
                let ta = val(*a);
                let out: Vec<S> = ta.values().iter().map(|&x| stable_sigmoid(x)).collect();
                Tensor::new(ta.shape().to_vec(), out)
            }
            Op::LogSoftmax(a) => {
                let ta = val(*a);
                if ta.shape().len() != 1 || ta.is_empty() {
                    return Err(Error::shape(
                        "log_softmax",
                        format!("requires a non-empty vector, got shape {:?}", ta.shape()),
                    ));
                }
                Ok(Tensor::vector(log_softmax_slice(ta.values())))
            }
            Op::Square(a) => {
                let ta = val(*a);
                let out: Vec<S> = ta.values().iter().map(|&x| x * x).collect();
                Tensor::new(ta.shape().to_vec(), out)
            }
            Op::Sum(a) => Ok(Tensor::scalar(pairwise_sum(val(*a).values()))),
            Op::Mean(a) => {
                let ta = val(*a);
                if ta.is_empty() {
                    return Err(Error::shape("mean", "mean of an empty tensor".to_string()));
                }
                Ok(Tensor::scalar(crate::scalar::pairwise_mean(ta.values())))
            }
            Op::Neg(a) => {
                let ta = val(*a);
                let out: Vec<S> = ta.values().iter().map(|&x| -x).collect();
                Tensor::new(ta.shape().to_vec(), out)
            }
            Op::Scale(a, factor) => {
                let ta = val(*a);
                let out: Vec<S> = ta.values().iter().map(|&x| x * *factor).collect();
                Tensor::new(ta.shape().to_vec(), out)
            }
            Op::Pick(a, index) => {
                let ta = val(*a);
                if ta.shape().len() != 1 {
                    return Err(Error::shape(
                        "pick",
                        format!("requires a vector, got shape {:?}", ta.shape()),
                    ));
                }
                if *index >= ta.len() {
                    return Err(Error::shape(
                        "pick",
                        format!(
                            "index {index} out of bounds for vector of length {}",
                            ta.len()
                        ),
                    ));
                }
                Ok(Tensor::scalar(ta.values()[*index]))
            }
        }
    }

    /// Runs the backward pass from a scalar output node.
    ///
    /// Must be called after [`Graph::forward`]; calling it first is a usage
    /// error, as is differentiating a non-scalar node.
    pub fn backward(&mut self, output: NodeId) -> Result<()> {
        self.check_id(output, "backward")?;
        if !self.forward_done {
            return Err(Error::GraphUsage(
                "backward called before forward; run forward with leaf bindings first".into(),
            ));
        }
        let out_val = self.values[output.0]
            .as_ref()
            .expect("forward_done implies all values present");
        if out_val.len() != 1 {
            return Err(Error::GraphUsage(format!(
                "backward requires a scalar output node, but node {} has shape {:?}",
                output.0,
                out_val.shape()
            )));
        }

        for a in &mut self.adjoints {
            *a = None;
        }
        self.adjoints[output.0] = Some(Tensor::new(
            self.values[output.0].as_ref().unwrap().shape().to_vec(),
            vec![S::one()],
        )?);

        // Reverse construction order is a reverse topological order.
        for i in (0..self.ops.len()).rev() {
            let Some(adj) = self.adjoints[i].clone() else {
                continue;
            };
            self.propagate(i, &adj);
        }

        self.backward_done = true;
        Ok(())
    }

    /// Adds `contribution` into the adjoint slot of `target`.
    fn accumulate(&mut self, target: NodeId, contribution: Tensor<S>) {
        match &mut self.adjoints[target.0] {
            Some(existing) => {
                for (e, c) in existing.values_mut().iter_mut().zip(contribution.values()) {
                    *e += *c;
                }
            }
            slot @ None => *slot = Some(contribution),
        }
    }

    /// Pushes node `i`'s adjoint back into its inputs.
    fn propagate(&mut self, i: usize, adj: &Tensor<S>) {
        let op = self.ops[i].clone();
        let value_of = |id: NodeId, values: &[Option<Tensor<S>>]| -> Tensor<S> {
            values[id.0].as_ref().expect("forward ran").clone()
        };

        match op {
            Op::Leaf { .. } => {}
            Op::Add(a, b) => {
                self.accumulate(a, adj.clone());
                self.accumulate(b, adj.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(a, adj.clone());
                let negated: Vec<S> = adj.values().iter().map(|&x| -x).collect();
                self.accumulate(b, Tensor::new(adj.shape().to_vec(), negated).unwrap());
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (value_of(a, &self.values), value_of(b, &self.values));
                let da: Vec<S> = adj
                    .values()
                    .iter()
                    .zip(tb.values())
                    .map(|(&g, &y)| g * y)
                    .collect();
                let db: Vec<S> = adj
                    .values()
                    .iter()
                    .zip(ta.values())
                    .map(|(&g, &x)| g * x)
                    .collect();
                self.accumulate(a, Tensor::new(adj.shape().to_vec(), da).unwrap());
                self.accumulate(b, Tensor::new(adj.shape().to_vec(), db).unwrap());
            }
            Op::MatVec(w, x) => {
                let (tw, tx) = (value_of(w, &self.values), value_of(x, &self.values));
                let (rows, cols) = (tw.shape()[0], tw.shape()[1]);
                let g = adj.values();
                // dW[r, c] = g[r] * x[c]
                let mut dw = vec![S::zero(); rows * cols];
                for r in 0..rows {
                    for c in 0..cols {
                        dw[r * cols + c] = g[r] * tx.values()[c];
                    }
                }
                // dx[c] = sum_r g[r] * W[r, c]; fixed-order pairwise reduction.
                let mut dx = Vec::with_capacity(cols);
                for c in 0..cols {
                    let col: Vec<S> = (0..rows)
                        .map(|r| g[r] * tw.values()[r * cols + c])
                        .collect();
                    dx.push(pairwise_sum(&col));
                }
                self.accumulate(w, Tensor::new(vec![rows, cols], dw).unwrap());
                self.accumulate(x, Tensor::vector(dx));
            }
            Op::Relu(a) => {
                let ta = value_of(a, &self.values);
                // Subgradient at exactly 0 is taken as 0.
                let da: Vec<S> = adj
                    .values()
                    .iter()
                    .zip(ta.values())
                    .map(|(&g, &x)| if x > S::zero() { g } else { S::zero() })
                    .collect();
                self.accumulate(a, Tensor::new(adj.shape().to_vec(), da).unwrap());
            }
            Op::Sigmoid(a) => {
                // Node i's own value is sigmoid(a); reuse it for s*(1-s).
                let s = self.values[i].as_ref().expect("forward ran").clone();
                let da: Vec<S> = adj
                    .values()
                    .iter()
                    .zip(s.values())
                    .map(|(&g, &sv)| g * sv * (S::one() - sv))
                    .collect();
                self.accumulate(a, Tensor::new(adj.shape().to_vec(), da).unwrap());
            }
            Op::LogSoftmax(a) => {
                // d/da_j of log_softmax_i = delta_ij - softmax_j, so the
                // pullback is g_j - softmax_j * sum(g).
                let ls = self.values[i].as_ref().expect("forward ran").clone();
                let g_sum = pairwise_sum(adj.values());
                let da: Vec<S> = adj
                    .values()
                    .iter()
                    .zip(ls.values())
                    .map(|(&g, &l)| g - l.exp() * g_sum)
                    .collect();
                self.accumulate(a, Tensor::new(adj.shape().to_vec(), da).unwrap());
            }
            Op::Square(a) => {
                let ta = value_of(a, &self.values);
                let two = S::from_f64_lit(2.0);
                let da: Vec<S> = adj
                    .values()
                    .iter()
                    .zip(ta.values())
                    .map(|(&g, &x)| two * x * g)
                    .collect();
                self.accumulate(a, Tensor::new(adj.shape().to_vec(), da).unwrap());
            }
            Op::Sum(a) => {
                let ta = value_of(a, &self.values);
                let g = adj.values()[0];
                self.accumulate(
                    a,
                    Tensor::new(ta.shape().to_vec(), vec![g; ta.len()]).unwrap(),
                );
            }
            Op::Mean(a) => {
                let ta = value_of(a, &self.values);
                let g = adj.values()[0] / S::from_f64_lit(ta.len() as f64);
                self.accumulate(
                    a,
                    Tensor::new(ta.shape().to_vec(), vec![g; ta.len()]).unwrap(),
                );
            }
            Op::Neg(a) => {
                let da: Vec<S> = adj.values().iter().map(|&g| -g).collect();
                self.accumulate(a, Tensor::new(adj.shape().to_vec(), da).unwrap());
            }
            Op::Scale(a, factor) => {
                let da: Vec<S> = adj.values().iter().map(|&g| g * factor).collect();
                self.accumulate(a, Tensor::new(adj.shape().to_vec(), da).unwrap());
            }
            Op::Pick(a, index) => {
                let ta = value_of(a, &self.values);
                let mut da = vec![S::zero(); ta.len()];
                da[index] = adj.values()[0];
                self.accumulate(a, Tensor::new(ta.shape().to_vec(), da).unwrap());
            }
        }
    }

    // ---- results ---------------------------------------------------------

    /// Value of a node after [`Graph::forward`].
    pub fn value(&self, id: NodeId) -> Result<&Tensor<S>> {
        self.check_id(id, "value")?;
        if !self.forward_done {
            return Err(Error::GraphUsage(
                "value requested before forward; run forward with leaf bindings first".into(),
            ));
        }
        Ok(self.values[id.0].as_ref().expect("forward_done"))
    }

    /// Gradient of the differentiated output with respect to node `id`.
    ///
    /// Nodes the output does not depend on get a zero gradient of the
    /// appropriate shape.
    pub fn gradient(&self, id: NodeId) -> Result<Tensor<S>> {
        self.check_id(id, "gradient")?;
        if !self.backward_done {
            return Err(Error::GraphUsage(
                "gradient requested before backward; run backward on a scalar output first".into(),
            ));
        }
        match &self.adjoints[id.0] {
            Some(adj) => Ok(adj.clone()),
            None => {
                let shape = self.values[id.0]
                    .as_ref()
                    .expect("forward_done")
                    .shape()
                    .to_vec();
                Ok(Tensor::zeros(shape))
            }
        }
    }

    /// Human-readable description of a node for diagnostics.
    fn describe(&self, id: NodeId) -> String {
        match &self.ops[id.0] {
            Op::Leaf { name } => format!("{} (\"{name}\")", id.0),
            op => format!("{} ({})", id.0, op.name()),
        }
    }
}

/// Numerically stable logistic function.
fn stable_sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// log softmax of a slice with max subtraction, immune to overflow for any
/// finite input.
pub fn log_softmax_slice<S: Scalar>(logits: &[S]) -> Vec<S> {
    let max = logits
        .iter()
        .fold(S::neg_infinity(), |m, &x| if x > m { x } else { m });
    let shifted_exp: Vec<S> = logits.iter().map(|&x| (x - max).exp()).collect();
    let lse = max + pairwise_sum(&shifted_exp).ln();
    logits.iter().map(|&x| x - lse).collect()
}
