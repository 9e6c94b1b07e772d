use std::collections::{BTreeMap, HashMap};

use super::ctc;
use super::{ComputeError, Tensor};

/// Handle to a node inside one [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Input { name: String },
    Constant,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    MatMul { a: usize, b: usize, transpose_b: bool },
    Transpose(usize),
    Softmax(usize),
    LogSoftmax(usize),
    LogSumExp(usize),
    LayerNorm { x: usize, eps: f64 },
    Gelu(usize),
    Log(usize),
    Exp(usize),
    Sqrt(usize),
    SumAll(usize),
    SumRows(usize),
    Gather { src: usize, index: Vec<usize>, shape: Vec<usize> },
    Concat { parts: Vec<usize>, axis: usize },
    Slice { src: usize, axis: usize, start: usize, len: usize },
    SelectRows { base: usize, replacement: usize, take: Vec<bool> },
    Conv1d { x: usize, weight: usize, groups: usize },
    Ctc { log_probs: usize, target: Vec<usize>, blank: usize },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Constant => "constant",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::MatMul { .. } => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::LogSumExp(_) => "log_sum_exp",
            Op::LayerNorm { .. } => "layernorm",
            Op::Gelu(_) => "gelu",
            Op::Log(_) => "log",
            Op::Exp(_) => "exp",
            Op::Sqrt(_) => "sqrt",
            Op::SumAll(_) => "reduce_sum",
            Op::SumRows(_) => "reduce_sum_rows",
            Op::Gather { .. } => "gather",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::SelectRows { .. } => "select_rows",
            Op::Conv1d { .. } => "conv1d",
            Op::Ctc { .. } => "ctc",
        }
    }

    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Input { .. } | Op::Constant => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => vec![*a, *b],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Transpose(a)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::LogSumExp(a)
            | Op::Gelu(a)
            | Op::Log(a)
            | Op::Exp(a)
            | Op::Sqrt(a)
            | Op::SumAll(a)
            | Op::SumRows(a) => vec![*a],
            Op::LayerNorm { x, .. } => vec![*x],
            Op::Gather { src, .. } | Op::Slice { src, .. } => vec![*src],
            Op::Concat { parts, .. } => parts.clone(),
            Op::SelectRows {
                base, replacement, ..
            } => vec![*base, *replacement],
            Op::Conv1d { x, weight, .. } => vec![*x, *weight],
            Op::Ctc { log_probs, .. } => vec![*log_probs],
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Define-by-run computation graph.
///
/// Every builder call evaluates its node immediately, so node order is a
/// topological order by construction. [`Graph::forward`] replays the whole
/// node list with rebound inputs, which is what finite-difference checks use.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    names: HashMap<String, NodeId>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Clone, Debug)]
pub struct Gradients {
    by_node: Vec<Option<Tensor>>,
    inputs: BTreeMap<String, NodeId>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.by_node.get(id.0).and_then(Option::as_ref)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.inputs.get(name).and_then(|&id| self.get(id))
    }

    /// Gradient for every differentiable input, zero-filled when the loss
    /// does not depend on it.
    pub fn named(&self, graph: &Graph) -> BTreeMap<String, Tensor> {
        self.inputs
            .iter()
            .map(|(name, &id)| {
                let g = self
                    .get(id)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(graph.value(id).shape()));
                (name.clone(), g)
            })
            .collect()
    }
}

type Result<T> = std::result::Result<T, ComputeError>;

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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn op_name(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.name()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn node(&self, name: &str) -> Option<NodeId> {
        self.names.get(name).copied()
    }

    /// Gives a node a name so [`Graph::forward`] reports its value.
    pub fn set_name(&mut self, id: NodeId, name: &str) -> Result<()> {
        if let Some(&other) = self.names.get(name) {
            if other != id {
                return Err(ComputeError::DuplicateName(name.to_string()));
            }
        }
        self.check(id)?;
        self.names.insert(name.to_string(), id);
        Ok(())
    }

    /// Named input; differentiable when `tensor.requires_grad()`.
    pub fn input(&mut self, name: &str, tensor: Tensor) -> Result<NodeId> {
        if self.names.contains_key(name) {
            return Err(ComputeError::DuplicateName(name.to_string()));
        }
        let requires_grad = tensor.requires_grad();
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op: Op::Input {
                name: name.to_string(),
            },
            value: tensor,
            requires_grad,
        });
        self.names.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn constant(&mut self, tensor: Tensor) -> NodeId {
        let id = NodeId(self.nodes.len());
        let mut value = tensor;
        value.set_requires_grad(false);
        self.nodes.push(Node {
            op: Op::Constant,
            value,
            requires_grad: false,
        });
        id
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Mul(a.0, b.0))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Div(a.0, b.0))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        self.push(Op::Scale(a.0, factor))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::MatMul {
            a: a.0,
            b: b.0,
            transpose_b: false,
        })
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::MatMul {
            a: a.0,
            b: b.0,
            transpose_b: true,
        })
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Transpose(a.0))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Softmax(a.0))
    }

    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::LogSoftmax(a.0))
    }

    /// Row-wise log-sum-exp, shape `[rows, 1]`.
    pub fn log_sum_exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::LogSumExp(a.0))
    }

    /// Row-wise normalization without affine terms.
    pub fn layer_norm(&mut self, x: NodeId, eps: f64) -> Result<NodeId> {
        self.push(Op::LayerNorm { x: x.0, eps })
    }

    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Gelu(a.0))
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Log(a.0))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Exp(a.0))
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Sqrt(a.0))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::SumAll(a.0))
    }

    /// Sum over the last axis, shape `[rows, 1]`.
    pub fn sum_rows(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::SumRows(a.0))
    }

    /// `out[k] = src[index[k]]` over the flattened source.
    pub fn gather(&mut self, src: NodeId, index: Vec<usize>, shape: Vec<usize>) -> Result<NodeId> {
        self.push(Op::Gather {
            src: src.0,
            index,
            shape,
        })
    }

    /// Selects whole rows of a matrix.
    pub fn gather_rows(&mut self, src: NodeId, rows: &[usize]) -> Result<NodeId> {
        let cols = self.value(src).cols();
        let index = rows
            .iter()
            .flat_map(|&r| (0..cols).map(move |c| r * cols + c))
            .collect();
        self.gather(src, index, vec![rows.len(), cols])
    }

    /// Picks `src[i, cols[i]]` for every row, shape `[rows]`.
    pub fn pick(&mut self, src: NodeId, cols: &[usize]) -> Result<NodeId> {
        let width = self.value(src).cols();
        let index = cols.iter().enumerate().map(|(i, &c)| i * width + c).collect();
        self.gather(src, index, vec![cols.len()])
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        self.push(Op::Concat {
            parts: parts.iter().map(|p| p.0).collect(),
            axis,
        })
    }

    pub fn slice(&mut self, src: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        self.push(Op::Slice {
            src: src.0,
            axis,
            start,
            len,
        })
    }

    /// Row `i` comes from `replacement` where `take[i]`, else from `base`.
    /// A single-row replacement is broadcast.
    pub fn select_rows(&mut self, base: NodeId, replacement: NodeId, take: Vec<bool>) -> Result<NodeId> {
        self.push(Op::SelectRows {
            base: base.0,
            replacement: replacement.0,
            take,
        })
    }

    /// Grouped 1-D convolution over time. `x` is `[T, channels]`, `weight`
    /// is `[channels, channels / groups, kernel]`; output keeps length `T`.
    pub fn conv1d(&mut self, x: NodeId, weight: NodeId, groups: usize) -> Result<NodeId> {
        self.push(Op::Conv1d {
            x: x.0,
            weight: weight.0,
            groups,
        })
    }

    /// Negative log-likelihood of `target` under CTC, given per-frame
    /// log-probabilities `[T, vocab]`.
    pub fn ctc(&mut self, log_probs: NodeId, target: Vec<usize>, blank: usize) -> Result<NodeId> {
        self.push(Op::Ctc {
            log_probs: log_probs.0,
            target,
            blank,
        })
    }

    fn check(&self, id: NodeId) -> Result<()> {
        if id.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(ComputeError::UnknownNode(id.0))
        }
    }

    fn push(&mut self, op: Op) -> Result<NodeId> {
        let index = self.nodes.len();
        for i in op.inputs() {
            if i >= index {
                return Err(ComputeError::UnknownNode(i));
            }
        }
        let value = self.evaluate(&op, index)?;
        let requires_grad = op.inputs().iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(NodeId(index))
    }

    /// Rebinds the given named inputs and re-evaluates every node.
    ///
    /// Returns the values of all named nodes.
    pub fn forward(&mut self, inputs: &HashMap<String, Tensor>) -> Result<HashMap<String, Tensor>> {
        for (name, tensor) in inputs {
            let id = self
                .names
                .get(name)
                .copied()
                .ok_or_else(|| ComputeError::UnknownInput(name.clone()))?;
            let node = &mut self.nodes[id.0];
            if !matches!(node.op, Op::Input { .. }) {
                return Err(ComputeError::UnknownInput(name.clone()));
            }
            let mut value = tensor.clone();
            value.set_requires_grad(node.requires_grad);
            node.value = value;
        }
        self.reevaluate()?;
        Ok(self
            .names
            .iter()
            .map(|(name, id)| (name.clone(), self.nodes[id.0].value.clone()))
            .collect())
    }

    pub fn reevaluate(&mut self) -> Result<()> {
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Input { .. } | Op::Constant) {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let value = self.evaluate(&op, i)?;
            self.nodes[i].value = value;
        }
        Ok(())
    }

    /// Replaces the value of a named input without re-evaluating.
    pub(crate) fn set_input_value(&mut self, id: NodeId, value: Tensor) {
        let rg = self.nodes[id.0].requires_grad;
        let mut v = value;
        v.set_requires_grad(rg);
        self.nodes[id.0].value = v;
    }

    /// Differentiable named inputs in name order.
    pub fn grad_inputs(&self) -> Vec<(String, NodeId)> {
        let mut out: Vec<(String, NodeId)> = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match &n.op {
                Op::Input { name } if n.requires_grad => Some((name.clone(), NodeId(i))),
                _ => None,
            })
            .collect();
        out.sort();
        out
    }

    fn evaluate(&self, op: &Op, node: usize) -> Result<Tensor> {
        let v = |i: usize| &self.nodes[i].value;
        let mismatch = |detail: String| ComputeError::ShapeMismatch {
            node,
            op: op.name(),
            detail,
        };
        match op {
            Op::Input { .. } | Op::Constant => Ok(self.nodes[node].value.clone()),
            Op::Add(a, b) => binary(v(*a), v(*b), |x, y| x + y).map_err(mismatch),
            Op::Sub(a, b) => binary(v(*a), v(*b), |x, y| x - y).map_err(mismatch),
            Op::Mul(a, b) => binary(v(*a), v(*b), |x, y| x * y).map_err(mismatch),
            Op::Div(a, b) => binary(v(*a), v(*b), |x, y| x / y).map_err(mismatch),
            Op::Scale(a, f) => Ok(v(*a).map(|x| x * f)),
            Op::MatMul { a, b, transpose_b } => {
                let (a, b) = (v(*a), v(*b));
                if a.rank() != 2 || b.rank() != 2 {
                    return Err(mismatch(format!("matmul needs matrices, got {:?} and {:?}", a.shape(), b.shape())));
                }
                let (m, k) = (a.rows(), a.cols());
                let (kb, n) = if *transpose_b { (b.cols(), b.rows()) } else { (b.rows(), b.cols()) };
                if k != kb {
                    return Err(mismatch(format!("inner dimensions {k} and {kb} differ")));
                }
                let out = if *transpose_b {
                    matmul_nt(a.data(), b.data(), m, k, n)
                } else {
                    matmul_nn(a.data(), b.data(), m, k, n)
                };
                Ok(Tensor::matrix(m, n, out)?)
            }
            Op::Transpose(a) => {
                let a = v(*a);
                if a.rank() != 2 {
                    return Err(mismatch(format!("transpose needs a matrix, got {:?}", a.shape())));
                }
                Ok(Tensor::matrix(a.cols(), a.rows(), transpose(a.data(), a.rows(), a.cols()))?)
            }
            Op::Softmax(a) => Ok(rowwise(v(*a), softmax_row)),
            Op::LogSoftmax(a) => Ok(rowwise(v(*a), log_softmax_row)),
            Op::LogSumExp(a) => {
                let a = v(*a);
                let out = (0..a.rows()).map(|i| log_sum_exp(a.row(i))).collect();
                Ok(Tensor::matrix(a.rows(), 1, out)?)
            }
            Op::LayerNorm { x, eps } => Ok(rowwise(v(*x), |r| layer_norm_row(r, *eps).0)),
            Op::Gelu(a) => Ok(v(*a).map(gelu)),
            Op::Log(a) => Ok(v(*a).map(f64::ln)),
            Op::Exp(a) => Ok(v(*a).map(f64::exp)),
            Op::Sqrt(a) => Ok(v(*a).map(f64::sqrt)),
            Op::SumAll(a) => Ok(Tensor::scalar(v(*a).data().iter().sum())),
            Op::SumRows(a) => {
                let a = v(*a);
                let out = (0..a.rows()).map(|i| a.row(i).iter().sum()).collect();
                Ok(Tensor::matrix(a.rows(), 1, out)?)
            }
            Op::Gather { src, index, shape } => {
                let src = v(*src);
                if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
                    return Err(ComputeError::IndexOutOfRange {
                        node,
                        op: op.name(),
                        index: bad,
                        bound: src.len(),
                    });
                }
                let data = index.iter().map(|&i| src.data()[i]).collect();
                Tensor::new(shape.clone(), data).map_err(|e| mismatch(e.to_string()))
            }
            Op::Concat { parts, axis } => {
                let parts: Vec<&Tensor> = parts.iter().map(|&p| v(p)).collect();
                concat(&parts, *axis).map_err(mismatch)
            }
            Op::Slice { src, axis, start, len } => slice(v(*src), *axis, *start, *len).map_err(mismatch),
            Op::SelectRows {
                base,
                replacement,
                take,
            } => {
                let (base, repl) = (v(*base), v(*replacement));
                if take.len() != base.rows() {
                    return Err(mismatch(format!("{} row flags for {} rows", take.len(), base.rows())));
                }
                if repl.cols() != base.cols() || (repl.rows() != 1 && repl.rows() != base.rows()) {
                    return Err(mismatch(format!(
                        "replacement {:?} incompatible with base {:?}",
                        repl.shape(),
                        base.shape()
                    )));
                }
                let mut out = base.clone();
                out.set_requires_grad(false);
                for (i, &t) in take.iter().enumerate() {
                    if t {
                        let r = if repl.rows() == 1 { 0 } else { i };
                        out.row_mut(i).copy_from_slice(repl.row(r));
                    }
                }
                Ok(out)
            }
            Op::Conv1d { x, weight, groups } => conv1d_forward(v(*x), v(*weight), *groups).map_err(mismatch),
            Op::Ctc {
                log_probs,
                target,
                blank,
            } => {
                let lp = v(*log_probs);
                ctc::validate(lp, target, *blank).map_err(mismatch)?;
                Ok(Tensor::scalar(ctc::neg_log_likelihood(lp, target, *blank)))
            }
        }
    }

    /// Reverse-mode pass from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        self.check(loss)?;
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(ComputeError::NonScalarLoss {
                node: loss.0,
                shape: lv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        let by_node = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.map(|g| Tensor::new(n.value.shape().to_vec(), g).expect("gradient shape")))
            .collect();
        let inputs = self.grad_inputs().into_iter().collect();
        Ok(Gradients { by_node, inputs })
    }

    /// Gradients keyed by input name, for a loss node found by name.
    pub fn backward_named(&self, loss: &str) -> Result<BTreeMap<String, Tensor>> {
        let id = self.node(loss).ok_or_else(|| ComputeError::UnknownInput(loss.to_string()))?;
        Ok(self.backward(id)?.named(self))
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let v = |j: usize| &self.nodes[j].value;
        let wants = |j: usize| self.nodes[j].requires_grad;
        let mut acc = |j: usize, contrib: Vec<f64>| match &mut grads[j] {
            Some(existing) => existing.iter_mut().zip(contrib).for_each(|(e, c)| *e += c),
            slot @ None => *slot = Some(contrib),
        };
        match &node.op {
            Op::Input { .. } | Op::Constant => {}
            Op::Add(a, b) => {
                let (ga, gb) = binary_grad(v(*a), v(*b), g, |_, _| (1.0, 1.0));
                if wants(*a) {
                    acc(*a, ga);
                }
                if wants(*b) {
                    acc(*b, gb);
                }
            }
            Op::Sub(a, b) => {
                let (ga, gb) = binary_grad(v(*a), v(*b), g, |_, _| (1.0, -1.0));
                if wants(*a) {
                    acc(*a, ga);
                }
                if wants(*b) {
                    acc(*b, gb);
                }
            }
            Op::Mul(a, b) => {
                let (ga, gb) = binary_grad(v(*a), v(*b), g, |x, y| (y, x));
                if wants(*a) {
                    acc(*a, ga);
                }
                if wants(*b) {
                    acc(*b, gb);
                }
            }
            Op::Div(a, b) => {
                let (ga, gb) = binary_grad(v(*a), v(*b), g, |x, y| (1.0 / y, -x / (y * y)));
                if wants(*a) {
                    acc(*a, ga);
                }
                if wants(*b) {
                    acc(*b, gb);
                }
            }
            Op::Scale(a, f) => acc(*a, g.iter().map(|x| x * f).collect()),
            Op::MatMul { a, b, transpose_b } => {
                let (av, bv) = (v(*a), v(*b));
                let (m, k) = (av.rows(), av.cols());
                let n = out.cols();
                if wants(*a) {
                    // dA = G · B  (B stored n×k) or G · Bᵀ (B stored k×n)
                    let ga = if *transpose_b {
                        matmul_nn(g, bv.data(), m, n, k)
                    } else {
                        matmul_nt(g, bv.data(), m, n, k)
                    };
                    acc(*a, ga);
                }
                if wants(*b) {
                    let at = transpose(av.data(), m, k);
                    let gb = if *transpose_b {
                        // dB = Gᵀ · A, shape n×k
                        let gt = transpose(g, m, n);
                        matmul_nn(&gt, av.data(), n, m, k)
                    } else {
                        matmul_nn(&at, g, k, m, n)
                    };
                    acc(*b, gb);
                }
            }
            Op::Transpose(a) => acc(*a, transpose(g, out.rows(), out.cols())),
            Op::Softmax(a) => {
                let c = out.cols();
                let mut ga = vec![0.0; g.len()];
                for r in 0..out.rows() {
                    let y = out.row(r);
                    let gr = &g[r * c..(r + 1) * c];
                    let dot: f64 = y.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for j in 0..c {
                        ga[r * c + j] = y[j] * (gr[j] - dot);
                    }
                }
                acc(*a, ga);
            }
            Op::LogSoftmax(a) => {
                let c = out.cols();
                let mut ga = vec![0.0; g.len()];
                for r in 0..out.rows() {
                    let y = out.row(r);
                    let gr = &g[r * c..(r + 1) * c];
                    let total: f64 = gr.iter().sum();
                    for j in 0..c {
                        ga[r * c + j] = gr[j] - y[j].exp() * total;
                    }
                }
                acc(*a, ga);
            }
            Op::LogSumExp(a) => {
                let av = v(*a);
                let c = av.cols();
                let mut ga = vec![0.0; av.len()];
                for r in 0..av.rows() {
                    let lse = out.data()[r];
                    for j in 0..c {
                        ga[r * c + j] = g[r] * (av.row(r)[j] - lse).exp();
                    }
                }
                acc(*a, ga);
            }
            Op::LayerNorm { x, eps } => {
                let xv = v(*x);
                let c = xv.cols();
                let n = c as f64;
                let mut ga = vec![0.0; xv.len()];
                for r in 0..xv.rows() {
                    let (xhat, inv_std) = layer_norm_row(xv.row(r), *eps);
                    let gr = &g[r * c..(r + 1) * c];
                    let sum_g: f64 = gr.iter().sum();
                    let sum_gx: f64 = gr.iter().zip(&xhat).map(|(g, x)| g * x).sum();
                    for j in 0..c {
                        ga[r * c + j] = inv_std / n * (n * gr[j] - sum_g - xhat[j] * sum_gx);
                    }
                }
                acc(*x, ga);
            }
            Op::Gelu(a) => {
                let ga = v(*a).data().iter().zip(g).map(|(&x, g)| g * gelu_grad(x)).collect();
                acc(*a, ga);
            }
            Op::Log(a) => {
                let ga = v(*a).data().iter().zip(g).map(|(&x, g)| g / x).collect();
                acc(*a, ga);
            }
            Op::Exp(a) => {
                let ga = out.data().iter().zip(g).map(|(&y, g)| g * y).collect();
                acc(*a, ga);
            }
            Op::Sqrt(a) => {
                let ga = out.data().iter().zip(g).map(|(&y, g)| g / (2.0 * y)).collect();
                acc(*a, ga);
            }
            Op::SumAll(a) => acc(*a, vec![g[0]; v(*a).len()]),
            Op::SumRows(a) => {
                let av = v(*a);
                let c = av.cols();
                acc(*a, (0..av.len()).map(|k| g[k / c]).collect());
            }
            Op::Gather { src, index, .. } => {
                let mut ga = vec![0.0; v(*src).len()];
                for (k, &i) in index.iter().enumerate() {
                    ga[i] += g[k];
                }
                acc(*src, ga);
            }
            Op::Concat { parts, axis } => {
                let c = out.cols();
                let mut offset = 0;
                for &p in parts {
                    let pv = v(p);
                    let (pr, pc) = (pv.rows(), pv.cols());
                    if wants(p) {
                        let gp = if *axis == 0 {
                            g[offset * c..(offset + pr) * c].to_vec()
                        } else {
                            (0..pr)
                                .flat_map(|r| g[r * c + offset..r * c + offset + pc].iter().copied())
                                .collect()
                        };
                        acc(p, gp);
                    }
                    offset += if *axis == 0 { pr } else { pc };
                }
            }
            Op::Slice { src, axis, start, len } => {
                let sv = v(*src);
                let c = sv.cols();
                let mut ga = vec![0.0; sv.len()];
                if *axis == 0 {
                    ga[start * c..(start + len) * c].copy_from_slice(g);
                } else {
                    for r in 0..sv.rows() {
                        ga[r * c + start..r * c + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
                    }
                }
                acc(*src, ga);
            }
            Op::SelectRows {
                base,
                replacement,
                take,
            } => {
                let c = out.cols();
                if wants(*base) {
                    let mut gb = g.to_vec();
                    for (r, &t) in take.iter().enumerate() {
                        if t {
                            gb[r * c..(r + 1) * c].iter_mut().for_each(|x| *x = 0.0);
                        }
                    }
                    acc(*base, gb);
                }
                if wants(*replacement) {
                    let rv = v(*replacement);
                    let mut gr = vec![0.0; rv.len()];
                    for (r, &t) in take.iter().enumerate() {
                        if t {
                            let dst = if rv.rows() == 1 { 0 } else { r };
                            for j in 0..c {
                                gr[dst * c + j] += g[r * c + j];
                            }
                        }
                    }
                    acc(*replacement, gr);
                }
            }
            Op::Conv1d { x, weight, groups } => {
                let (gx, gw) = conv1d_backward(v(*x), v(*weight), *groups, g);
                if wants(*x) {
                    acc(*x, gx);
                }
                if wants(*weight) {
                    acc(*weight, gw);
                }
            }
            Op::Ctc {
                log_probs,
                target,
                blank,
            } => {
                let (_, grad) = ctc::neg_log_likelihood_grad(v(*log_probs), target, *blank);
                acc(*log_probs, grad.into_iter().map(|d| d * g[0]).collect());
            }
        }
    }
}

fn broadcast_dims(a: &Tensor, b: &Tensor) -> std::result::Result<(usize, usize, Vec<usize>), String> {
    if a.shape() == b.shape() {
        return Ok((a.rows(), a.cols(), a.shape().to_vec()));
    }
    let pick = |x: usize, y: usize| -> Option<usize> {
        if x == y || y == 1 {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else {
            None
        }
    };
    let err = || format!("cannot broadcast {:?} with {:?}", a.shape(), b.shape());
    let r = pick(a.rows(), b.rows()).ok_or_else(err)?;
    let c = pick(a.cols(), b.cols()).ok_or_else(err)?;
    let shape = if a.rank() >= 2 || b.rank() >= 2 { vec![r, c] } else { vec![c] };
    Ok((r, c, shape))
}

fn binary(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> std::result::Result<Tensor, String> {
    let (r, c, shape) = broadcast_dims(a, b)?;
    let (ar, ac, br, bc) = (a.rows(), a.cols(), b.rows(), b.cols());
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        let ia = if ar == 1 { 0 } else { i };
        let ib = if br == 1 { 0 } else { i };
        for j in 0..c {
            let x = a.data()[ia * ac + if ac == 1 { 0 } else { j }];
            let y = b.data()[ib * bc + if bc == 1 { 0 } else { j }];
            out.push(f(x, y));
        }
    }
    Tensor::new(shape, out).map_err(|e| e.to_string())
}

fn binary_grad(a: &Tensor, b: &Tensor, g: &[f64], partials: impl Fn(f64, f64) -> (f64, f64)) -> (Vec<f64>, Vec<f64>) {
    let (r, c, _) = broadcast_dims(a, b).expect("validated in forward");
    let (ar, ac, br, bc) = (a.rows(), a.cols(), b.rows(), b.cols());
    let mut ga = vec![0.0; a.len()];
    let mut gb = vec![0.0; b.len()];
    for i in 0..r {
        let ia = if ar == 1 { 0 } else { i };
        let ib = if br == 1 { 0 } else { i };
        for j in 0..c {
            let ka = ia * ac + if ac == 1 { 0 } else { j };
            let kb = ib * bc + if bc == 1 { 0 } else { j };
            let (da, db) = partials(a.data()[ka], b.data()[kb]);
            let gij = g[i * c + j];
            ga[ka] += gij * da;
            gb[kb] += gij * db;
        }
    }
    (ga, gb)
}

pub(crate) fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a [m×k] · bᵀ` where `b` is stored `[n×k]`.
pub(crate) fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

fn rowwise(a: &Tensor, f: impl Fn(&[f64]) -> Vec<f64>) -> Tensor {
    let data = (0..a.rows()).flat_map(|i| f(a.row(i))).collect();
    Tensor::new(a.shape().to_vec(), data).expect("row-wise op keeps shape")
}

pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn softmax_row(r: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(r);
    r.iter().map(|x| (x - lse).exp()).collect()
}

fn log_softmax_row(r: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(r);
    r.iter().map(|x| x - lse).collect()
}

fn layer_norm_row(r: &[f64], eps: f64) -> (Vec<f64>, f64) {
    let n = r.len() as f64;
    let mean = r.iter().sum::<f64>() / n;
    let var = r.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + eps).sqrt();
    (r.iter().map(|x| (x - mean) * inv_std).collect(), inv_std)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh approximation of GELU.
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x.powi(3))).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x.powi(3));
    let t = inner.tanh();
    let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

fn concat(parts: &[&Tensor], axis: usize) -> std::result::Result<Tensor, String> {
    let first = parts.first().ok_or("concat of nothing")?;
    match axis {
        0 => {
            let c = first.cols();
            if parts.iter().any(|p| p.cols() != c) {
                return Err("concat along rows needs equal column counts".into());
            }
            let rows = parts.iter().map(|p| p.rows()).sum();
            let data = parts.iter().flat_map(|p| p.data().iter().copied()).collect();
            Tensor::matrix(rows, c, data).map_err(|e| e.to_string())
        }
        1 => {
            let r = first.rows();
            if parts.iter().any(|p| p.rows() != r) {
                return Err("concat along columns needs equal row counts".into());
            }
            let cols = parts.iter().map(|p| p.cols()).sum();
            let mut data = Vec::with_capacity(r * cols);
            for i in 0..r {
                for p in parts {
                    data.extend_from_slice(p.row(i));
                }
            }
            Tensor::matrix(r, cols, data).map_err(|e| e.to_string())
        }
        _ => Err(format!("axis {axis} unsupported")),
    }
}

fn slice(src: &Tensor, axis: usize, start: usize, len: usize) -> std::result::Result<Tensor, String> {
    let (r, c) = (src.rows(), src.cols());
    match axis {
        0 if start + len <= r && len > 0 => {
            Tensor::matrix(len, c, src.data()[start * c..(start + len) * c].to_vec()).map_err(|e| e.to_string())
        }
        1 if start + len <= c && len > 0 => {
            let data = (0..r).flat_map(|i| src.row(i)[start..start + len].iter().copied()).collect();
            Tensor::matrix(r, len, data).map_err(|e| e.to_string())
        }
        0 | 1 => Err(format!("slice {start}..{} outside {:?}", start + len, src.shape())),
        _ => Err(format!("axis {axis} unsupported")),
    }
}

fn conv_dims(x: &Tensor, w: &Tensor, groups: usize) -> std::result::Result<(usize, usize, usize, usize), String> {
    if x.rank() != 2 || w.rank() != 3 {
        return Err(format!("conv1d needs [T,C] input and [C,C/g,K] weight, got {:?} and {:?}", x.shape(), w.shape()));
    }
    let (t, ch) = (x.rows(), x.cols());
    let (out_ch, per_group, kernel) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    if groups == 0 || ch % groups != 0 || out_ch != ch || per_group != ch / groups {
        return Err(format!("conv1d weight {:?} inconsistent with {ch} channels in {groups} groups", w.shape()));
    }
    Ok((t, ch, per_group, kernel))
}

fn conv1d_forward(x: &Tensor, w: &Tensor, groups: usize) -> std::result::Result<Tensor, String> {
    let (t, ch, per_group, kernel) = conv_dims(x, w, groups)?;
    let pad = kernel / 2;
    let mut out = vec![0.0; t * ch];
    for o in 0..ch {
        let g0 = (o / per_group) * per_group;
        for il in 0..per_group {
            let i = g0 + il;
            let wrow = &w.data()[(o * per_group + il) * kernel..(o * per_group + il + 1) * kernel];
            for (k, &wk) in wrow.iter().enumerate() {
                for ti in 0..t {
                    let src = ti + k;
                    if src < pad || src - pad >= t {
                        continue;
                    }
                    out[ti * ch + o] += wk * x.data()[(src - pad) * ch + i];
                }
            }
        }
    }
    Tensor::matrix(t, ch, out).map_err(|e| e.to_string())
}

fn conv1d_backward(x: &Tensor, w: &Tensor, groups: usize, g: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (t, ch, per_group, kernel) = conv_dims(x, w, groups).expect("validated in forward");
    let pad = kernel / 2;
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; w.len()];
    for o in 0..ch {
        let g0 = (o / per_group) * per_group;
        for il in 0..per_group {
            let i = g0 + il;
            let base = (o * per_group + il) * kernel;
            for k in 0..kernel {
                let wk = w.data()[base + k];
                let mut acc = 0.0;
                for ti in 0..t {
                    let src = ti + k;
                    if src < pad || src - pad >= t {
                        continue;
                    }
                    let s = src - pad;
                    let go = g[ti * ch + o];
                    acc += x.data()[s * ch + i] * go;
                    gx[s * ch + i] += wk * go;
                }
                gw[base + k] += acc;
            }
        }
    }
    (gx, gw)
}
