//! Graph construction, evaluation, and the reverse sweep.

use std::collections::{BTreeMap, HashMap};

use super::kernels::{self, MatKind};
use super::{AutodiffError, Real, Tensor};

pub type NodeId = usize;

/// Named tensors bound to graph inputs for one evaluation. A BTreeMap so
/// validation and error reporting iterate in a stable order.
pub type Bindings<'a, T> = BTreeMap<String, &'a Tensor<T>>;

#[derive(Debug, Clone)]
enum Op<T: Real> {
    Input { name: String },
    Const { value: Tensor<T> },
    MatMul { a: NodeId, b: NodeId, kind: MatKind },
    SwapAxes { a: NodeId, ax0: usize, ax1: usize },
    Reshape { a: NodeId },
    Concat { parts: Vec<NodeId>, axis: usize },
    SliceAxis { a: NodeId, axis: usize, start: usize, len: usize },
    Gather { table: NodeId, ids: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { a: NodeId, c: f64 },
    AddScalar { a: NodeId, c: f64 },
    Exp { a: NodeId },
    Log { a: NodeId },
    Silu { a: NodeId },
    Sign { a: NodeId },
    Powf { a: NodeId, e: f64 },
    Softmax { a: NodeId },
    RmsNorm { a: NodeId, eps: f64 },
    MeanAxis { a: NodeId, axis: usize },
    MeanAll { a: NodeId },
    SumAll { a: NodeId },
    FrobSq { a: NodeId },
    NllRows { logits: NodeId, targets: NodeId },
    BroadcastLast { a: NodeId, n: usize },
    ExpandLeading { a: NodeId, dims: Vec<usize> },
}

impl<T: Real> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Const { .. } => "const",
            Op::MatMul { kind: MatKind::NN, .. } => "matmul",
            Op::MatMul { kind: MatKind::NT, .. } => "matmul_nt",
            Op::MatMul { kind: MatKind::TN, .. } => "matmul_tn",
            Op::SwapAxes { .. } => "swap_axes",
            Op::Reshape { .. } => "reshape",
            Op::Concat { .. } => "concat",
            Op::SliceAxis { .. } => "slice_axis",
            Op::Gather { .. } => "gather",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::AddScalar { .. } => "add_scalar",
            Op::Exp { .. } => "exp",
            Op::Log { .. } => "log",
            Op::Silu { .. } => "silu",
            Op::Sign { .. } => "sign",
            Op::Powf { .. } => "powf",
            Op::Softmax { .. } => "softmax",
            Op::RmsNorm { .. } => "rms_norm",
            Op::MeanAxis { .. } => "mean_axis",
            Op::MeanAll { .. } => "mean_all",
            Op::SumAll { .. } => "sum_all",
            Op::FrobSq { .. } => "frob_sq",
            Op::NllRows { .. } => "nll_rows",
            Op::BroadcastLast { .. } => "broadcast_last",
            Op::ExpandLeading { .. } => "expand_leading",
        }
    }

    fn operands(&self) -> Vec<NodeId> {
        match self {
            Op::Input { .. } | Op::Const { .. } => vec![],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::SwapAxes { a, .. }
            | Op::Reshape { a }
            | Op::SliceAxis { a, .. }
            | Op::Scale { a, .. }
            | Op::AddScalar { a, .. }
            | Op::Exp { a }
            | Op::Log { a }
            | Op::Silu { a }
            | Op::Sign { a }
            | Op::Powf { a, .. }
            | Op::Softmax { a }
            | Op::RmsNorm { a, .. }
            | Op::MeanAxis { a, .. }
            | Op::MeanAll { a }
            | Op::SumAll { a }
            | Op::FrobSq { a }
            | Op::BroadcastLast { a, .. }
            | Op::ExpandLeading { a, .. } => vec![*a],
            Op::Concat { parts, .. } => parts.clone(),
            Op::Gather { table, ids } => vec![*table, *ids],
            Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } => vec![*a, *b],
            Op::NllRows { logits, targets } => vec![*logits, *targets],
        }
    }
}

#[derive(Debug, Clone)]
struct Node<T: Real> {
    op: Op<T>,
    shape: Vec<usize>,
}

/// Which side of a binary elementwise op is the broadcast suffix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BcSide {
    None,
    Lhs,
    Rhs,
}

fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

fn broadcast_shapes(a: &[usize], b: &[usize]) -> Option<(Vec<usize>, BcSide)> {
    if a == b {
        Some((a.to_vec(), BcSide::None))
    } else if is_suffix(b, a) {
        Some((a.to_vec(), BcSide::Rhs))
    } else if is_suffix(a, b) {
        Some((b.to_vec(), BcSide::Lhs))
    } else {
        None
    }
}

/// Decomposition of a shape around one axis.
fn around_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

struct MatMulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    b_shared: bool,
}

fn matmul_dims(
    kind: MatKind,
    a: &[usize],
    b: &[usize],
) -> Result<(Vec<usize>, MatMulDims), String> {
    if a.len() < 2 || b.len() < 2 {
        return Err(format!("operands must have rank >= 2, got {a:?} and {b:?}"));
    }
    let b_shared = b.len() == 2 && a.len() > 2;
    if !b_shared && a[..a.len() - 2] != b[..b.len() - 2] {
        return Err(format!("leading batch dims differ: {a:?} vs {b:?}"));
    }
    let (am, ak) = (a[a.len() - 2], a[a.len() - 1]);
    let (b0, b1) = (b[b.len() - 2], b[b.len() - 1]);
    let (m, k, bk, n) = match kind {
        MatKind::NN => (am, ak, b0, b1),
        MatKind::NT => (am, ak, b1, b0),
        MatKind::TN => (ak, am, b0, b1),
    };
    if k != bk {
        return Err(format!("inner dimensions differ: {a:?} x {b:?} ({kind:?})"));
    }
    let batch: usize = a[..a.len() - 2].iter().product();
    let mut out = a[..a.len() - 2].to_vec();
    out.push(m);
    out.push(n);
    Ok((out, MatMulDims { batch, m, k, n, b_shared }))
}

/// A built computation graph. Nodes are stored in build order, which is
/// topological by construction.
#[derive(Debug, Clone)]
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    inputs: BTreeMap<String, NodeId>,
    outputs: BTreeMap<String, NodeId>,
}

/// Builds a [`Graph`]. All node constructors validate shapes eagerly and
/// report the offending node id on mismatch.
#[derive(Debug)]
pub struct GraphBuilder<T: Real> {
    nodes: Vec<Node<T>>,
    inputs: BTreeMap<String, NodeId>,
    outputs: BTreeMap<String, NodeId>,
}

impl<T: Real> Default for GraphBuilder<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> GraphBuilder<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), inputs: BTreeMap::new(), outputs: BTreeMap::new() }
    }

    fn push(&mut self, op: Op<T>, shape: Vec<usize>) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node { op, shape });
        id
    }

    fn shape_of(&self, id: NodeId) -> Result<&[usize], AutodiffError> {
        self.nodes.get(id).map(|n| n.shape.as_slice()).ok_or(AutodiffError::BadNode(id))
    }

    fn fail(&self, op: &'static str, msg: String) -> AutodiffError {
        AutodiffError::Shape { node: self.nodes.len(), op, msg }
    }

    pub fn input(&mut self, name: &str, shape: &[usize]) -> Result<NodeId, AutodiffError> {
        if self.inputs.contains_key(name) {
            return Err(AutodiffError::DuplicateInput(name.to_string()));
        }
        let id = self.push(Op::Input { name: name.to_string() }, shape.to_vec());
        self.inputs.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        let shape = value.shape().to_vec();
        self.push(Op::Const { value }, shape)
    }

    pub fn scalar_const(&mut self, value: f64) -> NodeId {
        self.constant(Tensor::scalar(T::from_f64(value)))
    }

    fn matmul_kind(
        &mut self,
        a: NodeId,
        b: NodeId,
        kind: MatKind,
    ) -> Result<NodeId, AutodiffError> {
        let (out, _) = matmul_dims(kind, self.shape_of(a)?, self.shape_of(b)?)
            .map_err(|msg| self.fail("matmul", msg))?;
        Ok(self.push(Op::MatMul { a, b, kind }, out))
    }

    /// a (.., m, k) @ b (.., k, n); b may be rank 2 and shared across the
    /// leading batch of a.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.matmul_kind(a, b, MatKind::NN)
    }

    /// a (.., m, k) @ b (.., n, k)^T without materializing the transpose.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.matmul_kind(a, b, MatKind::NT)
    }

    /// a (.., k, m)^T @ b (.., k, n) without materializing the transpose.
    pub fn matmul_tn(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.matmul_kind(a, b, MatKind::TN)
    }

    pub fn swap_axes(
        &mut self,
        a: NodeId,
        ax0: usize,
        ax1: usize,
    ) -> Result<NodeId, AutodiffError> {
        let shape = self.shape_of(a)?.to_vec();
        if ax0 >= shape.len() || ax1 >= shape.len() {
            return Err(self.fail("swap_axes", format!("axes ({ax0},{ax1}) out of rank {}", shape.len())));
        }
        let mut out = shape;
        out.swap(ax0, ax1);
        let (ax0, ax1) = (ax0.min(ax1), ax0.max(ax1));
        Ok(self.push(Op::SwapAxes { a, ax0, ax1 }, out))
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        let rank = self.shape_of(a)?.len();
        if rank < 2 {
            return Err(self.fail("transpose", format!("rank {rank} < 2")));
        }
        self.swap_axes(a, rank - 2, rank - 1)
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId, AutodiffError> {
        let old = self.shape_of(a)?;
        let old_n: usize = old.iter().product();
        let new_n: usize = shape.iter().product();
        if old_n != new_n {
            return Err(self.fail("reshape", format!("{old:?} ({old_n}) -> {shape:?} ({new_n})")));
        }
        Ok(self.push(Op::Reshape { a }, shape.to_vec()))
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId, AutodiffError> {
        if parts.is_empty() {
            return Err(self.fail("concat", "no parts".to_string()));
        }
        let first = self.shape_of(parts[0])?.to_vec();
        if axis >= first.len() {
            return Err(self.fail("concat", format!("axis {axis} out of rank {}", first.len())));
        }
        let mut total = first[axis];
        for &p in &parts[1..] {
            let s = self.shape_of(p)?;
            if s.len() != first.len() {
                return Err(self.fail("concat", format!("rank mismatch {s:?} vs {first:?}")));
            }
            for (ax, (&a, &b)) in s.iter().zip(&first).enumerate() {
                if ax != axis && a != b {
                    return Err(self.fail("concat", format!("shape mismatch {s:?} vs {first:?}")));
                }
            }
            total += s[axis];
        }
        let mut out = first;
        out[axis] = total;
        Ok(self.push(Op::Concat { parts: parts.to_vec(), axis }, out))
    }

    pub fn slice_axis(
        &mut self,
        a: NodeId,
        axis: usize,
        start: usize,
        len: usize,
    ) -> Result<NodeId, AutodiffError> {
        let shape = self.shape_of(a)?.to_vec();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(self.fail(
                "slice_axis",
                format!("slice [{start}, {start}+{len}) on axis {axis} of {shape:?}"),
            ));
        }
        let mut out = shape;
        out[axis] = len;
        Ok(self.push(Op::SliceAxis { a, axis, start, len }, out))
    }

    /// table (rows, d) indexed by integer-valued `ids` of any shape;
    /// output has shape ids.shape ++ [d].
    pub fn gather(&mut self, table: NodeId, ids: NodeId) -> Result<NodeId, AutodiffError> {
        let t = self.shape_of(table)?;
        if t.len() != 2 {
            return Err(self.fail("gather", format!("table must be rank 2, got {t:?}")));
        }
        let d = t[1];
        let mut out = self.shape_of(ids)?.to_vec();
        out.push(d);
        Ok(self.push(Op::Gather { table, ids }, out))
    }

    fn binary(
        &mut self,
        a: NodeId,
        b: NodeId,
        make: fn(NodeId, NodeId) -> Op<T>,
        name: &'static str,
    ) -> Result<NodeId, AutodiffError> {
        let sa = self.shape_of(a)?;
        let sb = self.shape_of(b)?;
        let (out, _) = broadcast_shapes(sa, sb)
            .ok_or_else(|| self.fail(name, format!("{sa:?} vs {sb:?}")))?;
        Ok(self.push(make(a, b), out))
    }

    /// Elementwise sum. One operand may be a trailing-shape suffix of the
    /// other; it is then broadcast across the leading axes.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.binary(a, b, |a, b| Op::Add { a, b }, "add")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.binary(a, b, |a, b| Op::Sub { a, b }, "sub")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.binary(a, b, |a, b| Op::Mul { a, b }, "mul")
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId, AutodiffError> {
        let shape = self.shape_of(a)?.to_vec();
        Ok(self.push(Op::Scale { a, c }, shape))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId, AutodiffError> {
        let shape = self.shape_of(a)?.to_vec();
        Ok(self.push(Op::AddScalar { a, c }, shape))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        let shape = self.shape_of(a)?.to_vec();
        Ok(self.push(Op::Exp { a }, shape))
    }

    /// Natural log; the caller guarantees positive inputs.
    pub fn log(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        let shape = self.shape_of(a)?.to_vec();
        Ok(self.push(Op::Log { a }, shape))
    }

    pub fn silu(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        let shape = self.shape_of(a)?.to_vec();
        Ok(self.push(Op::Silu { a }, shape))
    }

    /// Elementwise sign with zero gradient everywhere; deliberately
    /// discontinuous at 0 (the finite-difference checker must flag it).
    pub fn sign(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        let shape = self.shape_of(a)?.to_vec();
        Ok(self.push(Op::Sign { a }, shape))
    }

    /// x^e for positive x.
    pub fn powf(&mut self, a: NodeId, e: f64) -> Result<NodeId, AutodiffError> {
        let shape = self.shape_of(a)?.to_vec();
        Ok(self.push(Op::Powf { a, e }, shape))
    }

    /// Max-subtracted softmax over the last axis.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        let shape = self.shape_of(a)?.to_vec();
        if shape.is_empty() {
            return Err(self.fail("softmax", "scalar input".to_string()));
        }
        Ok(self.push(Op::Softmax { a }, shape))
    }

    /// x / sqrt(mean(x^2) + eps) over the last axis. Compose with a
    /// broadcast `mul` for a learned gain.
    pub fn rms_norm(&mut self, a: NodeId, eps: f64) -> Result<NodeId, AutodiffError> {
        let shape = self.shape_of(a)?.to_vec();
        if shape.is_empty() {
            return Err(self.fail("rms_norm", "scalar input".to_string()));
        }
        Ok(self.push(Op::RmsNorm { a, eps }, shape))
    }

    /// Mean along one axis, removing it.
    pub fn mean_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId, AutodiffError> {
        let shape = self.shape_of(a)?.to_vec();
        if axis >= shape.len() {
            return Err(self.fail("mean_axis", format!("axis {axis} out of rank {}", shape.len())));
        }
        let mut out = shape;
        out.remove(axis);
        Ok(self.push(Op::MeanAxis { a, axis }, out))
    }

    pub fn mean_all(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.shape_of(a)?;
        Ok(self.push(Op::MeanAll { a }, vec![]))
    }

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.shape_of(a)?;
        Ok(self.push(Op::SumAll { a }, vec![]))
    }

    /// Sum of squared entries (squared Frobenius norm), as a scalar.
    pub fn frob_sq(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.shape_of(a)?;
        Ok(self.push(Op::FrobSq { a }, vec![]))
    }

    /// Per-position negative log-likelihood: logits (..., v) and
    /// integer-valued targets (...) give NLL of shape (...). Stable
    /// log-sum-exp; gradient flows into logits only.
    pub fn nll_rows(&mut self, logits: NodeId, targets: NodeId) -> Result<NodeId, AutodiffError> {
        let ls = self.shape_of(logits)?.to_vec();
        let ts = self.shape_of(targets)?.to_vec();
        if ls.is_empty() || ls[..ls.len() - 1] != ts[..] {
            return Err(self.fail("nll_rows", format!("logits {ls:?} vs targets {ts:?}")));
        }
        Ok(self.push(Op::NllRows { logits, targets }, ts))
    }

    /// Mean NLL over every position: the cross-entropy loss.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: NodeId) -> Result<NodeId, AutodiffError> {
        let nll = self.nll_rows(logits, targets)?;
        self.mean_all(nll)
    }

    /// (..., 1) -> (..., n) by repetition.
    pub fn broadcast_last(&mut self, a: NodeId, n: usize) -> Result<NodeId, AutodiffError> {
        let shape = self.shape_of(a)?.to_vec();
        if shape.last() != Some(&1) {
            return Err(self.fail("broadcast_last", format!("last dim of {shape:?} is not 1")));
        }
        let mut out = shape;
        *out.last_mut().unwrap() = n;
        Ok(self.push(Op::BroadcastLast { a, n }, out))
    }

    /// shape -> dims ++ shape by repetition of the whole block.
    pub fn expand_leading(&mut self, a: NodeId, dims: &[usize]) -> Result<NodeId, AutodiffError> {
        let shape = self.shape_of(a)?;
        let mut out = dims.to_vec();
        out.extend_from_slice(shape);
        Ok(self.push(Op::ExpandLeading { a, dims: dims.to_vec() }, out))
    }

    /// Register a named output for lookup after evaluation.
    pub fn output(&mut self, name: &str, id: NodeId) -> Result<(), AutodiffError> {
        self.shape_of(id)?;
        self.outputs.insert(name.to_string(), id);
        Ok(())
    }

    pub fn shape(&self, id: NodeId) -> Result<&[usize], AutodiffError> {
        self.shape_of(id)
    }

    pub fn finish(self) -> Graph<T> {
        Graph { nodes: self.nodes, inputs: self.inputs, outputs: self.outputs }
    }
}

/// Forward values for one evaluation of a graph.
#[derive(Debug)]
pub struct Evaluation<T: Real> {
    values: Vec<Tensor<T>>,
    /// requires_grad of the tensor bound to each input node.
    input_grad: Vec<bool>,
}

impl<T: Real> Evaluation<T> {
    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.values[id]
    }
}

/// Gradients keyed by input name, one entry per bound tensor that had
/// requires_grad set (zeros when the input does not reach the loss).
#[derive(Debug)]
pub struct Gradients<T: Real> {
    map: HashMap<String, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.map.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.map.iter()
    }

    pub fn all_finite(&self) -> bool {
        self.map.values().all(|t| t.all_finite())
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

fn unary_map<T: Real>(x: &[T], f: impl Fn(T) -> T) -> Vec<T> {
    x.iter().map(|&v| f(v)).collect()
}

fn zip_broadcast<T: Real>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    if a.len() == b.len() {
        a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
    } else if a.len() > b.len() {
        // rhs is the suffix block
        let ns = b.len();
        let mut out = Vec::with_capacity(a.len());
        for chunk in a.chunks_exact(ns) {
            out.extend(chunk.iter().zip(b).map(|(&x, &y)| f(x, y)));
        }
        out
    } else {
        let ns = a.len();
        let mut out = Vec::with_capacity(b.len());
        for chunk in b.chunks_exact(ns) {
            out.extend(a.iter().zip(chunk).map(|(&x, &y)| f(x, y)));
        }
        out
    }
}

/// Sum `g` (lead * ns elements) down to its trailing block of ns elements.
fn reduce_to_suffix<T: Real>(g: &[T], ns: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; ns];
    for chunk in g.chunks_exact(ns) {
        for (o, &v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    out
}

fn sigmoid<T: Real>(x: T) -> T {
    T::ONE / (T::ONE + (-x).exp())
}

fn index_of<T: Real>(v: T, rows: usize) -> Result<usize, AutodiffError> {
    let f = v.to_f64();
    let idx = f as i64;
    if idx < 0 || (idx as usize) >= rows || (f - idx as f64).abs() > 1e-9 {
        return Err(AutodiffError::GatherIndex { index: idx, rows });
    }
    Ok(idx as usize)
}

impl<T: Real> Graph<T> {
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn input_names(&self) -> impl Iterator<Item = &String> {
        self.inputs.keys()
    }

    pub fn output_id(&self, name: &str) -> Result<NodeId, AutodiffError> {
        self.outputs.get(name).copied().ok_or_else(|| AutodiffError::UnknownOutput(name.into()))
    }

    pub fn shape(&self, id: NodeId) -> Result<&[usize], AutodiffError> {
        self.nodes.get(id).map(|n| n.shape.as_slice()).ok_or(AutodiffError::BadNode(id))
    }

    /// Evaluate every node against the given bindings.
    pub fn eval(&self, bindings: &Bindings<'_, T>) -> Result<Evaluation<T>, AutodiffError> {
        for name in bindings.keys() {
            if !self.inputs.contains_key(name) {
                return Err(AutodiffError::UnknownBinding(name.clone()));
            }
        }
        let mut values: Vec<Tensor<T>> = Vec::with_capacity(self.nodes.len());
        let mut input_grad = vec![false; self.nodes.len()];
        for (id, node) in self.nodes.iter().enumerate() {
            let value = match &node.op {
                Op::Input { name } => {
                    let bound = bindings
                        .get(name)
                        .ok_or_else(|| AutodiffError::MissingBinding(name.clone()))?;
                    if bound.shape() != node.shape {
                        return Err(AutodiffError::BindingShape {
                            name: name.clone(),
                            expected: node.shape.clone(),
                            got: bound.shape().to_vec(),
                        });
                    }
                    input_grad[id] = bound.requires_grad();
                    (*bound).clone()
                }
                Op::Const { value } => value.clone(),
                Op::MatMul { a, b, kind } => {
                    let (va, vb) = (&values[*a], &values[*b]);
                    let (out_shape, d) =
                        matmul_dims(*kind, va.shape(), vb.shape()).expect("validated at build");
                    let mut out = vec![T::ZERO; d.batch * d.m * d.n];
                    kernels::matmul(
                        *kind,
                        va.data(),
                        vb.data(),
                        &mut out,
                        d.batch,
                        d.m,
                        d.k,
                        d.n,
                        d.b_shared,
                    );
                    Tensor::from_parts(out_shape, out)
                }
                Op::SwapAxes { a, ax0, ax1 } => {
                    let va = &values[*a];
                    Tensor::from_parts(
                        node.shape.clone(),
                        swap_axes_copy(va.data(), va.shape(), *ax0, *ax1),
                    )
                }
                Op::Reshape { a } => {
                    let mut t = values[*a].clone();
                    t = t.reshaped(&node.shape).expect("validated at build");
                    t
                }
                Op::Concat { parts, axis } => {
                    let tensors: Vec<&Tensor<T>> = parts.iter().map(|&p| &values[p]).collect();
                    let (outer, total, inner) = around_axis(&node.shape, *axis);
                    let mut out = vec![T::ZERO; outer * total * inner];
                    let mut offset = 0usize;
                    for t in tensors {
                        let len = t.shape()[*axis];
                        let block = len * inner;
                        for o in 0..outer {
                            let dst = (o * total + offset) * inner;
                            let src = o * block;
                            out[dst..dst + block].copy_from_slice(&t.data()[src..src + block]);
                        }
                        offset += len;
                    }
                    Tensor::from_parts(node.shape.clone(), out)
                }
                Op::SliceAxis { a, axis, start, len } => {
                    let va = &values[*a];
                    let (outer, full, inner) = around_axis(va.shape(), *axis);
                    let mut out = vec![T::ZERO; outer * len * inner];
                    for o in 0..outer {
                        let src = (o * full + start) * inner;
                        let dst = o * len * inner;
                        out[dst..dst + len * inner]
                            .copy_from_slice(&va.data()[src..src + len * inner]);
                    }
                    Tensor::from_parts(node.shape.clone(), out)
                }
                Op::Gather { table, ids } => {
                    let vt = &values[*table];
                    let vi = &values[*ids];
                    let rows = vt.shape()[0];
                    let d = vt.shape()[1];
                    let mut out = Vec::with_capacity(vi.numel() * d);
                    for &id_v in vi.data() {
                        let row = index_of(id_v, rows)?;
                        out.extend_from_slice(&vt.data()[row * d..(row + 1) * d]);
                    }
                    Tensor::from_parts(node.shape.clone(), out)
                }
                Op::Add { a, b } => Tensor::from_parts(
                    node.shape.clone(),
                    zip_broadcast(values[*a].data(), values[*b].data(), |x, y| x + y),
                ),
                Op::Sub { a, b } => Tensor::from_parts(
                    node.shape.clone(),
                    zip_broadcast(values[*a].data(), values[*b].data(), |x, y| x - y),
                ),
                Op::Mul { a, b } => Tensor::from_parts(
                    node.shape.clone(),
                    zip_broadcast(values[*a].data(), values[*b].data(), |x, y| x * y),
                ),
                Op::Scale { a, c } => {
                    let c = T::from_f64(*c);
                    Tensor::from_parts(node.shape.clone(), unary_map(values[*a].data(), |x| x * c))
                }
                Op::AddScalar { a, c } => {
                    let c = T::from_f64(*c);
                    Tensor::from_parts(node.shape.clone(), unary_map(values[*a].data(), |x| x + c))
                }
                Op::Exp { a } => {
                    Tensor::from_parts(node.shape.clone(), unary_map(values[*a].data(), |x| x.exp()))
                }
                Op::Log { a } => {
                    Tensor::from_parts(node.shape.clone(), unary_map(values[*a].data(), |x| x.ln()))
                }
                Op::Silu { a } => Tensor::from_parts(
                    node.shape.clone(),
                    unary_map(values[*a].data(), |x| x * sigmoid(x)),
                ),
                Op::Sign { a } => Tensor::from_parts(
                    node.shape.clone(),
                    unary_map(values[*a].data(), |x| {
                        if x > T::ZERO {
                            T::ONE
                        } else if x < T::ZERO {
                            -T::ONE
                        } else {
                            T::ZERO
                        }
                    }),
                ),
                Op::Powf { a, e } => {
                    let e = T::from_f64(*e);
                    Tensor::from_parts(
                        node.shape.clone(),
                        unary_map(values[*a].data(), |x| x.powf(e)),
                    )
                }
                Op::Softmax { a } => {
                    let va = &values[*a];
                    let width = *va.shape().last().unwrap();
                    let mut out = Vec::with_capacity(va.numel());
                    for row in va.data().chunks_exact(width.max(1)) {
                        let m = row.iter().fold(row[0], |acc, &v| acc.maximum(v));
                        let mut denom = T::ZERO;
                        let start = out.len();
                        for &v in row {
                            let e = (v - m).exp();
                            denom += e;
                            out.push(e);
                        }
                        for v in &mut out[start..] {
                            *v = *v / denom;
                        }
                    }
                    Tensor::from_parts(node.shape.clone(), out)
                }
                Op::RmsNorm { a, eps } => {
                    let va = &values[*a];
                    let width = *va.shape().last().unwrap();
                    let eps = T::from_f64(*eps);
                    let inv_w = T::from_f64(1.0 / width as f64);
                    let mut out = Vec::with_capacity(va.numel());
                    for row in va.data().chunks_exact(width.max(1)) {
                        let mut ms = T::ZERO;
                        for &v in row {
                            ms += v * v;
                        }
                        let r = T::ONE / (ms * inv_w + eps).sqrt();
                        out.extend(row.iter().map(|&v| v * r));
                    }
                    Tensor::from_parts(node.shape.clone(), out)
                }
                Op::MeanAxis { a, axis } => {
                    let va = &values[*a];
                    let (outer, len, inner) = around_axis(va.shape(), *axis);
                    let inv = T::from_f64(1.0 / len as f64);
                    let mut out = vec![T::ZERO; outer * inner];
                    for o in 0..outer {
                        let dst = &mut out[o * inner..(o + 1) * inner];
                        for l in 0..len {
                            let src = &va.data()[(o * len + l) * inner..(o * len + l + 1) * inner];
                            for (d, &s) in dst.iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                        for d in dst.iter_mut() {
                            *d = *d * inv;
                        }
                    }
                    Tensor::from_parts(node.shape.clone(), out)
                }
                Op::MeanAll { a } => {
                    let va = &values[*a];
                    let sum = fixed_order_sum(va.data());
                    Tensor::scalar(sum * T::from_f64(1.0 / va.numel() as f64))
                }
                Op::SumAll { a } => Tensor::scalar(fixed_order_sum(values[*a].data())),
                Op::FrobSq { a } => {
                    let d = values[*a].data();
                    Tensor::scalar(kernels::dot8(d, d))
                }
                Op::NllRows { logits, targets } => {
                    let vl = &values[*logits];
                    let vt = &values[*targets];
                    let width = *vl.shape().last().unwrap();
                    let mut out = Vec::with_capacity(vt.numel());
                    for (row, &tv) in vl.data().chunks_exact(width.max(1)).zip(vt.data()) {
                        let target = index_of(tv, width)?;
                        let m = row.iter().fold(row[0], |acc, &v| acc.maximum(v));
                        let mut denom = T::ZERO;
                        for &v in row {
                            denom += (v - m).exp();
                        }
                        out.push(m + denom.ln() - row[target]);
                    }
                    Tensor::from_parts(node.shape.clone(), out)
                }
                Op::BroadcastLast { a, n } => {
                    let va = &values[*a];
                    let mut out = Vec::with_capacity(va.numel() * n);
                    for &v in va.data() {
                        out.extend(std::iter::repeat(v).take(*n));
                    }
                    Tensor::from_parts(node.shape.clone(), out)
                }
                Op::ExpandLeading { a, dims } => {
                    let va = &values[*a];
                    let reps: usize = dims.iter().product();
                    let mut out = Vec::with_capacity(va.numel() * reps);
                    for _ in 0..reps {
                        out.extend_from_slice(va.data());
                    }
                    Tensor::from_parts(node.shape.clone(), out)
                }
            };
            debug_assert_eq!(value.shape(), node.shape, "node {id} ({})", node.op.name());
            values.push(value);
        }
        Ok(Evaluation { values, input_grad })
    }

    /// Value of a named output within an evaluation of this graph.
    pub fn output_value<'e>(
        &self,
        eval: &'e Evaluation<T>,
        name: &str,
    ) -> Result<&'e Tensor<T>, AutodiffError> {
        Ok(eval.value(self.output_id(name)?))
    }

    /// Reverse sweep from a scalar loss node. Returns one gradient per
    /// bound input with requires_grad, including exact zeros for inputs
    /// that do not reach the loss.
    pub fn backward(
        &self,
        eval: &Evaluation<T>,
        loss: NodeId,
    ) -> Result<Gradients<T>, AutodiffError> {
        let loss_node = self.nodes.get(loss).ok_or(AutodiffError::BadNode(loss))?;
        if eval.values[loss].numel() != 1 {
            return Err(AutodiffError::NonScalarLoss(loss_node.shape.clone()));
        }

        // Which nodes need a gradient at all.
        let mut needs = vec![false; self.nodes.len()];
        for (id, node) in self.nodes.iter().enumerate() {
            needs[id] = match &node.op {
                Op::Input { .. } => eval.input_grad[id],
                Op::Const { .. } => false,
                op => op.operands().iter().any(|&o| needs[o]),
            };
        }

        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss] = Some(vec![T::ONE]);
        let mut result: HashMap<String, Tensor<T>> = HashMap::new();

        for id in (0..=loss).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !needs[id] {
                continue;
            }
            let node = &self.nodes[id];
            match &node.op {
                Op::Input { name } => {
                    // All consumers have larger ids and were already
                    // processed, so g is final here.
                    let entry = result
                        .entry(name.clone())
                        .or_insert_with(|| Tensor::zeros(&node.shape));
                    for (dst, src) in entry.data_mut().iter_mut().zip(&g) {
                        *dst += *src;
                    }
                }
                Op::Const { .. } => {}
                Op::MatMul { a, b, kind } => {
                    let (va, vb) = (&eval.values[*a], &eval.values[*b]);
                    let (_, d) =
                        matmul_dims(*kind, va.shape(), vb.shape()).expect("validated at build");
                    let MatMulDims { batch, m, k, n, b_shared } = d;
                    if needs[*a] {
                        let mut da = vec![T::ZERO; va.numel()];
                        match kind {
                            MatKind::NN => kernels::matmul(
                                MatKind::NT, &g, vb.data(), &mut da, batch, m, n, k, b_shared,
                            ),
                            MatKind::NT => kernels::matmul(
                                MatKind::NN, &g, vb.data(), &mut da, batch, m, n, k, b_shared,
                            ),
                            MatKind::TN => {
                                // da (k, m) = b (k, n) @ g (m, n)^T per batch;
                                // the shared-operand side is the lhs here, so
                                // iterate batches explicitly.
                                for l in 0..batch {
                                    let bl = if b_shared {
                                        vb.data()
                                    } else {
                                        &vb.data()[l * k * n..(l + 1) * k * n]
                                    };
                                    let gl = &g[l * m * n..(l + 1) * m * n];
                                    kernels::matmul(
                                        MatKind::NT,
                                        bl,
                                        gl,
                                        &mut da[l * k * m..(l + 1) * k * m],
                                        1,
                                        k,
                                        n,
                                        m,
                                        false,
                                    );
                                }
                            }
                        }
                        accumulate(&mut grads[*a], da);
                    }
                    if needs[*b] {
                        let mut db = vec![T::ZERO; vb.numel()];
                        match (kind, b_shared) {
                            (MatKind::NN, true) => kernels::matmul_sum_batches(
                                MatKind::TN, va.data(), &g, &mut db, batch, k, m, n,
                            ),
                            (MatKind::NN, false) => kernels::matmul(
                                MatKind::TN, va.data(), &g, &mut db, batch, k, m, n, false,
                            ),
                            (MatKind::NT, true) => kernels::matmul_sum_batches(
                                MatKind::TN, &g, va.data(), &mut db, batch, n, m, k,
                            ),
                            (MatKind::NT, false) => kernels::matmul(
                                MatKind::TN, &g, va.data(), &mut db, batch, n, m, k, false,
                            ),
                            (MatKind::TN, true) => kernels::matmul_sum_batches(
                                MatKind::NN, va.data(), &g, &mut db, batch, k, m, n,
                            ),
                            (MatKind::TN, false) => kernels::matmul(
                                MatKind::NN, va.data(), &g, &mut db, batch, k, m, n, false,
                            ),
                        }
                        accumulate(&mut grads[*b], db);
                    }
                }
                Op::SwapAxes { a, ax0, ax1 } => {
                    let da = swap_axes_copy(&g, &node.shape, *ax0, *ax1);
                    accumulate(&mut grads[*a], da);
                }
                Op::Reshape { a } => accumulate(&mut grads[*a], g),
                Op::Concat { parts, axis } => {
                    let (outer, total, inner) = around_axis(&node.shape, *axis);
                    let mut offset = 0usize;
                    for &p in parts {
                        let len = self.nodes[p].shape[*axis];
                        if needs[p] {
                            let mut dp = vec![T::ZERO; outer * len * inner];
                            for o in 0..outer {
                                let src = (o * total + offset) * inner;
                                let dst = o * len * inner;
                                dp[dst..dst + len * inner]
                                    .copy_from_slice(&g[src..src + len * inner]);
                            }
                            accumulate(&mut grads[p], dp);
                        }
                        offset += len;
                    }
                }
                Op::SliceAxis { a, axis, start, len } => {
                    let full_shape = &self.nodes[*a].shape;
                    let (outer, full, inner) = around_axis(full_shape, *axis);
                    let mut da = vec![T::ZERO; outer * full * inner];
                    for o in 0..outer {
                        let dst = (o * full + start) * inner;
                        let src = o * len * inner;
                        da[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                    }
                    accumulate(&mut grads[*a], da);
                }
                Op::Gather { table, ids } => {
                    if needs[*ids] {
                        return Err(AutodiffError::NonDifferentiable { node: id, op: "gather" });
                    }
                    if needs[*table] {
                        let vt = &eval.values[*table];
                        let vi = &eval.values[*ids];
                        let rows = vt.shape()[0];
                        let d = vt.shape()[1];
                        let mut dt = vec![T::ZERO; rows * d];
                        for (pos, &id_v) in vi.data().iter().enumerate() {
                            let row = index_of(id_v, rows).expect("checked in forward");
                            let src = &g[pos * d..(pos + 1) * d];
                            let dst = &mut dt[row * d..(row + 1) * d];
                            for (o, &v) in dst.iter_mut().zip(src) {
                                *o += v;
                            }
                        }
                        accumulate(&mut grads[*table], dt);
                    }
                }
                Op::Add { a, b } => {
                    if needs[*a] {
                        accumulate(&mut grads[*a], project(&g, eval.values[*a].numel()));
                    }
                    if needs[*b] {
                        accumulate(&mut grads[*b], project(&g, eval.values[*b].numel()));
                    }
                }
                Op::Sub { a, b } => {
                    if needs[*a] {
                        accumulate(&mut grads[*a], project(&g, eval.values[*a].numel()));
                    }
                    if needs[*b] {
                        let mut db = project(&g, eval.values[*b].numel());
                        for v in &mut db {
                            *v = -*v;
                        }
                        accumulate(&mut grads[*b], db);
                    }
                }
                Op::Mul { a, b } => {
                    let (va, vb) = (&eval.values[*a], &eval.values[*b]);
                    if needs[*a] {
                        let prod = zip_broadcast(&g, vb.data(), |x, y| x * y);
                        accumulate(&mut grads[*a], project(&prod, va.numel()));
                    }
                    if needs[*b] {
                        let prod = zip_broadcast(&g, va.data(), |x, y| x * y);
                        accumulate(&mut grads[*b], project(&prod, vb.numel()));
                    }
                }
                Op::Scale { a, c } => {
                    let c = T::from_f64(*c);
                    accumulate(&mut grads[*a], unary_map(&g, |x| x * c));
                }
                Op::AddScalar { a, .. } => accumulate(&mut grads[*a], g),
                Op::Exp { a } => {
                    let y = eval.values[id].data();
                    accumulate(
                        &mut grads[*a],
                        g.iter().zip(y).map(|(&gv, &yv)| gv * yv).collect(),
                    );
                }
                Op::Log { a } => {
                    let x = eval.values[*a].data();
                    accumulate(
                        &mut grads[*a],
                        g.iter().zip(x).map(|(&gv, &xv)| gv / xv).collect(),
                    );
                }
                Op::Silu { a } => {
                    let x = eval.values[*a].data();
                    accumulate(
                        &mut grads[*a],
                        g.iter()
                            .zip(x)
                            .map(|(&gv, &xv)| {
                                let s = sigmoid(xv);
                                gv * (s + xv * s * (T::ONE - s))
                            })
                            .collect(),
                    );
                }
                // Zero derivative everywhere it exists: contribute nothing.
                Op::Sign { .. } => {}
                Op::Powf { a, e } => {
                    let x = eval.values[*a].data();
                    let e_t = T::from_f64(*e);
                    let em1 = T::from_f64(*e - 1.0);
                    accumulate(
                        &mut grads[*a],
                        g.iter().zip(x).map(|(&gv, &xv)| gv * e_t * xv.powf(em1)).collect(),
                    );
                }
                Op::Softmax { a } => {
                    let y = eval.values[id].data();
                    let width = *node.shape.last().unwrap();
                    let mut da = Vec::with_capacity(y.len());
                    for (grow, yrow) in g.chunks_exact(width).zip(y.chunks_exact(width)) {
                        let dot = kernels::dot8(grow, yrow);
                        da.extend(
                            grow.iter().zip(yrow).map(|(&gv, &yv)| yv * (gv - dot)),
                        );
                    }
                    accumulate(&mut grads[*a], da);
                }
                Op::RmsNorm { a, eps } => {
                    let x = eval.values[*a].data();
                    let width = *node.shape.last().unwrap();
                    let eps = T::from_f64(*eps);
                    let inv_w = T::from_f64(1.0 / width as f64);
                    let mut da = Vec::with_capacity(x.len());
                    for (grow, xrow) in g.chunks_exact(width).zip(x.chunks_exact(width)) {
                        let mut ms = T::ZERO;
                        for &v in xrow {
                            ms += v * v;
                        }
                        let r = T::ONE / (ms * inv_w + eps).sqrt();
                        let gx = kernels::dot8(grow, xrow);
                        let coef = r * r * r * inv_w * gx;
                        da.extend(
                            grow.iter().zip(xrow).map(|(&gv, &xv)| gv * r - xv * coef),
                        );
                    }
                    accumulate(&mut grads[*a], da);
                }
                Op::MeanAxis { a, axis } => {
                    let src_shape = &self.nodes[*a].shape;
                    let (outer, len, inner) = around_axis(src_shape, *axis);
                    let inv = T::from_f64(1.0 / len as f64);
                    let mut da = vec![T::ZERO; outer * len * inner];
                    for o in 0..outer {
                        let grow = &g[o * inner..(o + 1) * inner];
                        for l in 0..len {
                            let dst = &mut da[(o * len + l) * inner..(o * len + l + 1) * inner];
                            for (d, &gv) in dst.iter_mut().zip(grow) {
                                *d = gv * inv;
                            }
                        }
                    }
                    accumulate(&mut grads[*a], da);
                }
                Op::MeanAll { a } => {
                    let n = eval.values[*a].numel();
                    let gv = g[0] * T::from_f64(1.0 / n as f64);
                    accumulate(&mut grads[*a], vec![gv; n]);
                }
                Op::SumAll { a } => {
                    let n = eval.values[*a].numel();
                    accumulate(&mut grads[*a], vec![g[0]; n]);
                }
                Op::FrobSq { a } => {
                    let x = eval.values[*a].data();
                    let two_g = g[0] + g[0];
                    accumulate(&mut grads[*a], unary_map(x, |v| two_g * v));
                }
                Op::NllRows { logits, targets } => {
                    if needs[*targets] {
                        return Err(AutodiffError::NonDifferentiable { node: id, op: "nll_rows" });
                    }
                    if needs[*logits] {
                        let vl = eval.values[*logits].data();
                        let vt = eval.values[*targets].data();
                        let width = *eval.values[*logits].shape().last().unwrap();
                        let mut dl = Vec::with_capacity(vl.len());
                        for ((row, &tv), &gv) in
                            vl.chunks_exact(width).zip(vt).zip(g.iter())
                        {
                            let target = index_of(tv, width).expect("checked in forward");
                            let m = row.iter().fold(row[0], |acc, &v| acc.maximum(v));
                            let mut denom = T::ZERO;
                            let start = dl.len();
                            for &v in row {
                                let e = (v - m).exp();
                                denom += e;
                                dl.push(e);
                            }
                            for (j, v) in dl[start..].iter_mut().enumerate() {
                                let p = *v / denom;
                                let delta = if j == target { T::ONE } else { T::ZERO };
                                *v = gv * (p - delta);
                            }
                        }
                        accumulate(&mut grads[*logits], dl);
                    }
                }
                Op::BroadcastLast { a, n } => {
                    let mut da = Vec::with_capacity(g.len() / n);
                    for chunk in g.chunks_exact(*n) {
                        da.push(fixed_order_sum(chunk));
                    }
                    accumulate(&mut grads[*a], da);
                }
                Op::ExpandLeading { a, .. } => {
                    let ns = eval.values[*a].numel();
                    accumulate(&mut grads[*a], reduce_to_suffix(&g, ns));
                }
            }
        }

        // Zero-grad completeness: inputs bound with requires_grad that
        // never receive a contribution still get an explicit zero tensor.
        for (name, &id) in &self.inputs {
            if eval.input_grad[id] && !result.contains_key(name) {
                result.insert(name.clone(), Tensor::zeros(&self.nodes[id].shape));
            }
        }
        Ok(Gradients { map: result })
    }
}

fn accumulate<T: Real>(slot: &mut Option<Vec<T>>, contribution: Vec<T>) {
    match slot {
        None => *slot = Some(contribution),
        Some(existing) => {
            debug_assert_eq!(existing.len(), contribution.len());
            for (e, c) in existing.iter_mut().zip(contribution) {
                *e += c;
            }
        }
    }
}

/// Reduce a full-shape gradient onto an operand that may have been
/// broadcast as a trailing suffix. No-op when sizes already match.
fn project<T: Real>(g: &[T], operand_len: usize) -> Vec<T> {
    if g.len() == operand_len {
        g.to_vec()
    } else {
        reduce_to_suffix(g, operand_len)
    }
}

/// Deterministic eight-lane tree sum (same pattern as the dot kernel).
fn fixed_order_sum<T: Real>(x: &[T]) -> T {
    let mut acc = [T::ZERO; 8];
    let mut it = x.chunks_exact(8);
    for c in &mut it {
        for l in 0..8 {
            acc[l] = acc[l] + c[l];
        }
    }
    let mut tail = T::ZERO;
    for &v in it.remainder() {
        tail += v;
    }
    (((acc[0] + acc[4]) + (acc[2] + acc[6])) + ((acc[1] + acc[5]) + (acc[3] + acc[7]))) + tail
}

fn swap_axes_copy<T: Real>(data: &[T], shape: &[usize], ax0: usize, ax1: usize) -> Vec<T> {
    debug_assert!(ax0 < ax1);
    let pre: usize = shape[..ax0].iter().product();
    let d0 = shape[ax0];
    let mid: usize = shape[ax0 + 1..ax1].iter().product();
    let d1 = shape[ax1];
    let post: usize = shape[ax1 + 1..].iter().product();
    let mut out = vec![T::ZERO; data.len()];
    // out[p, j, m, i, q] = in[p, i, m, j, q]
    for p in 0..pre {
        for i in 0..d0 {
            for m in 0..mid {
                for j in 0..d1 {
                    let src = ((((p * d0 + i) * mid) + m) * d1 + j) * post;
                    let dst = ((((p * d1 + j) * mid) + m) * d0 + i) * post;
                    out[dst..dst + post].copy_from_slice(&data[src..src + post]);
                }
            }
        }
    }
    out
}
