//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Every operation on a [`Var`] evaluates eagerly and records itself on the
//! owning [`Graph`]. [`Graph::backward`] then walks the tape in reverse.
//! Nodes that do not depend on any differentiable leaf are skipped.

use std::cell::{Ref, RefCell};
use std::collections::{HashMap, HashSet};

use crate::kernels::{self, ConvGeom};
use crate::param::{Param, ParamId};
use crate::tensor::Tensor;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddScalar(usize),
    MulScalar(usize, f64),
    MatMul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    SumTo(usize),
    Exp(usize),
    Log(usize),
    Relu(usize),
    Tanh(usize),
    Sigmoid(usize),
    Sqrt(usize),
    Square(usize),
    Clamp(usize, f64, f64),
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeom,
    },
    AvgPool2(usize),
    Upsample2(usize),
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    GatherRows(usize, Vec<usize>),
    MaskedLogSumExp(usize, Tensor),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Tape of recorded operations.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    bound: RefCell<HashMap<ParamId, usize>>,
    frozen: RefCell<HashSet<ParamId>>,
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn rg(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    /// Binds a parameter. Repeated calls within one graph return the same node,
    /// so gradients from every use accumulate. Frozen parameters become constants.
    pub fn param(&self, p: &Param) -> Var<'_> {
        if let Some(&id) = self.bound.borrow().get(&p.id()) {
            return Var { graph: self, id };
        }
        let trainable = !self.frozen.borrow().contains(&p.id());
        let v = self.push(p.value.clone(), Op::Leaf, trainable);
        self.bound.borrow_mut().insert(p.id(), v.id);
        v
    }

    /// Routes later [`Graph::param`] calls for `id` to an existing node.
    pub fn bind(&self, id: ParamId, var: Var<'_>) {
        self.bound.borrow_mut().insert(id, var.id);
    }

    /// Makes the given parameters behave as constants in this graph.
    pub fn freeze(&self, ids: impl IntoIterator<Item = ParamId>) {
        self.frozen.borrow_mut().extend(ids);
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat<'g>(&'g self, parts: &[Var<'g>], axis: usize) -> Var<'g> {
        assert!(!parts.is_empty(), "concat of zero tensors");
        let nodes = self.nodes.borrow();
        let first = nodes[parts[0].id].value.shape().to_vec();
        let outer: usize = first[..axis].iter().product();
        let mut total_axis = 0;
        for p in parts {
            let s = nodes[p.id].value.shape();
            assert_eq!(s.len(), first.len(), "concat rank mismatch");
            for (d, (&a, &b)) in s.iter().zip(&first).enumerate() {
                assert!(d == axis || a == b, "concat shape mismatch {s:?} vs {first:?}");
            }
            total_axis += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total_axis;
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for p in parts {
                let t = &nodes[p.id].value;
                let chunk = t.numel() / outer.max(1);
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = parts.iter().any(|p| nodes[p.id].requires_grad);
        drop(nodes);
        self.push(
            Tensor::new(shape, data),
            Op::Concat {
                inputs: parts.iter().map(|p| p.id).collect(),
                axis,
            },
            rg,
        )
    }

    /// Reverse pass from a scalar.
    pub fn backward(&self, loss: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.id].value.numel(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        if nodes[loss.id].requires_grad {
            grads[loss.id] = Some(Tensor::full(nodes[loss.id].value.shape().to_vec(), 1.0));
        }
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop_node(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Gradients {
            grads,
            params: self.bound.borrow().clone(),
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], nodes: &[Node], id: usize, g: Tensor) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(acc) => acc.axpy(1.0, &g),
        slot @ None => *slot = Some(g),
    }
}

fn backprop_node(nodes: &[Node], node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let val = |id: usize| &nodes[id].value;
    let rg = |id: usize| nodes[id].requires_grad;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if rg(*a) {
                accumulate(grads, nodes, *a, kernels::reduce_to_shape(g, val(*a).shape()));
            }
            if rg(*b) {
                accumulate(grads, nodes, *b, kernels::reduce_to_shape(g, val(*b).shape()));
            }
        }
        Op::Sub(a, b) => {
            if rg(*a) {
                accumulate(grads, nodes, *a, kernels::reduce_to_shape(g, val(*a).shape()));
            }
            if rg(*b) {
                let mut gb = kernels::reduce_to_shape(g, val(*b).shape());
                gb.scale(-1.0);
                accumulate(grads, nodes, *b, gb);
            }
        }
        Op::Mul(a, b) => {
            if rg(*a) {
                let t = kernels::broadcast_binary(g, val(*b), |x, y| x * y);
                accumulate(grads, nodes, *a, kernels::reduce_to_shape(&t, val(*a).shape()));
            }
            if rg(*b) {
                let t = kernels::broadcast_binary(g, val(*a), |x, y| x * y);
                accumulate(grads, nodes, *b, kernels::reduce_to_shape(&t, val(*b).shape()));
            }
        }
        Op::Div(a, b) => {
            if rg(*a) {
                let t = kernels::broadcast_binary(g, val(*b), |x, y| x / y);
                accumulate(grads, nodes, *a, kernels::reduce_to_shape(&t, val(*a).shape()));
            }
            if rg(*b) {
                // d(a/b)/db = -(a/b)/b = -out/b
                let t = kernels::broadcast_binary(g, &node.value, |x, y| x * y);
                let t = kernels::broadcast_binary(&t, val(*b), |x, y| -x / y);
                accumulate(grads, nodes, *b, kernels::reduce_to_shape(&t, val(*b).shape()));
            }
        }
        Op::AddScalar(a) => accumulate(grads, nodes, *a, g.clone()),
        Op::MulScalar(a, s) => accumulate(grads, nodes, *a, g.map(|x| x * s)),
        Op::MatMul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            let (m, k, n) = (va.dim(0), va.dim(1), vb.dim(1));
            if rg(*a) {
                let mut ga = vec![0.0; m * k];
                kernels::gemm(m, n, k, g.data(), false, vb.data(), true, &mut ga, 0.0);
                accumulate(grads, nodes, *a, Tensor::new([m, k], ga));
            }
            if rg(*b) {
                let mut gb = vec![0.0; k * n];
                kernels::gemm(k, m, n, va.data(), true, g.data(), false, &mut gb, 0.0);
                accumulate(grads, nodes, *b, Tensor::new([k, n], gb));
            }
        }
        Op::Transpose(a) => accumulate(grads, nodes, *a, kernels::transpose2d(g)),
        Op::Reshape(a) => accumulate(grads, nodes, *a, g.clone().reshape(val(*a).shape().to_vec())),
        Op::SumTo(a) => accumulate(grads, nodes, *a, kernels::expand_to_shape(g, val(*a).shape())),
        Op::Exp(a) => accumulate(grads, nodes, *a, g.zip_map(&node.value, |g, y| g * y)),
        Op::Log(a) => accumulate(grads, nodes, *a, g.zip_map(val(*a), |g, x| g / x)),
        Op::Relu(a) => accumulate(
            grads,
            nodes,
            *a,
            g.zip_map(val(*a), |g, x| if x > 0.0 { g } else { 0.0 }),
        ),
        Op::Tanh(a) => accumulate(grads, nodes, *a, g.zip_map(&node.value, |g, y| g * (1.0 - y * y))),
        Op::Sigmoid(a) => accumulate(grads, nodes, *a, g.zip_map(&node.value, |g, y| g * y * (1.0 - y))),
        // Subgradient 0 at the origin keeps norms of coincident points finite.
        Op::Sqrt(a) => accumulate(
            grads,
            nodes,
            *a,
            g.zip_map(&node.value, |g, y| if y > 0.0 { g / (2.0 * y) } else { 0.0 }),
        ),
        Op::Square(a) => accumulate(grads, nodes, *a, g.zip_map(val(*a), |g, x| 2.0 * g * x)),
        Op::Clamp(a, lo, hi) => accumulate(
            grads,
            nodes,
            *a,
            g.zip_map(val(*a), |g, x| if x >= *lo && x <= *hi { g } else { 0.0 }),
        ),
        Op::Conv2d { x, w, b, geom } => {
            let (dx, dw, db) =
                kernels::conv2d_backward(geom, val(*x).data(), val(*w).data(), g.data(), rg(*x), rg(*w));
            if let Some(dx) = dx {
                accumulate(grads, nodes, *x, Tensor::new(val(*x).shape().to_vec(), dx));
            }
            if let Some(dw) = dw {
                accumulate(grads, nodes, *w, Tensor::new(val(*w).shape().to_vec(), dw));
            }
            if let Some(b) = b {
                accumulate(grads, nodes, *b, Tensor::new([geom.out_ch], db));
            }
        }
        Op::AvgPool2(a) => accumulate(grads, nodes, *a, kernels::avg_pool2_backward(val(*a).shape(), g)),
        Op::Upsample2(a) => accumulate(grads, nodes, *a, kernels::upsample2_backward(val(*a).shape(), g)),
        Op::Concat { inputs, axis } => {
            let shape = node.value.shape();
            let outer: usize = shape[..*axis].iter().product();
            let inner_total = node.value.numel() / outer.max(1);
            let mut offset = 0;
            for &i in inputs {
                let t = val(i);
                let chunk = t.numel() / outer.max(1);
                if rg(i) {
                    let mut data = Vec::with_capacity(t.numel());
                    for o in 0..outer {
                        data.extend_from_slice(&g.data()[o * inner_total + offset..][..chunk]);
                    }
                    accumulate(grads, nodes, i, Tensor::new(t.shape().to_vec(), data));
                }
                offset += chunk;
            }
        }
        Op::GatherRows(a, idx) => {
            let src = val(*a);
            let w = src.numel() / src.dim(0).max(1);
            let mut out = Tensor::zeros(src.shape().to_vec());
            let od = out.data_mut();
            for (r, &i) in idx.iter().enumerate() {
                for (d, s) in od[i * w..(i + 1) * w].iter_mut().zip(&g.data()[r * w..(r + 1) * w]) {
                    *d += s;
                }
            }
            accumulate(grads, nodes, *a, out);
        }
        Op::MaskedLogSumExp(a, mask) => {
            let x = val(*a);
            let cols = x.dim(1);
            let mut out = Tensor::zeros(x.shape().to_vec());
            let od = out.data_mut();
            for r in 0..x.dim(0) {
                let lse = node.value.data()[r];
                let gr = g.data()[r];
                for c in 0..cols {
                    let k = r * cols + c;
                    if mask.data()[k] != 0.0 {
                        od[k] = gr * (x.data()[k] - lse).exp();
                    }
                }
            }
            accumulate(grads, nodes, *a, out);
        }
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: HashMap<ParamId, usize>,
}

impl Gradients {
    pub fn wrt(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id).and_then(|&n| self.grads[n].as_ref())
    }
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Ref<'g, Tensor> {
        Ref::map(self.graph.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.rg(self.id)
    }

    /// Copy of the value cut off from the tape.
    pub fn detach(&self) -> Var<'g> {
        let v = self.value().clone();
        self.graph.constant(v)
    }

    fn unary(&self, op: Op, f: impl FnOnce(&Tensor) -> Tensor) -> Var<'g> {
        let out = f(&self.value());
        self.graph.push(out, op, self.requires_grad())
    }

    fn binary(&self, other: Var<'g>, op: Op, f: impl Fn(f64, f64) -> f64) -> Var<'g> {
        let out = kernels::broadcast_binary(&self.value(), &other.value(), f);
        let rg = self.requires_grad() || other.requires_grad();
        self.graph.push(out, op, rg)
    }

    pub fn add(&self, other: Var<'g>) -> Var<'g> {
        self.binary(other, Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(&self, other: Var<'g>) -> Var<'g> {
        self.binary(other, Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(&self, other: Var<'g>) -> Var<'g> {
        self.binary(other, Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn div(&self, other: Var<'g>) -> Var<'g> {
        self.binary(other, Op::Div(self.id, other.id), |a, b| a / b)
    }

    pub fn add_scalar(&self, s: f64) -> Var<'g> {
        self.unary(Op::AddScalar(self.id), |t| t.map(|x| x + s))
    }

    pub fn mul_scalar(&self, s: f64) -> Var<'g> {
        self.unary(Op::MulScalar(self.id, s), |t| t.map(|x| x * s))
    }

    pub fn neg(&self) -> Var<'g> {
        self.mul_scalar(-1.0)
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&self, other: Var<'g>) -> Var<'g> {
        let out = {
            let (a, b) = (self.value(), other.value());
            assert!(
                a.ndim() == 2 && b.ndim() == 2 && a.dim(1) == b.dim(0),
                "matmul shapes {:?} x {:?}",
                a.shape(),
                b.shape()
            );
            let (m, k, n) = (a.dim(0), a.dim(1), b.dim(1));
            let mut c = vec![0.0; m * n];
            kernels::gemm(m, k, n, a.data(), false, b.data(), false, &mut c, 0.0);
            Tensor::new([m, n], c)
        };
        let rg = self.requires_grad() || other.requires_grad();
        self.graph.push(out, Op::MatMul(self.id, other.id), rg)
    }

    pub fn t(&self) -> Var<'g> {
        self.unary(Op::Transpose(self.id), kernels::transpose2d)
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Var<'g> {
        let shape = shape.into();
        self.unary(Op::Reshape(self.id), |t| t.clone().reshape(shape))
    }

    /// Sums over `axes`, keeping them as size-1 dimensions.
    pub fn sum_axes(&self, axes: &[usize]) -> Var<'g> {
        let mut shape = self.shape();
        for &a in axes {
            shape[a] = 1;
        }
        self.sum_to(&shape)
    }

    /// Sums down to a shape that broadcasts back to the input's shape.
    pub fn sum_to(&self, shape: &[usize]) -> Var<'g> {
        self.unary(Op::SumTo(self.id), |t| kernels::reduce_to_shape(t, shape))
    }

    pub fn mean_axes(&self, axes: &[usize]) -> Var<'g> {
        let shape = self.shape();
        let n: usize = axes.iter().map(|&a| shape[a]).product();
        self.sum_axes(axes).mul_scalar(1.0 / n as f64)
    }

    /// Sum of all entries as a 0-d tensor.
    pub fn sum(&self) -> Var<'g> {
        self.sum_to(&[])
    }

    pub fn mean(&self) -> Var<'g> {
        let n = self.value().numel();
        self.sum().mul_scalar(1.0 / n as f64)
    }

    pub fn exp(&self) -> Var<'g> {
        self.unary(Op::Exp(self.id), |t| t.map(f64::exp))
    }

    pub fn log(&self) -> Var<'g> {
        self.unary(Op::Log(self.id), |t| t.map(f64::ln))
    }

    pub fn relu(&self) -> Var<'g> {
        self.unary(Op::Relu(self.id), |t| t.map(|x| x.max(0.0)))
    }

    pub fn tanh(&self) -> Var<'g> {
        self.unary(Op::Tanh(self.id), |t| t.map(f64::tanh))
    }

    pub fn sigmoid(&self) -> Var<'g> {
        self.unary(Op::Sigmoid(self.id), |t| t.map(sigmoid))
    }

    pub fn sqrt(&self) -> Var<'g> {
        self.unary(Op::Sqrt(self.id), |t| t.map(f64::sqrt))
    }

    pub fn square(&self) -> Var<'g> {
        self.unary(Op::Square(self.id), |t| t.map(|x| x * x))
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Var<'g> {
        self.unary(Op::Clamp(self.id, lo, hi), |t| t.map(|x| x.clamp(lo, hi)))
    }

    /// Stride-1 convolution of `[N, Cin, H, W]` with `[Cout, Cin, kh, kw]` and zero padding.
    pub fn conv2d(&self, weight: Var<'g>, bias: Option<Var<'g>>, pad: usize) -> Var<'g> {
        let (out, geom) = {
            let (x, w) = (self.value(), weight.value());
            let (n, c, h, wd) = kernels::dims4(&x);
            let ws = w.shape();
            assert!(
                ws.len() == 4 && ws[1] == c,
                "conv2d weight {:?} incompatible with input {:?}",
                ws,
                x.shape()
            );
            let geom = ConvGeom {
                batch: n,
                in_ch: c,
                out_ch: ws[0],
                h,
                w: wd,
                kh: ws[2],
                kw: ws[3],
                pad,
            };
            let b = bias.map(|b| b.value().clone());
            if let Some(b) = &b {
                assert_eq!(b.shape(), &[ws[0]], "conv2d bias shape");
            }
            let data = kernels::conv2d_forward(&geom, x.data(), w.data(), b.as_ref().map(|b| b.data()));
            (Tensor::new([n, ws[0], geom.out_h(), geom.out_w()], data), geom)
        };
        let rg = self.requires_grad() || weight.requires_grad() || bias.is_some_and(|b| b.requires_grad());
        self.graph.push(
            out,
            Op::Conv2d {
                x: self.id,
                w: weight.id,
                b: bias.map(|b| b.id),
                geom,
            },
            rg,
        )
    }

    pub fn avg_pool2(&self) -> Var<'g> {
        self.unary(Op::AvgPool2(self.id), kernels::avg_pool2_forward)
    }

    pub fn upsample2(&self) -> Var<'g> {
        self.unary(Op::Upsample2(self.id), kernels::upsample2_forward)
    }

    /// Rows of a matrix (or leading-axis slices) picked by index, with repetition allowed.
    pub fn gather_rows(&self, indices: &[usize]) -> Var<'g> {
        let idx = indices.to_vec();
        self.unary(Op::GatherRows(self.id, idx), |t| t.select_rows(indices))
    }

    /// Row-wise `log(sum_j mask_ij * exp(x_ij))` of a matrix, computed with the
    /// row maximum over unmasked entries subtracted first. Output is `[rows, 1]`.
    /// Every row must keep at least one entry.
    pub fn masked_logsumexp_rows(&self, mask: &Tensor) -> Var<'g> {
        let out = {
            let x = self.value();
            assert_eq!(x.ndim(), 2, "masked_logsumexp_rows expects a matrix");
            assert_eq!(x.shape(), mask.shape(), "mask shape mismatch");
            let cols = x.dim(1);
            let data = (0..x.dim(0))
                .map(|r| {
                    let row = &x.data()[r * cols..(r + 1) * cols];
                    let m = &mask.data()[r * cols..(r + 1) * cols];
                    let max = row
                        .iter()
                        .zip(m)
                        .filter(|(_, &k)| k != 0.0)
                        .map(|(&v, _)| v)
                        .fold(f64::NEG_INFINITY, f64::max);
                    assert!(max > f64::NEG_INFINITY, "row {r} is fully masked");
                    let s: f64 = row
                        .iter()
                        .zip(m)
                        .filter(|(_, &k)| k != 0.0)
                        .map(|(&v, _)| (v - max).exp())
                        .sum();
                    max + s.ln()
                })
                .collect();
            Tensor::new([x.dim(0), 1], data)
        };
        self.graph
            .push(out, Op::MaskedLogSumExp(self.id, mask.clone()), self.requires_grad())
    }

    pub fn logsumexp_rows(&self) -> Var<'g> {
        let mask = Tensor::ones(self.shape());
        self.masked_logsumexp_rows(&mask)
    }

    /// Row-wise log-softmax of a matrix.
    pub fn log_softmax_rows(&self) -> Var<'g> {
        self.sub(self.logsumexp_rows())
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
