//! Tape-based reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] is an append-only tape: every operation pushes a node holding
//! its output value and enough bookkeeping to run its backward rule. Node
//! indices are therefore already a topological order, and [`Graph::backward`]
//! walks them once in reverse. A graph is single-use: after one backward
//! pass it must be dropped (or [`Graph::reset_grads`] called) before
//! gradients are requested again.
//!
//! ```
//! use im2grid::autodiff::Graph;
//! use im2grid::Tensor;
//!
//! let mut g = Graph::<f32>::new();
//! let x = g.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap(), true);
//! let sq = g.mul(x, x).unwrap();
//! let s = g.sum(sq);
//! g.backward(s).unwrap();
//! assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

pub mod conv;
pub mod gradcheck;
pub mod linalg;
pub mod sample;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{strides_of, Tensor};
use std::fmt::Debug;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A fused operation whose forward value is computed by the caller and whose
/// backward rule is supplied here.
pub trait CustomOp<T: Scalar>: Debug + Send + Sync {
    fn name(&self) -> &'static str;

    /// Returns one gradient per input, `None` for inputs that are not differentiable.
    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>>;
}

#[derive(Debug)]
enum Op<T: Scalar> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    ScaleBy { scalar: Var, x: Var },
    Sum(Var),
    Mean(Var),
    LeakyRelu(Var, T),
    Conv { input: Var, kernel: Var, bias: Var, padding: Vec<usize> },
    AvgPool2(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    SoftmaxRows(Var),
    GridSample { input: Var, grid: Var },
    UpsampleNearest2(Var),
    Concat(Vec<Var>),
    Pad { input: Var, pads: Vec<usize> },
    ForwardDiff { input: Var, axis: usize },
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp<T>> },
}

impl<T: Scalar> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::ScaleBy { .. } => "scale_by",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Conv { .. } => "conv",
            Op::AvgPool2(_) => "avg_pool2",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Reshape(_) => "reshape",
            Op::SoftmaxRows(_) => "softmax_rows",
            Op::GridSample { .. } => "grid_sample",
            Op::UpsampleNearest2(_) => "upsample_nearest2",
            Op::Concat(_) => "concat",
            Op::Pad { .. } => "pad",
            Op::ForwardDiff { .. } => "forward_diff",
            Op::Custom { op, .. } => op.name(),
        }
    }
}

#[derive(Debug)]
struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Debug)]
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    backward_done: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::contract(op, format!("shape mismatch {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new(), backward_done: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        if cfg!(debug_assertions) && !value.all_finite() {
            return Err(Error::Numerical(format!("non-finite output from `{}`", op.name())));
        }
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Insert a leaf. Parameters use `requires_grad = true`; data and constants `false`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward root with respect to `v`, if `v` was reached.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Names of the operations recorded so far, in tape order.
    pub fn op_names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.nodes.iter().map(|n| n.op.name())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape("add", x, y)?;
        let v = x.zip_map(y, |p, q| p + q);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape("sub", x, y)?;
        let v = x.zip_map(y, |p, q| p - q);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape("mul", x, y)?;
        let v = x.zip_map(y, |p, q| p * q);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let v = self.value(a).map(|p| p * s);
        let rg = self.rg(&[a]);
        self.push(v, Op::Scale(a, s), rg)
    }

    /// Multiply every element of `x` by the single element of `scalar`.
    pub fn scale_by(&mut self, scalar: Var, x: Var) -> Result<Var> {
        if self.value(scalar).numel() != 1 {
            return Err(Error::contract("scale_by", format!("scalar operand has shape {:?}", self.shape(scalar))));
        }
        let s = self.value(scalar).item();
        let v = self.value(x).map(|p| p * s);
        let rg = self.rg(&[scalar, x]);
        self.push(v, Op::ScaleBy { scalar, x }, rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(v, Op::Sum(a), rg).expect("sum of finite values")
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let v = Tensor::scalar(t.sum() / T::from_usize_lossy(t.numel()));
        let rg = self.rg(&[a]);
        self.push(v, Op::Mean(a), rg).expect("mean of finite values")
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Result<Var> {
        let v = self.value(a).map(|p| if p > T::zero() { p } else { slope * p });
        let rg = self.rg(&[a]);
        self.push(v, Op::LeakyRelu(a, slope), rg)
    }

    pub fn conv(&mut self, input: Var, kernel: Var, bias: Var, padding: &[usize]) -> Result<Var> {
        let v = conv::conv_forward(self.value(input), self.value(kernel), self.value(bias), padding)?;
        let rg = self.rg(&[input, kernel, bias]);
        self.push(v, Op::Conv { input, kernel, bias, padding: padding.to_vec() }, rg)
    }

    pub fn avg_pool2(&mut self, a: Var) -> Result<Var> {
        let v = conv::avg_pool2_forward(self.value(a))?;
        let rg = self.rg(&[a]);
        self.push(v, Op::AvgPool2(a), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = linalg::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        self.push(v, Op::MatMul(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = linalg::transpose(self.value(a))?;
        let rg = self.rg(&[a]);
        self.push(v, Op::Transpose(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshape(shape)?;
        let rg = self.rg(&[a]);
        self.push(v, Op::Reshape(a), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let v = linalg::softmax_rows(self.value(a))?;
        let rg = self.rg(&[a]);
        self.push(v, Op::SoftmaxRows(a), rg)
    }

    pub fn grid_sample(&mut self, input: Var, grid: Var) -> Result<Var> {
        let v = sample::grid_sample_forward(self.value(input), self.value(grid))?;
        let rg = self.rg(&[input, grid]);
        self.push(v, Op::GridSample { input, grid }, rg)
    }

    /// Multilinear resize to `spatial` extents, mapping corner voxel centers onto each other.
    ///
    /// Implemented as sampling at a constant identity grid of the target extents.
    pub fn resize_linear(&mut self, a: Var, spatial: &[usize]) -> Result<Var> {
        let n = self.value(a).rank() - 1;
        if spatial.len() != n {
            return Err(Error::contract("resize_linear", format!("target {spatial:?} has wrong rank for {:?}", self.shape(a))));
        }
        let grid = self.constant(sample::identity_coords(spatial)?);
        self.grid_sample(a, grid)
    }

    /// Multilinear upsampling by two along every spatial axis.
    pub fn upsample_linear2(&mut self, a: Var) -> Result<Var> {
        let target: Vec<usize> = self.value(a).spatial().iter().map(|d| d * 2).collect();
        self.resize_linear(a, &target)
    }

    pub fn upsample_nearest2(&mut self, a: Var) -> Result<Var> {
        let v = sample::upsample_nearest2_forward(self.value(a));
        let rg = self.rg(&[a]);
        self.push(v, Op::UpsampleNearest2(a), rg)
    }

    /// Concatenate along the leading (channel) axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::contract("concat", "no inputs"))?;
        let rest = self.value(*first).shape()[1..].to_vec();
        let mut channels = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.shape()[1..] != rest[..] {
                return Err(Error::contract("concat", format!("trailing shape {:?} vs {:?}", &t.shape()[1..], rest)));
            }
            channels += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![channels];
        shape.extend(rest);
        let v = Tensor::new(shape, data)?;
        let rg = self.rg(parts);
        self.push(v, Op::Concat(parts.to_vec()), rg)
    }

    /// Zero-pad every spatial axis `ax` by `pads[ax]` voxels on both sides.
    pub fn pad(&mut self, input: Var, pads: &[usize]) -> Result<Var> {
        let t = self.value(input);
        if pads.len() != t.rank() - 1 {
            return Err(Error::contract("pad", format!("{} pads for shape {:?}", pads.len(), t.shape())));
        }
        let mut shape = t.shape().to_vec();
        for (s, p) in shape[1..].iter_mut().zip(pads) {
            *s += 2 * p;
        }
        let mut out = Tensor::zeros(&shape);
        let mut idx = vec![0; t.rank()];
        let out_strides = strides_of(&shape);
        for (flat, &v) in t.data().iter().enumerate() {
            crate::tensor::unravel(flat, t.shape(), &mut idx);
            let mut o = idx[0] * out_strides[0];
            for ax in 1..idx.len() {
                o += (idx[ax] + pads[ax - 1]) * out_strides[ax];
            }
            out.data_mut()[o] = v;
        }
        let rg = self.rg(&[input]);
        self.push(out, Op::Pad { input, pads: pads.to_vec() }, rg)
    }

    /// Forward difference `x[i + 1] - x[i]` along `axis`; that extent shrinks by one.
    pub fn forward_diff(&mut self, input: Var, axis: usize) -> Result<Var> {
        let t = self.value(input);
        if axis >= t.rank() || t.shape()[axis] < 2 {
            return Err(Error::contract("forward_diff", format!("axis {axis} invalid for shape {:?}", t.shape())));
        }
        let mut shape = t.shape().to_vec();
        shape[axis] -= 1;
        let in_strides = strides_of(t.shape());
        let s = in_strides[axis];
        let v = Tensor::from_fn(&shape, |i| {
            let base: usize = i.iter().zip(&in_strides).map(|(a, b)| a * b).sum();
            t.data()[base + s] - t.data()[base]
        });
        let rg = self.rg(&[input]);
        self.push(v, Op::ForwardDiff { input, axis }, rg)
    }

    /// Record a fused op whose forward `output` the caller already computed.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor<T>, op: Box<dyn CustomOp<T>>) -> Result<Var> {
        let rg = self.rg(inputs);
        self.push(output, Op::Custom { inputs: inputs.to_vec(), op }, rg)
    }

    /// Discard gradients so that another backward pass can run on this tape.
    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    /// Propagate d(root)/d(node) to every node that requires gradients.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(Error::contract("backward", format!("root must be scalar, has shape {:?}", self.shape(root))));
        }
        if self.backward_done {
            return Err(Error::contract("backward", "gradients already computed on this tape; reset first"));
        }
        self.backward_done = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[root.0] = Some(Tensor::full(self.shape(root), T::one()));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gout) = self.grads[i].take() else { continue };
            let contributions = self.backward_node(i, &gout)?;
            self.grads[i] = Some(gout);
            for (var, g) in contributions {
                if !self.nodes[var.0].requires_grad {
                    continue;
                }
                match &mut self.grads[var.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    fn backward_node(&self, i: usize, gout: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let out = match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, gout.clone()), (*b, gout.clone())],
            Op::Sub(a, b) => vec![(*a, gout.clone()), (*b, gout.map(|g| -g))],
            Op::Mul(a, b) => vec![
                (*a, gout.zip_map(val(*b), |g, y| g * y)),
                (*b, gout.zip_map(val(*a), |g, x| g * x)),
            ],
            Op::Scale(a, s) => vec![(*a, gout.map(|g| g * *s))],
            Op::ScaleBy { scalar, x } => {
                let s = val(*scalar).item();
                let ds: T = gout.data().iter().zip(val(*x).data()).map(|(&g, &v)| g * v).sum();
                vec![(*scalar, Tensor::full(val(*scalar).shape(), ds)), (*x, gout.map(|g| g * s))]
            }
            Op::Sum(a) => vec![(*a, Tensor::full(val(*a).shape(), gout.item()))],
            Op::Mean(a) => {
                let n = T::from_usize_lossy(val(*a).numel());
                vec![(*a, Tensor::full(val(*a).shape(), gout.item() / n))]
            }
            Op::LeakyRelu(a, slope) => {
                vec![(*a, gout.zip_map(val(*a), |g, x| if x > T::zero() { g } else { g * *slope }))]
            }
            Op::Conv { input, kernel, bias, padding } => {
                let (dx, dw, db) = conv::conv_backward(val(*input), val(*kernel), val(*bias), padding, gout)?;
                vec![(*input, dx), (*kernel, dw), (*bias, db)]
            }
            Op::AvgPool2(a) => vec![(*a, conv::avg_pool2_backward(val(*a).shape(), gout)?)],
            Op::MatMul(a, b) => {
                let da = linalg::matmul(gout, &linalg::transpose(val(*b))?)?;
                let db = linalg::matmul(&linalg::transpose(val(*a))?, gout)?;
                vec![(*a, da), (*b, db)]
            }
            Op::Transpose(a) => vec![(*a, linalg::transpose(gout)?)],
            Op::Reshape(a) => vec![(*a, gout.reshape(val(*a).shape())?)],
            Op::SoftmaxRows(a) => vec![(*a, linalg::softmax_rows_backward(&node.value, gout))],
            Op::GridSample { input, grid } => {
                let (dx, dg) = sample::grid_sample_backward(val(*input), val(*grid), gout)?;
                vec![(*input, dx), (*grid, dg)]
            }
            Op::UpsampleNearest2(a) => vec![(*a, sample::upsample_nearest2_backward(val(*a).shape(), gout))],
            Op::Concat(parts) => {
                let mut offset = 0;
                let mut res = Vec::with_capacity(parts.len());
                for &p in parts {
                    let t = val(p);
                    let n = t.numel();
                    res.push((p, Tensor::new(t.shape().to_vec(), gout.data()[offset..offset + n].to_vec())?));
                    offset += n;
                }
                res
            }
            Op::Pad { input, pads } => {
                let t = val(*input);
                let out_strides = strides_of(gout.shape());
                let mut idx = vec![0; t.rank()];
                let mut dx = Tensor::zeros(t.shape());
                for (flat, d) in dx.data_mut().iter_mut().enumerate() {
                    crate::tensor::unravel(flat, t.shape(), &mut idx);
                    let mut o = idx[0] * out_strides[0];
                    for ax in 1..idx.len() {
                        o += (idx[ax] + pads[ax - 1]) * out_strides[ax];
                    }
                    *d = gout.data()[o];
                }
                vec![(*input, dx)]
            }
            Op::ForwardDiff { input, axis } => {
                let t = val(*input);
                let in_strides = strides_of(t.shape());
                let s = in_strides[*axis];
                let mut dx = Tensor::zeros(t.shape());
                let mut idx = vec![0; gout.rank()];
                for (flat, &g) in gout.data().iter().enumerate() {
                    crate::tensor::unravel(flat, gout.shape(), &mut idx);
                    let base: usize = idx.iter().zip(&in_strides).map(|(a, b)| a * b).sum();
                    dx.data_mut()[base + s] += g;
                    dx.data_mut()[base] -= g;
                }
                vec![(*input, dx)]
            }
            Op::Custom { inputs, op } => {
                let vals: Vec<&Tensor<T>> = inputs.iter().map(|&v| val(v)).collect();
                let grads = op.backward(&vals, &node.value, gout)?;
                if grads.len() != inputs.len() {
                    return Err(Error::contract("backward", format!("custom op `{}` returned {} gradients for {} inputs", op.name(), grads.len(), inputs.len())));
                }
                inputs.iter().zip(grads).filter_map(|(&v, g)| g.map(|g| (v, g))).collect()
            }
        };
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2, 2], &[1.0, -2.0, 3.0, 0.5]), true);
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[3], &[1.0, 2.0, 3.0]), true);
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_requires_scalar_root_and_single_use() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]), true);
        assert!(g.backward(x).is_err());
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert!(g.backward(s).is_err());
        g.reset_grads();
        g.backward(s).unwrap();
    }

    #[test]
    fn shared_subexpressions_accumulate() {
        // y = sum((x*x) + (x*x)) computed once with a shared node and once duplicated.
        let data = [0.5, -1.5, 2.0];
        let mut g = Graph::new();
        let x = g.leaf(t(&[3], &data), true);
        let sq = g.mul(x, x).unwrap();
        let twice = g.add(sq, sq).unwrap();
        let s = g.sum(twice);
        g.backward(s).unwrap();

        let mut h = Graph::new();
        let x2 = h.leaf(t(&[3], &data), true);
        let a = h.mul(x2, x2).unwrap();
        let b = h.mul(x2, x2).unwrap();
        let c = h.add(a, b).unwrap();
        let s2 = h.sum(c);
        h.backward(s2).unwrap();
        assert_eq!(g.grad(x).unwrap(), h.grad(x2).unwrap());
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, -6.0, 8.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]), true);
        let c = g.constant(t(&[2], &[3.0, 4.0]));
        let p = g.mul(x, c).unwrap();
        let s = g.sum(p);
        g.backward(s).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(x).unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn leaky_relu_values() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[3], &[0.0, -5.0, 2.0]), true);
        let y = g.leaky_relu(x, 0.2).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, -1.0, 2.0]);
    }

    #[test]
    fn pad_and_forward_diff_shapes() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_fn(&[1, 2, 3], |i| (i[1] * 3 + i[2]) as f64), true);
        let p = g.pad(x, &[1, 2]).unwrap();
        assert_eq!(g.shape(p), &[1, 4, 7]);
        assert_eq!(g.value(p).get(&[0, 1, 2]), 0.0);
        assert_eq!(g.value(p).get(&[0, 2, 4]), 5.0);
        let d = g.forward_diff(x, 2).unwrap();
        assert_eq!(g.value(d).data(), &[1.0, 1.0, 1.0, 1.0]);
        let d0 = g.forward_diff(x, 1).unwrap();
        assert_eq!(g.value(d0).data(), &[3.0, 3.0, 3.0]);
    }

    #[test]
    fn mismatched_shapes_are_contract_errors() {
        let mut g = Graph::<f32>::new();
        let a = g.leaf(Tensor::zeros(&[2]), true);
        let b = g.leaf(Tensor::zeros(&[3]), true);
        assert!(matches!(g.add(a, b), Err(Error::Contract { .. })));
        assert!(g.concat(&[]).is_err());
    }

    #[test]
    fn non_finite_values_are_caught_in_debug() {
        if !cfg!(debug_assertions) {
            return;
        }
        let mut g = Graph::<f32>::new();
        let a = g.leaf(Tensor::full(&[2], f32::MAX), true);
        assert!(matches!(g.scale(a, 10.0), Err(Error::Numerical(_))));
    }
}
