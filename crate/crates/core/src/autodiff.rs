//! Eager reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is a Wengert list: every operation appends a node holding its
//! forward value, so node order is already a topological order and
//! [`Graph::backward`] is a single reverse sweep. Graphs are built per forward
//! pass and dropped afterwards.
//!
//! Shape rules are strict: binary elementwise ops require equal shapes, with
//! the single exception of a rank-0 (scalar) operand on either side.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Div,
    Relu,
    Exp,
    Log,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    /// Mean over the two spatial axes of an H×W×C map.
    Gap,
}

/// Division guard: denominators smaller than this in magnitude are an error.
pub const DIV_EPS: f64 = 1e-12;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Binary { kind: ElementwiseOp, a: Var, b: Var },
    Relu(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Reduce { input: Var, map: Vec<usize>, scale: f64 },
    Reshape(Var),
    Transpose(Var),
    MatMul { a: Var, b: Var },
    ConcatLast { a: Var, b: Var },
    Conv2d { input: Var, kernel: Var, bias: Var, dilation: usize },
    MeanPool2(Var),
    Upsample { input: Var, factor: usize },
    Softmax(Var),
    NormLast(Var),
    NormalizeLast(Var),
    CrossEntropy { logits: Var, targets: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(op))
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that receives gradients.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf created with [`Graph::param`].
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::from_parts(node.value.shape().to_vec(), g.clone()))
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        check_finite(op_name, value.data())?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad, grad: None });
        Ok(Var(self.nodes.len() - 1))
    }

    // ---------------------------------------------------------------------
    // Elementwise
    // ---------------------------------------------------------------------

    /// Dispatches one of the elementwise operations by id. Unary ops ignore `b`.
    pub fn elementwise(&mut self, op: ElementwiseOp, a: Var, b: Option<Var>) -> Result<Var> {
        let need_b = || b.ok_or_else(|| Error::Invalid(format!("{op:?} needs two operands")));
        match op {
            ElementwiseOp::Add | ElementwiseOp::Sub | ElementwiseOp::Mul | ElementwiseOp::Div => {
                self.binary(op, a, need_b()?)
            }
            ElementwiseOp::Relu => self.relu(a),
            ElementwiseOp::Exp => self.exp(a),
            ElementwiseOp::Log => self.log(a),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(ElementwiseOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(ElementwiseOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(ElementwiseOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(ElementwiseOp::Div, a, b)
    }

    fn binary(&mut self, kind: ElementwiseOp, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let out_shape = if ta.shape() == tb.shape() || tb.is_scalar() {
            ta.shape().to_vec()
        } else if ta.is_scalar() {
            tb.shape().to_vec()
        } else {
            return Err(Error::shape(
                "elementwise",
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        };
        let n: usize = out_shape.iter().product();
        let (da, db) = (ta.data(), tb.data());
        let (sa, sb) = (ta.is_scalar() && n != 1, tb.is_scalar() && n != 1);
        let at = |i: usize| if sa { da[0] } else { da[i] };
        let bt = |i: usize| if sb { db[0] } else { db[i] };
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let (x, y) = (at(i), bt(i));
            out.push(match kind {
                ElementwiseOp::Add => x + y,
                ElementwiseOp::Sub => x - y,
                ElementwiseOp::Mul => x * y,
                ElementwiseOp::Div => {
                    if y.abs() < DIV_EPS {
                        return Err(Error::domain("div", format!("|divisor| = {:e} < 1e-12", y.abs())));
                    }
                    x / y
                }
                _ => unreachable!(),
            });
        }
        self.push("elementwise", Tensor::from_parts(out_shape, out), Op::Binary { kind, a, b }, &[a, b])
    }

    fn unary(&mut self, name: &'static str, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::from_parts(t.shape().to_vec(), data);
        self.push(name, value, op, &[a])
    }

    /// Rectifier; the gradient at exactly 0 is 0.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, Op::Relu(a), |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(x) = self.value(a).data().iter().find(|&&x| x <= 0.0) {
            return Err(Error::domain("log", format!("argument {x} is not positive")));
        }
        self.unary("log", a, Op::Log(a), f64::ln)
    }

    /// Absolute value; the subgradient at 0 is 0.
    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary("abs", a, Op::Abs(a), f64::abs)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("scale", a, Op::Scale(a, c), |x| x * c)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("add_scalar", a, Op::AddScalar(a), |x| x + c)
    }

    // ---------------------------------------------------------------------
    // Reductions and shape ops
    // ---------------------------------------------------------------------

    pub fn reduce(&mut self, op: ReduceOp, a: Var, axes: &[usize]) -> Result<Var> {
        match op {
            ReduceOp::Sum => self.reduce_axes(a, axes, false),
            ReduceOp::Mean => self.reduce_axes(a, axes, true),
            ReduceOp::Gap => self.gap(a),
        }
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        self.reduce_axes(a, &axes, false)
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        self.reduce_axes(a, &axes, true)
    }

    /// Global average pooling: H×W×C → C.
    pub fn gap(&mut self, a: Var) -> Result<Var> {
        if self.shape(a).len() != 3 {
            return Err(Error::shape("gap", format!("expected H×W×C, got {:?}", self.shape(a))));
        }
        self.reduce_axes(a, &[0, 1], true)
    }

    fn reduce_axes(&mut self, a: Var, axes: &[usize], mean: bool) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut reduced = vec![false; shape.len()];
        for &ax in axes {
            if ax >= shape.len() || reduced[ax] {
                return Err(Error::shape(
                    "reduce",
                    format!("invalid axes {:?} for shape {:?}", axes, shape),
                ));
            }
            reduced[ax] = true;
        }
        let out_shape: Vec<usize> =
            shape.iter().zip(&reduced).filter(|(_, &r)| !r).map(|(&d, _)| d).collect();
        let out_numel: usize = out_shape.iter().product();
        let count: usize = shape.iter().zip(&reduced).filter(|(_, &r)| r).map(|(&d, _)| d).product();
        // Map every input element to its output slot.
        let numel: usize = shape.iter().product();
        let mut map = vec![0usize; numel];
        let mut idx = vec![0usize; shape.len()];
        for slot in map.iter_mut() {
            let mut o = 0;
            for (d, &i) in idx.iter().enumerate() {
                if !reduced[d] {
                    o = o * shape[d] + i;
                }
            }
            *slot = o;
            for d in (0..shape.len()).rev() {
                idx[d] += 1;
                if idx[d] < shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        let scale = if mean && count > 0 { 1.0 / count as f64 } else { 1.0 };
        let mut out = vec![0.0; out_numel];
        for (&x, &o) in self.value(a).data().iter().zip(&map) {
            out[o] += x;
        }
        if scale != 1.0 {
            out.iter_mut().for_each(|x| *x *= scale);
        }
        self.push("reduce", Tensor::from_parts(out_shape, out), Op::Reduce { input: a, map, scale }, &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        self.push("reshape", value, Op::Reshape(a), &[a])
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let &[r, c] = t.shape() else {
            return Err(Error::shape("transpose", format!("rank-2 required, got {:?}", t.shape())));
        };
        let d = t.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        self.push("transpose", Tensor::from_parts(vec![c, r], out), Op::Transpose(a), &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (&[m, k], &[k2, n]) = (ta.shape(), tb.shape()) else {
            return Err(Error::shape(
                "matmul",
                format!("rank-2 operands required, got {:?} and {:?}", ta.shape(), tb.shape()),
            ));
        };
        if k != k2 {
            return Err(Error::shape("matmul", format!("{:?} x {:?}", ta.shape(), tb.shape())));
        }
        let (da, db) = (ta.data(), tb.data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = da[i * k + p];
                if x == 0.0 {
                    continue;
                }
                for (o, &y) in row.iter_mut().zip(&db[p * n..(p + 1) * n]) {
                    *o += x * y;
                }
            }
        }
        self.push("matmul", Tensor::from_parts(vec![m, n], out), Op::MatMul { a, b }, &[a, b])
    }

    /// Concatenates along the last axis; all leading axes must agree.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.is_empty() || sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(Error::shape("concat", format!("{:?} vs {:?}", sa, sb)));
        }
        let (ca, cb) = (sa[sa.len() - 1], sb[sb.len() - 1]);
        let rows = ta.numel() / ca.max(1);
        let mut out = Vec::with_capacity(ta.numel() + tb.numel());
        for r in 0..rows {
            out.extend_from_slice(&ta.data()[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&tb.data()[r * cb..(r + 1) * cb]);
        }
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = ca + cb;
        self.push("concat", Tensor::from_parts(shape, out), Op::ConcatLast { a, b }, &[a, b])
    }

    // ---------------------------------------------------------------------
    // Convolution, pooling, resampling
    // ---------------------------------------------------------------------

    /// Stride-1 "same" convolution of an H×W×Cin map with a k×k×Cin×Cout
    /// kernel, zero padding `(k-1)·dilation/2` per side.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, dilation: usize) -> Result<Var> {
        let (ti, tk, tb) = (self.value(input), self.value(kernel), self.value(bias));
        let &[h, w, cin] = ti.shape() else {
            return Err(Error::shape("conv2d", format!("input must be H×W×C, got {:?}", ti.shape())));
        };
        let &[k, k2, kcin, cout] = tk.shape() else {
            return Err(Error::shape("conv2d", format!("kernel must be k×k×Cin×Cout, got {:?}", tk.shape())));
        };
        if k != k2 || k % 2 == 0 {
            return Err(Error::shape("conv2d", format!("kernel must be square with odd size, got {k}×{k2}")));
        }
        if dilation < 1 {
            return Err(Error::Invalid("conv2d dilation must be >= 1".into()));
        }
        if kcin != cin || tb.shape() != [cout] {
            return Err(Error::shape(
                "conv2d",
                format!("input {:?}, kernel {:?}, bias {:?}", ti.shape(), tk.shape(), tb.shape()),
            ));
        }
        let pad = ((k - 1) * dilation / 2) as isize;
        let (x, kw, bw) = (ti.data(), tk.data(), tb.data());
        let mut out = vec![0.0; h * w * cout];
        for oy in 0..h {
            for ox in 0..w {
                let o = &mut out[(oy * w + ox) * cout..(oy * w + ox + 1) * cout];
                o.copy_from_slice(bw);
                for ky in 0..k {
                    let iy = oy as isize + (ky * dilation) as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = ox as isize + (kx * dilation) as isize - pad;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let ibase = (iy as usize * w + ix as usize) * cin;
                        let kbase = (ky * k + kx) * cin * cout;
                        for ci in 0..cin {
                            let a = x[ibase + ci];
                            if a == 0.0 {
                                continue;
                            }
                            let row = &kw[kbase + ci * cout..kbase + (ci + 1) * cout];
                            for (oo, &kv) in o.iter_mut().zip(row) {
                                *oo += a * kv;
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::from_parts(vec![h, w, cout], out);
        self.push("conv2d", value, Op::Conv2d { input, kernel, bias, dilation }, &[input, kernel, bias])
    }

    /// 2×2 mean pooling with stride 2 over an H×W×C map (H, W even).
    pub fn mean_pool2(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let &[h, w, c] = t.shape() else {
            return Err(Error::shape("mean_pool2", format!("expected H×W×C, got {:?}", t.shape())));
        };
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape("mean_pool2", format!("odd spatial size {h}×{w}")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let d = t.data();
        let mut out = vec![0.0; oh * ow * c];
        for y in 0..oh {
            for x in 0..ow {
                let o = (y * ow + x) * c;
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let i = ((2 * y + dy) * w + 2 * x + dx) * c;
                    for ch in 0..c {
                        out[o + ch] += 0.25 * d[i + ch];
                    }
                }
            }
        }
        self.push("mean_pool2", Tensor::from_parts(vec![oh, ow, c], out), Op::MeanPool2(a), &[a])
    }

    /// Bilinear upsampling by an integer factor with corner-aligned sampling:
    /// output pixel `i` samples source coordinate `i·(n−1)/(factor·n−1)`.
    pub fn upsample_bilinear(&mut self, a: Var, factor: usize) -> Result<Var> {
        let t = self.value(a);
        let &[h, w, c] = t.shape() else {
            return Err(Error::shape("upsample", format!("expected H×W×C, got {:?}", t.shape())));
        };
        if factor < 1 {
            return Err(Error::Invalid("upsample factor must be >= 1".into()));
        }
        let (oh, ow) = (h * factor, w * factor);
        let (ys, xs) = (interp_table(h, oh), interp_table(w, ow));
        let d = t.data();
        let mut out = vec![0.0; oh * ow * c];
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let o = (oy * ow + ox) * c;
                let taps = [
                    ((y0 * w + x0) * c, (1.0 - fy) * (1.0 - fx)),
                    ((y0 * w + x1) * c, (1.0 - fy) * fx),
                    ((y1 * w + x0) * c, fy * (1.0 - fx)),
                    ((y1 * w + x1) * c, fy * fx),
                ];
                for (base, wt) in taps {
                    if wt == 0.0 {
                        continue;
                    }
                    for ch in 0..c {
                        out[o + ch] += wt * d[base + ch];
                    }
                }
            }
        }
        self.push("upsample", Tensor::from_parts(vec![oh, ow, c], out), Op::Upsample { input: a, factor }, &[a])
    }

    // ---------------------------------------------------------------------
    // Normalisation-type ops
    // ---------------------------------------------------------------------

    /// Softmax of a 1-D tensor, computed with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 1 || t.numel() == 0 {
            return Err(Error::shape("softmax", format!("non-empty 1-D input required, got {:?}", t.shape())));
        }
        let out = softmax_slice(t.data());
        self.push("softmax", Tensor::from_parts(t.shape().to_vec(), out), Op::Softmax(a), &[a])
    }

    /// Euclidean norm over the last axis: `[.., D] -> [..]`.
    pub fn norm_last(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let Some((&d, lead)) = t.shape().split_last() else {
            return Err(Error::shape("norm_last", "scalar input"));
        };
        let out: Vec<f64> = t.data().chunks(d.max(1)).map(l2).collect();
        self.push("norm_last", Tensor::from_parts(lead.to_vec(), out), Op::NormLast(a), &[a])
    }

    /// Scales every last-axis row to unit length. Rows with norm below
    /// [`DIV_EPS`] map to the zero row with zero gradient.
    pub fn normalize_last(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let Some(&d) = t.shape().last() else {
            return Err(Error::shape("normalize_last", "scalar input"));
        };
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(d.max(1)) {
            let n = l2(row);
            if n < DIV_EPS {
                row.iter_mut().for_each(|x| *x = 0.0);
            } else {
                row.iter_mut().for_each(|x| *x /= n);
            }
        }
        self.push("normalize_last", Tensor::from_parts(t.shape().to_vec(), out), Op::NormalizeLast(a), &[a])
    }

    /// Mean cross-entropy of N×C logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let &[n, c] = t.shape() else {
            return Err(Error::shape("cross_entropy", format!("expected N×C logits, got {:?}", t.shape())));
        };
        if targets.len() != n {
            return Err(Error::shape("cross_entropy", format!("{} targets for {} rows", targets.len(), n)));
        }
        if let Some(&bad) = targets.iter().find(|&&y| y >= c) {
            return Err(Error::domain("cross_entropy", format!("target {bad} out of range for {c} classes")));
        }
        let mut total = 0.0;
        for (row, &y) in t.data().chunks(c).zip(targets) {
            total += log_sum_exp(row) - row[y];
        }
        let value = Tensor::from_parts(vec![], vec![total / n as f64]);
        self.push("cross_entropy", value, Op::CrossEntropy { logits, targets: targets.to_vec() }, &[logits])
    }

    // ---------------------------------------------------------------------
    // Backward
    // ---------------------------------------------------------------------

    /// Accumulates ∂output/∂leaf into every reachable [`Graph::param`] leaf.
    /// Repeated calls add to the existing gradients until [`Graph::zero_grad`].
    pub fn backward(&mut self, output: Var) -> Result<()> {
        if !self.value(output).is_scalar() {
            return Err(Error::shape(
                "backward",
                format!("scalar output required, got {:?}", self.shape(output)),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(vec![1.0]);
        for id in (0..=output.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[id].op {
                let slot = accumulate(&mut self.nodes[id].grad, g.len());
                slot.iter_mut().zip(&g).for_each(|(s, x)| *s += x);
                continue;
            }
            self.propagate(id, &g, &mut grads);
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Binary { kind, a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let n = g.len();
                let (sa, sb) = (ta.numel() == 1 && n != 1, tb.numel() == 1 && n != 1);
                let (da, db) = (ta.data(), tb.data());
                let at = |i: usize| if sa { da[0] } else { da[i] };
                let bt = |i: usize| if sb { db[0] } else { db[i] };
                if self.wants(*a) {
                    let ga = accumulate(&mut grads[a.0], ta.numel());
                    for i in 0..n {
                        let d = match kind {
                            ElementwiseOp::Add | ElementwiseOp::Sub => g[i],
                            ElementwiseOp::Mul => g[i] * bt(i),
                            ElementwiseOp::Div => g[i] / bt(i),
                            _ => unreachable!(),
                        };
                        ga[if sa { 0 } else { i }] += d;
                    }
                }
                if self.wants(*b) {
                    let gb = accumulate(&mut grads[b.0], tb.numel());
                    for i in 0..n {
                        let d = match kind {
                            ElementwiseOp::Add => g[i],
                            ElementwiseOp::Sub => -g[i],
                            ElementwiseOp::Mul => g[i] * at(i),
                            ElementwiseOp::Div => -g[i] * at(i) / (bt(i) * bt(i)),
                            _ => unreachable!(),
                        };
                        gb[if sb { 0 } else { i }] += d;
                    }
                }
            }
            Op::Relu(a) => self.unary_back(*a, grads, |i, x| if x > 0.0 { g[i] } else { 0.0 }),
            Op::Exp(a) => self.unary_back(*a, grads, |i, _| g[i] * out[i]),
            Op::Log(a) => self.unary_back(*a, grads, |i, x| g[i] / x),
            Op::Abs(a) => self.unary_back(*a, grads, |i, x| {
                if x > 0.0 {
                    g[i]
                } else if x < 0.0 {
                    -g[i]
                } else {
                    0.0
                }
            }),
            Op::Scale(a, c) => self.unary_back(*a, grads, |i, _| g[i] * c),
            Op::AddScalar(a) | Op::Reshape(a) => self.unary_back(*a, grads, |i, _| g[i]),
            Op::Reduce { input, map, scale } => {
                if self.wants(*input) {
                    let gi = accumulate(&mut grads[input.0], map.len());
                    for (slot, &o) in gi.iter_mut().zip(map) {
                        *slot += g[o] * scale;
                    }
                }
            }
            Op::Transpose(a) => {
                if self.wants(*a) {
                    let &[r, c] = self.shape(*a) else { unreachable!() };
                    let ga = accumulate(&mut grads[a.0], r * c);
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::MatMul { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (&[m, k], &[_, n]) = (ta.shape(), tb.shape()) else { unreachable!() };
                let (da, db) = (ta.data(), tb.data());
                if self.wants(*a) {
                    let ga = accumulate(&mut grads[a.0], m * k);
                    for i in 0..m {
                        let gr = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let br = &db[p * n..(p + 1) * n];
                            ga[i * k + p] += gr.iter().zip(br).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                }
                if self.wants(*b) {
                    let gb = accumulate(&mut grads[b.0], k * n);
                    for i in 0..m {
                        let gr = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let x = da[i * k + p];
                            if x == 0.0 {
                                continue;
                            }
                            for (s, &y) in gb[p * n..(p + 1) * n].iter_mut().zip(gr) {
                                *s += x * y;
                            }
                        }
                    }
                }
            }
            Op::ConcatLast { a, b } => {
                let ca = *self.shape(*a).last().unwrap();
                let cb = *self.shape(*b).last().unwrap();
                let rows = g.len() / (ca + cb).max(1);
                if self.wants(*a) {
                    let ga = accumulate(&mut grads[a.0], rows * ca);
                    for r in 0..rows {
                        for j in 0..ca {
                            ga[r * ca + j] += g[r * (ca + cb) + j];
                        }
                    }
                }
                if self.wants(*b) {
                    let gb = accumulate(&mut grads[b.0], rows * cb);
                    for r in 0..rows {
                        for j in 0..cb {
                            gb[r * cb + j] += g[r * (ca + cb) + ca + j];
                        }
                    }
                }
            }
            Op::Conv2d { input, kernel, bias, dilation } => {
                self.conv2d_back(*input, *kernel, *bias, *dilation, g, grads)
            }
            Op::MeanPool2(a) => {
                if self.wants(*a) {
                    let &[h, w, c] = self.shape(*a) else { unreachable!() };
                    let (oh, ow) = (h / 2, w / 2);
                    let ga = accumulate(&mut grads[a.0], h * w * c);
                    for y in 0..oh {
                        for x in 0..ow {
                            let o = (y * ow + x) * c;
                            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                let i = ((2 * y + dy) * w + 2 * x + dx) * c;
                                for ch in 0..c {
                                    ga[i + ch] += 0.25 * g[o + ch];
                                }
                            }
                        }
                    }
                }
            }
            Op::Upsample { input, factor } => {
                if self.wants(*input) {
                    let &[h, w, c] = self.shape(*input) else { unreachable!() };
                    let (oh, ow) = (h * factor, w * factor);
                    let (ys, xs) = (interp_table(h, oh), interp_table(w, ow));
                    let gi = accumulate(&mut grads[input.0], h * w * c);
                    for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                        for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                            let o = (oy * ow + ox) * c;
                            let taps = [
                                ((y0 * w + x0) * c, (1.0 - fy) * (1.0 - fx)),
                                ((y0 * w + x1) * c, (1.0 - fy) * fx),
                                ((y1 * w + x0) * c, fy * (1.0 - fx)),
                                ((y1 * w + x1) * c, fy * fx),
                            ];
                            for (base, wt) in taps {
                                if wt == 0.0 {
                                    continue;
                                }
                                for ch in 0..c {
                                    gi[base + ch] += wt * g[o + ch];
                                }
                            }
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                if self.wants(*a) {
                    let dot: f64 = g.iter().zip(out).map(|(x, y)| x * y).sum();
                    let ga = accumulate(&mut grads[a.0], out.len());
                    for i in 0..out.len() {
                        ga[i] += out[i] * (g[i] - dot);
                    }
                }
            }
            Op::NormLast(a) => {
                if self.wants(*a) {
                    let x = self.value(*a).data();
                    let d = *self.shape(*a).last().unwrap();
                    let ga = accumulate(&mut grads[a.0], x.len());
                    for (r, &n) in out.iter().enumerate() {
                        if n < DIV_EPS {
                            continue;
                        }
                        for j in 0..d {
                            ga[r * d + j] += g[r] * x[r * d + j] / n;
                        }
                    }
                }
            }
            Op::NormalizeLast(a) => {
                if self.wants(*a) {
                    let x = self.value(*a).data();
                    let d = *self.shape(*a).last().unwrap();
                    let ga = accumulate(&mut grads[a.0], x.len());
                    for r in 0..x.len() / d.max(1) {
                        let row = &x[r * d..(r + 1) * d];
                        let n = l2(row);
                        if n < DIV_EPS {
                            continue;
                        }
                        let u = &out[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let dot: f64 = gr.iter().zip(u).map(|(p, q)| p * q).sum();
                        for j in 0..d {
                            ga[r * d + j] += (gr[j] - dot * u[j]) / n;
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets } => {
                if self.wants(*logits) {
                    let t = self.value(*logits);
                    let c = t.shape()[1];
                    let n = targets.len() as f64;
                    let gl = accumulate(&mut grads[logits.0], t.numel());
                    for (r, (row, &y)) in t.data().chunks(c).zip(targets).enumerate() {
                        let p = softmax_slice(row);
                        for j in 0..c {
                            let onehot = if j == y { 1.0 } else { 0.0 };
                            gl[r * c + j] += g[0] * (p[j] - onehot) / n;
                        }
                    }
                }
            }
        }
    }

    fn unary_back(
        &self,
        a: Var,
        grads: &mut [Option<Vec<f64>>],
        f: impl Fn(usize, f64) -> f64,
    ) {
        if !self.wants(a) {
            return;
        }
        let x = self.value(a).data();
        let ga = accumulate(&mut grads[a.0], x.len());
        for (i, slot) in ga.iter_mut().enumerate() {
            *slot += f(i, x[i]);
        }
    }

    fn conv2d_back(
        &self,
        input: Var,
        kernel: Var,
        bias: Var,
        dilation: usize,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (ti, tk) = (self.value(input), self.value(kernel));
        let &[h, w, cin] = ti.shape() else { unreachable!() };
        let &[k, _, _, cout] = tk.shape() else { unreachable!() };
        let pad = ((k - 1) * dilation / 2) as isize;
        let (x, kw) = (ti.data(), tk.data());

        if self.wants(bias) {
            let gb = accumulate(&mut grads[bias.0], cout);
            for px in g.chunks(cout) {
                gb.iter_mut().zip(px).for_each(|(s, v)| *s += v);
            }
        }
        let want_in = self.wants(input);
        let want_k = self.wants(kernel);
        if !want_in && !want_k {
            return;
        }
        let mut gi = want_in.then(|| vec![0.0; h * w * cin]);
        let mut gk = want_k.then(|| vec![0.0; k * k * cin * cout]);
        for oy in 0..h {
            for ox in 0..w {
                let go = &g[(oy * w + ox) * cout..(oy * w + ox + 1) * cout];
                for ky in 0..k {
                    let iy = oy as isize + (ky * dilation) as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = ox as isize + (kx * dilation) as isize - pad;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let ibase = (iy as usize * w + ix as usize) * cin;
                        let kbase = (ky * k + kx) * cin * cout;
                        for ci in 0..cin {
                            let krow = kbase + ci * cout..kbase + (ci + 1) * cout;
                            if let Some(gi) = gi.as_mut() {
                                gi[ibase + ci] +=
                                    kw[krow.clone()].iter().zip(go).map(|(a, b)| a * b).sum::<f64>();
                            }
                            if let Some(gk) = gk.as_mut() {
                                let a = x[ibase + ci];
                                if a != 0.0 {
                                    for (s, &v) in gk[krow].iter_mut().zip(go) {
                                        *s += a * v;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        if let Some(gi) = gi {
            let slot = accumulate(&mut grads[input.0], gi.len());
            slot.iter_mut().zip(&gi).for_each(|(s, v)| *s += v);
        }
        if let Some(gk) = gk {
            let slot = accumulate(&mut grads[kernel.0], gk.len());
            slot.iter_mut().zip(&gk).for_each(|(s, v)| *s += v);
        }
    }
}

fn l2(row: &[f64]) -> f64 {
    row.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_slice(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Per output index: (lower source index, upper source index, upper weight).
fn interp_table(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    (0..n_out)
        .map(|i| {
            if n_in == 1 || n_out == 1 {
                return (0, 0, 0.0);
            }
            let src = i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
            let lo = (src.floor() as usize).min(n_in - 1);
            let hi = (lo + 1).min(n_in - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv_identity_kernel() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..12).map(|i| i as f64 * 0.3 - 1.0).collect();
        let x = g.constant(t(&[3, 4, 1], &data));
        let k = g.constant(t(&[1, 1, 1, 1], &[1.0]));
        let b = g.constant(t(&[1], &[0.0]));
        let y = g.conv2d(x, k, b, 1).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn conv_all_ones_zero_padding() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[5, 5, 1], 1.0));
        let k = g.constant(Tensor::full(&[3, 3, 1, 1], 1.0));
        let b = g.constant(t(&[1], &[0.0]));
        let y = g.conv2d(x, k, b, 1).unwrap();
        let out = g.value(y).data();
        assert_eq!(out[2 * 5 + 2], 9.0);
        assert_eq!(out[5 + 1], 9.0);
        assert_eq!(out[0], 4.0);
        assert_eq!(out[4], 4.0);
        assert_eq!(out[24], 4.0);
        assert_eq!(out[2], 6.0);
    }

    #[test]
    fn conv_dilated_center_tap_is_identity() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..25).map(|i| (i as f64).sin()).collect();
        let x = g.constant(t(&[5, 5, 1], &data));
        let mut kd = vec![0.0; 9];
        kd[4] = 1.0;
        let k = g.constant(t(&[3, 3, 1, 1], &kd));
        let b = g.constant(t(&[1], &[0.0]));
        let y = g.conv2d(x, k, b, 2).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn conv_rejects_bad_arguments() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[4, 4, 2]));
        let k_even = g.constant(Tensor::zeros(&[2, 2, 2, 1]));
        let k = g.constant(Tensor::zeros(&[3, 3, 2, 1]));
        let k_wrong_cin = g.constant(Tensor::zeros(&[3, 3, 3, 1]));
        let b = g.constant(Tensor::zeros(&[1]));
        assert!(matches!(g.conv2d(x, k_even, b, 1), Err(Error::Shape { .. })));
        assert!(matches!(g.conv2d(x, k, b, 0), Err(Error::Invalid(_))));
        assert!(matches!(g.conv2d(x, k_wrong_cin, b, 1), Err(Error::Shape { .. })));
    }

    #[test]
    fn relu_values_and_gradient_at_zero() {
        let mut g = Graph::new();
        let x = g.param(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = g.sum_all(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn square_sum_gradient() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum_all(sq).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0]);

        let mut g = Graph::new();
        let x = g.param(t(&[3], &[1.0, 2.0, 3.0]));
        let sq = g.elementwise(ElementwiseOp::Mul, x, Some(x)).unwrap();
        let s = g.sum_all(sq).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn div_guard() {
        let mut g = Graph::new();
        let a = g.constant(t(&[1], &[1.0]));
        let b = g.constant(t(&[1], &[1e-13]));
        assert!(matches!(g.div(a, b), Err(Error::Domain { .. })));
    }

    #[test]
    fn log_domain_and_exp_overflow() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2], &[1.0, 0.0]));
        assert!(matches!(g.log(a), Err(Error::Domain { .. })));
        let big = g.constant(t(&[1], &[1e4]));
        assert_eq!(g.exp(big), Err(Error::NonFinite("exp")));
    }

    #[test]
    fn binary_shape_rules() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 2]));
        let b = g.constant(Tensor::zeros(&[4]));
        let s = g.constant(Tensor::scalar(3.0).unwrap());
        assert!(g.add(a, b).is_err());
        let r = g.add(s, a).unwrap();
        assert_eq!(g.value(r).data(), &[3.0; 4]);
        let r = g.mul(a, s).unwrap();
        assert_eq!(g.shape(r), &[2, 2]);
    }

    #[test]
    fn scalar_broadcast_gradient_sums() {
        let mut g = Graph::new();
        let s = g.param(Tensor::scalar(2.0).unwrap());
        let a = g.param(t(&[3], &[1.0, 2.0, 3.0]));
        let p = g.mul(s, a).unwrap();
        let out = g.sum_all(p).unwrap();
        g.backward(out).unwrap();
        assert_eq!(g.grad(s).unwrap().data(), &[6.0]);
        assert_eq!(g.grad(a).unwrap().data(), &[2.0; 3]);
    }

    #[test]
    fn gap_and_reductions() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[4, 3, 2], 3.5));
        let v = g.gap(x).unwrap();
        assert_eq!(g.value(v).data(), &[3.5, 3.5]);

        let x = g.param(t(&[1, 2, 1], &[1.0, 5.0]));
        let v = g.reduce(ReduceOp::Gap, x, &[]).unwrap();
        assert_eq!(g.value(v).data(), &[3.0]);
        let s = g.sum_all(v).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.5, 0.5]);

        let z = g.constant(Tensor::zeros(&[3, 2]));
        let s = g.reduce(ReduceOp::Sum, z, &[0, 1]).unwrap();
        assert_eq!(g.value(s).item(), 0.0);
        assert!(g.reduce(ReduceOp::Sum, z, &[2]).is_err());
        assert!(g.reduce(ReduceOp::Sum, z, &[0, 0]).is_err());
    }

    #[test]
    fn reduce_middle_axis() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 3, 2], &(0..12).map(f64::from).collect::<Vec<_>>()));
        let s = g.reduce(ReduceOp::Sum, x, &[1]).unwrap();
        assert_eq!(g.shape(s), &[2, 2]);
        assert_eq!(g.value(s).data(), &[6.0, 9.0, 24.0, 27.0]);
        let m = g.reduce(ReduceOp::Mean, x, &[0, 2]).unwrap();
        assert_eq!(g.value(m).data(), &[3.5, 5.5, 7.5]);
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2], &[0.0, 0.0]));
        let s = g.softmax(a).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);
        let a = g.constant(t(&[2], &[0.0, 3f64.ln()]));
        let s = g.softmax(a).unwrap();
        let d = g.value(s).data();
        assert!((d[0] - 0.25).abs() < 1e-15 && (d[1] - 0.75).abs() < 1e-15);
        let a = g.constant(t(&[3], &[-7.5; 3]));
        let s = g.softmax(a).unwrap();
        for &p in g.value(s).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let e = g.constant(Tensor::zeros(&[0]));
        assert!(g.softmax(e).is_err());
    }

    #[test]
    fn shared_input_accumulates() {
        // f = x + x² at x = 2 -> 1 + 2x = 5
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(2.0).unwrap());
        let sq = g.mul(x, x).unwrap();
        let f = g.add(x, sq).unwrap();
        g.backward(f).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 5.0);
    }

    #[test]
    fn repeated_backward_accumulates_until_reset() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, -1.0]));
        let s = g.sum_all(x).unwrap();
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 2.0]);
        g.zero_grad();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::Shape { .. })));
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let mut g = Graph::new();
        let z = g.param(t(&[1, 3], &[0.2, -1.0, 0.7]));
        let l = g.cross_entropy(z, &[2]).unwrap();
        g.backward(l).unwrap();
        let p = softmax_slice(&[0.2, -1.0, 0.7]);
        let grad = g.grad(z).unwrap();
        for (j, gj) in grad.data().iter().enumerate() {
            let y = if j == 2 { 1.0 } else { 0.0 };
            assert!((gj - (p[j] - y)).abs() < 1e-15);
        }
    }

    #[test]
    fn matmul_transpose_concat() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.constant(t(&[2, 1], &[1.0, 1.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[3.0, 7.0]);
        let at = g.transpose(a).unwrap();
        assert_eq!(g.value(at).data(), &[1.0, 3.0, 2.0, 4.0]);
        let cat = g.concat_last(a, b).unwrap();
        assert_eq!(g.value(cat).data(), &[1.0, 2.0, 1.0, 3.0, 4.0, 1.0]);
        assert!(g.matmul(b, b).is_err());
    }

    #[test]
    fn upsample_reproduces_corners_and_constants() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 2, 1], &[0.0, 1.0, 2.0, 3.0]));
        let y = g.upsample_bilinear(x, 4).unwrap();
        let d = g.value(y).data();
        assert_eq!(g.shape(y), &[8, 8, 1]);
        assert_eq!(d[0], 0.0);
        assert_eq!(d[7], 1.0);
        assert_eq!(d[56], 2.0);
        assert_eq!(d[63], 3.0);
        let c = g.constant(Tensor::full(&[3, 3, 2], 1.5));
        let u = g.upsample_bilinear(c, 4).unwrap();
        assert!(g.value(u).data().iter().all(|&v| (v - 1.5).abs() < 1e-14));
    }

    #[test]
    fn normalize_and_norm_last() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 2], &[3.0, 4.0, 0.0, 0.0]));
        let n = g.norm_last(x).unwrap();
        assert_eq!(g.value(n).data(), &[5.0, 0.0]);
        let u = g.normalize_last(x).unwrap();
        assert_eq!(g.value(u).data(), &[0.6, 0.8, 0.0, 0.0]);
    }
}
