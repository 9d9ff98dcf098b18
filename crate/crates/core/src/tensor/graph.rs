use std::borrow::Cow;

use super::{split_axis, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise kernels reachable through [`Graph::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Tanh,
    Sigmoid,
    Exp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum UnaryKind {
    Neg,
    Tanh,
    Sigmoid,
    Exp,
    Log,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul(Var, Var),
    Binary { kind: BinaryKind, a: Var, b: Var },
    Unary { kind: UnaryKind, a: Var },
    Scale(Var, f64),
    Offset(Var),
    AddBias(Var, Var),
    Softmax { a: Var, axis: usize },
    Sum(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { a: Var, axis: usize, start: usize },
    Reshape(Var),
    Transpose(Var),
    MinAxis { a: Var, axis: usize, argmin: Vec<usize> },
    Clamp { a: Var, lo: f64, hi: f64 },
    Cumsum { a: Var, axis: usize },
    PairwiseDist(Var, Var),
    RowDist(Var, Var),
    OuterRows(Var, Var),
    Field { points: Var, slopes: Vec<[f64; 2]> },
}

#[derive(Debug)]
struct Node<'a> {
    shape: Vec<usize>,
    value: Cow<'a, [f64]>,
    op: Op,
    requires_grad: bool,
}

/// A tape of recorded operations. Nodes are appended in evaluation order, so
/// the tape is already topologically sorted.
#[derive(Debug, Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, var: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<'a> {
        &self.nodes[v.0]
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Registers a parameter by reference. Gradients are tracked when the
    /// tensor's `requires_grad` flag is set.
    pub fn param(&mut self, t: &'a Tensor) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: Cow::Borrowed(t.data()),
            op: Op::Leaf,
            requires_grad: t.requires_grad(),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, rg)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        Ok(self.leaf(Tensor::new(shape, data)?))
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.push(vec![], vec![value], Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    /// First element of `v`; intended for scalars.
    pub fn item(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.to_vec()).expect("node shape matches data")
    }

    // ---------------------------------------------------------------- ops

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a), self.value(b), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::Matmul(a, b), rg))
    }

    pub fn elementwise(&mut self, op: Elementwise, args: &[Var]) -> Result<Var> {
        let arity = match op {
            Elementwise::Add | Elementwise::Sub | Elementwise::Mul | Elementwise::Div => 2,
            _ => 1,
        };
        if args.len() != arity {
            return Err(Error::usage(format!(
                "{op:?} takes {arity} argument(s), got {}",
                args.len()
            )));
        }
        Ok(match op {
            Elementwise::Add => self.add(args[0], args[1])?,
            Elementwise::Sub => self.sub(args[0], args[1])?,
            Elementwise::Mul => self.mul(args[0], args[1])?,
            Elementwise::Div => self.div(args[0], args[1])?,
            Elementwise::Neg => self.neg(args[0]),
            Elementwise::Tanh => self.tanh(args[0]),
            Elementwise::Sigmoid => self.sigmoid(args[0]),
            Elementwise::Exp => self.exp(args[0]),
        })
    }

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (self.node(a), self.node(b));
        let shape = if na.shape == nb.shape {
            na.shape.clone()
        } else if na.value.len() == 1 {
            nb.shape.clone()
        } else if nb.value.len() == 1 {
            na.shape.clone()
        } else {
            return Err(Error::Dimension {
                op: "elementwise",
                lhs: na.shape.clone(),
                rhs: nb.shape.clone(),
            });
        };
        let n: usize = shape.iter().product();
        let (va, vb) = (&na.value, &nb.value);
        let (sa, sb) = (va.len() == n, vb.len() == n);
        let f = |x: f64, y: f64| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
        };
        let out = (0..n)
            .map(|i| f(va[if sa { i } else { 0 }], vb[if sb { i } else { 0 }]))
            .collect();
        let rg = na.requires_grad || nb.requires_grad;
        Ok(self.push(shape, out, Op::Binary { kind, a, b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    fn unary(&mut self, kind: UnaryKind, a: Var) -> Var {
        let n = self.node(a);
        let out = n
            .value
            .iter()
            .map(|&x| match kind {
                UnaryKind::Neg => -x,
                UnaryKind::Tanh => x.tanh(),
                UnaryKind::Sigmoid => sigmoid(x),
                UnaryKind::Exp => x.exp(),
                UnaryKind::Log => x.ln(),
            })
            .collect();
        let (shape, rg) = (n.shape.clone(), n.requires_grad);
        self.push(shape, out, Op::Unary { kind, a }, rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Neg, a)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Tanh, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Sigmoid, a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Log, a)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let n = self.node(a);
        let out = n.value.iter().map(|&x| c * x).collect();
        let (shape, rg) = (n.shape.clone(), n.requires_grad);
        self.push(shape, out, Op::Scale(a, c), rg)
    }

    /// `a + c` for a constant `c`.
    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let n = self.node(a);
        let out = n.value.iter().map(|&x| x + c).collect();
        let (shape, rg) = (n.shape.clone(), n.requires_grad);
        self.push(shape, out, Op::Offset(a), rg)
    }

    /// Adds a bias vector `[n]` to every row of `x: [m, n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sx.len() != 2 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(Error::Dimension {
                op: "add_bias",
                lhs: sx.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let cols = sx[1];
        let shape = sx.to_vec();
        let vb = self.value(bias);
        let out = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + vb[i % cols])
            .collect();
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(shape, out, Op::AddBias(x, bias), rg))
    }

    /// `x · w + b` for `x: [m, k]`, `w: [k, n]`, `b: [n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_bias(xw, b)
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::Dimension {
                op: "softmax",
                lhs: shape,
                rhs: vec![axis],
            });
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let x = self.value(a);
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| x[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (x[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[idx(j)] /= total;
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(shape, out, Op::Softmax { a, axis }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let n = self.node(a);
        let total = n.value.iter().sum();
        let rg = n.requires_grad;
        self.push(vec![], vec![total], Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let count = self.node(a).value.len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / count)
    }

    /// Sum of a list of scalars (or equal-shape tensors).
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Option<Var>> {
        let mut it = terms.iter();
        let Some(&first) = it.next() else {
            return Ok(None);
        };
        let mut acc = first;
        for &t in it {
            acc = self.add(acc, t)?;
        }
        Ok(Some(acc))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::usage("concat of zero tensors"));
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::Dimension {
                op: "concat",
                lhs: base,
                rhs: vec![axis],
            });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(Error::Dimension {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis];
                let chunk = len * inner;
                out.extend_from_slice(&self.value(p)[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Elements `start..end` of `a` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start > end || end > shape[axis] {
            return Err(Error::Dimension {
                op: "slice",
                lhs: shape,
                rhs: vec![axis, start, end],
            });
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let width = end - start;
        let x = self.value(a);
        let mut out = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            let base = (o * len + start) * inner;
            out.extend_from_slice(&x[base..base + width * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = width;
        let rg = self.rg(a);
        Ok(self.push(new_shape, out, Op::Slice { a, axis, start }, rg))
    }

    /// Row `i` of a 2-D tensor as a `[cols]` vector.
    pub fn row(&mut self, a: Var, i: usize) -> Result<Var> {
        let cols = *self.shape(a).last().unwrap_or(&1);
        let r = self.slice(a, 0, i, i + 1)?;
        self.reshape(r, &[cols])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n = self.node(a);
        if shape.iter().product::<usize>() != n.value.len() {
            return Err(Error::Dimension {
                op: "reshape",
                lhs: n.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        let out = n.value.to_vec();
        let rg = n.requires_grad;
        Ok(self.push(shape.to_vec(), out, Op::Reshape(a), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(Error::Dimension {
                op: "transpose",
                lhs: s,
                rhs: vec![],
            });
        }
        let (r, c) = (s[0], s[1]);
        let x = self.value(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x[i * c + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(vec![c, r], out, Op::Transpose(a), rg))
    }

    /// Minimum along `axis`; ties resolve to the lowest index.
    pub fn min_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::Dimension {
                op: "min_axis",
                lhs: shape,
                rhs: vec![axis],
            });
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let x = self.value(a);
        let mut out = Vec::with_capacity(outer * inner);
        let mut argmin = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = 0;
                let mut best_v = x[o * len * inner + i];
                for j in 1..len {
                    let v = x[(o * len + j) * inner + i];
                    if v < best_v {
                        best = j;
                        best_v = v;
                    }
                }
                out.push(best_v);
                argmin.push(best);
            }
        }
        let mut new_shape = shape;
        new_shape.remove(axis);
        let rg = self.rg(a);
        Ok(self.push(new_shape, out, Op::MinAxis { a, axis, argmin }, rg))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let n = self.node(a);
        let out = n.value.iter().map(|&x| x.clamp(lo, hi)).collect();
        let (shape, rg) = (n.shape.clone(), n.requires_grad);
        self.push(shape, out, Op::Clamp { a, lo, hi }, rg)
    }

    /// Running sum along `axis`, accumulated strictly in index order.
    pub fn cumsum(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::Dimension {
                op: "cumsum",
                lhs: shape,
                rhs: vec![axis],
            });
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let mut out = self.value(a).to_vec();
        for o in 0..outer {
            for i in 0..inner {
                for j in 1..len {
                    let prev = out[(o * len + j - 1) * inner + i];
                    out[(o * len + j) * inner + i] += prev;
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(shape, out, Op::Cumsum { a, axis }, rg))
    }

    /// Euclidean distances between every row of `a: [n, d]` and `b: [m, d]`.
    pub fn pairwise_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::Dimension {
                op: "pairwise_dist",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (n, m, d) = (sa[0], sb[0], sa[1]);
        let (va, vb) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(n * m);
        for i in 0..n {
            for j in 0..m {
                out.push(euclid(&va[i * d..(i + 1) * d], &vb[j * d..(j + 1) * d]));
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![n, m], out, Op::PairwiseDist(a, b), rg))
    }

    /// Euclidean distance between matching rows of `a` and `b` (both `[n, d]`).
    pub fn row_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sa != sb {
            return Err(Error::Dimension {
                op: "row_dist",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (n, d) = (sa[0], sa[1]);
        let (va, vb) = (self.value(a), self.value(b));
        let out = (0..n)
            .map(|i| euclid(&va[i * d..(i + 1) * d], &vb[i * d..(i + 1) * d]))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![n], out, Op::RowDist(a, b), rg))
    }

    /// Row-wise outer product: `a: [n, p]`, `b: [n, q]` give `[n, p·q]` with
    /// `out[r, i·q + j] = a[r, i] · b[r, j]`.
    pub fn outer_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(Error::Dimension {
                op: "outer_rows",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (n, p, q) = (sa[0], sa[1], sb[1]);
        let (va, vb) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(n * p * q);
        for r in 0..n {
            let br = &vb[r * q..(r + 1) * q];
            for &x in &va[r * p..(r + 1) * p] {
                out.extend(br.iter().map(|&y| x * y));
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![n, p * q], out, Op::OuterRows(a, b), rg))
    }

    /// Evaluates a scalar field at each row of `points: [n, 2]`. The closure
    /// returns the field value and its spatial gradient at that point.
    pub fn field<F>(&mut self, points: Var, f: F) -> Result<Var>
    where
        F: Fn([f64; 2]) -> (f64, [f64; 2]),
    {
        let s = self.shape(points);
        if s.len() != 2 || s[1] != 2 {
            return Err(Error::Dimension {
                op: "field",
                lhs: s.to_vec(),
                rhs: vec![2],
            });
        }
        let n = s[0];
        let p = self.value(points);
        let mut out = Vec::with_capacity(n);
        let mut slopes = Vec::with_capacity(n);
        for i in 0..n {
            let (v, g) = f([p[2 * i], p[2 * i + 1]]);
            out.push(v);
            slopes.push(g);
        }
        let rg = self.rg(points);
        Ok(self.push(vec![n], out, Op::Field { points, slopes }, rg))
    }

    // ----------------------------------------------------------- backward

    /// Reverse sweep from a scalar `loss`. Every node is visited once, newest
    /// first; every gradient-tracking leaf gets an entry (zeros if unreachable).
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let ln = self.node(loss);
        if ln.value.len() != 1 {
            return Err(Error::usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                ln.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if ln.requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.backward_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) && grads[i].is_none() {
                grads[i] = Some(vec![0.0; node.value.len()]);
            }
        }
        Ok(Gradients { grads })
    }

    fn acc<F: FnOnce(&mut [f64])>(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: F) {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]);
        f(slot);
    }

    fn backward_node(&self, node: &Node<'a>, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let (va, vb) = (self.value(*a), self.value(*b));
                // dA = G · Bᵀ
                self.acc(grads, *a, |ga| {
                    for i0 in (0..m).step_by(ROW_BLOCK) {
                        let i1 = (i0 + ROW_BLOCK).min(m);
                        for p in 0..k {
                            let brow = &vb[p * n..(p + 1) * n];
                            for i in i0..i1 {
                                ga[i * k + p] += dot(&g[i * n..(i + 1) * n], brow);
                            }
                        }
                    }
                });
                // dB = Aᵀ · G
                self.acc(grads, *b, |gb| {
                    for i0 in (0..m).step_by(ROW_BLOCK) {
                        let i1 = (i0 + ROW_BLOCK).min(m);
                        for p in 0..k {
                            let orow = &mut gb[p * n..(p + 1) * n];
                            for i in i0..i1 {
                                let s = va[i * k + p];
                                if s == 0.0 {
                                    continue;
                                }
                                for (o, &gv) in orow.iter_mut().zip(&g[i * n..(i + 1) * n]) {
                                    *o += s * gv;
                                }
                            }
                        }
                    }
                });
            }
            Op::Binary { kind, a, b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let n = g.len();
                let (fa, fb) = (va.len() == n, vb.len() == n);
                let at = |i: usize| va[if fa { i } else { 0 }];
                let bt = |i: usize| vb[if fb { i } else { 0 }];
                let da = |i: usize| match kind {
                    BinaryKind::Add | BinaryKind::Sub => g[i],
                    BinaryKind::Mul => g[i] * bt(i),
                    BinaryKind::Div => g[i] / bt(i),
                };
                let db = |i: usize| match kind {
                    BinaryKind::Add => g[i],
                    BinaryKind::Sub => -g[i],
                    BinaryKind::Mul => g[i] * at(i),
                    BinaryKind::Div => -g[i] * at(i) / (bt(i) * bt(i)),
                };
                self.acc(grads, *a, |ga| {
                    for i in 0..n {
                        ga[if fa { i } else { 0 }] += da(i);
                    }
                });
                self.acc(grads, *b, |gb| {
                    for i in 0..n {
                        gb[if fb { i } else { 0 }] += db(i);
                    }
                });
            }
            Op::Unary { kind, a } => {
                let x = self.value(*a);
                self.acc(grads, *a, |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i]
                            * match kind {
                                UnaryKind::Neg => -1.0,
                                UnaryKind::Tanh => 1.0 - y[i] * y[i],
                                UnaryKind::Sigmoid => y[i] * (1.0 - y[i]),
                                UnaryKind::Exp => y[i],
                                UnaryKind::Log => 1.0 / x[i],
                            };
                    }
                });
            }
            Op::Scale(a, c) => self.acc(grads, *a, |ga| {
                for (o, &gv) in ga.iter_mut().zip(g) {
                    *o += c * gv;
                }
            }),
            Op::Offset(a) | Op::Reshape(a) => self.acc(grads, *a, |ga| add_into(ga, g)),
            Op::AddBias(x, b) => {
                self.acc(grads, *x, |gx| add_into(gx, g));
                let cols = self.shape(*b)[0];
                self.acc(grads, *b, |gb| {
                    for row in g.chunks(cols) {
                        add_into(gb, row);
                    }
                });
            }
            Op::Softmax { a, axis } => {
                let (outer, len, inner) = split_axis(&node.shape, *axis);
                self.acc(grads, *a, |ga| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |j: usize| (o * len + j) * inner + i;
                            let dotp: f64 = (0..len).map(|j| g[idx(j)] * y[idx(j)]).sum();
                            for j in 0..len {
                                ga[idx(j)] += y[idx(j)] * (g[idx(j)] - dotp);
                            }
                        }
                    }
                });
            }
            Op::Sum(a) => self.acc(grads, *a, |ga| {
                for o in ga.iter_mut() {
                    *o += g[0];
                }
            }),
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(&node.shape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    self.acc(grads, p, |gp| {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * len * inner;
                            add_into(&mut gp[dst..dst + len * inner], &g[src..src + len * inner]);
                        }
                    });
                    offset += len;
                }
            }
            Op::Slice { a, axis, start } => {
                let (outer, len, inner) = split_axis(self.shape(*a), *axis);
                let width = node.shape[*axis];
                self.acc(grads, *a, |ga| {
                    for o in 0..outer {
                        let dst = (o * len + start) * inner;
                        let src = o * width * inner;
                        add_into(&mut ga[dst..dst + width * inner], &g[src..src + width * inner]);
                    }
                });
            }
            Op::Transpose(a) => {
                let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                self.acc(grads, *a, |ga| {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::MinAxis { a, axis, argmin } => {
                let (outer, len, inner) = split_axis(self.shape(*a), *axis);
                self.acc(grads, *a, |ga| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let out_idx = o * inner + i;
                            ga[(o * len + argmin[out_idx]) * inner + i] += g[out_idx];
                        }
                    }
                });
            }
            Op::Clamp { a, lo, hi } => {
                let x = self.value(*a);
                self.acc(grads, *a, |ga| {
                    for i in 0..g.len() {
                        if x[i] >= *lo && x[i] <= *hi {
                            ga[i] += g[i];
                        }
                    }
                });
            }
            Op::Cumsum { a, axis } => {
                let (outer, len, inner) = split_axis(&node.shape, *axis);
                self.acc(grads, *a, |ga| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let mut run = 0.0;
                            for j in (0..len).rev() {
                                let idx = (o * len + j) * inner + i;
                                run += g[idx];
                                ga[idx] += run;
                            }
                        }
                    }
                });
            }
            Op::PairwiseDist(a, b) => {
                let (n, d) = (self.shape(*a)[0], self.shape(*a)[1]);
                let m = self.shape(*b)[0];
                let (va, vb) = (self.value(*a), self.value(*b));
                let unit = |i: usize, j: usize, t: usize| {
                    let dist = y[i * m + j];
                    if dist > 0.0 {
                        (va[i * d + t] - vb[j * d + t]) / dist
                    } else {
                        0.0
                    }
                };
                self.acc(grads, *a, |ga| {
                    for i in 0..n {
                        for j in 0..m {
                            let gv = g[i * m + j];
                            if gv != 0.0 {
                                for t in 0..d {
                                    ga[i * d + t] += gv * unit(i, j, t);
                                }
                            }
                        }
                    }
                });
                self.acc(grads, *b, |gb| {
                    for i in 0..n {
                        for j in 0..m {
                            let gv = g[i * m + j];
                            if gv != 0.0 {
                                for t in 0..d {
                                    gb[j * d + t] -= gv * unit(i, j, t);
                                }
                            }
                        }
                    }
                });
            }
            Op::RowDist(a, b) => {
                let d = self.shape(*a)[1];
                let (va, vb) = (self.value(*a), self.value(*b));
                let unit = |i: usize, t: usize| {
                    if y[i] > 0.0 {
                        (va[i * d + t] - vb[i * d + t]) / y[i]
                    } else {
                        0.0
                    }
                };
                self.acc(grads, *a, |ga| {
                    for i in 0..g.len() {
                        for t in 0..d {
                            ga[i * d + t] += g[i] * unit(i, t);
                        }
                    }
                });
                self.acc(grads, *b, |gb| {
                    for i in 0..g.len() {
                        for t in 0..d {
                            gb[i * d + t] -= g[i] * unit(i, t);
                        }
                    }
                });
            }
            Op::OuterRows(a, b) => {
                let (p, q) = (self.shape(*a)[1], self.shape(*b)[1]);
                let (va, vb) = (self.value(*a), self.value(*b));
                let n = va.len() / p.max(1);
                self.acc(grads, *a, |ga| {
                    for r in 0..n {
                        for i in 0..p {
                            let row = &g[(r * p + i) * q..(r * p + i + 1) * q];
                            ga[r * p + i] += row.iter().zip(&vb[r * q..(r + 1) * q]).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                self.acc(grads, *b, |gb| {
                    for r in 0..n {
                        for i in 0..p {
                            let x = va[r * p + i];
                            let row = &g[(r * p + i) * q..(r * p + i + 1) * q];
                            for (gj, &o) in gb[r * q..(r + 1) * q].iter_mut().zip(row) {
                                *gj += o * x;
                            }
                        }
                    }
                });
            }
            Op::Field { points, slopes } => self.acc(grads, *points, |gp| {
                for (i, s) in slopes.iter().enumerate() {
                    gp[2 * i] += g[i] * s[0];
                    gp[2 * i + 1] += g[i] * s[1];
                }
            }),
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (o, &v) in dst.iter_mut().zip(src) {
        *o += v;
    }
}

/// Rows of `a` processed together, so each row of `b` is read once per block.
const ROW_BLOCK: usize = 16;

pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i0 in (0..m).step_by(ROW_BLOCK) {
        let i1 = (i0 + ROW_BLOCK).min(m);
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            for i in i0..i1 {
                let s = a[i * k + p];
                if s == 0.0 {
                    continue;
                }
                for (o, &bv) in out[i * n..(i + 1) * n].iter_mut().zip(brow) {
                    *o += s * bv;
                }
            }
        }
    }
}
