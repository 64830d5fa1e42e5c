use crate::error::{PdmError, Result};

use super::tensor::{broadcast_map, broadcast_shape, strides, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UnaryKind {
    Neg,
    Relu,
    Sigmoid,
    Exp,
    Ln,
    Sqrt,
    Square,
    Scale(f64),
    AddScalar(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Extreme {
    Max,
    Min,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Unary {
        x: usize,
        kind: UnaryKind,
    },
    Binary {
        a: usize,
        b: usize,
        kind: BinaryKind,
        // None when the operand already has the output shape.
        a_map: Option<Vec<usize>>,
        b_map: Option<Vec<usize>>,
    },
    MatMul {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Conv2d {
        x: usize,
        kernel: usize,
        dilation: usize,
    },
    Sum {
        x: usize,
        outer: usize,
        len: usize,
        inner: usize,
        scale: f64,
    },
    Gather {
        x: usize,
        // output flat index -> input flat index, each input used at most once
        map: Vec<usize>,
    },
    Concat {
        parts: Vec<usize>,
        outer: usize,
        widths: Vec<usize>,
    },
    Reshape {
        x: usize,
    },
    PairwiseDist {
        a: usize,
        b: usize,
        d: usize,
    },
    RowDist {
        a: usize,
        b: usize,
        d: usize,
    },
    NormLast {
        x: usize,
        d: usize,
    },
    Cosine {
        u: usize,
        v: usize,
    },
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        softmax: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Define-by-run record of differentiable operations.
///
/// A fresh tape is built for every forward pass; [`Tape::backward`] walks it
/// in exact reverse order of recording.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    // smallest distance of any relu input or max/min selection to a tie
    kink: Option<f64>,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("gradient shape"))
    }

    /// Gradient with respect to `v`; zeros when `v` did not influence the loss.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.get(v)
            .unwrap_or_else(|| Tensor::zeros(self.shapes[v.0].clone()))
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
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

    fn push(&mut self, name: &str, value: Tensor, inputs: &[usize], op: Op) -> Result<Var> {
        let inputs_finite = inputs.iter().all(|&i| self.nodes[i].value.is_finite());
        if inputs_finite && !value.is_finite() {
            return Err(PdmError::numeric(
                name,
                "non-finite output from finite inputs",
            ));
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn note_kink(&mut self, margin: f64) {
        self.kink = Some(self.kink.map_or(margin, |k| k.min(margin)));
    }

    /// How close the recorded forward pass came to a non-differentiable
    /// point: the smallest |input| of any relu and the smallest gap between
    /// the winner and runner-up of any max or masked min/max. Infinite when
    /// no such op was recorded.
    pub fn kink_margin(&self) -> f64 {
        self.kink.unwrap_or(f64::INFINITY)
    }

    /// A copy of `x` that blocks gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    // ---- elementwise -------------------------------------------------

    pub fn unary(&mut self, kind: UnaryKind, x: Var) -> Result<Var> {
        let f: Box<dyn Fn(f64) -> f64> = match kind {
            UnaryKind::Neg => Box::new(|v| -v),
            UnaryKind::Relu => Box::new(|v| v.max(0.0)),
            UnaryKind::Sigmoid => Box::new(sigmoid),
            UnaryKind::Exp => Box::new(f64::exp),
            UnaryKind::Ln => Box::new(f64::ln),
            UnaryKind::Sqrt => Box::new(f64::sqrt),
            UnaryKind::Square => Box::new(|v| v * v),
            UnaryKind::Scale(k) => Box::new(move |v| v * k),
            UnaryKind::AddScalar(k) => Box::new(move |v| v + k),
        };
        let out = self.value(x).map(f);
        if kind == UnaryKind::Relu && self.requires_grad(x) {
            let m = self
                .value(x)
                .data()
                .iter()
                .fold(f64::INFINITY, |a, v| a.min(v.abs()));
            self.note_kink(m);
        }
        self.push("elementwise", out, &[x.0], Op::Unary { x: x.0, kind })
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Neg, x)
    }
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Relu, x)
    }
    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Sigmoid, x)
    }
    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Exp, x)
    }
    pub fn ln(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Ln, x)
    }
    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Sqrt, x)
    }
    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Square, x)
    }
    pub fn scale(&mut self, x: Var, k: f64) -> Result<Var> {
        self.unary(UnaryKind::Scale(k), x)
    }
    pub fn add_scalar(&mut self, x: Var, k: f64) -> Result<Var> {
        self.unary(UnaryKind::AddScalar(k), x)
    }

    pub fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let out_shape = broadcast_shape(&sa, &sb)
            .ok_or_else(|| PdmError::contract(format!("cannot broadcast {sa:?} with {sb:?}")))?;
        let a_map = (sa != out_shape).then(|| broadcast_map(&sa, &out_shape));
        let b_map = (sb != out_shape).then(|| broadcast_map(&sb, &out_shape));
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let f = match kind {
            BinaryKind::Add => |x: f64, y: f64| x + y,
            BinaryKind::Sub => |x: f64, y: f64| x - y,
            BinaryKind::Mul => |x: f64, y: f64| x * y,
            BinaryKind::Div => |x: f64, y: f64| x / y,
        };
        let n: usize = out_shape.iter().product();
        let data = (0..n)
            .map(|i| {
                let x = av[a_map.as_ref().map_or(i, |m| m[i])];
                let y = bv[b_map.as_ref().map_or(i, |m| m[i])];
                f(x, y)
            })
            .collect();
        let out = Tensor::new(out_shape, data)?;
        self.push(
            "elementwise",
            out,
            &[a.0, b.0],
            Op::Binary {
                a: a.0,
                b: b.0,
                kind,
                a_map,
                b_map,
            },
        )
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

    // ---- linear algebra ----------------------------------------------

    /// `[m,k] x [k,n]`, or batched `[B,m,k] x [B,k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let (batch, m, k, n) = match (sa.as_slice(), sb.as_slice()) {
            ([m, k], [k2, n]) if k == k2 => (1, *m, *k, *n),
            ([ba, m, k], [bb, k2, n]) if ba == bb && k == k2 => (*ba, *m, *k, *n),
            _ => {
                return Err(PdmError::contract(format!(
                    "matmul dimension mismatch: {sa:?} x {sb:?}"
                )))
            }
        };
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; batch * m * n];
        for bi in 0..batch {
            let ao = &av[bi * m * k..(bi + 1) * m * k];
            let bo = &bv[bi * k * n..(bi + 1) * k * n];
            let oo = &mut out[bi * m * n..(bi + 1) * m * n];
            for i in 0..m {
                let row = &mut oo[i * n..(i + 1) * n];
                for p in 0..k {
                    let aip = ao[i * k + p];
                    if aip == 0.0 {
                        continue;
                    }
                    let brow = &bo[p * n..(p + 1) * n];
                    for (o, &bv) in row.iter_mut().zip(brow) {
                        *o += aip * bv;
                    }
                }
            }
        }
        let shape = if sa.len() == 2 {
            vec![m, n]
        } else {
            vec![batch, m, n]
        };
        let out = Tensor::new(shape, out)?;
        self.push(
            "matmul",
            out,
            &[a.0, b.0],
            Op::MatMul {
                a: a.0,
                b: b.0,
                batch,
                m,
                k,
                n,
            },
        )
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let nd = self.shape(x).len();
        if nd < 2 {
            return Err(PdmError::contract("transpose needs at least 2 axes"));
        }
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(nd - 2, nd - 1);
        self.permute(x, &perm)
    }

    /// 3x3 convolution with zero padding equal to `dilation`, so spatial
    /// extents are preserved. `x` is `[c_in,h,w]` or `[N,c_in,h,w]`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, dilation: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sk = self.shape(kernel).to_vec();
        if sk.len() != 4 || sk[2] != 3 || sk[3] != 3 {
            return Err(PdmError::Unsupported(format!(
                "conv2d supports 3x3 kernels only, got {sk:?}"
            )));
        }
        if dilation == 0 {
            return Err(PdmError::contract("dilation must be positive"));
        }
        let (batch, c_in, h, w) = match sx.as_slice() {
            [c, h, w] => (1, *c, *h, *w),
            [nb, c, h, w] => (*nb, *c, *h, *w),
            _ => {
                return Err(PdmError::contract(format!(
                    "conv2d input must be [c,h,w] or [n,c,h,w], got {sx:?}"
                )))
            }
        };
        if sk[1] != c_in {
            return Err(PdmError::contract(format!(
                "conv2d kernel expects {} input channels, input has {c_in}",
                sk[1]
            )));
        }
        let c_out = sk[0];
        let out = conv_forward(
            self.value(x).data(),
            self.value(kernel).data(),
            ConvDims {
                batch,
                c_in,
                c_out,
                h,
                w,
                dilation,
            },
        );
        let shape = if sx.len() == 3 {
            vec![c_out, h, w]
        } else {
            vec![batch, c_out, h, w]
        };
        let out = Tensor::new(shape, out)?;
        self.push(
            "conv2d",
            out,
            &[x.0, kernel.0],
            Op::Conv2d {
                x: x.0,
                kernel: kernel.0,
                dilation,
            },
        )
    }

    // ---- reductions and reshaping ------------------------------------

    fn reduce_sum(&mut self, x: Var, axis: Option<usize>, mean: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, len, inner, out_shape) = match axis {
            None => (1, shape.iter().product(), 1, Vec::new()),
            Some(ax) => {
                if ax >= shape.len() {
                    return Err(PdmError::contract(format!(
                        "axis {ax} out of range for {shape:?}"
                    )));
                }
                let (o, l, i) = split_axis(&shape, ax);
                let mut s = shape.clone();
                s.remove(ax);
                (o, l, i, s)
            }
        };
        if len == 0 {
            return Err(PdmError::contract("reduction over an empty axis"));
        }
        let scale = if mean { 1.0 / len as f64 } else { 1.0 };
        let xv = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &xv[(o * len + l) * inner..(o * len + l + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        if mean {
            out.iter_mut().for_each(|v| *v *= scale);
        }
        let out = Tensor::new(out_shape, out)?;
        self.push(
            "reduce",
            out,
            &[x.0],
            Op::Sum {
                x: x.0,
                outer,
                len,
                inner,
                scale,
            },
        )
    }

    /// Sum over `axis`, removing it.
    pub fn sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_sum(x, Some(axis), false)
    }

    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_sum(x, Some(axis), true)
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        self.reduce_sum(x, None, false)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        self.reduce_sum(x, None, true)
    }

    /// Maximum over `axis`, removing it. Ties resolve to the lowest index.
    pub fn max(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(PdmError::contract(format!(
                "max over axis {axis} of {shape:?}"
            )));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let xv = self.value(x).data();
        let mut map = Vec::with_capacity(outer * inner);
        let mut margin = f64::INFINITY;
        for o in 0..outer {
            for i in 0..inner {
                let mut best = o * len * inner + i;
                for l in 1..len {
                    let idx = (o * len + l) * inner + i;
                    if xv[idx] > xv[best] {
                        best = idx;
                    }
                }
                for l in 0..len {
                    let idx = (o * len + l) * inner + i;
                    if idx != best {
                        margin = margin.min(xv[best] - xv[idx]);
                    }
                }
                map.push(best);
            }
        }
        if self.requires_grad(x) {
            self.note_kink(margin);
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        self.gather(x, map, out_shape, "max")
    }

    /// Per row of a 2-D tensor, the max (or min) over entries whose mask is set.
    pub fn masked_extreme(&mut self, x: Var, mask: &[bool], which: Extreme) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let [rows, cols] = shape[..] else {
            return Err(PdmError::contract("masked_extreme expects a 2-D tensor"));
        };
        if mask.len() != rows * cols {
            return Err(PdmError::contract("mask length does not match tensor"));
        }
        let xv = self.value(x).data();
        let mut map = Vec::with_capacity(rows);
        let mut margin = f64::INFINITY;
        for r in 0..rows {
            let mut best: Option<usize> = None;
            for c in 0..cols {
                let idx = r * cols + c;
                if !mask[idx] {
                    continue;
                }
                best = match best {
                    None => Some(idx),
                    Some(b) => {
                        let better = match which {
                            Extreme::Max => xv[idx] > xv[b],
                            Extreme::Min => xv[idx] < xv[b],
                        };
                        Some(if better { idx } else { b })
                    }
                };
            }
            let best =
                best.ok_or_else(|| PdmError::contract(format!("row {r} has no selectable entry")))?;
            for c in 0..cols {
                let idx = r * cols + c;
                if mask[idx] && idx != best {
                    margin = margin.min((xv[best] - xv[idx]).abs());
                }
            }
            map.push(best);
        }
        if self.requires_grad(x) {
            self.note_kink(margin);
        }
        self.gather(x, map, vec![rows], "masked_extreme")
    }

    fn gather(&mut self, x: Var, map: Vec<usize>, shape: Vec<usize>, name: &str) -> Result<Var> {
        let xv = self.value(x).data();
        let data = map.iter().map(|&i| xv[i]).collect();
        let out = Tensor::new(shape, data)?;
        self.push(name, out, &[x.0], Op::Gather { x: x.0, map })
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| PdmError::contract("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(PdmError::contract(format!(
                "concat axis {axis} out of range for {base:?}"
            )));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let consistent = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !consistent {
                return Err(PdmError::contract(format!(
                    "concat part shape {s:?} inconsistent with {base:?} on axis {axis}"
                )));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let widths: Vec<usize> = parts.iter().map(|p| self.shape(*p)[axis] * inner).collect();
        let row: usize = widths.iter().sum();
        let mut data = vec![0.0; outer * row];
        let mut offset = 0;
        for (p, &wd) in parts.iter().zip(&widths) {
            let src = self.value(*p).data();
            for o in 0..outer {
                data[o * row + offset..o * row + offset + wd]
                    .copy_from_slice(&src[o * wd..(o + 1) * wd]);
            }
            offset += wd;
        }
        let mut shape = base;
        shape[axis] = total;
        let out = Tensor::new(shape, data)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push(
            "concat",
            out,
            &ids,
            Op::Concat {
                parts: ids.clone(),
                outer,
                widths,
            },
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        self.push("reshape", out, &[x.0], Op::Reshape { x: x.0 })
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len()
            || perm
                .iter()
                .any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(PdmError::contract(format!(
                "invalid permutation {perm:?} for {shape:?}"
            )));
        }
        let in_strides = strides(&shape);
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let eff: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let total: usize = shape.iter().product();
        let mut map = Vec::with_capacity(total);
        let mut idx = vec![0usize; shape.len()];
        let mut cur = 0;
        for _ in 0..total {
            map.push(cur);
            for d in (0..out_shape.len()).rev() {
                idx[d] += 1;
                cur += eff[d];
                if idx[d] < out_shape[d] {
                    break;
                }
                cur -= eff[d] * idx[d];
                idx[d] = 0;
            }
        }
        self.gather(x, map, out_shape, "permute")
    }

    /// The sub-range `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(PdmError::contract(format!(
                "narrow [{start},{}) out of range on axis {axis} of {shape:?}",
                start + len
            )));
        }
        let (outer, full, inner) = split_axis(&shape, axis);
        let mut map = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            for l in start..start + len {
                let base = (o * full + l) * inner;
                map.extend(base..base + inner);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.gather(x, map, out_shape, "narrow")
    }

    /// Rows of `x` (axis 0) in the order given by `indices`. Repeats allowed.
    pub fn index_select(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || indices.iter().any(|&i| i >= shape[0]) {
            return Err(PdmError::contract("index_select index out of range"));
        }
        let inner: usize = shape[1..].iter().product();
        let map = indices
            .iter()
            .flat_map(|&r| r * inner..(r + 1) * inner)
            .collect();
        let mut out_shape = shape;
        out_shape[0] = indices.len();
        self.gather(x, map, out_shape, "index_select")
    }

    // ---- distances ---------------------------------------------------

    /// Euclidean distance between every row of `a [p,d]` and every row of `b [q,d]`.
    pub fn pairwise_euclidean(&mut self, a: Var, b: Var) -> Result<Var> {
        let (p, q, d) = match (self.shape(a), self.shape(b)) {
            ([p, d], [q, d2]) if d == d2 => (*p, *q, *d),
            (sa, sb) => {
                return Err(PdmError::contract(format!(
                    "pairwise_euclidean needs [p,d] and [q,d], got {sa:?} and {sb:?}"
                )))
            }
        };
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = Vec::with_capacity(p * q);
        for i in 0..p {
            let ar = &av[i * d..(i + 1) * d];
            for j in 0..q {
                let br = &bv[j * d..(j + 1) * d];
                out.push(
                    ar.iter()
                        .zip(br)
                        .map(|(x, y)| (x - y) * (x - y))
                        .sum::<f64>()
                        .sqrt(),
                );
            }
        }
        let out = Tensor::new([p, q], out)?;
        self.push(
            "pairwise_euclidean",
            out,
            &[a.0, b.0],
            Op::PairwiseDist { a: a.0, b: b.0, d },
        )
    }

    /// Distance between matching rows: `out[i] = ||a_i - b_i||`.
    pub fn rowwise_euclidean(&mut self, a: Var, b: Var) -> Result<Var> {
        let (p, d) = match (self.shape(a), self.shape(b)) {
            ([p, d], [p2, d2]) if p == p2 && d == d2 => (*p, *d),
            (sa, sb) => {
                return Err(PdmError::contract(format!(
                    "rowwise_euclidean needs equal [p,d] shapes, got {sa:?} and {sb:?}"
                )))
            }
        };
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let out = (0..p)
            .map(|i| {
                av[i * d..(i + 1) * d]
                    .iter()
                    .zip(&bv[i * d..(i + 1) * d])
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        let out = Tensor::new([p], out)?;
        self.push(
            "rowwise_euclidean",
            out,
            &[a.0, b.0],
            Op::RowDist { a: a.0, b: b.0, d },
        )
    }

    /// L2 norm along the last axis.
    pub fn norm_last(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape
            .last()
            .ok_or_else(|| PdmError::contract("norm_last of a scalar"))?;
        let xv = self.value(x).data();
        let out = xv
            .chunks(d)
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let out = Tensor::new(&shape[..shape.len() - 1], out)?;
        self.push("norm_last", out, &[x.0], Op::NormLast { x: x.0, d })
    }

    /// Cosine similarity of two equal-length vectors.
    pub fn cosine(&mut self, u: Var, v: Var) -> Result<Var> {
        let uv = self.value(u).data();
        let vv = self.value(v).data();
        if uv.len() != vv.len() {
            return Err(PdmError::contract(
                "cosine of vectors with different lengths",
            ));
        }
        let nu = uv.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nv = vv.iter().map(|x| x * x).sum::<f64>().sqrt();
        if nu == 0.0 || nv == 0.0 {
            return Err(PdmError::Degenerate("cosine of a zero-norm vector".into()));
        }
        let dot: f64 = uv.iter().zip(vv).map(|(a, b)| a * b).sum();
        let out = Tensor::scalar((dot / (nu * nv)).clamp(-1.0, 1.0));
        self.push("cosine", out, &[u.0, v.0], Op::Cosine { u: u.0, v: v.0 })
    }

    // ---- classification ----------------------------------------------

    /// Mean softmax cross-entropy of `logits [N,C]` against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let [n, c] = self.shape(logits)[..] else {
            return Err(PdmError::contract("cross_entropy expects [N,C] logits"));
        };
        if labels.len() != n {
            return Err(PdmError::contract("one label per logit row required"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(PdmError::contract(format!(
                "label {bad} out of range for {c} classes"
            )));
        }
        let zv = self.value(logits).data();
        let mut softmax = vec![0.0; n * c];
        let mut total = 0.0;
        for i in 0..n {
            let row = &zv[i * c..(i + 1) * c];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|z| (z - mx).exp()).sum();
            let lse = mx + sum.ln();
            total += lse - row[labels[i]];
            for j in 0..c {
                softmax[i * c + j] = (row[j] - lse).exp();
            }
        }
        let out = Tensor::scalar(total / n as f64);
        self.push(
            "cross_entropy",
            out,
            &[logits.0],
            Op::CrossEntropy {
                logits: logits.0,
                labels: labels.to_vec(),
                softmax,
            },
        )
    }

    // ---- backward ----------------------------------------------------

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(PdmError::contract("loss is not recorded on this tape"));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(PdmError::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            self.backprop_node(node, &g, &mut grads);
            grads[id] = Some(g);
        }

        Ok(Gradients {
            grads,
            shapes: self
                .nodes
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
        })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let wants = |i: usize| nodes[i].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Unary { x, kind } => {
                if !wants(*x) {
                    return;
                }
                let xv = nodes[*x].value.data();
                let yv = node.value.data();
                let gx = slot(grads, nodes, *x);
                for i in 0..g.len() {
                    let d = match kind {
                        UnaryKind::Neg => -1.0,
                        UnaryKind::Relu => {
                            if xv[i] > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        UnaryKind::Sigmoid => yv[i] * (1.0 - yv[i]),
                        UnaryKind::Exp => yv[i],
                        UnaryKind::Ln => 1.0 / xv[i],
                        UnaryKind::Sqrt => 0.5 / yv[i],
                        UnaryKind::Square => 2.0 * xv[i],
                        UnaryKind::Scale(k) => *k,
                        UnaryKind::AddScalar(_) => 1.0,
                    };
                    gx[i] += g[i] * d;
                }
            }
            Op::Binary {
                a,
                b,
                kind,
                a_map,
                b_map,
            } => {
                let av = nodes[*a].value.data();
                let bv = nodes[*b].value.data();
                let ai = |i: usize| a_map.as_ref().map_or(i, |m| m[i]);
                let bi = |i: usize| b_map.as_ref().map_or(i, |m| m[i]);
                if wants(*a) {
                    let ga = slot(grads, nodes, *a);
                    for i in 0..g.len() {
                        let d = match kind {
                            BinaryKind::Add | BinaryKind::Sub => 1.0,
                            BinaryKind::Mul => bv[bi(i)],
                            BinaryKind::Div => 1.0 / bv[bi(i)],
                        };
                        ga[ai(i)] += g[i] * d;
                    }
                }
                if wants(*b) {
                    let gb = slot(grads, nodes, *b);
                    for i in 0..g.len() {
                        let d = match kind {
                            BinaryKind::Add => 1.0,
                            BinaryKind::Sub => -1.0,
                            BinaryKind::Mul => av[ai(i)],
                            BinaryKind::Div => {
                                let y = bv[bi(i)];
                                -av[ai(i)] / (y * y)
                            }
                        };
                        gb[bi(i)] += g[i] * d;
                    }
                }
            }
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
            } => {
                let (m, k, n) = (*m, *k, *n);
                let av = nodes[*a].value.data();
                let bv = nodes[*b].value.data();
                if wants(*a) {
                    let ga = slot(grads, nodes, *a);
                    for bt in 0..*batch {
                        for i in 0..m {
                            let grow = &g[bt * m * n + i * n..bt * m * n + (i + 1) * n];
                            for p in 0..k {
                                let brow = &bv[bt * k * n + p * n..bt * k * n + (p + 1) * n];
                                let s: f64 = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                                ga[bt * m * k + i * k + p] += s;
                            }
                        }
                    }
                }
                if wants(*b) {
                    let gb = slot(grads, nodes, *b);
                    for bt in 0..*batch {
                        for i in 0..m {
                            let grow = &g[bt * m * n + i * n..bt * m * n + (i + 1) * n];
                            for p in 0..k {
                                let aip = av[bt * m * k + i * k + p];
                                if aip == 0.0 {
                                    continue;
                                }
                                let dst = &mut gb[bt * k * n + p * n..bt * k * n + (p + 1) * n];
                                for (d, gv) in dst.iter_mut().zip(grow) {
                                    *d += aip * gv;
                                }
                            }
                        }
                    }
                }
            }
            Op::Conv2d {
                x,
                kernel,
                dilation,
            } => {
                let sx = nodes[*x].value.shape();
                let sk = nodes[*kernel].value.shape();
                let (batch, c_in, h, w) = match sx {
                    [c, h, w] => (1, *c, *h, *w),
                    [nb, c, h, w] => (*nb, *c, *h, *w),
                    _ => unreachable!(),
                };
                let dims = ConvDims {
                    batch,
                    c_in,
                    c_out: sk[0],
                    h,
                    w,
                    dilation: *dilation,
                };
                if wants(*x) {
                    let gx = slot(grads, nodes, *x);
                    conv_backward_input(g, nodes[*kernel].value.data(), gx, dims);
                }
                if wants(*kernel) {
                    let gk = slot(grads, nodes, *kernel);
                    conv_backward_kernel(g, nodes[*x].value.data(), gk, dims);
                }
            }
            Op::Sum {
                x,
                outer,
                len,
                inner,
                scale,
            } => {
                if !wants(*x) {
                    return;
                }
                let gx = slot(grads, nodes, *x);
                for o in 0..*outer {
                    for l in 0..*len {
                        let dst = &mut gx[(o * len + l) * inner..(o * len + l + 1) * inner];
                        for (d, s) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                            *d += s * scale;
                        }
                    }
                }
            }
            Op::Gather { x, map } => {
                if !wants(*x) {
                    return;
                }
                let gx = slot(grads, nodes, *x);
                for (gi, &src) in g.iter().zip(map) {
                    gx[src] += gi;
                }
            }
            Op::Concat {
                parts,
                outer,
                widths,
            } => {
                let row: usize = widths.iter().sum();
                let mut offset = 0;
                for (&p, &wd) in parts.iter().zip(widths) {
                    if wants(p) {
                        let gp = slot(grads, nodes, p);
                        for o in 0..*outer {
                            let src = &g[o * row + offset..o * row + offset + wd];
                            for (d, s) in gp[o * wd..(o + 1) * wd].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    offset += wd;
                }
            }
            Op::Reshape { x } => {
                if !wants(*x) {
                    return;
                }
                let gx = slot(grads, nodes, *x);
                for (d, s) in gx.iter_mut().zip(g) {
                    *d += s;
                }
            }
            Op::PairwiseDist { a, b, d } => {
                let d = *d;
                let av = nodes[*a].value.data();
                let bv = nodes[*b].value.data();
                let dist = node.value.data();
                let q = bv.len() / d;
                let p = av.len() / d;
                let mut ga = wants(*a).then(|| vec![0.0; av.len()]);
                let mut gb = wants(*b).then(|| vec![0.0; bv.len()]);
                for i in 0..p {
                    for j in 0..q {
                        let dij = dist[i * q + j];
                        if dij == 0.0 || g[i * q + j] == 0.0 {
                            continue;
                        }
                        let s = g[i * q + j] / dij;
                        for t in 0..d {
                            let diff = s * (av[i * d + t] - bv[j * d + t]);
                            if let Some(ga) = ga.as_mut() {
                                ga[i * d + t] += diff;
                            }
                            if let Some(gb) = gb.as_mut() {
                                gb[j * d + t] -= diff;
                            }
                        }
                    }
                }
                if let Some(ga) = ga {
                    add_into(slot(grads, nodes, *a), &ga);
                }
                if let Some(gb) = gb {
                    add_into(slot(grads, nodes, *b), &gb);
                }
            }
            Op::RowDist { a, b, d } => {
                let d = *d;
                let av = nodes[*a].value.data();
                let bv = nodes[*b].value.data();
                let dist = node.value.data();
                let mut delta = vec![0.0; av.len()];
                for i in 0..dist.len() {
                    if dist[i] == 0.0 {
                        continue;
                    }
                    let s = g[i] / dist[i];
                    for t in 0..d {
                        delta[i * d + t] = s * (av[i * d + t] - bv[i * d + t]);
                    }
                }
                if wants(*a) {
                    add_into(slot(grads, nodes, *a), &delta);
                }
                if wants(*b) {
                    let gb = slot(grads, nodes, *b);
                    for (dst, v) in gb.iter_mut().zip(&delta) {
                        *dst -= v;
                    }
                }
            }
            Op::NormLast { x, d } => {
                if !wants(*x) {
                    return;
                }
                let xv = nodes[*x].value.data();
                let norms = node.value.data();
                let gx = slot(grads, nodes, *x);
                for (r, &nr) in norms.iter().enumerate() {
                    if nr == 0.0 {
                        continue;
                    }
                    for t in 0..*d {
                        gx[r * d + t] += g[r] * xv[r * d + t] / nr;
                    }
                }
            }
            Op::Cosine { u, v } => {
                let uv = nodes[*u].value.data();
                let vv = nodes[*v].value.data();
                let c = node.value.data()[0];
                let nu = uv.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nv = vv.iter().map(|x| x * x).sum::<f64>().sqrt();
                if wants(*u) {
                    let gu = slot(grads, nodes, *u);
                    for t in 0..uv.len() {
                        gu[t] += g[0] * (vv[t] / (nu * nv) - c * uv[t] / (nu * nu));
                    }
                }
                if wants(*v) {
                    let gv = slot(grads, nodes, *v);
                    for t in 0..vv.len() {
                        gv[t] += g[0] * (uv[t] / (nu * nv) - c * vv[t] / (nv * nv));
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                softmax,
            } => {
                if !wants(*logits) {
                    return;
                }
                let n = labels.len();
                let c = softmax.len() / n;
                let gz = slot(grads, nodes, *logits);
                let s = g[0] / n as f64;
                for i in 0..n {
                    for j in 0..c {
                        let onehot = if labels[i] == j { 1.0 } else { 0.0 };
                        gz[i * c + j] += s * (softmax[i * c + j] - onehot);
                    }
                }
            }
        }
    }
}

fn slot<'g>(grads: &'g mut [Option<Vec<f64>>], nodes: &[Node], i: usize) -> &'g mut Vec<f64> {
    let len = nodes[i].value.len();
    grads[i].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[derive(Clone, Copy)]
struct ConvDims {
    batch: usize,
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    dilation: usize,
}

/// Valid output range `[lo, hi)` along one spatial axis for a tap offset.
fn tap_range(extent: usize, offset: isize) -> (usize, usize) {
    let lo = (-offset).max(0) as usize;
    let hi = (extent as isize - offset.max(0)).max(0) as usize;
    (lo.min(extent), hi.max(lo.min(extent)))
}

fn conv_forward(x: &[f64], k: &[f64], dims: ConvDims) -> Vec<f64> {
    let ConvDims {
        batch,
        c_in,
        c_out,
        h,
        w,
        dilation,
    } = dims;
    let hw = h * w;
    let mut out = vec![0.0; batch * c_out * hw];
    for n in 0..batch {
        for o in 0..c_out {
            let dst = &mut out[(n * c_out + o) * hw..(n * c_out + o + 1) * hw];
            for i in 0..c_in {
                let src = &x[(n * c_in + i) * hw..(n * c_in + i + 1) * hw];
                for ky in 0..3 {
                    let dy = (ky as isize - 1) * dilation as isize;
                    let (y0, y1) = tap_range(h, dy);
                    for kx in 0..3 {
                        let wgt = k[((o * c_in + i) * 3 + ky) * 3 + kx];
                        if wgt == 0.0 {
                            continue;
                        }
                        let dx = (kx as isize - 1) * dilation as isize;
                        let (x0, x1) = tap_range(w, dx);
                        if y0 >= y1 || x0 >= x1 {
                            continue;
                        }
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let drow = &mut dst[y * w + x0..y * w + x1];
                            let sx0 = (x0 as isize + dx) as usize;
                            let srow = &src[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
                            for (d, s) in drow.iter_mut().zip(srow) {
                                *d += wgt * s;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv_backward_input(g: &[f64], k: &[f64], gx: &mut [f64], dims: ConvDims) {
    let ConvDims {
        batch,
        c_in,
        c_out,
        h,
        w,
        dilation,
    } = dims;
    let hw = h * w;
    for n in 0..batch {
        for o in 0..c_out {
            let go = &g[(n * c_out + o) * hw..(n * c_out + o + 1) * hw];
            for i in 0..c_in {
                let dst = &mut gx[(n * c_in + i) * hw..(n * c_in + i + 1) * hw];
                for ky in 0..3 {
                    let dy = (ky as isize - 1) * dilation as isize;
                    let (y0, y1) = tap_range(h, dy);
                    for kx in 0..3 {
                        let wgt = k[((o * c_in + i) * 3 + ky) * 3 + kx];
                        if wgt == 0.0 {
                            continue;
                        }
                        let dx = (kx as isize - 1) * dilation as isize;
                        let (x0, x1) = tap_range(w, dx);
                        if y0 >= y1 || x0 >= x1 {
                            continue;
                        }
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let sx0 = (x0 as isize + dx) as usize;
                            let grow = &go[y * w + x0..y * w + x1];
                            let drow = &mut dst[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
                            for (d, s) in drow.iter_mut().zip(grow) {
                                *d += wgt * s;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_backward_kernel(g: &[f64], x: &[f64], gk: &mut [f64], dims: ConvDims) {
    let ConvDims {
        batch,
        c_in,
        c_out,
        h,
        w,
        dilation,
    } = dims;
    let hw = h * w;
    for n in 0..batch {
        for o in 0..c_out {
            let go = &g[(n * c_out + o) * hw..(n * c_out + o + 1) * hw];
            for i in 0..c_in {
                let src = &x[(n * c_in + i) * hw..(n * c_in + i + 1) * hw];
                for ky in 0..3 {
                    let dy = (ky as isize - 1) * dilation as isize;
                    let (y0, y1) = tap_range(h, dy);
                    for kx in 0..3 {
                        let dx = (kx as isize - 1) * dilation as isize;
                        let (x0, x1) = tap_range(w, dx);
                        if y0 >= y1 || x0 >= x1 {
                            continue;
                        }
                        let mut s = 0.0;
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let sx0 = (x0 as isize + dx) as usize;
                            let grow = &go[y * w + x0..y * w + x1];
                            let srow = &src[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
                            s += grow.iter().zip(srow).map(|(a, b)| a * b).sum::<f64>();
                        }
                        gk[((o * c_in + i) * 3 + ky) * 3 + kx] += s;
                    }
                }
            }
        }
    }
}
