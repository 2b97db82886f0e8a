//! Append-only reverse-mode tape.
//!
//! Every operation records its inputs and a vector-Jacobian rule. Node ids
//! are assigned in creation order, so the node list is always topologically
//! sorted and `backward` is a single reverse sweep.

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU32, Ordering};

use super::kernels::{self, dims2, dims3};
use super::{Precision, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    idx: u32,
}

impl Var {
    pub fn index(self) -> usize {
        self.idx as usize
    }
}

/// Vector-Jacobian rule of a custom op: `(inputs, output, output_grad) -> input grads`.
pub type VjpFn = Rc<dyn Fn(&[&Tensor], &Tensor, &Tensor) -> Vec<Tensor>>;

#[derive(Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Bmm {
        a: Var,
        b: Var,
        transpose_b: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Affine {
        x: Var,
        mul: f64,
    },
    Sum(Var),
    Mean(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    Transpose(Var),
    SwapAxes01(Var),
    Reshape(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    Concat(Vec<Var>),
    IndexRows {
        x: Var,
        rows: Vec<usize>,
    },
    Log(Var),
    Clamp {
        x: Var,
        lo: f64,
        hi: f64,
    },
    CosineRows {
        a: Var,
        b: Var,
    },
    Sample {
        map: Var,
        points: Var,
    },
    DeformGather {
        maps: Vec<Var>,
        points: Var,
        heads: usize,
        per_level: usize,
    },
    AvgPool2(Var),
    Custom {
        name: String,
        inputs: Vec<Var>,
        vjp: VjpFn,
    },
}

impl Op {
    fn name(&self) -> String {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Bmm { .. } => "bmm",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::Affine { .. } => "affine",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Softmax { .. } => "softmax",
            Op::Transpose(..) => "transpose",
            Op::SwapAxes01(..) => "swap_axes01",
            Op::Reshape(..) => "reshape",
            Op::SliceCols { .. } => "slice_cols",
            Op::Concat(..) => "concat",
            Op::IndexRows { .. } => "index_rows",
            Op::Log(..) => "log",
            Op::Clamp { .. } => "clamp",
            Op::CosineRows { .. } => "cosine_rows",
            Op::Sample { .. } => "bilinear_sample",
            Op::DeformGather { .. } => "deform_gather",
            Op::AvgPool2(..) => "avg_pool2",
            Op::Custom { name, .. } => return name.clone(),
        }
        .to_string()
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

pub struct Tape {
    id: u32,
    precision: Precision,
    nodes: RefCell<Vec<Node>>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("id", &self.id)
            .field("precision", &self.precision)
            .field("nodes", &self.len())
            .finish()
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new(Precision::default())
    }
}

impl Tape {
    pub fn new(precision: Precision) -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            precision,
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id || v.index() >= self.len() {
            return Err(Error::Autodiff(format!(
                "variable {v:?} does not belong to this tape"
            )));
        }
        Ok(())
    }

    fn push(&self, op: Op, value: Tensor, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let value = value.rounded(self.precision);
        let mut nodes = self.nodes.borrow_mut();
        let idx = nodes.len() as u32;
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var { tape: self.id, idx })
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.index()].requires_grad)
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Result<Var> {
        self.push(Op::Leaf, value, requires_grad)
    }

    pub fn constant(&self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn variable(&self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.index()].requires_grad
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.index()].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.index()].value.shape().to_vec()
    }

    /// Runs `f` against a borrowed value without cloning it.
    pub fn with_value<R>(&self, v: Var, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.nodes.borrow()[v.index()].value)
    }

    fn unary(&self, x: Var, op: Op, f: impl FnOnce(&Tensor) -> Result<Tensor>) -> Result<Var> {
        self.check(x)?;
        let value = {
            let nodes = self.nodes.borrow();
            f(&nodes[x.index()].value)?
        };
        let rg = self.any_grad(&[x]);
        self.push(op, value, rg)
    }

    fn binary(
        &self,
        a: Var,
        b: Var,
        op: Op,
        f: impl FnOnce(&Tensor, &Tensor) -> Result<Tensor>,
    ) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let value = {
            let nodes = self.nodes.borrow();
            f(&nodes[a.index()].value, &nodes[b.index()].value)?
        };
        let rg = self.any_grad(&[a, b]);
        self.push(op, value, rg)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::MatMul(a, b), kernels::matmul)
    }

    /// Batched matmul over the leading axis: `[B,m,k] x [B,k,n]`, or
    /// `[B,m,k] x [B,n,k]^T` when `transpose_b`.
    pub fn bmm(&self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        self.binary(a, b, Op::Bmm { a, b, transpose_b }, |x, y| {
            let (bs, m, k) = dims3(x, "bmm")?;
            let (bs2, r, c) = dims3(y, "bmm")?;
            let (k2, n) = if transpose_b { (c, r) } else { (r, c) };
            if bs != bs2 || k != k2 {
                return Err(Error::shape(
                    "bmm",
                    format!("{:?} x {:?}", x.shape(), y.shape()),
                ));
            }
            let mut out = vec![0.0; bs * m * n];
            for i in 0..bs {
                let xa = &x.data()[i * m * k..(i + 1) * m * k];
                let yb = &y.data()[i * k * n..(i + 1) * k * n];
                let o = &mut out[i * m * n..(i + 1) * m * n];
                if transpose_b {
                    kernels::matmul_nt_into(xa, yb, o, m, k, n);
                } else {
                    kernels::matmul_into(xa, yb, o, m, k, n);
                }
            }
            Tensor::new(vec![bs, m, n], out)
        })
    }

    fn zip_same(
        &self,
        a: Var,
        b: Var,
        op: Op,
        name: &'static str,
        f: fn(f64, f64) -> f64,
    ) -> Result<Var> {
        self.binary(a, b, op, |x, y| {
            if x.shape() != y.shape() {
                return Err(Error::shape(
                    name,
                    format!("{:?} vs {:?}", x.shape(), y.shape()),
                ));
            }
            let data = x
                .data()
                .iter()
                .zip(y.data())
                .map(|(&p, &q)| f(p, q))
                .collect();
            Tensor::new(x.shape().to_vec(), data)
        })
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, Op::Add(a, b), "add", |p, q| p + q)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, Op::Sub(a, b), "sub", |p, q| p - q)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, Op::Mul(a, b), "mul", |p, q| p * q)
    }

    fn row_broadcast(
        &self,
        x: Var,
        r: Var,
        op: Op,
        name: &'static str,
        f: fn(f64, f64) -> f64,
    ) -> Result<Var> {
        self.binary(x, r, op, |xv, rv| {
            let n = rv.len();
            if rv.rank() != 1 || xv.shape().last() != Some(&n) {
                return Err(Error::shape(
                    name,
                    format!("{:?} with row {:?}", xv.shape(), rv.shape()),
                ));
            }
            let mut data = xv.data().to_vec();
            for chunk in data.chunks_mut(n) {
                for (v, &b) in chunk.iter_mut().zip(rv.data()) {
                    *v = f(*v, b);
                }
            }
            Tensor::new(xv.shape().to_vec(), data)
        })
    }

    /// `x[..., n] + row[n]` broadcast over leading axes.
    pub fn add_row(&self, x: Var, row: Var) -> Result<Var> {
        self.row_broadcast(x, row, Op::AddRow(x, row), "add_row", |p, q| p + q)
    }

    pub fn mul_row(&self, x: Var, row: Var) -> Result<Var> {
        self.row_broadcast(x, row, Op::MulRow(x, row), "mul_row", |p, q| p * q)
    }

    /// `mul * x + add` elementwise.
    pub fn affine(&self, x: Var, mul: f64, add: f64) -> Result<Var> {
        self.unary(x, Op::Affine { x, mul }, |t| Ok(t.map(|v| mul * v + add)))
    }

    pub fn scale(&self, x: Var, mul: f64) -> Result<Var> {
        self.affine(x, mul, 0.0)
    }

    pub fn sum(&self, x: Var) -> Result<Var> {
        self.unary(x, Op::Sum(x), |t| Ok(Tensor::scalar(t.data().iter().sum())))
    }

    pub fn mean(&self, x: Var) -> Result<Var> {
        self.unary(x, Op::Mean(x), |t| {
            if t.is_empty() {
                return Err(Error::shape("mean", "empty tensor"));
            }
            Ok(Tensor::scalar(
                t.data().iter().sum::<f64>() / t.len() as f64,
            ))
        })
    }

    pub fn softmax(&self, x: Var, axis: usize) -> Result<Var> {
        self.unary(x, Op::Softmax { x, axis }, |t| kernels::softmax(t, axis))
    }

    pub fn transpose(&self, x: Var) -> Result<Var> {
        self.unary(x, Op::Transpose(x), |t| {
            let (m, n) = dims2(t, "transpose")?;
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    out[j * m + i] = t.data()[i * n + j];
                }
            }
            Tensor::new(vec![n, m], out)
        })
    }

    /// `[a, b, c] -> [b, a, c]`.
    pub fn swap_axes01(&self, x: Var) -> Result<Var> {
        self.unary(x, Op::SwapAxes01(x), |t| {
            let (a, b, c) = dims3(t, "swap_axes01")?;
            Ok(swap01(t.data(), a, b, c))
        })
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        self.unary(x, Op::Reshape(x), |t| t.reshape(shape))
    }

    pub fn slice_cols(&self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.unary(x, Op::SliceCols { x, start }, |t| {
            let (m, n) = dims2(t, "slice_cols")?;
            if start + len > n {
                return Err(Error::shape("slice_cols", format!("{start}+{len} > {n}")));
            }
            let mut out = Vec::with_capacity(m * len);
            for i in 0..m {
                out.extend_from_slice(&t.data()[i * n + start..i * n + start + len]);
            }
            Tensor::new(vec![m, len], out)
        })
    }

    /// Concatenates along axis 0. Rank-0 inputs are stacked into a vector.
    pub fn concat(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "no inputs"));
        }
        for &p in parts {
            self.check(p)?;
        }
        let value = {
            let nodes = self.nodes.borrow();
            let first = nodes[parts[0].index()].value.shape().to_vec();
            let tail: Vec<usize> = first.iter().skip(1).copied().collect();
            let mut rows = 0;
            let mut data = Vec::new();
            for p in parts {
                let v = &nodes[p.index()].value;
                let s = v.shape();
                if first.is_empty() {
                    if !s.is_empty() {
                        return Err(Error::shape("concat", "mixed scalar and tensor inputs"));
                    }
                    rows += 1;
                } else {
                    if s.len() != first.len() || s[1..] != tail[..] {
                        return Err(Error::shape("concat", format!("{s:?} vs {first:?}")));
                    }
                    rows += s[0];
                }
                data.extend_from_slice(v.data());
            }
            let mut shape = vec![rows];
            shape.extend(tail);
            Tensor::new(shape, data)?
        };
        let rg = self.any_grad(parts);
        self.push(Op::Concat(parts.to_vec()), value, rg)
    }

    /// Gathers rows along axis 0.
    pub fn index_rows(&self, x: Var, rows: &[usize]) -> Result<Var> {
        let rows = rows.to_vec();
        let picked = rows.clone();
        self.unary(x, Op::IndexRows { x, rows }, move |t| {
            if t.rank() == 0 {
                return Err(Error::shape("index_rows", "scalar input"));
            }
            let n = t.shape()[0];
            let width = t.len() / n.max(1);
            let mut data = Vec::with_capacity(picked.len() * width);
            for &r in &picked {
                if r >= n {
                    return Err(Error::shape("index_rows", format!("row {r} out of {n}")));
                }
                data.extend_from_slice(&t.data()[r * width..(r + 1) * width]);
            }
            let mut shape = t.shape().to_vec();
            shape[0] = picked.len();
            Tensor::new(shape, data)
        })
    }

    pub fn log(&self, x: Var) -> Result<Var> {
        self.unary(x, Op::Log(x), |t| Ok(t.map(f64::ln)))
    }

    pub fn clamp(&self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary(x, Op::Clamp { x, lo, hi }, |t| {
            Ok(t.map(|v| v.clamp(lo, hi)))
        })
    }

    /// Row-wise cosine similarity of `a[N, d]` against `b[d]`, giving `[N]`.
    pub fn cosine_rows(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::CosineRows { a, b }, |x, y| {
            let (n, d) = dims2(x, "cosine_rows")?;
            if y.shape() != [d] {
                return Err(Error::shape(
                    "cosine_rows",
                    format!("{:?} vs {:?}", x.shape(), y.shape()),
                ));
            }
            let out = (0..n)
                .map(|i| kernels::cosine_similarity(x.row(i), y.data()))
                .collect();
            Ok(Tensor::vector(out))
        })
    }

    /// Cosine similarity of two `[d]` vectors as a scalar.
    pub fn cosine(&self, u: Var, v: Var) -> Result<Var> {
        let d = self.shape(u).iter().product::<usize>();
        let u2 = self.reshape(u, &[1, d])?;
        let s = self.cosine_rows(u2, v)?;
        self.reshape(s, &[])
    }

    /// Bilinear samples of a `[H, W, C]` map at `points[P, 2]` (normalized x, y),
    /// giving `[P, C]`. Differentiable in both the map and the points.
    pub fn bilinear_sample(&self, map: Var, points: Var) -> Result<Var> {
        self.binary(map, points, Op::Sample { map, points }, |m, p| {
            let (h, w, c) = dims3(m, "bilinear_sample")?;
            let (np, two) = dims2(p, "bilinear_sample")?;
            if two != 2 || h == 0 || w == 0 {
                return Err(Error::shape(
                    "bilinear_sample",
                    format!("map {:?} points {:?}", m.shape(), p.shape()),
                ));
            }
            let mut out = vec![0.0; np * c];
            for i in 0..np {
                let st = kernels::stencil(p.data()[2 * i], p.data()[2 * i + 1], h, w);
                let o = &mut out[i * c..(i + 1) * c];
                for k in 0..4 {
                    let cell = &m.data()[st.cells[k] * c..(st.cells[k] + 1) * c];
                    for (a, b) in o.iter_mut().zip(cell) {
                        *a += st.weights[k] * b;
                    }
                }
            }
            Tensor::new(vec![np, c], out)
        })
    }

    /// Multi-level, multi-head sampling used by deformable attention.
    ///
    /// `points` has `batch * heads * levels * per_level` rows ordered
    /// (batch, head, level, point). Head `h` reads channels `h*dh..(h+1)*dh`
    /// of each level map. Output is `[batch * heads, levels * per_level, dh]`.
    pub fn deform_gather(
        &self,
        maps: &[Var],
        points: Var,
        heads: usize,
        per_level: usize,
    ) -> Result<Var> {
        for &m in maps {
            self.check(m)?;
        }
        self.check(points)?;
        let levels = maps.len();
        let value = {
            let nodes = self.nodes.borrow();
            let p = &nodes[points.index()].value;
            let (np, two) = dims2(p, "deform_gather")?;
            let group = levels * per_level;
            if two != 2 || heads == 0 || group == 0 || np % (heads * group) != 0 {
                return Err(Error::shape(
                    "deform_gather",
                    format!("points {:?}", p.shape()),
                ));
            }
            let mut c = None;
            for &m in maps {
                let (_, _, mc) = dims3(&nodes[m.index()].value, "deform_gather")?;
                if *c.get_or_insert(mc) != mc || mc % heads != 0 {
                    return Err(Error::shape(
                        "deform_gather",
                        "channel mismatch across levels",
                    ));
                }
            }
            let c = c.unwrap_or(0);
            let dh = c / heads;
            let groups = np / group;
            let mut out = vec![0.0; np * dh];
            for gi in 0..groups {
                let h = gi % heads;
                for (l, &m) in maps.iter().enumerate() {
                    let mv = &nodes[m.index()].value;
                    let (mh, mw, _) = dims3(mv, "deform_gather")?;
                    for k in 0..per_level {
                        let r = (gi * levels + l) * per_level + k;
                        let st = kernels::stencil(p.data()[2 * r], p.data()[2 * r + 1], mh, mw);
                        let o = &mut out[r * dh..(r + 1) * dh];
                        for q in 0..4 {
                            let base = st.cells[q] * c + h * dh;
                            for (a, b) in o.iter_mut().zip(&mv.data()[base..base + dh]) {
                                *a += st.weights[q] * b;
                            }
                        }
                    }
                }
            }
            Tensor::new(vec![groups, group, dh], out)?
        };
        let mut all = maps.to_vec();
        all.push(points);
        let rg = self.any_grad(&all);
        self.push(
            Op::DeformGather {
                maps: maps.to_vec(),
                points,
                heads,
                per_level,
            },
            value,
            rg,
        )
    }

    pub fn avg_pool2(&self, x: Var) -> Result<Var> {
        self.unary(x, Op::AvgPool2(x), kernels::avg_pool2)
    }

    /// Records an op with a caller-supplied forward value and VJP rule.
    pub fn custom(&self, name: &str, inputs: &[Var], value: Tensor, vjp: VjpFn) -> Result<Var> {
        for &v in inputs {
            self.check(v)?;
        }
        let rg = self.any_grad(inputs);
        self.push(
            Op::Custom {
                name: name.to_string(),
                inputs: inputs.to_vec(),
                vjp,
            },
            value,
            rg,
        )
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.check(loss)?;
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.index()];
        if root.value.len() != 1 {
            return Err(Error::Autodiff(format!(
                "loss must be scalar, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.index()] = Some(Tensor::full(root.value.shape(), 1.0));

        for i in (0..=loss.index()).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backprop_node(&nodes, node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }
}

fn swap01(src: &[f64], a: usize, b: usize, c: usize) -> Tensor {
    let mut out = vec![0.0; a * b * c];
    for i in 0..a {
        for j in 0..b {
            let s = (i * b + j) * c;
            let d = (j * a + i) * c;
            out[d..d + c].copy_from_slice(&src[s..s + c]);
        }
    }
    Tensor {
        shape: vec![b, a, c],
        data: out,
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    if !nodes[v.index()].requires_grad {
        return;
    }
    match &mut grads[v.index()] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn backprop_node(
    nodes: &[Node],
    node: &Node,
    g: &Tensor,
    grads: &mut [Option<Tensor>],
) -> Result<()> {
    let val = |v: &Var| &nodes[v.index()].value;
    let needs = |v: &Var| nodes[v.index()].requires_grad;
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = dims2(val(a), "matmul")?;
            let n = val(b).shape()[1];
            if needs(a) {
                let mut da = vec![0.0; m * k];
                kernels::matmul_nt_into(g.data(), val(b).data(), &mut da, m, n, k);
                accumulate(nodes, grads, *a, Tensor::new(vec![m, k], da)?);
            }
            if needs(b) {
                let mut db = vec![0.0; k * n];
                kernels::matmul_tn_into(val(a).data(), g.data(), &mut db, m, k, n);
                accumulate(nodes, grads, *b, Tensor::new(vec![k, n], db)?);
            }
        }
        Op::Bmm { a, b, transpose_b } => {
            let (bs, m, k) = dims3(val(a), "bmm")?;
            let n = out.shape()[2];
            let (av, bv) = (val(a).data(), val(b).data());
            if needs(a) {
                let mut da = vec![0.0; bs * m * k];
                for i in 0..bs {
                    let gi = &g.data()[i * m * n..(i + 1) * m * n];
                    let bi = &bv[i * k * n..(i + 1) * k * n];
                    let o = &mut da[i * m * k..(i + 1) * m * k];
                    if *transpose_b {
                        kernels::matmul_into(gi, bi, o, m, n, k);
                    } else {
                        kernels::matmul_nt_into(gi, bi, o, m, n, k);
                    }
                }
                accumulate(nodes, grads, *a, Tensor::new(vec![bs, m, k], da)?);
            }
            if needs(b) {
                let mut db = vec![0.0; bs * k * n];
                for i in 0..bs {
                    let gi = &g.data()[i * m * n..(i + 1) * m * n];
                    let ai = &av[i * m * k..(i + 1) * m * k];
                    let o = &mut db[i * k * n..(i + 1) * k * n];
                    if *transpose_b {
                        kernels::matmul_tn_into(gi, ai, o, m, n, k);
                    } else {
                        kernels::matmul_tn_into(ai, gi, o, m, k, n);
                    }
                }
                accumulate(nodes, grads, *b, Tensor::new(val(b).shape().to_vec(), db)?);
            }
        }
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, g.clone());
            accumulate(nodes, grads, *b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, g.clone());
            accumulate(nodes, grads, *b, g.map(|v| -v));
        }
        Op::Mul(a, b) => {
            if needs(a) {
                let d = g
                    .data()
                    .iter()
                    .zip(val(b).data())
                    .map(|(p, q)| p * q)
                    .collect();
                accumulate(nodes, grads, *a, Tensor::new(g.shape().to_vec(), d)?);
            }
            if needs(b) {
                let d = g
                    .data()
                    .iter()
                    .zip(val(a).data())
                    .map(|(p, q)| p * q)
                    .collect();
                accumulate(nodes, grads, *b, Tensor::new(g.shape().to_vec(), d)?);
            }
        }
        Op::AddRow(x, r) => {
            accumulate(nodes, grads, *x, g.clone());
            if needs(r) {
                let n = val(r).len();
                let mut dr = vec![0.0; n];
                for chunk in g.data().chunks(n) {
                    for (a, b) in dr.iter_mut().zip(chunk) {
                        *a += b;
                    }
                }
                accumulate(nodes, grads, *r, Tensor::vector(dr));
            }
        }
        Op::MulRow(x, r) => {
            let n = val(r).len();
            let rv = val(r).data();
            if needs(x) {
                let mut dx = g.data().to_vec();
                for chunk in dx.chunks_mut(n) {
                    for (a, b) in chunk.iter_mut().zip(rv) {
                        *a *= b;
                    }
                }
                accumulate(nodes, grads, *x, Tensor::new(g.shape().to_vec(), dx)?);
            }
            if needs(r) {
                let mut dr = vec![0.0; n];
                for (gc, xc) in g.data().chunks(n).zip(val(x).data().chunks(n)) {
                    for i in 0..n {
                        dr[i] += gc[i] * xc[i];
                    }
                }
                accumulate(nodes, grads, *r, Tensor::vector(dr));
            }
        }
        Op::Affine { x, mul } => accumulate(nodes, grads, *x, g.map(|v| v * mul)),
        Op::Sum(x) => {
            let gv = g.item();
            accumulate(nodes, grads, *x, Tensor::full(val(x).shape(), gv));
        }
        Op::Mean(x) => {
            let gv = g.item() / val(x).len() as f64;
            accumulate(nodes, grads, *x, Tensor::full(val(x).shape(), gv));
        }
        Op::Softmax { x, axis } => {
            let (outer, len, inner) = kernels::axis_split(out.shape(), *axis);
            let y = out.data();
            let mut dx = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| o * len * inner + j * inner + i;
                    let dot: f64 = (0..len).map(|j| g.data()[at(j)] * y[at(j)]).sum();
                    for j in 0..len {
                        dx[at(j)] = y[at(j)] * (g.data()[at(j)] - dot);
                    }
                }
            }
            accumulate(nodes, grads, *x, Tensor::new(out.shape().to_vec(), dx)?);
        }
        Op::Transpose(x) => {
            let (n, m) = dims2(g, "transpose")?;
            let mut dx = vec![0.0; m * n];
            for i in 0..n {
                for j in 0..m {
                    dx[j * n + i] = g.data()[i * m + j];
                }
            }
            accumulate(nodes, grads, *x, Tensor::new(vec![m, n], dx)?);
        }
        Op::SwapAxes01(x) => {
            let (b, a, c) = dims3(g, "swap_axes01")?;
            accumulate(nodes, grads, *x, swap01(g.data(), b, a, c));
        }
        Op::Reshape(x) => accumulate(nodes, grads, *x, g.reshape(val(x).shape())?),
        Op::SliceCols { x, start } => {
            let (m, n) = dims2(val(x), "slice_cols")?;
            let len = g.shape()[1];
            let mut dx = vec![0.0; m * n];
            for i in 0..m {
                dx[i * n + start..i * n + start + len]
                    .copy_from_slice(&g.data()[i * len..(i + 1) * len]);
            }
            accumulate(nodes, grads, *x, Tensor::new(vec![m, n], dx)?);
        }
        Op::Concat(parts) => {
            let mut offset = 0;
            for p in parts {
                let pv = val(p);
                let n = pv.len();
                if needs(p) {
                    let d = g.data()[offset..offset + n].to_vec();
                    accumulate(nodes, grads, *p, Tensor::new(pv.shape().to_vec(), d)?);
                }
                offset += n;
            }
        }
        Op::IndexRows { x, rows } => {
            let xv = val(x);
            let n = xv.shape()[0];
            let width = xv.len() / n.max(1);
            let mut dx = vec![0.0; xv.len()];
            for (i, &r) in rows.iter().enumerate() {
                for (a, b) in dx[r * width..(r + 1) * width]
                    .iter_mut()
                    .zip(&g.data()[i * width..(i + 1) * width])
                {
                    *a += b;
                }
            }
            accumulate(nodes, grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
        }
        Op::Log(x) => {
            let d = g
                .data()
                .iter()
                .zip(val(x).data())
                .map(|(p, q)| p / q)
                .collect();
            accumulate(nodes, grads, *x, Tensor::new(g.shape().to_vec(), d)?);
        }
        Op::Clamp { x, lo, hi } => {
            let d = g
                .data()
                .iter()
                .zip(val(x).data())
                .map(|(p, q)| if (*lo..=*hi).contains(q) { *p } else { 0.0 })
                .collect();
            accumulate(nodes, grads, *x, Tensor::new(g.shape().to_vec(), d)?);
        }
        Op::CosineRows { a, b } => {
            let (n, d) = dims2(val(a), "cosine_rows")?;
            let bv = val(b).data();
            let mut da = vec![0.0; n * d];
            let mut db = vec![0.0; d];
            for i in 0..n {
                let gi = g.data()[i];
                if gi == 0.0 {
                    continue;
                }
                let ai = val(a).row(i);
                let (dot, na, nb) = kernels::cosine_parts(ai, bv);
                let den = na * nb + kernels::COSINE_EPS;
                let ca = if na > 0.0 {
                    dot * nb / (na * den * den)
                } else {
                    0.0
                };
                let cb = if nb > 0.0 {
                    dot * na / (nb * den * den)
                } else {
                    0.0
                };
                for j in 0..d {
                    da[i * d + j] += gi * (bv[j] / den - ca * ai[j]);
                    db[j] += gi * (ai[j] / den - cb * bv[j]);
                }
            }
            if needs(a) {
                accumulate(nodes, grads, *a, Tensor::new(vec![n, d], da)?);
            }
            if needs(b) {
                accumulate(nodes, grads, *b, Tensor::vector(db));
            }
        }
        Op::Sample { map, points } => {
            let mv = val(map);
            let pv = val(points);
            let (h, w, c) = dims3(mv, "bilinear_sample")?;
            let np = pv.shape()[0];
            let mut dm = vec![0.0; mv.len()];
            let mut dp = vec![0.0; np * 2];
            for i in 0..np {
                let st = kernels::stencil(pv.data()[2 * i], pv.data()[2 * i + 1], h, w);
                let gi = &g.data()[i * c..(i + 1) * c];
                for k in 0..4 {
                    let base = st.cells[k] * c;
                    let cell = &mv.data()[base..base + c];
                    let mut proj = 0.0;
                    for ch in 0..c {
                        dm[base + ch] += st.weights[k] * gi[ch];
                        proj += gi[ch] * cell[ch];
                    }
                    dp[2 * i] += st.dx[k] * proj;
                    dp[2 * i + 1] += st.dy[k] * proj;
                }
            }
            if needs(map) {
                accumulate(nodes, grads, *map, Tensor::new(mv.shape().to_vec(), dm)?);
            }
            if needs(points) {
                accumulate(nodes, grads, *points, Tensor::new(vec![np, 2], dp)?);
            }
        }
        Op::DeformGather {
            maps,
            points,
            heads,
            per_level,
        } => {
            let pv = val(points);
            let levels = maps.len();
            let dh = g.shape()[2];
            let c = dh * heads;
            let mut dms: Vec<Vec<f64>> = maps.iter().map(|m| vec![0.0; val(m).len()]).collect();
            let mut dp = vec![0.0; pv.len()];
            for gi in 0..g.shape()[0] {
                let h = gi % heads;
                for (l, m) in maps.iter().enumerate() {
                    let mv = val(m);
                    let (mh, mw, _) = dims3(mv, "deform_gather")?;
                    for k in 0..*per_level {
                        let r = (gi * levels + l) * per_level + k;
                        let st = kernels::stencil(pv.data()[2 * r], pv.data()[2 * r + 1], mh, mw);
                        let gr = &g.data()[r * dh..(r + 1) * dh];
                        for q in 0..4 {
                            let base = st.cells[q] * c + h * dh;
                            let mut proj = 0.0;
                            for ch in 0..dh {
                                dms[l][base + ch] += st.weights[q] * gr[ch];
                                proj += gr[ch] * mv.data()[base + ch];
                            }
                            dp[2 * r] += st.dx[q] * proj;
                            dp[2 * r + 1] += st.dy[q] * proj;
                        }
                    }
                }
            }
            for (m, dm) in maps.iter().zip(dms) {
                if needs(m) {
                    accumulate(nodes, grads, *m, Tensor::new(val(m).shape().to_vec(), dm)?);
                }
            }
            if needs(points) {
                accumulate(nodes, grads, *points, Tensor::new(pv.shape().to_vec(), dp)?);
            }
        }
        Op::AvgPool2(x) => {
            let xv = val(x);
            let (h, w, c) = dims3(xv, "avg_pool2")?;
            let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
            let mut dx = vec![0.0; xv.len()];
            for i in 0..oh {
                for j in 0..ow {
                    let cells = kernels::pool_window(i, j, h, w);
                    let inv = 1.0 / cells.len() as f64;
                    let go = &g.data()[(i * ow + j) * c..(i * ow + j + 1) * c];
                    for cell in cells {
                        for (a, b) in dx[cell * c..(cell + 1) * c].iter_mut().zip(go) {
                            *a += b * inv;
                        }
                    }
                }
            }
            accumulate(nodes, grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
        }
        Op::Custom { name, inputs, vjp } => {
            let ins: Vec<&Tensor> = inputs.iter().map(val).collect();
            let dins = vjp(&ins, out, g);
            if dins.len() != inputs.len() {
                return Err(Error::Autodiff(format!(
                    "custom op `{name}` returned wrong gradient count"
                )));
            }
            for (v, d) in inputs.iter().zip(dins) {
                accumulate(nodes, grads, *v, d);
            }
        }
    }
    Ok(())
}

/// Result of a backward sweep: one optional gradient per tape node.
#[derive(Debug)]
pub struct Gradients {
    tape: u32,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`; `None` if `v` did not influence it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index()).and_then(Option::as_ref)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let t = Tape::new(Precision::F64);
        let w = t.variable(Tensor::vector(vec![0.3, -1.0, 2.0])).unwrap();
        let s = t.sum(w).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn cosine_of_self_has_zero_gradient() {
        let t = Tape::new(Precision::F64);
        let w = t.variable(Tensor::vector(vec![0.3, -1.0, 2.0])).unwrap();
        let c = t.cosine(w, w).unwrap();
        // The denominator guard leaves an O(eps) residue.
        assert!((t.value(c).item() - 1.0).abs() < 1e-8);
        let g = t.backward(c).unwrap();
        assert!(g.get(w).unwrap().max_abs() < 1e-8);
    }

    #[test]
    fn backward_rejects_non_scalar_and_foreign_vars() {
        let t = Tape::new(Precision::F64);
        let w = t.variable(Tensor::vector(vec![1.0, 2.0])).unwrap();
        assert!(matches!(t.backward(w), Err(Error::Autodiff(_))));
        let other = Tape::new(Precision::F64);
        let s = other.variable(Tensor::scalar(1.0)).unwrap();
        assert!(matches!(t.backward(s), Err(Error::Autodiff(_))));
    }

    #[test]
    fn non_finite_results_are_errors() {
        let t = Tape::new(Precision::F64);
        let x = t.variable(Tensor::vector(vec![0.0])).unwrap();
        assert!(matches!(t.log(x), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn f32_mode_rounds_values() {
        let t = Tape::new(Precision::F32);
        let x = t.constant(Tensor::scalar(0.1)).unwrap();
        assert_eq!(t.value(x).item(), 0.1f32 as f64);
    }
}
