//! Tape-based reverse-mode differentiation over a fixed set of primitives.
//!
//! Every primitive is recorded on a [`Tape`] as it executes, together with
//! whatever forward activations its backward rule needs. [`Tape::backward`]
//! then walks the tape once in reverse. Nodes are appended in execution
//! order, so inputs always precede their consumers.
//!
//! The tape also keeps a multiply-accumulate counter and a wall-clock
//! accumulator keyed by [`Component`], which the benchmark harness reads.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::tensor::{gemm, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Cost-accounting bucket for MACs and time spent inside primitives.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Component {
    Projection,
    ModalitySpecific,
    ModalityShared,
    DepthwiseConv,
    PointwiseConv,
    Baseline,
    Head,
    Other,
}

impl Component {
    pub const ALL: [Component; 8] = [
        Component::Projection,
        Component::ModalitySpecific,
        Component::ModalityShared,
        Component::DepthwiseConv,
        Component::PointwiseConv,
        Component::Baseline,
        Component::Head,
        Component::Other,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Component::Projection => "projections",
            Component::ModalitySpecific => "modality_specific",
            Component::ModalityShared => "modality_shared",
            Component::DepthwiseConv => "dwc",
            Component::PointwiseConv => "pwc",
            Component::Baseline => "baseline",
            Component::Head => "head",
            Component::Other => "other",
        }
    }

    fn slot(self) -> usize {
        self as usize
    }
}

/// Per-component multiply-accumulate and wall-clock totals.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CostCounter {
    macs: [u64; 8],
    nanos: [u64; 8],
}

impl CostCounter {
    pub fn macs(&self, c: Component) -> u64 {
        self.macs[c.slot()]
    }

    pub fn nanos(&self, c: Component) -> u64 {
        self.nanos[c.slot()]
    }

    pub fn total_macs(&self) -> u64 {
        self.macs.iter().sum()
    }
}

/// Whether a normalization node uses statistics of its own input or
/// externally supplied running statistics.
#[derive(Clone, Debug)]
enum NormStats {
    Batch,
    Fixed,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Square(Var),
    Sigmoid(Var),
    Swish(Var),
    Transpose(Var),
    ConcatRows(Vec<Var>),
    SliceRows {
        a: Var,
        start: usize,
    },
    GatherRows {
        a: Var,
        index: Vec<usize>,
    },
    SumAxis {
        a: Var,
        axis: usize,
    },
    SumAll(Var),
    BroadcastRows(Var),
    SoftmaxRows(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor,
    },
    DepthwiseConv {
        x: Var,
        w: Var,
    },
    NormRows {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
        stats: NormStats,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Statistics of a training-mode normalization: per-row mean and biased variance.
#[derive(Clone, Debug, PartialEq)]
pub struct RowStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub const NORM_EPS: f64 = 1e-5;

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    component: Option<Component>,
    cost: CostCounter,
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn cost(&self) -> &CostCounter {
        &self.cost
    }

    /// Sets the bucket that subsequent primitives charge their cost to and
    /// returns the previous one.
    pub fn set_component(&mut self, c: Component) -> Option<Component> {
        self.component.replace(c)
    }

    pub fn restore_component(&mut self, prev: Option<Component>) {
        self.component = prev;
    }

    fn charge(&mut self, macs: u64, started: Instant) {
        let slot = self.component.unwrap_or(Component::Other).slot();
        self.cost.macs[slot] += macs;
        self.cost.nanos[slot] += started.elapsed().as_nanos() as u64;
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        let needs_grad = match &op {
            Op::Leaf => value.requires_grad,
            op => inputs(op).iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a leaf. It receives a gradient iff `t.requires_grad`.
    pub fn leaf(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf, "leaf")
    }

    pub fn param(&mut self, t: Tensor) -> Result<Var> {
        self.leaf(t.with_grad())
    }

    pub fn constant(&mut self, mut t: Tensor) -> Result<Var> {
        t.requires_grad = false;
        self.leaf(t)
    }

    // ---- products -------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false, false)
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false, true)
    }

    /// `aᵀ · b` without materializing the transpose.
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, true, false)
    }

    fn matmul_ex(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let started = Instant::now();
        let (ar, ac) = self.value(a).matrix_dims()?;
        let (br, bc) = self.value(b).matrix_dims()?;
        let (m, p) = if ta { (ac, ar) } else { (ar, ac) };
        let (p2, n) = if tb { (bc, br) } else { (br, bc) };
        if p != p2 {
            return dim_err(format!("matmul inner extents {p} vs {p2}"));
        }
        let mut out = Tensor::zeros(&[m, n]);
        gemm(
            m,
            p,
            n,
            self.value(a).data(),
            ta,
            self.value(b).data(),
            tb,
            out.data_mut(),
            0.0,
        );
        self.charge((m * p * n) as u64, started);
        self.push(out, Op::MatMul { a, b, ta, tb }, "matmul")
    }

    // ---- elementwise ----------------------------------------------------

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        op: Op,
        name: &'static str,
        f: fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let started = Instant::now();
        let out = self.value(a).zip_map(self.value(b), f)?;
        self.charge(0, started);
        self.push(out, op, name)
    }

    fn unary(&mut self, a: Var, op: Op, name: &'static str, f: impl Fn(f64) -> f64) -> Result<Var> {
        let started = Instant::now();
        let out = self.value(a).map(f);
        self.charge(0, started);
        self.push(out, op, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.unary(a, Op::Scale(a, s), "scale", move |x| s * x)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Relu(a), "relu", |x| x.max(0.0))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Square(a), "square", |x| x * x)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Sigmoid(a), "sigmoid", sigmoid)
    }

    pub fn swish(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Swish(a), "swish", |x| x * sigmoid(x))
    }

    // ---- structural -----------------------------------------------------

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let started = Instant::now();
        let out = self.value(a).transpose()?;
        self.charge(0, started);
        self.push(out, Op::Transpose(a), "transpose")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return dim_err("concat of zero tensors");
        };
        let cols = self.value(first).matrix_dims()?.1;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.value(p).matrix_dims()?;
            if c != cols {
                return dim_err(format!("concat_rows column mismatch {c} vs {cols}"));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::new(&[rows, cols], data)?;
        self.push(out, Op::ConcatRows(parts.to_vec()), "concat_rows")
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let out = self.value(a).slice_rows(start, end)?;
        self.push(out, Op::SliceRows { a, start }, "slice_rows")
    }

    /// Copies the listed rows (repeats allowed). Backward scatter-adds.
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let src = self.value(a);
        let (m, n) = src.matrix_dims()?;
        let mut data = Vec::with_capacity(index.len() * n);
        for &i in index {
            if i >= m {
                return Err(Error::Index(format!("row {i} of {m}")));
            }
            data.extend_from_slice(src.row(i));
        }
        let out = Tensor::new(&[index.len(), n], data)?;
        self.push(
            out,
            Op::GatherRows {
                a,
                index: index.to_vec(),
            },
            "gather_rows",
        )
    }

    /// Sums a matrix along `axis`, keeping it as an extent of 1.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let src = self.value(a);
        let (m, n) = src.matrix_dims()?;
        let out = match axis {
            0 => {
                let mut s = vec![0.0; n];
                for i in 0..m {
                    for (acc, x) in s.iter_mut().zip(src.row(i)) {
                        *acc += x;
                    }
                }
                Tensor::new(&[1, n], s)?
            }
            1 => Tensor::new(&[m, 1], (0..m).map(|i| src.row(i).iter().sum()).collect())?,
            _ => return dim_err(format!("axis {axis} of a matrix")),
        };
        self.push(out, Op::SumAxis { a, axis }, "sum_axis")
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::SumAll(a), "sum_all")
    }

    /// Repeats a `[d]` or `[1, d]` row `n` times.
    pub fn broadcast_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        let src = self.value(a);
        if src.rank() == 0 || src.rows() != 1 {
            return dim_err(format!(
                "broadcast_rows expects one row, got {:?}",
                src.shape()
            ));
        }
        let d = src.cols();
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            data.extend_from_slice(src.data());
        }
        let out = Tensor::new(&[n, d], data)?;
        self.push(out, Op::BroadcastRows(a), "broadcast_rows")
    }

    // ---- composite primitives with hand-written backward ----------------

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let started = Instant::now();
        let src = self.value(a);
        let (m, n) = src.matrix_dims()?;
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            softmax_into(src.row(i), &mut out.data_mut()[i * n..(i + 1) * n]);
        }
        self.charge(0, started);
        self.push(out, Op::SoftmaxRows(a), "softmax_rows")
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let src = self.value(logits);
        let (m, n) = src.matrix_dims()?;
        if labels.len() != m || m == 0 {
            return dim_err(format!("{} labels for {m} rows", labels.len()));
        }
        let mut probs = Tensor::zeros(&[m, n]);
        let mut loss = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            if y >= n {
                return Err(Error::Index(format!("label {y} of {n} classes")));
            }
            let row = &mut probs.data_mut()[i * n..(i + 1) * n];
            softmax_into(src.row(i), row);
            loss -= row[y].max(f64::MIN_POSITIVE).ln();
        }
        let out = Tensor::scalar(loss / m as f64);
        self.push(
            out,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            "cross_entropy",
        )
    }

    /// Per-row 1-D cross-correlation with same padding: `x` is channels×time,
    /// `w` is channels×taps. Channels never mix.
    pub fn depthwise_conv(&mut self, x: Var, w: Var) -> Result<Var> {
        let started = Instant::now();
        let (c, t) = self.value(x).matrix_dims()?;
        let (wc, taps) = self.value(w).matrix_dims()?;
        if wc != c || taps == 0 {
            return dim_err(format!("depthwise kernel {wc}x{taps} for {c} channels"));
        }
        let pad = (taps - 1) / 2;
        let xs = self.value(x).data();
        let ws = self.value(w).data();
        let mut out = Tensor::zeros(&[c, t]);
        let od = out.data_mut();
        for ch in 0..c {
            for j in 0..taps {
                let wv = ws[ch * taps + j];
                for ti in 0..t {
                    let src = ti as isize + j as isize - pad as isize;
                    if src >= 0 && (src as usize) < t {
                        od[ch * t + ti] += wv * xs[ch * t + src as usize];
                    }
                }
            }
        }
        self.charge((c * t * taps) as u64, started);
        self.push(out, Op::DepthwiseConv { x, w }, "depthwise_conv")
    }

    /// Normalizes every row of `x` over its columns, then applies the per-row
    /// affine `gamma`, `beta` (both `[rows]`). With `fixed = None` the row's
    /// own mean and biased variance are used and returned; otherwise the given
    /// statistics are treated as constants.
    pub fn norm_rows(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        fixed: Option<&RowStats>,
    ) -> Result<(Var, RowStats)> {
        let started = Instant::now();
        let (r, n) = self.value(x).matrix_dims()?;
        if self.value(gamma).len() != r || self.value(beta).len() != r {
            return dim_err(format!("norm affine length must be {r}"));
        }
        let stats = match fixed {
            Some(s) => {
                if s.mean.len() != r || s.var.len() != r {
                    return dim_err("running statistics length");
                }
                s.clone()
            }
            None => {
                let src = self.value(x);
                let mean: Vec<f64> = (0..r)
                    .map(|i| src.row(i).iter().sum::<f64>() / n as f64)
                    .collect();
                let var = (0..r)
                    .map(|i| {
                        src.row(i)
                            .iter()
                            .map(|v| (v - mean[i]).powi(2))
                            .sum::<f64>()
                            / n as f64
                    })
                    .collect();
                RowStats { mean, var }
            }
        };
        let inv_std: Vec<f64> = stats
            .var
            .iter()
            .map(|v| 1.0 / (v + NORM_EPS).sqrt())
            .collect();
        let src = self.value(x);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = Tensor::zeros(&[r, n]);
        let mut out = Tensor::zeros(&[r, n]);
        for i in 0..r {
            for j in 0..n {
                let h = (src.get(i, j) - stats.mean[i]) * inv_std[i];
                xhat.set(i, j, h);
                out.set(i, j, g[i] * h + b[i]);
            }
        }
        self.charge(0, started);
        let kind = if fixed.is_some() {
            NormStats::Fixed
        } else {
            NormStats::Batch
        };
        let v = self.push(
            out,
            Op::NormRows {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                stats: kind,
            },
            "norm_rows",
        )?;
        Ok((v, stats))
    }

    // ---- backward -------------------------------------------------------

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return dim_err("backward needs a scalar loss");
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        let mut seed = self.value(loss).clone();
        seed.data_mut()[0] = 1.0;
        grads[loss.0] = Some(seed);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn grad_slot<'a>(&self, grads: &'a mut [Option<Tensor>], v: Var) -> Option<&'a mut Tensor> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let shape = self.value(v).shape().to_vec();
        Some(grads[v.0].get_or_insert_with(|| Tensor::zeros(&shape)))
    }

    fn propagate(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, ta, tb } => {
                let av = self.value(a);
                let bv = self.value(b);
                let (m, n) = g.matrix_dims()?;
                let p = if ta { av.rows() } else { av.cols() };
                if let Some(da) = self.grad_slot(grads, a) {
                    if ta {
                        // a stored p×m: dA = op(b)·gᵀ
                        gemm(p, n, m, bv.data(), tb, g.data(), true, da.data_mut(), 1.0);
                    } else {
                        // a stored m×p: dA = g·op(b)ᵀ
                        gemm(m, n, p, g.data(), false, bv.data(), !tb, da.data_mut(), 1.0);
                    }
                }
                if let Some(db) = self.grad_slot(grads, b) {
                    if tb {
                        // b stored n×p: dB = gᵀ·op(a)
                        gemm(n, m, p, g.data(), true, av.data(), ta, db.data_mut(), 1.0);
                    } else {
                        // b stored p×n: dB = op(a)ᵀ·g
                        gemm(p, m, n, av.data(), !ta, g.data(), false, db.data_mut(), 1.0);
                    }
                }
            }
            &Op::Add(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.clone());
            }
            &Op::Sub(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.map(|x| -x));
            }
            &Op::Mul(a, b) => {
                if self.nodes[a.0].needs_grad {
                    self.accumulate(grads, a, g.zip_map(self.value(b), |x, y| x * y)?);
                }
                if self.nodes[b.0].needs_grad {
                    self.accumulate(grads, b, g.zip_map(self.value(a), |x, y| x * y)?);
                }
            }
            &Op::Scale(a, s) => self.accumulate(grads, a, g.map(|x| s * x)),
            &Op::Relu(a) => {
                let d = g.zip_map(self.value(a), |x, v| if v > 0.0 { x } else { 0.0 })?;
                self.accumulate(grads, a, d);
            }
            &Op::Square(a) => {
                self.accumulate(grads, a, g.zip_map(self.value(a), |x, v| 2.0 * v * x)?)
            }
            &Op::Sigmoid(a) => {
                let d = g.zip_map(&node.value, |x, s| x * s * (1.0 - s))?;
                self.accumulate(grads, a, d);
            }
            &Op::Swish(a) => {
                let d = g.zip_map(self.value(a), |x, v| {
                    let s = sigmoid(v);
                    x * (s + v * s * (1.0 - s))
                })?;
                self.accumulate(grads, a, d);
            }
            &Op::Transpose(a) => self.accumulate(grads, a, g.transpose()?),
            Op::ConcatRows(parts) => {
                let mut row = 0;
                for &p in parts {
                    let r = self.value(p).rows();
                    if self.nodes[p.0].needs_grad {
                        self.accumulate(grads, p, g.slice_rows(row, row + r)?);
                    }
                    row += r;
                }
            }
            &Op::SliceRows { a, start } => {
                let n = g.cols();
                if let Some(da) = self.grad_slot(grads, a) {
                    let dst = &mut da.data_mut()[start * n..start * n + g.len()];
                    for (d, x) in dst.iter_mut().zip(g.data()) {
                        *d += x;
                    }
                }
            }
            Op::GatherRows { a, index } => {
                let n = g.cols();
                if let Some(da) = self.grad_slot(grads, *a) {
                    let dd = da.data_mut();
                    for (k, &i) in index.iter().enumerate() {
                        for (d, x) in dd[i * n..(i + 1) * n].iter_mut().zip(g.row(k)) {
                            *d += x;
                        }
                    }
                }
            }
            &Op::SumAxis { a, axis } => {
                let (m, n) = self.value(a).matrix_dims()?;
                let mut d = Tensor::zeros(&[m, n]);
                for i in 0..m {
                    for j in 0..n {
                        d.set(i, j, if axis == 0 { g.data()[j] } else { g.data()[i] });
                    }
                }
                self.accumulate(grads, a, d);
            }
            &Op::SumAll(a) => {
                let shape = self.value(a).shape().to_vec();
                self.accumulate(grads, a, Tensor::full(&shape, g.item()));
            }
            &Op::BroadcastRows(a) => {
                let (m, n) = g.matrix_dims()?;
                let mut s = vec![0.0; n];
                for i in 0..m {
                    for (acc, x) in s.iter_mut().zip(g.row(i)) {
                        *acc += x;
                    }
                }
                let shape = self.value(a).shape().to_vec();
                self.accumulate(grads, a, Tensor::new(&shape, s)?);
            }
            &Op::SoftmaxRows(a) => {
                let y = &node.value;
                let (m, n) = y.matrix_dims()?;
                let mut d = Tensor::zeros(&[m, n]);
                for i in 0..m {
                    let dot: f64 = y.row(i).iter().zip(g.row(i)).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        d.set(i, j, y.get(i, j) * (g.get(i, j) - dot));
                    }
                }
                self.accumulate(grads, a, d);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let m = labels.len() as f64;
                let scale = g.item() / m;
                let mut d = probs.clone();
                let n = d.cols();
                for (i, &y) in labels.iter().enumerate() {
                    d.data_mut()[i * n + y] -= 1.0;
                }
                for x in d.data_mut() {
                    *x *= scale;
                }
                self.accumulate(grads, *logits, d);
            }
            &Op::DepthwiseConv { x, w } => {
                let (c, t) = self.value(x).matrix_dims()?;
                let taps = self.value(w).cols();
                let pad = (taps - 1) / 2;
                let xs = self.value(x).data();
                let ws = self.value(w).data();
                let gd = g.data();
                if let Some(dx) = self.grad_slot(grads, x) {
                    let dd = dx.data_mut();
                    for ch in 0..c {
                        for j in 0..taps {
                            let wv = ws[ch * taps + j];
                            for ti in 0..t {
                                let src = ti as isize + j as isize - pad as isize;
                                if src >= 0 && (src as usize) < t {
                                    dd[ch * t + src as usize] += wv * gd[ch * t + ti];
                                }
                            }
                        }
                    }
                }
                if let Some(dw) = self.grad_slot(grads, w) {
                    let dd = dw.data_mut();
                    for ch in 0..c {
                        for j in 0..taps {
                            let mut acc = 0.0;
                            for ti in 0..t {
                                let src = ti as isize + j as isize - pad as isize;
                                if src >= 0 && (src as usize) < t {
                                    acc += xs[ch * t + src as usize] * gd[ch * t + ti];
                                }
                            }
                            dd[ch * taps + j] += acc;
                        }
                    }
                }
            }
            Op::NormRows {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                stats,
            } => {
                let (r, n) = xhat.matrix_dims()?;
                let gam = self.value(*gamma).data();
                if let Some(dg) = self.grad_slot(grads, *gamma) {
                    for i in 0..r {
                        dg.data_mut()[i] += g
                            .row(i)
                            .iter()
                            .zip(xhat.row(i))
                            .map(|(a, b)| a * b)
                            .sum::<f64>();
                    }
                }
                if let Some(db) = self.grad_slot(grads, *beta) {
                    for i in 0..r {
                        db.data_mut()[i] += g.row(i).iter().sum::<f64>();
                    }
                }
                if let Some(dx) = self.grad_slot(grads, *x) {
                    let nf = n as f64;
                    for i in 0..r {
                        let gr = g.row(i);
                        let hr = xhat.row(i);
                        let out = &mut dx.data_mut()[i * n..(i + 1) * n];
                        match stats {
                            NormStats::Fixed => {
                                for (o, gv) in out.iter_mut().zip(gr) {
                                    *o += gv * gam[i] * inv_std[i];
                                }
                            }
                            NormStats::Batch => {
                                let sg: f64 = gr.iter().sum::<f64>() * gam[i];
                                let sgh: f64 =
                                    gr.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() * gam[i];
                                for j in 0..n {
                                    out[j] +=
                                        inv_std[i] / nf * (nf * gr[j] * gam[i] - sg - hr[j] * sgh);
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn inputs(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        &Op::MatMul { a, b, .. } | &Op::Add(a, b) | &Op::Sub(a, b) | &Op::Mul(a, b) => vec![a, b],
        &Op::Scale(a, _)
        | &Op::Relu(a)
        | &Op::Square(a)
        | &Op::Sigmoid(a)
        | &Op::Swish(a)
        | &Op::Transpose(a)
        | &Op::SliceRows { a, .. }
        | &Op::SumAxis { a, .. }
        | &Op::SumAll(a)
        | &Op::BroadcastRows(a)
        | &Op::SoftmaxRows(a) => vec![a],
        Op::GatherRows { a, .. } => vec![*a],
        Op::ConcatRows(parts) => parts.clone(),
        Op::CrossEntropy { logits, .. } => vec![*logits],
        &Op::DepthwiseConv { x, w } => vec![x, w],
        Op::NormRows { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
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

fn softmax_into(src: &[f64], dst: &mut [f64]) {
    let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = (s - max).exp();
        z += *d;
    }
    for d in dst.iter_mut() {
        *d /= z;
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// The gradient of `v`, or zeros shaped like `like` when nothing flowed to it.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

/// Compares the tape gradient of a scalar function against central finite
/// differences. `f` rebuilds the graph on a fresh tape from the given leaf
/// handles. Returns `max |analytic - numeric| / max(1, |numeric|)`.
pub fn finite_diff_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::Parameter("eps must be positive".into()));
    }
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = ps
            .iter()
            .map(|p| tape.constant(p.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut tape, &vars).map_err(|e| Error::Evaluation(e.to_string()))?;
        let v = tape.value(out).item();
        if !v.is_finite() {
            return Err(Error::Evaluation(format!("f = {v}")));
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let vars = params
        .iter()
        .map(|p| tape.param(p.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars).map_err(|e| Error::Evaluation(e.to_string()))?;
    let grads = tape.backward(out)?;

    let mut work = params.to_vec();
    let mut worst: f64 = 0.0;
    for (pi, v) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*v, &params[pi]);
        for k in 0..params[pi].len() {
            let orig = params[pi].data()[k];
            work[pi].data_mut()[k] = orig + eps;
            let up = eval(&work)?;
            work[pi].data_mut()[k] = orig - eps;
            let down = eval(&work)?;
            work[pi].data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let err = (analytic.data()[k] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let mut t = Tape::new();
        let i = t.constant(Tensor::eye(2)).unwrap();
        let x = t.constant(m(&[&[2.0, 3.0], &[4.0, 5.0]])).unwrap();
        let y = t.matmul(i, x).unwrap();
        assert_eq!(t.value(y), t.value(x));
        let a = t.constant(m(&[&[1.0, 0.0]])).unwrap();
        let b = t.constant(m(&[&[0.0], &[7.0]])).unwrap();
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[0.0]);
        assert!(matches!(t.matmul(a, a), Err(Error::Dimension(_))));
    }

    #[test]
    fn matmul_gradients_all_transpose_modes() {
        let mut r = rng();
        let a = Tensor::randn(&[3, 4], 1.0, &mut r);
        let b = Tensor::randn(&[4, 2], 1.0, &mut r);
        let err = finite_diff_check(
            |t, v| {
                let c = t.matmul(v[0], v[1])?;
                let s = t.square(c)?;
                t.sum_all(s)
            },
            &[a.clone(), b.clone()],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
        let bt = b.transpose().unwrap();
        let at = a.transpose().unwrap();
        for (x, y, mode) in [(&a, &bt, 1), (&at, &b, 2)] {
            let err = finite_diff_check(
                |t, v| {
                    let c = if mode == 1 {
                        t.matmul_nt(v[0], v[1])?
                    } else {
                        t.matmul_tn(v[0], v[1])?
                    };
                    let s = t.square(c)?;
                    t.sum_all(s)
                },
                &[x.clone(), y.clone()],
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-6, "mode {mode}: {err}");
        }
    }

    #[test]
    fn elementwise_values() {
        let mut t = Tape::new();
        let z = t.constant(Tensor::scalar(0.0)).unwrap();
        let s = t.swish(z).unwrap();
        assert_eq!(t.value(s).item(), 0.0);
        let n = t.constant(Tensor::scalar(-3.0)).unwrap();
        let r = t.relu(n).unwrap();
        assert_eq!(t.value(r).item(), 0.0);
        let q = t.square(r).unwrap();
        assert_eq!(t.value(q).item(), 0.0);
    }

    #[test]
    fn swish_gradient_at_one() {
        let err = finite_diff_check(|t, v| t.swish(v[0]), &[Tensor::scalar(1.0)], 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn square_gradient_at_three() {
        let mut t = Tape::new();
        let x = t.param(Tensor::scalar(3.0)).unwrap();
        let y = t.square(x).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 6.0);
        let err = finite_diff_check(|t, v| t.square(v[0]), &[Tensor::scalar(3.0)], 1e-5).unwrap();
        assert!(err < 1e-9);
    }

    #[test]
    fn every_primitive_passes_gradient_check() {
        let mut r = rng();
        let x = Tensor::randn(&[4, 3], 1.0, &mut r);
        let y = Tensor::randn(&[4, 3], 1.0, &mut r);
        let w = Tensor::randn(&[3, 3], 1.0, &mut r);
        let row = Tensor::randn(&[3], 1.0, &mut r);
        type Case = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;
        // every case ends in a weighted sum so upstream gradients are not uniform
        let weight = Tensor::randn(&[4, 3], 1.0, &mut r);
        let wsum = move |t: &mut Tape, v: Var| -> Result<Var> {
            let shape = t.value(v).shape().to_vec();
            let wt = Tensor::new(
                &shape,
                weight.data()[..shape.iter().product::<usize>()].to_vec(),
            )?;
            let wv = t.constant(wt)?;
            let p = t.mul(v, wv)?;
            t.sum_all(p)
        };
        let wsum = std::rc::Rc::new(wsum);
        let cases: Vec<(&str, Vec<Tensor>, Case)> = vec![
            ("add", vec![x.clone(), y.clone()], {
                let ws = wsum.clone();
                Box::new(move |t, v| {
                    let o = t.add(v[0], v[1])?;
                    ws(t, o)
                })
            }),
            ("sub", vec![x.clone(), y.clone()], {
                let ws = wsum.clone();
                Box::new(move |t, v| {
                    let o = t.sub(v[0], v[1])?;
                    ws(t, o)
                })
            }),
            ("mul", vec![x.clone(), y.clone()], {
                let ws = wsum.clone();
                Box::new(move |t, v| {
                    let o = t.mul(v[0], v[1])?;
                    ws(t, o)
                })
            }),
            ("scale", vec![x.clone()], {
                let ws = wsum.clone();
                Box::new(move |t, v| {
                    let o = t.scale(v[0], -1.7)?;
                    ws(t, o)
                })
            }),
            ("relu", vec![x.clone()], {
                let ws = wsum.clone();
                Box::new(move |t, v| {
                    let o = t.relu(v[0])?;
                    ws(t, o)
                })
            }),
            ("square", vec![x.clone()], {
                let ws = wsum.clone();
                Box::new(move |t, v| {
                    let o = t.square(v[0])?;
                    ws(t, o)
                })
            }),
            ("sigmoid", vec![x.clone()], {
                let ws = wsum.clone();
                Box::new(move |t, v| {
                    let o = t.sigmoid(v[0])?;
                    ws(t, o)
                })
            }),
            ("swish", vec![x.clone()], {
                let ws = wsum.clone();
                Box::new(move |t, v| {
                    let o = t.swish(v[0])?;
                    ws(t, o)
                })
            }),
            ("transpose", vec![w.clone()], {
                let ws = wsum.clone();
                Box::new(move |t, v| {
                    let o = t.transpose(v[0])?;
                    ws(t, o)
                })
            }),
            ("concat_rows", vec![x.clone(), w.clone()], {
                let ws = wsum.clone();
                Box::new(move |t, v| {
                    let o = t.concat_rows(&[v[0], v[1]])?;
                    let o = t.slice_rows(o, 1, 5)?;
                    ws(t, o)
                })
            }),
            ("gather_rows", vec![x.clone()], {
                let ws = wsum.clone();
                Box::new(move |t, v| {
                    let o = t.gather_rows(v[0], &[2, 0, 2, 3])?;
                    ws(t, o)
                })
            }),
            ("sum_axis", vec![x.clone()], {
                let ws = wsum.clone();
                Box::new(move |t, v| {
                    let a = t.sum_axis(v[0], 0)?;
                    let b = t.sum_axis(v[0], 1)?;
                    let bt = t.transpose(b)?;
                    let a = ws(t, a)?;
                    let b = ws(t, bt)?;
                    t.add(a, b)
                })
            }),
            ("broadcast_rows", vec![row.clone()], {
                let ws = wsum.clone();
                Box::new(move |t, v| {
                    let o = t.broadcast_rows(v[0], 4)?;
                    ws(t, o)
                })
            }),
            ("softmax_rows", vec![x.clone()], {
                let ws = wsum.clone();
                Box::new(move |t, v| {
                    let o = t.softmax_rows(v[0])?;
                    ws(t, o)
                })
            }),
            (
                "cross_entropy",
                vec![x.clone()],
                Box::new(|t, v| t.cross_entropy(v[0], &[0, 2, 1, 1])),
            ),
            ("depthwise_conv", vec![x.clone(), w.clone()], {
                let ws = wsum.clone();
                Box::new(move |t, v| {
                    let xt = t.transpose(v[0])?;
                    let o = t.depthwise_conv(xt, v[1])?;
                    ws(t, o)
                })
            }),
            (
                "norm_rows",
                vec![
                    x.clone(),
                    Tensor::randn(&[4], 1.0, &mut r),
                    Tensor::randn(&[4], 1.0, &mut r),
                ],
                {
                    let ws = wsum.clone();
                    Box::new(move |t, v| {
                        let (o, _) = t.norm_rows(v[0], v[1], v[2], None)?;
                        ws(t, o)
                    })
                },
            ),
            (
                "norm_rows_fixed",
                vec![
                    x.clone(),
                    Tensor::randn(&[4], 1.0, &mut r),
                    Tensor::randn(&[4], 1.0, &mut r),
                ],
                {
                    let ws = wsum.clone();
                    Box::new(move |t, v| {
                        let s = RowStats {
                            mean: vec![0.1, -0.2, 0.3, 0.0],
                            var: vec![1.0, 2.0, 0.5, 1.5],
                        };
                        let (o, _) = t.norm_rows(v[0], v[1], v[2], Some(&s))?;
                        ws(t, o)
                    })
                },
            ),
        ];
        for (name, params, f) in cases {
            let err = finite_diff_check(|t, v| f(t, v), &params, 1e-5).unwrap();
            assert!(err < 1e-6, "{name}: {err}");
        }
    }

    #[test]
    fn transpose_is_an_involution() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::randn(&[3, 5], 1.0, &mut rng())).unwrap();
        let y = t.transpose(x).unwrap();
        let z = t.transpose(y).unwrap();
        assert_eq!(t.value(z), t.value(x));
    }

    #[test]
    fn gather_backward_scatters_to_selected_rows() {
        let mut t = Tape::new();
        let x = t.param(Tensor::randn(&[4, 3], 1.0, &mut rng())).unwrap();
        let g = t.gather_rows(x, &[0, 0]).unwrap();
        let s = t.sum_all(g).unwrap();
        let grads = t.backward(s).unwrap();
        let dx = grads.get(x).unwrap();
        assert_eq!(dx.row(0), &[2.0, 2.0, 2.0]);
        for i in 1..4 {
            assert_eq!(dx.row(i), &[0.0, 0.0, 0.0]);
        }
        assert!(matches!(t.gather_rows(x, &[4]), Err(Error::Index(_))));
    }

    #[test]
    fn concat_shapes_add() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = t.constant(Tensor::zeros(&[3, 3])).unwrap();
        let c = t.concat_rows(&[a, b]).unwrap();
        assert_eq!(t.value(c).shape(), &[5, 3]);
    }

    #[test]
    fn non_finite_results_are_rejected() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::scalar(1e200)).unwrap();
        assert!(matches!(t.square(x), Err(Error::NonFinite("square"))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let c = t.constant(Tensor::scalar(2.0)).unwrap();
        let p = t.param(Tensor::scalar(3.0)).unwrap();
        let y = t.mul(c, p).unwrap();
        let g = t.backward(y).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(p).unwrap().item(), 2.0);
    }

    #[test]
    fn matmul_charges_macs_to_current_component() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[3, 4])).unwrap();
        let b = t.constant(Tensor::zeros(&[4, 5])).unwrap();
        t.set_component(Component::Head);
        t.matmul(a, b).unwrap();
        assert_eq!(t.cost().macs(Component::Head), 60);
        assert_eq!(t.cost().total_macs(), 60);
    }
}
