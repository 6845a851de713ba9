use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MulScalar(Var, Var),
    AddBias(Var, Var),
    Gelu(Var),
    Exp(Var),
    Log(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LogSumExpRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normed: Vec<T>,
        rstd: Vec<T>,
    },
    L2NormalizeRows {
        x: Var,
        norms: Vec<T>,
    },
    Sum(Var),
    Mean(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Gather(Var, Vec<usize>),
    Reshape(Var),
    BatchMatMul {
        a: Var,
        b: Var,
        groups: usize,
        trans_b: bool,
    },
    GroupScale {
        x: Var,
        s: Var,
        groups: usize,
    },
    ShapedMix {
        s: Var,
        alpha: Var,
        beta: Var,
        gamma: Var,
        groups: usize,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

/// Linear record of executed primitives for reverse-mode differentiation.
///
/// Vars are handed out in execution order, so every operation's inputs
/// precede it and a single reverse sweep visits each node once. A leaf that
/// is read by several operations (a shared parameter) accumulates the
/// gradient of every use.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

// tanh via a single exp: 1 − 2/(1 + e^{2u}) saturates cleanly at ±1
fn tanh_fast<T: Scalar>(u: T) -> T {
    let two = T::of(2.0);
    T::one() - two / (T::one() + (two * u).exp())
}

fn gelu_fwd<T: Scalar>(x: T) -> T {
    let u = T::of(SQRT_2_OVER_PI) * (x + T::of(GELU_C) * x * x * x);
    T::of(0.5) * x * (T::one() + tanh_fast(u))
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let (c, k) = (T::of(GELU_C), T::of(SQRT_2_OVER_PI));
    let half = T::of(0.5);
    let th = tanh_fast(k * (x + c * x * x * x));
    half * (T::one() + th) + half * x * (T::one() - th * th) * k * (T::one() + T::of(3.0) * c * x * x)
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input value. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
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

    /// Gradient of the last backward pass, if `v` participated.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.nodes[v.0].grad.take()
    }

    /// Clears every gradient buffer so that `backward` may run again.
    pub fn reset_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.backward_done = false;
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var], name: &str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        self.nodes[v.0].value.dims2()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err(op, sa, sb));
        }
        Ok(())
    }

    fn map(&mut self, a: Var, op: Op<T>, name: &str, f: impl Fn(T) -> T) -> Result<Var> {
        let src = &self.nodes[a.0].value;
        let data = src.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(src.shape(), data)?;
        self.push(value, op, &[a], name)
    }

    fn zip(
        &mut self,
        a: Var,
        b: Var,
        op: Op<T>,
        name: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(va.shape(), data)?;
        self.push(value, op, &[a, b], name)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (k2, n) = self.dims2(b)?;
        if k != k2 {
            return Err(shape_err("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            false,
        );
        self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), &[a, b], "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transposed()?;
        self.push(value, Op::Transpose(a), &[a], "transpose")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    /// Element-wise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    /// Multiplication by a fixed constant.
    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        self.map(a, Op::Scale(a, c), "scale", |x| x * c)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -T::one())
    }

    /// Multiplies a tensor by a one-element tensor that is itself on the tape.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(shape_err("mul_scalar", self.shape(a), self.shape(s)));
        }
        let c = self.value(s).item();
        let src = self.value(a);
        let value = Tensor::new(src.shape(), src.data().iter().map(|&x| x * c).collect())?;
        self.push(value, Op::MulScalar(a, s), &[a, s], "mul_scalar")
    }

    /// `x[i, j] + bias[j]` for x of shape m×n and bias of n elements.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        if self.value(bias).numel() != n {
            return Err(shape_err("add_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(n) {
            for (v, &bj) in row.iter_mut().zip(&b) {
                *v = *v + bj;
            }
        }
        self.push(Tensor::new(&[m, n], data)?, Op::AddBias(x, bias), &[x, bias], "add_bias")
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Gelu(a), "gelu", gelu_fwd)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Exp(a), "exp", |x| x.exp())
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Log(a), "log", |x| x.ln())
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2(a)?;
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(n) {
            let max = row.iter().fold(T::neg_infinity(), |acc, &x| acc.max(x));
            let mut sum = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum = sum + *v;
            }
            for v in row.iter_mut() {
                *v = *v / sum;
            }
        }
        self.push(Tensor::new(&[m, n], data)?, Op::SoftmaxRows(a), &[a], "softmax_rows")
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2(a)?;
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(n) {
            let lse = log_sum_exp(row);
            for v in row.iter_mut() {
                *v = *v - lse;
            }
        }
        self.push(
            Tensor::new(&[m, n], data)?,
            Op::LogSoftmaxRows(a),
            &[a],
            "log_softmax_rows",
        )
    }

    /// Row-wise `log Σ_j exp(x[i, j])`, shape m×1.
    pub fn log_sum_exp_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2(a)?;
        let data = self.value(a).data().chunks(n).map(log_sum_exp).collect();
        self.push(
            Tensor::new(&[m, 1], data)?,
            Op::LogSumExpRows(a),
            &[a],
            "log_sum_exp_rows",
        )
    }

    /// Layer normalization over the last dimension of a matrix.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let (m, d) = self.dims2(x)?;
        if self.value(gain).numel() != d || self.value(bias).numel() != d {
            return Err(shape_err("layer_norm", self.shape(x), self.shape(gain)));
        }
        if !(eps > T::zero()) {
            return Err(Error::invalid("layer_norm eps must be positive"));
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let src = self.value(x).data();
        let inv_d = T::one() / T::of(d as f64);
        let mut normed = Vec::with_capacity(m * d);
        let mut rstd = Vec::with_capacity(m);
        let mut out = Vec::with_capacity(m * d);
        for row in src.chunks(d) {
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let nv = (v - mean) * r;
                normed.push(nv);
                out.push(nv * g[j] + b[j]);
            }
        }
        self.push(
            Tensor::new(&[m, d], out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                rstd,
            },
            &[x, gain, bias],
            "layer_norm",
        )
    }

    /// Scales every row to unit Euclidean norm. An all-zero row is an error.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        let mut data = self.value(x).data().to_vec();
        let mut norms = Vec::with_capacity(m);
        for (i, row) in data.chunks_mut(n).enumerate() {
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if !(norm > T::zero()) {
                return Err(Error::Degenerate(format!(
                    "l2_normalize_rows: row {i} has zero norm"
                )));
            }
            for v in row.iter_mut() {
                *v = *v / norm;
            }
            norms.push(norm);
        }
        self.push(
            Tensor::new(&[m, n], data)?,
            Op::L2NormalizeRows { x, norms },
            &[x],
            "l2_normalize_rows",
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a], "sum_reduce")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s = t.data().iter().copied().sum::<T>() / T::of(t.numel() as f64);
        self.push(Tensor::scalar(s), Op::Mean(a), &[a], "mean_reduce")
    }

    /// Concatenates matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let (m, _) = self.dims2(first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p)?;
            if r != m {
                return Err(shape_err("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        self.push(
            Tensor::new(&[m, total], data)?,
            Op::ConcatCols(parts.to_vec()),
            parts,
            "concat_cols",
        )
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let (_, n) = self.dims2(first)?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.dims2(p)?;
            if c != n {
                return Err(shape_err("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        self.push(
            Tensor::new(&[rows, n], data)?,
            Op::ConcatRows(parts.to_vec()),
            parts,
            "concat_rows",
        )
    }

    /// `out.flat[i] = a.flat[indices[i]]`, reshaped to `shape`. Backward
    /// scatter-adds, so repeated indices are allowed.
    pub fn gather(&mut self, a: Var, indices: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let src = self.value(a).data();
        if let Some(&bad) = indices.iter().find(|&&i| i >= src.len()) {
            return Err(Error::invalid(format!(
                "gather index {bad} out of range for {:?}",
                self.shape(a)
            )));
        }
        let data = indices.iter().map(|&i| src[i]).collect();
        let value = Tensor::new(shape, data)?;
        self.push(value, Op::Gather(a, indices), &[a], "gather")
    }

    /// Selects whole rows of a matrix (embedding lookup, negative selection).
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = self.dims2(a)?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return Err(Error::invalid(format!("gather_rows: row {bad} >= {m}")));
        }
        if rows.is_empty() {
            return Err(Error::invalid("gather_rows: empty index list"));
        }
        let indices = rows.iter().flat_map(|&r| r * n..(r + 1) * n).collect();
        self.gather(a, indices, &[rows.len(), n])
    }

    /// Sub-matrix `[row0, row0+rows) × [col0, col0+cols)`.
    pub fn slice(&mut self, a: Var, row0: usize, rows: usize, col0: usize, cols: usize) -> Result<Var> {
        let (m, n) = self.dims2(a)?;
        if row0 + rows > m || col0 + cols > n || rows == 0 || cols == 0 {
            return Err(Error::invalid(format!(
                "slice [{row0}+{rows}, {col0}+{cols}] out of {m}×{n}"
            )));
        }
        let mut indices = Vec::with_capacity(rows * cols);
        for i in row0..row0 + rows {
            indices.extend(i * n + col0..i * n + col0 + cols);
        }
        self.gather(a, indices, &[rows, cols])
    }

    /// Flat element `i` as a one-element tensor.
    pub fn index(&mut self, a: Var, i: usize) -> Result<Var> {
        self.gather(a, vec![i], &[1])
    }

    /// Per-group matrix product. `a` stacks `groups` blocks of m×k rows;
    /// `b` stacks k×n blocks, or n×k blocks read transposed when `trans_b`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, groups: usize, trans_b: bool) -> Result<Var> {
        let (ra, k) = self.dims2(a)?;
        let (rb, cb) = self.dims2(b)?;
        if groups == 0 || ra % groups != 0 || rb % groups != 0 {
            return Err(shape_err("batch_matmul", self.shape(a), self.shape(b)));
        }
        let m = ra / groups;
        let (kb, n) = if trans_b { (cb, rb / groups) } else { (rb / groups, cb) };
        if kb != k {
            return Err(shape_err("batch_matmul", self.shape(a), self.shape(b)));
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::zero(); groups * m * n];
        for g in 0..groups {
            T::gemm(
                m,
                k,
                n,
                &av[g * m * k..(g + 1) * m * k],
                false,
                &bv[g * k * n..(g + 1) * k * n],
                trans_b,
                &mut out[g * m * n..(g + 1) * m * n],
                false,
            );
        }
        self.push(
            Tensor::new(&[groups * m, n], out)?,
            Op::BatchMatMul {
                a,
                b,
                groups,
                trans_b,
            },
            &[a, b],
            "batch_matmul",
        )
    }

    /// Scales row-block `g` of `x` (one of `groups` equal blocks) by
    /// `s[g % len(s)]`. A one-element `s` scales everything.
    pub fn group_scale(&mut self, x: Var, s: Var, groups: usize) -> Result<Var> {
        let (r, c) = self.dims2(x)?;
        let h = self.value(s).numel();
        if groups == 0 || r % groups != 0 || (h != 1 && !groups.is_multiple_of(h)) {
            return Err(shape_err("group_scale", self.shape(x), self.shape(s)));
        }
        let block = r / groups * c;
        let sv = self.value(s).data();
        let mut data = self.value(x).data().to_vec();
        for (g, chunk) in data.chunks_mut(block).enumerate() {
            let f = sv[g % h];
            for v in chunk.iter_mut() {
                *v = *v * f;
            }
        }
        self.push(
            Tensor::new(&[r, c], data)?,
            Op::GroupScale { x, s, groups },
            &[x, s],
            "group_scale",
        )
    }

    /// `α·I + (β·S − γ·C)` for every `n × n` block of the stacked `S`, where
    /// `C` has all entries `1/n`. Block `q` takes coefficient `q mod H` from
    /// each `H`-element vector. With `β = γ = 0` and `α = 1` the result is
    /// exactly the identity.
    pub fn shaped_mix(&mut self, s: Var, alpha: Var, beta: Var, gamma: Var, groups: usize) -> Result<Var> {
        let (r, n) = self.dims2(s)?;
        let h = self.value(alpha).numel();
        if groups == 0 || r != groups * n || h == 0 || !groups.is_multiple_of(h) {
            return Err(shape_err("shaped_mix", self.shape(s), self.shape(alpha)));
        }
        for c in [beta, gamma] {
            if self.value(c).numel() != h {
                return Err(shape_err("shaped_mix", self.shape(alpha), self.shape(c)));
            }
        }
        let (av, bv, cv) = (self.value(alpha).data(), self.value(beta).data(), self.value(gamma).data());
        let center = T::one() / T::of(n as f64);
        let mut data = self.value(s).data().to_vec();
        for (q, block) in data.chunks_mut(n * n).enumerate() {
            let (a, b, c) = (av[q % h], bv[q % h], cv[q % h] * center);
            for (i, row) in block.chunks_mut(n).enumerate() {
                for (j, v) in row.iter_mut().enumerate() {
                    let id = if i == j { a } else { T::zero() * a };
                    *v = id + (b * *v - c);
                }
            }
        }
        self.push(
            Tensor::new(&[r, n], data)?,
            Op::ShapedMix {
                s,
                alpha,
                beta,
                gamma,
                groups,
            },
            &[s, alpha, beta, gamma],
            "shaped_mix",
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        self.push(value, Op::Reshape(a), &[a], "reshape")
    }

    /// Reverse sweep from a one-element `loss`.
    ///
    /// Gradients accumulate into every reachable node that requires them.
    /// A second call without [`reset_grads`](Self::reset_grads) is an error.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Backward(
                "backward already ran on this tape; reset_grads first".into(),
            ));
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::Backward("loss is not on this tape".into()));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Backward(format!(
                "loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.backprop_node(idx, &g, &mut grads)?;
            let shape = self.nodes[idx].value.shape().to_vec();
            let node = &mut self.nodes[idx];
            node.grad = Some(Tensor::new(&shape, g)?);
        }
        Ok(())
    }

    fn backprop_node(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let out = node.value.data();
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        let wants = |v: Var| nodes[v.0].requires_grad;

        // accumulate into grads[v], allocating zeros on first touch
        fn slot<'a, T: Scalar>(
            grads: &'a mut [Option<Vec<T>>],
            nodes: &[Node<T>],
            v: Var,
        ) -> &'a mut Vec<T> {
            grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.numel()])
        }

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = nodes[a.0].value.dims2()?;
                let (_, n) = nodes[b.0].value.dims2()?;
                if wants(*a) {
                    let ga = slot(grads, nodes, *a);
                    T::gemm(m, n, k, g, false, val(*b), true, ga, true);
                }
                if wants(*b) {
                    let gb = slot(grads, nodes, *b);
                    T::gemm(k, m, n, val(*a), true, g, false, gb, true);
                }
            }
            Op::Transpose(a) => {
                if wants(*a) {
                    let (r, c) = nodes[a.0].value.dims2()?;
                    let ga = slot(grads, nodes, *a);
                    // g is c×r
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] = ga[i * c + j] + g[j * r + i];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if wants(v) {
                        axpy(slot(grads, nodes, v), g, T::one());
                    }
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    axpy(slot(grads, nodes, *a), g, T::one());
                }
                if wants(*b) {
                    axpy(slot(grads, nodes, *b), g, -T::one());
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let bv = val(*b).to_vec();
                    let ga = slot(grads, nodes, *a);
                    for ((s, &gi), &bi) in ga.iter_mut().zip(g).zip(&bv) {
                        *s = *s + gi * bi;
                    }
                }
                if wants(*b) {
                    let av = val(*a).to_vec();
                    let gb = slot(grads, nodes, *b);
                    for ((s, &gi), &ai) in gb.iter_mut().zip(g).zip(&av) {
                        *s = *s + gi * ai;
                    }
                }
            }
            Op::Scale(a, c) => {
                if wants(*a) {
                    axpy(slot(grads, nodes, *a), g, *c);
                }
            }
            Op::MulScalar(a, s) => {
                let c = val(*s)[0];
                if wants(*a) {
                    axpy(slot(grads, nodes, *a), g, c);
                }
                if wants(*s) {
                    let dot = g.iter().zip(val(*a)).map(|(&x, &y)| x * y).sum::<T>();
                    let gs = slot(grads, nodes, *s);
                    gs[0] = gs[0] + dot;
                }
            }
            Op::AddBias(x, b) => {
                if wants(*x) {
                    axpy(slot(grads, nodes, *x), g, T::one());
                }
                if wants(*b) {
                    let n = nodes[b.0].value.numel();
                    let gb = slot(grads, nodes, *b);
                    for row in g.chunks(n) {
                        for (s, &gi) in gb.iter_mut().zip(row) {
                            *s = *s + gi;
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                if wants(*a) {
                    let av = val(*a).to_vec();
                    let ga = slot(grads, nodes, *a);
                    for ((s, &gi), &x) in ga.iter_mut().zip(g).zip(&av) {
                        *s = *s + gi * gelu_grad(x);
                    }
                }
            }
            Op::Exp(a) => {
                if wants(*a) {
                    let ga = slot(grads, nodes, *a);
                    for ((s, &gi), &y) in ga.iter_mut().zip(g).zip(out) {
                        *s = *s + gi * y;
                    }
                }
            }
            Op::Log(a) => {
                if wants(*a) {
                    let av = val(*a).to_vec();
                    let ga = slot(grads, nodes, *a);
                    for ((s, &gi), &x) in ga.iter_mut().zip(g).zip(&av) {
                        *s = *s + gi / x;
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                if wants(*a) {
                    let n = *node.value.shape().last().unwrap();
                    let ga = slot(grads, nodes, *a);
                    for ((grow, yrow), srow) in g.chunks(n).zip(out.chunks(n)).zip(ga.chunks_mut(n)) {
                        let dot = grow.iter().zip(yrow).map(|(&x, &y)| x * y).sum::<T>();
                        for ((s, &gi), &y) in srow.iter_mut().zip(grow).zip(yrow) {
                            *s = *s + y * (gi - dot);
                        }
                    }
                }
            }
            Op::LogSoftmaxRows(a) => {
                if wants(*a) {
                    let n = *node.value.shape().last().unwrap();
                    let ga = slot(grads, nodes, *a);
                    for ((grow, yrow), srow) in g.chunks(n).zip(out.chunks(n)).zip(ga.chunks_mut(n)) {
                        let total = grow.iter().copied().sum::<T>();
                        for ((s, &gi), &y) in srow.iter_mut().zip(grow).zip(yrow) {
                            *s = *s + gi - y.exp() * total;
                        }
                    }
                }
            }
            Op::LogSumExpRows(a) => {
                if wants(*a) {
                    let (_, n) = nodes[a.0].value.dims2()?;
                    let av = val(*a).to_vec();
                    let ga = slot(grads, nodes, *a);
                    for (i, (xrow, srow)) in av.chunks(n).zip(ga.chunks_mut(n)).enumerate() {
                        let lse = out[i];
                        for (s, &x) in srow.iter_mut().zip(xrow) {
                            *s = *s + g[i] * (x - lse).exp();
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                rstd,
            } => {
                let d = nodes[gain.0].value.numel();
                let gv = val(*gain).to_vec();
                if wants(*gain) {
                    let gg = slot(grads, nodes, *gain);
                    for (grow, nrow) in g.chunks(d).zip(normed.chunks(d)) {
                        for ((s, &gi), &nv) in gg.iter_mut().zip(grow).zip(nrow) {
                            *s = *s + gi * nv;
                        }
                    }
                }
                if wants(*bias) {
                    let gb = slot(grads, nodes, *bias);
                    for grow in g.chunks(d) {
                        for (s, &gi) in gb.iter_mut().zip(grow) {
                            *s = *s + gi;
                        }
                    }
                }
                if wants(*x) {
                    let inv_d = T::one() / T::of(d as f64);
                    let gx = slot(grads, nodes, *x);
                    let mut dn = vec![T::zero(); d];
                    for (i, (grow, nrow)) in g.chunks(d).zip(normed.chunks(d)).enumerate() {
                        let mut mean_dn = T::zero();
                        let mut mean_dn_n = T::zero();
                        for j in 0..d {
                            dn[j] = grow[j] * gv[j];
                            mean_dn = mean_dn + dn[j];
                            mean_dn_n = mean_dn_n + dn[j] * nrow[j];
                        }
                        mean_dn = mean_dn * inv_d;
                        mean_dn_n = mean_dn_n * inv_d;
                        let srow = &mut gx[i * d..(i + 1) * d];
                        for j in 0..d {
                            srow[j] = srow[j] + rstd[i] * (dn[j] - mean_dn - nrow[j] * mean_dn_n);
                        }
                    }
                }
            }
            Op::L2NormalizeRows { x, norms } => {
                if wants(*x) {
                    let n = *node.value.shape().last().unwrap();
                    let gx = slot(grads, nodes, *x);
                    for (i, ((grow, yrow), srow)) in
                        g.chunks(n).zip(out.chunks(n)).zip(gx.chunks_mut(n)).enumerate()
                    {
                        let dot = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum::<T>();
                        for ((s, &gi), &y) in srow.iter_mut().zip(grow).zip(yrow) {
                            *s = *s + (gi - y * dot) / norms[i];
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if wants(*a) {
                    let ga = slot(grads, nodes, *a);
                    for s in ga.iter_mut() {
                        *s = *s + g[0];
                    }
                }
            }
            Op::Mean(a) => {
                if wants(*a) {
                    let ga = slot(grads, nodes, *a);
                    let c = g[0] / T::of(ga.len() as f64);
                    for s in ga.iter_mut() {
                        *s = *s + c;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = *node.value.shape().last().unwrap();
                let mut offset = 0;
                for &p in parts {
                    let (m, w) = nodes[p.0].value.dims2()?;
                    if wants(p) {
                        let gp = slot(grads, nodes, p);
                        for i in 0..m {
                            for j in 0..w {
                                gp[i * w + j] = gp[i * w + j] + g[i * total + offset + j];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = nodes[p.0].value.numel();
                    if wants(p) {
                        axpy(slot(grads, nodes, p), &g[offset..offset + len], T::one());
                    }
                    offset += len;
                }
            }
            Op::Gather(a, indices) => {
                if wants(*a) {
                    let ga = slot(grads, nodes, *a);
                    for (&i, &gi) in indices.iter().zip(g) {
                        ga[i] = ga[i] + gi;
                    }
                }
            }
            Op::Reshape(a) => {
                if wants(*a) {
                    axpy(slot(grads, nodes, *a), g, T::one());
                }
            }
            Op::BatchMatMul {
                a,
                b,
                groups,
                trans_b,
            } => {
                let groups = *groups;
                let (ra, k) = nodes[a.0].value.dims2()?;
                let m = ra / groups;
                let n = node.value.shape()[1];
                let (sa, sb, sg) = (m * k, k * n, m * n);
                if wants(*a) {
                    let bv = val(*b);
                    let ga = slot(grads, nodes, *a);
                    for q in 0..groups {
                        // dA = dC · Bᵀ, where B is k×n (or stored n×k when trans_b)
                        T::gemm(
                            m,
                            n,
                            k,
                            &g[q * sg..(q + 1) * sg],
                            false,
                            &bv[q * sb..(q + 1) * sb],
                            !*trans_b,
                            &mut ga[q * sa..(q + 1) * sa],
                            true,
                        );
                    }
                }
                if wants(*b) {
                    let av = val(*a);
                    let gb = slot(grads, nodes, *b);
                    for q in 0..groups {
                        let gq = &g[q * sg..(q + 1) * sg];
                        let aq = &av[q * sa..(q + 1) * sa];
                        let dst = &mut gb[q * sb..(q + 1) * sb];
                        if *trans_b {
                            // stored n×k: dBᵀ = dCᵀ · A
                            T::gemm(n, m, k, gq, true, aq, false, dst, true);
                        } else {
                            T::gemm(k, m, n, aq, true, gq, false, dst, true);
                        }
                    }
                }
            }
            Op::GroupScale { x, s, groups } => {
                let h = nodes[s.0].value.numel();
                let block = node.value.numel() / *groups;
                let sv = val(*s).to_vec();
                if wants(*x) {
                    let gx = slot(grads, nodes, *x);
                    for (q, (dst, src)) in gx.chunks_mut(block).zip(g.chunks(block)).enumerate() {
                        axpy(dst, src, sv[q % h]);
                    }
                }
                if wants(*s) {
                    let xv = val(*x).to_vec();
                    let gs = slot(grads, nodes, *s);
                    for (q, (gc, xc)) in g.chunks(block).zip(xv.chunks(block)).enumerate() {
                        let dot = gc.iter().zip(xc).map(|(&a, &b)| a * b).sum::<T>();
                        gs[q % h] = gs[q % h] + dot;
                    }
                }
            }
            Op::ShapedMix {
                s,
                alpha,
                beta,
                gamma,
                groups,
            } => {
                let h = nodes[alpha.0].value.numel();
                let block = node.value.numel() / *groups;
                let n = node.value.shape()[1];
                let bv = val(*beta).to_vec();
                if wants(*s) {
                    let gx = slot(grads, nodes, *s);
                    for (q, (dst, src)) in gx.chunks_mut(block).zip(g.chunks(block)).enumerate() {
                        axpy(dst, src, bv[q % h]);
                    }
                }
                if wants(*alpha) {
                    let ga = slot(grads, nodes, *alpha);
                    for (q, gc) in g.chunks(block).enumerate() {
                        let tr = (0..n).map(|i| gc[i * n + i]).sum::<T>();
                        ga[q % h] = ga[q % h] + tr;
                    }
                }
                if wants(*beta) {
                    let sv = val(*s).to_vec();
                    let gb = slot(grads, nodes, *beta);
                    for (q, (gc, sc)) in g.chunks(block).zip(sv.chunks(block)).enumerate() {
                        let dot = gc.iter().zip(sc).map(|(&a, &b)| a * b).sum::<T>();
                        gb[q % h] = gb[q % h] + dot;
                    }
                }
                if wants(*gamma) {
                    let center = T::one() / T::of(n as f64);
                    let gg = slot(grads, nodes, *gamma);
                    for (q, gc) in g.chunks(block).enumerate() {
                        let total = gc.iter().copied().sum::<T>();
                        gg[q % h] = gg[q % h] - center * total;
                    }
                }
            }
        }
        Ok(())
    }
}

fn axpy<T: Scalar>(dst: &mut [T], src: &[T], c: T) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + c * s;
    }
}

pub(crate) fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().fold(T::neg_infinity(), |acc, &x| acc.max(x));
    let sum = row.iter().map(|&x| (x - max).exp()).sum::<T>();
    max + sum.ln()
}
