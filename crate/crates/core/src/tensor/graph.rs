use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{matmul_acc, Gradients, NormId, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Batch-norm variance floor.
pub const NORM_EPS: f64 = 1e-5;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    Train,
    Infer,
}

/// Batch statistics observed by a train-mode batch norm, to be folded into
/// the running moments once the step is accepted.
#[derive(Clone, Debug, PartialEq)]
pub struct NormUpdate {
    pub id: NormId,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Sum(Var),
    Mean(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    Transpose(Var),
    Reshape(Var),
    Embedding { table: Var, ids: Vec<usize> },
    Conv2d {
        x: Var,
        k: Var,
        stride: (usize, usize),
        pad: (usize, usize),
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    LstmCell {
        z: Var,
        c: Var,
        // per row: i, f, g, o, tanh(c') each of width h
        cache: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Dropout { x: Var, mask: Vec<f64> },
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    op: Op,
    needs_grad: bool,
}

/// Tape of operations recorded during a forward pass.
///
/// Parameters are bound lazily from a [`ParamStore`]; binding the same id
/// twice returns the same node so gradients accumulate in one place.
pub struct Graph<'a> {
    nodes: Vec<Node>,
    store: Option<&'a ParamStore>,
    overlay: Option<&'a [Option<Tensor>]>,
    bound: Vec<Option<Var>>,
    mode: Mode,
    rng: ChaCha8Rng,
    norm_updates: Vec<NormUpdate>,
    backward_done: bool,
}

fn dims2(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

fn conv_geometry(input: usize, kernel: usize, stride: usize) -> (usize, usize) {
    let out = input.div_ceil(stride);
    let total = ((out - 1) * stride + kernel).saturating_sub(input);
    (out, total / 2)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph<'static> {
    pub fn new(mode: Mode) -> Self {
        Graph {
            nodes: Vec::new(),
            store: None,
            overlay: None,
            bound: Vec::new(),
            mode,
            rng: ChaCha8Rng::seed_from_u64(0),
            norm_updates: Vec::new(),
            backward_done: false,
        }
    }
}

impl<'a> Graph<'a> {
    pub fn with_params(store: &'a ParamStore, mode: Mode) -> Self {
        Graph {
            nodes: Vec::new(),
            store: Some(store),
            overlay: None,
            bound: vec![None; store.len()],
            mode,
            rng: ChaCha8Rng::seed_from_u64(0),
            norm_updates: Vec::new(),
            backward_done: false,
        }
    }

    /// Substitute values for some parameters (used for weight noise).
    /// Gradients still flow to the parameter ids.
    pub fn with_overlay(mut self, overlay: &'a [Option<Tensor>]) -> Self {
        self.overlay = Some(overlay);
        self
    }

    /// Seeds the RNG used by stochastic operations (dropout).
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> Option<&'a ParamStore> {
        self.store
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A leaf that does not receive gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked and readable through [`Graph::grad`].
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        let store = self
            .store
            .ok_or_else(|| Error::Usage("graph has no parameter store".into()))?;
        if id.0 >= self.bound.len() {
            return Err(Error::Usage(format!("unknown parameter id {}", id.0)));
        }
        if let Some(v) = self.bound[id.0] {
            return Ok(v);
        }
        let value = self
            .overlay
            .and_then(|o| o.get(id.0).and_then(|t| t.clone()))
            .unwrap_or_else(|| store.value(id).clone());
        let v = self.push(value, Op::Leaf, true);
        self.bound[id.0] = Some(v);
        Ok(v)
    }

    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let n = &self.nodes[v.0];
        n.grad
            .as_ref()
            .map(|g| Tensor::from_parts(n.value.shape().to_vec(), g.clone()))
    }

    /// Gradients of every bound parameter, after [`Graph::backward`].
    pub fn param_grads(&self) -> Gradients {
        let mut out = Gradients::new(self.bound.len());
        for (i, v) in self.bound.iter().enumerate() {
            if let Some(v) = v {
                let g = self
                    .grad(*v)
                    .unwrap_or_else(|| Tensor::zeros(self.value(*v).shape()));
                out.set(ParamId(i), g);
            }
        }
        out
    }

    pub fn take_norm_updates(&mut self) -> Vec<NormUpdate> {
        std::mem::take(&mut self.norm_updates)
    }

    // ----------------------------------------------------------------- ops

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::dim(
                "matmul",
                format!("cannot multiply {:?} by {:?}", ta.shape(), tb.shape()),
            ));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        matmul_acc(ta.data(), tb.data(), &mut out, m, k, n);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), ng))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                op,
                format!("shapes {:?} and {:?} differ", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_parts(ta.shape().to_vec(), data)
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(a);
        Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let t = self.zip_map(a, b, |x, y| x + y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let t = self.zip_map(a, b, |x, y| x - y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let t = self.zip_map(a, b, |x, y| x * y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Mul(a, b), ng))
    }

    /// Adds a bias vector along the last axis.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        let c = tx.cols();
        if tb.len() != c {
            return Err(Error::dim(
                "add_bias",
                format!("bias {:?} does not match last axis of {:?}", tb.shape(), tx.shape()),
            ));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_exact_mut(c) {
            for (v, bv) in row.iter_mut().zip(tb.data()) {
                *v += bv;
            }
        }
        let t = Tensor::from_parts(tx.shape().to_vec(), data);
        let ng = self.needs(x) || self.needs(b);
        Ok(self.push(t, Op::AddBias(x, b), ng))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let t = self.map(x, |v| v * s);
        let ng = self.needs(x);
        self.push(t, Op::Scale(x, s), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.map(x, sigmoid);
        let ng = self.needs(x);
        self.push(t, Op::Sigmoid(x), ng)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.map(x, f64::tanh);
        let ng = self.needs(x);
        self.push(t, Op::Tanh(x), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.map(x, |v| v.max(0.0));
        let ng = self.needs(x);
        self.push(t, Op::Relu(x), ng)
    }

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let mut data = tx.data().to_vec();
        for row in data.chunks_exact_mut(tx.cols()) {
            softmax_in_place(row);
        }
        let t = Tensor::from_parts(tx.shape().to_vec(), data);
        let ng = self.needs(x);
        self.push(t, Op::Softmax(x), ng)
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let mut data = tx.data().to_vec();
        for row in data.chunks_exact_mut(tx.cols()) {
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let t = Tensor::from_parts(tx.shape().to_vec(), data);
        let ng = self.needs(x);
        self.push(t, Op::LogSoftmax(x), ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let ng = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.sum() / t.len() as f64;
        let ng = self.needs(x);
        self.push(Tensor::scalar(s), Op::Mean(x), ng)
    }

    /// Concatenates matrices side by side (along the last axis).
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::dim("concat_cols", "no inputs"))?;
        let rows = self.value(first).rows();
        let mut cols = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != rows {
                return Err(Error::dim(
                    "concat_cols",
                    format!("row count {} differs from {rows} ({:?})", t.rows(), t.shape()),
                ));
            }
            cols += t.cols();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Tensor::from_parts(vec![rows, cols], data),
            Op::ConcatCols(parts.to_vec()),
            ng,
        ))
    }

    /// Stacks matrices vertically; all parts must share the last extent.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::dim("concat_rows", "no inputs"))?;
        let cols = self.value(first).cols();
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(Error::dim(
                    "concat_rows",
                    format!("column count {} differs from {cols}", t.cols()),
                ));
            }
            data.extend_from_slice(t.data());
        }
        let rows = data.len() / cols;
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Tensor::from_parts(vec![rows, cols], data),
            Op::ConcatRows(parts.to_vec()),
            ng,
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = dims2(t);
        if len == 0 || start + len > r {
            return Err(Error::dim(
                "slice_rows",
                format!("rows {start}..{} out of range for {r}", start + len),
            ));
        }
        let data = t.data()[start * c..(start + len) * c].to_vec();
        let ng = self.needs(x);
        Ok(self.push(
            Tensor::from_parts(vec![len, c], data),
            Op::SliceRows { x, start },
            ng,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = dims2(t);
        if len == 0 || start + len > c {
            return Err(Error::dim(
                "slice_cols",
                format!("cols {start}..{} out of range for {c}", start + len),
            ));
        }
        let mut data = Vec::with_capacity(r * len);
        for row in t.data().chunks_exact(c) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let ng = self.needs(x);
        Ok(self.push(
            Tensor::from_parts(vec![r, len], data),
            Op::SliceCols { x, start },
            ng,
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 {
            return Err(Error::dim("transpose", format!("need a matrix, got {:?}", t.shape())));
        }
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = t.data()[i * c + j];
            }
        }
        let ng = self.needs(x);
        Ok(self.push(Tensor::from_parts(vec![c, r], data), Op::Transpose(x), ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self
            .value(x)
            .reshape(shape)
            .map_err(|_| Error::dim("reshape", format!("{:?} -> {shape:?}", self.shape(x))))?;
        let ng = self.needs(x);
        Ok(self.push(t, Op::Reshape(x), ng))
    }

    /// Row lookup: returns `ids.len() × d` from a `V × d` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (v, d) = dims2(t);
        if ids.is_empty() {
            return Err(Error::dim("embedding", "no ids"));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            if i >= v {
                return Err(Error::dim("embedding", format!("id {i} out of range for {v} rows")));
            }
            data.extend_from_slice(t.row_slice(i));
        }
        let ng = self.needs(table);
        Ok(self.push(
            Tensor::from_parts(vec![ids.len(), d], data),
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    /// Cross-correlation of a `T × F × C` input with `kh × kw × C × N`
    /// kernels under zero "same" padding; output is `⌈T/sh⌉ × ⌈F/sw⌉ × N`.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: (usize, usize)) -> Result<Var> {
        if stride.0 == 0 || stride.1 == 0 {
            return Err(Error::Config(format!("conv2d stride must be positive, got {stride:?}")));
        }
        let (tx, tk) = (self.value(x), self.value(k));
        if tx.rank() != 3 || tk.rank() != 4 || tk.shape()[2] != tx.shape()[2] {
            return Err(Error::dim(
                "conv2d",
                format!("input {:?} incompatible with kernels {:?}", tx.shape(), tk.shape()),
            ));
        }
        let (t_in, f_in, c_in) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        let (kh, kw, n) = (tk.shape()[0], tk.shape()[1], tk.shape()[3]);
        let (t_out, pt) = conv_geometry(t_in, kh, stride.0);
        let (f_out, pf) = conv_geometry(f_in, kw, stride.1);
        let xd = tx.data();
        let kd = tk.data();
        let mut out = vec![0.0; t_out * f_out * n];
        for to in 0..t_out {
            for fo in 0..f_out {
                let orow = &mut out[(to * f_out + fo) * n..(to * f_out + fo + 1) * n];
                for dt in 0..kh {
                    let ti = (to * stride.0 + dt) as isize - pt as isize;
                    if ti < 0 || ti >= t_in as isize {
                        continue;
                    }
                    for df in 0..kw {
                        let fi = (fo * stride.1 + df) as isize - pf as isize;
                        if fi < 0 || fi >= f_in as isize {
                            continue;
                        }
                        let xbase = (ti as usize * f_in + fi as usize) * c_in;
                        for c in 0..c_in {
                            let xv = xd[xbase + c];
                            let kbase = ((dt * kw + df) * c_in + c) * n;
                            for (o, kv) in orow.iter_mut().zip(&kd[kbase..kbase + n]) {
                                *o += xv * kv;
                            }
                        }
                    }
                }
            }
        }
        let ng = self.needs(x) || self.needs(k);
        Ok(self.push(
            Tensor::from_parts(vec![t_out, f_out, n], out),
            Op::Conv2d {
                x,
                k,
                stride,
                pad: (pt, pf),
            },
            ng,
        ))
    }

    /// Batch normalization over every position of the last axis.
    ///
    /// Train mode normalizes with batch statistics (and records them for the
    /// running moments); infer mode uses the running moments in `stats`.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, stats: NormId) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = dims2(tx);
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::dim(
                "batch_norm",
                format!("scale/shift size differs from {c} channels"),
            ));
        }
        let (mean, var, batch_stats) = match self.mode {
            Mode::Train => {
                if r < 2 {
                    return Err(Error::dim(
                        "batch_norm",
                        format!("train mode needs at least 2 positions, got {r}"),
                    ));
                }
                let mut mean = vec![0.0; c];
                for row in tx.data().chunks_exact(c) {
                    for (m, v) in mean.iter_mut().zip(row) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= r as f64);
                let mut var = vec![0.0; c];
                for row in tx.data().chunks_exact(c) {
                    for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                var.iter_mut().for_each(|s| *s /= r as f64);
                (mean, var, true)
            }
            Mode::Infer => {
                let store = self
                    .store
                    .ok_or_else(|| Error::Usage("batch_norm needs a parameter store".into()))?;
                let s = store.norm(stats);
                if !s.initialized {
                    return Err(Error::State(format!(
                        "batch norm {} has no accumulated statistics",
                        s.name
                    )));
                }
                (s.mean.clone(), s.var.clone(), false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = tx.data().to_vec();
        let mut out = vec![0.0; xhat.len()];
        for (xr, or) in xhat.chunks_exact_mut(c).zip(out.chunks_exact_mut(c)) {
            for j in 0..c {
                xr[j] = (xr[j] - mean[j]) * inv_std[j];
                or[j] = g[j] * xr[j] + b[j];
            }
        }
        let shape = tx.shape().to_vec();
        if batch_stats {
            self.norm_updates.push(NormUpdate { id: stats, mean, var });
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            ng,
        ))
    }

    /// Fused LSTM gate nonlinearity.
    ///
    /// `z` holds gate pre-activations `[i | f | g | o]` per row (`R × 4h`),
    /// `c` the previous cell state (`R × h`). Returns `R × 2h` rows of
    /// `[h' | c']` with `c' = σ(f)⊙c + σ(i)⊙tanh(g)` and `h' = σ(o)⊙tanh(c')`.
    pub fn lstm_cell(&mut self, z: Var, c: Var) -> Result<Var> {
        let (tz, tc) = (self.value(z), self.value(c));
        let (r, h) = dims2(tc);
        if tz.rows() != r || tz.cols() != 4 * h {
            return Err(Error::dim(
                "lstm_cell",
                format!("gates {:?} incompatible with state {:?}", tz.shape(), tc.shape()),
            ));
        }
        let mut out = vec![0.0; r * 2 * h];
        let mut cache = vec![0.0; r * 5 * h];
        for row in 0..r {
            let zr = &tz.data()[row * 4 * h..(row + 1) * 4 * h];
            let cr = &tc.data()[row * h..(row + 1) * h];
            let orow = &mut out[row * 2 * h..(row + 1) * 2 * h];
            let kr = &mut cache[row * 5 * h..(row + 1) * 5 * h];
            for j in 0..h {
                let i = sigmoid(zr[j]);
                let f = sigmoid(zr[h + j]);
                let g = zr[2 * h + j].tanh();
                let o = sigmoid(zr[3 * h + j]);
                let c_new = f * cr[j] + i * g;
                let tc_new = c_new.tanh();
                orow[j] = o * tc_new;
                orow[h + j] = c_new;
                kr[j] = i;
                kr[h + j] = f;
                kr[2 * h + j] = g;
                kr[3 * h + j] = o;
                kr[4 * h + j] = tc_new;
            }
        }
        let ng = self.needs(z) || self.needs(c);
        Ok(self.push(
            Tensor::from_parts(vec![r, 2 * h], out),
            Op::LstmCell { z, c, cache },
            ng,
        ))
    }

    /// Mean over rows of `−log softmax(logits_r)[targets_r]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let (r, v) = dims2(t);
        if targets.len() != r {
            return Err(Error::dim(
                "cross_entropy",
                format!("{} targets for {r} rows", targets.len()),
            ));
        }
        let mut probs = t.data().to_vec();
        let mut loss = 0.0;
        for (row, &tgt) in probs.chunks_exact_mut(v).zip(targets) {
            if tgt >= v {
                return Err(Error::dim("cross_entropy", format!("target {tgt} >= {v}")));
            }
            let lse = log_sum_exp(row);
            loss += lse - row[tgt];
            row.iter_mut().for_each(|x| *x = (*x - lse).exp());
        }
        loss /= r as f64;
        let ng = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Inverted dropout; the identity in infer mode or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Var {
        if self.mode == Mode::Infer || p <= 0.0 {
            return x;
        }
        let keep = 1.0 - p;
        let n = self.value(x).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if self.rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let tx = self.value(x);
        let data = tx.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let t = Tensor::from_parts(tx.shape().to_vec(), data);
        let ng = self.needs(x);
        self.push(t, Op::Dropout { x, mask }, ng)
    }

    // ------------------------------------------------------------ backward

    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// Running it twice on the same graph is an error; gradients are never
    /// silently accumulated across sweeps.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Usage("backward already executed on this graph".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            if !node.needs_grad {
                continue;
            }
            let Some(grad) = node.grad.take() else { continue };
            backprop(before, node, &grad);
            node.grad = Some(grad);
        }
        Ok(())
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    row.iter_mut().for_each(|v| *v /= s);
}

/// Moves the gradient buffer of `v` out of its node (zeros on first use) so
/// it can be filled while other nodes' values are borrowed. The caller puts
/// it back.
fn take_slot(nodes: &mut [Node], v: Var) -> Option<Vec<f64>> {
    let n = &mut nodes[v.0];
    if !n.needs_grad {
        return None;
    }
    let len = n.value.len();
    Some(n.grad.take().unwrap_or_else(|| vec![0.0; len]))
}

/// Returns the gradient buffer of `v`, allocating zeros on first use, or
/// `None` when `v` does not take gradients.
fn slot(nodes: &mut [Node], v: Var) -> Option<&mut [f64]> {
    let n = &mut nodes[v.0];
    if !n.needs_grad {
        return None;
    }
    let len = n.value.len();
    Some(n.grad.get_or_insert_with(|| vec![0.0; len]).as_mut_slice())
}

fn backprop(nodes: &mut [Node], node: &Node, dy: &[f64]) {
    let y = node.value.data();
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = dims2(&nodes[a.0].value);
            let n = nodes[b.0].value.cols();
            if let Some(mut ga) = take_slot(nodes, *a) {
                let bv = nodes[b.0].value.data();
                for i in 0..m {
                    let dyr = &dy[i * n..(i + 1) * n];
                    for p in 0..k {
                        let br = &bv[p * n..(p + 1) * n];
                        ga[i * k + p] += dyr.iter().zip(br).map(|(x, y)| x * y).sum::<f64>();
                    }
                }
                nodes[a.0].grad = Some(ga);
            }
            if let Some(mut gb) = take_slot(nodes, *b) {
                let av = nodes[a.0].value.data();
                for i in 0..m {
                    let dyr = &dy[i * n..(i + 1) * n];
                    for p in 0..k {
                        let a_ip = av[i * k + p];
                        for (g, d) in gb[p * n..(p + 1) * n].iter_mut().zip(dyr) {
                            *g += a_ip * d;
                        }
                    }
                }
                nodes[b.0].grad = Some(gb);
            }
        }
        Op::Add(a, b) => {
            if let Some(g) = slot(nodes, *a) {
                g.iter_mut().zip(dy).for_each(|(g, d)| *g += d);
            }
            if let Some(g) = slot(nodes, *b) {
                g.iter_mut().zip(dy).for_each(|(g, d)| *g += d);
            }
        }
        Op::Sub(a, b) => {
            if let Some(g) = slot(nodes, *a) {
                g.iter_mut().zip(dy).for_each(|(g, d)| *g += d);
            }
            if let Some(g) = slot(nodes, *b) {
                g.iter_mut().zip(dy).for_each(|(g, d)| *g -= d);
            }
        }
        Op::Mul(a, b) => {
            if let Some(mut g) = take_slot(nodes, *a) {
                let bv = nodes[b.0].value.data();
                for ((g, d), bv) in g.iter_mut().zip(dy).zip(bv) {
                    *g += d * bv;
                }
                nodes[a.0].grad = Some(g);
            }
            if let Some(mut g) = take_slot(nodes, *b) {
                let av = nodes[a.0].value.data();
                for ((g, d), av) in g.iter_mut().zip(dy).zip(av) {
                    *g += d * av;
                }
                nodes[b.0].grad = Some(g);
            }
        }
        Op::AddBias(x, b) => {
            if let Some(g) = slot(nodes, *x) {
                g.iter_mut().zip(dy).for_each(|(g, d)| *g += d);
            }
            if let Some(g) = slot(nodes, *b) {
                let c = g.len();
                for row in dy.chunks_exact(c) {
                    g.iter_mut().zip(row).for_each(|(g, d)| *g += d);
                }
            }
        }
        Op::Scale(x, s) => {
            if let Some(g) = slot(nodes, *x) {
                g.iter_mut().zip(dy).for_each(|(g, d)| *g += s * d);
            }
        }
        Op::Sigmoid(x) => {
            if let Some(g) = slot(nodes, *x) {
                for ((g, d), y) in g.iter_mut().zip(dy).zip(y) {
                    *g += d * y * (1.0 - y);
                }
            }
        }
        Op::Tanh(x) => {
            if let Some(g) = slot(nodes, *x) {
                for ((g, d), y) in g.iter_mut().zip(dy).zip(y) {
                    *g += d * (1.0 - y * y);
                }
            }
        }
        Op::Relu(x) => {
            if let Some(g) = slot(nodes, *x) {
                for ((g, d), y) in g.iter_mut().zip(dy).zip(y) {
                    if *y > 0.0 {
                        *g += d;
                    }
                }
            }
        }
        Op::Softmax(x) => {
            let c = node.value.cols();
            if let Some(g) = slot(nodes, *x) {
                for ((gr, dr), yr) in g.chunks_exact_mut(c).zip(dy.chunks_exact(c)).zip(y.chunks_exact(c)) {
                    let dot: f64 = dr.iter().zip(yr).map(|(d, y)| d * y).sum();
                    for ((g, d), y) in gr.iter_mut().zip(dr).zip(yr) {
                        *g += y * (d - dot);
                    }
                }
            }
        }
        Op::LogSoftmax(x) => {
            let c = node.value.cols();
            if let Some(g) = slot(nodes, *x) {
                for ((gr, dr), yr) in g.chunks_exact_mut(c).zip(dy.chunks_exact(c)).zip(y.chunks_exact(c)) {
                    let s: f64 = dr.iter().sum();
                    for ((g, d), y) in gr.iter_mut().zip(dr).zip(yr) {
                        *g += d - y.exp() * s;
                    }
                }
            }
        }
        Op::Sum(x) => {
            if let Some(g) = slot(nodes, *x) {
                g.iter_mut().for_each(|g| *g += dy[0]);
            }
        }
        Op::Mean(x) => {
            if let Some(g) = slot(nodes, *x) {
                let s = dy[0] / g.len() as f64;
                g.iter_mut().for_each(|g| *g += s);
            }
        }
        Op::ConcatCols(parts) => {
            let total = node.value.cols();
            let mut offset = 0;
            for p in parts {
                let w = nodes[p.0].value.cols();
                if let Some(g) = slot(nodes, *p) {
                    for (gr, dr) in g.chunks_exact_mut(w).zip(dy.chunks_exact(total)) {
                        gr.iter_mut()
                            .zip(&dr[offset..offset + w])
                            .for_each(|(g, d)| *g += d);
                    }
                }
                offset += w;
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for p in parts {
                let n = nodes[p.0].value.len();
                if let Some(g) = slot(nodes, *p) {
                    g.iter_mut()
                        .zip(&dy[offset..offset + n])
                        .for_each(|(g, d)| *g += d);
                }
                offset += n;
            }
        }
        Op::SliceRows { x, start } => {
            let c = node.value.cols();
            if let Some(g) = slot(nodes, *x) {
                g[start * c..start * c + dy.len()]
                    .iter_mut()
                    .zip(dy)
                    .for_each(|(g, d)| *g += d);
            }
        }
        Op::SliceCols { x, start } => {
            let w = node.value.cols();
            let c = nodes[x.0].value.cols();
            if let Some(g) = slot(nodes, *x) {
                for (gr, dr) in g.chunks_exact_mut(c).zip(dy.chunks_exact(w)) {
                    gr[*start..start + w]
                        .iter_mut()
                        .zip(dr)
                        .for_each(|(g, d)| *g += d);
                }
            }
        }
        Op::Transpose(x) => {
            let (r, c) = (node.value.shape()[1], node.value.shape()[0]);
            if let Some(g) = slot(nodes, *x) {
                for i in 0..r {
                    for j in 0..c {
                        g[i * c + j] += dy[j * r + i];
                    }
                }
            }
        }
        Op::Reshape(x) => {
            if let Some(g) = slot(nodes, *x) {
                g.iter_mut().zip(dy).for_each(|(g, d)| *g += d);
            }
        }
        Op::Dropout { x, mask } => {
            if let Some(g) = slot(nodes, *x) {
                for ((g, d), m) in g.iter_mut().zip(dy).zip(mask) {
                    *g += d * m;
                }
            }
        }
        Op::Embedding { table, ids } => {
            let d = node.value.cols();
            if let Some(g) = slot(nodes, *table) {
                for (&id, dr) in ids.iter().zip(dy.chunks_exact(d)) {
                    g[id * d..(id + 1) * d]
                        .iter_mut()
                        .zip(dr)
                        .for_each(|(g, d)| *g += d);
                }
            }
        }
        Op::Conv2d { x, k, stride, pad } => {
            let xs = nodes[x.0].value.shape().to_vec();
            let ks = nodes[k.0].value.shape().to_vec();
            let (t_in, f_in, c_in) = (xs[0], xs[1], xs[2]);
            let (kh, kw, n) = (ks[0], ks[1], ks[3]);
            let (t_out, f_out) = (node.value.shape()[0], node.value.shape()[1]);
            let mut gx = take_slot(nodes, *x);
            let mut gk = take_slot(nodes, *k);
            let xv = nodes[x.0].value.data();
            let kv = nodes[k.0].value.data();
            for to in 0..t_out {
                for fo in 0..f_out {
                    let drow = &dy[(to * f_out + fo) * n..(to * f_out + fo + 1) * n];
                    for dt in 0..kh {
                        let ti = (to * stride.0 + dt) as isize - pad.0 as isize;
                        if ti < 0 || ti >= t_in as isize {
                            continue;
                        }
                        for df in 0..kw {
                            let fi = (fo * stride.1 + df) as isize - pad.1 as isize;
                            if fi < 0 || fi >= f_in as isize {
                                continue;
                            }
                            let xbase = (ti as usize * f_in + fi as usize) * c_in;
                            for c in 0..c_in {
                                let kbase = ((dt * kw + df) * c_in + c) * n;
                                if let Some(gx) = gx.as_mut() {
                                    gx[xbase + c] += drow
                                        .iter()
                                        .zip(&kv[kbase..kbase + n])
                                        .map(|(d, k)| d * k)
                                        .sum::<f64>();
                                }
                                if let Some(gk) = gk.as_mut() {
                                    let xval = xv[xbase + c];
                                    for (g, d) in gk[kbase..kbase + n].iter_mut().zip(drow) {
                                        *g += xval * d;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            if gx.is_some() {
                nodes[x.0].grad = gx;
            }
            if gk.is_some() {
                nodes[k.0].grad = gk;
            }
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            batch_stats,
        } => {
            let c = inv_std.len();
            let r = xhat.len() / c;
            if let Some(g) = slot(nodes, *beta) {
                for dr in dy.chunks_exact(c) {
                    g.iter_mut().zip(dr).for_each(|(g, d)| *g += d);
                }
            }
            if let Some(g) = slot(nodes, *gamma) {
                for (dr, xr) in dy.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                    for j in 0..c {
                        g[j] += dr[j] * xr[j];
                    }
                }
            }
            if nodes[x.0].needs_grad {
                let gv = nodes[gamma.0].value.data().to_vec();
                let gx = slot(nodes, *x).expect("needs grad");
                if *batch_stats {
                    let mut s1 = vec![0.0; c];
                    let mut s2 = vec![0.0; c];
                    for (dr, xr) in dy.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                        for j in 0..c {
                            let dxh = dr[j] * gv[j];
                            s1[j] += dxh;
                            s2[j] += dxh * xr[j];
                        }
                    }
                    let rf = r as f64;
                    for ((gr, dr), xr) in gx
                        .chunks_exact_mut(c)
                        .zip(dy.chunks_exact(c))
                        .zip(xhat.chunks_exact(c))
                    {
                        for j in 0..c {
                            let dxh = dr[j] * gv[j];
                            gr[j] += inv_std[j] / rf * (rf * dxh - s1[j] - xr[j] * s2[j]);
                        }
                    }
                } else {
                    for (gr, dr) in gx.chunks_exact_mut(c).zip(dy.chunks_exact(c)) {
                        for j in 0..c {
                            gr[j] += dr[j] * gv[j] * inv_std[j];
                        }
                    }
                }
            }
        }
        Op::LstmCell { z, c, cache } => {
            let h = node.value.cols() / 2;
            let r = node.value.rows();
            let need_z = nodes[z.0].needs_grad;
            let need_c = nodes[c.0].needs_grad;
            let cprev = nodes[c.0].value.data().to_vec();
            let mut gz = vec![0.0; r * 4 * h];
            let mut gc = vec![0.0; r * h];
            for row in 0..r {
                let dr = &dy[row * 2 * h..(row + 1) * 2 * h];
                let kr = &cache[row * 5 * h..(row + 1) * 5 * h];
                for j in 0..h {
                    let (i, f, g, o, tc) = (kr[j], kr[h + j], kr[2 * h + j], kr[3 * h + j], kr[4 * h + j]);
                    let dh = dr[j];
                    let dc = dr[h + j] + dh * o * (1.0 - tc * tc);
                    let zr = &mut gz[row * 4 * h..(row + 1) * 4 * h];
                    zr[j] = dc * g * i * (1.0 - i);
                    zr[h + j] = dc * cprev[row * h + j] * f * (1.0 - f);
                    zr[2 * h + j] = dc * i * (1.0 - g * g);
                    zr[3 * h + j] = dh * tc * o * (1.0 - o);
                    gc[row * h + j] = dc * f;
                }
            }
            if need_z {
                let g = slot(nodes, *z).expect("needs grad");
                g.iter_mut().zip(&gz).for_each(|(g, d)| *g += d);
            }
            if need_c {
                let g = slot(nodes, *c).expect("needs grad");
                g.iter_mut().zip(&gc).for_each(|(g, d)| *g += d);
            }
        }
        Op::CrossEntropy {
            logits,
            targets,
            probs,
        } => {
            let r = targets.len();
            let v = probs.len() / r;
            let s = dy[0] / r as f64;
            if let Some(g) = slot(nodes, *logits) {
                for (row, &t) in targets.iter().enumerate() {
                    for j in 0..v {
                        let onehot = if j == t { 1.0 } else { 0.0 };
                        g[row * v + j] += s * (probs[row * v + j] - onehot);
                    }
                }
            }
        }
    }
}
