//! Layers assembled from graph primitives. Each layer holds parameter ids
//! into a [`ParamStore`] and binds them onto a [`Graph`] when run.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, NormId, ParamId, ParamKind, ParamStore, Tensor, Var};

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        let w = store.add_glorot(format!("{name}/w"), in_dim, out_dim, ParamKind::Weight, rng)?;
        let b = store.add(format!("{name}/b"), Tensor::zeros(&[out_dim]), ParamKind::Bias)?;
        Ok(Linear { w, b, in_dim, out_dim })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.w)?;
        let y = g.matmul(x, w)?;
        let b = g.param(self.b)?;
        g.add_bias(y, b)
    }
}

/// One hidden layer with tanh, then a linear output.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl Mlp {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
    ) -> Result<Self> {
        Ok(Mlp {
            hidden: Linear::new(store, rng, &format!("{name}/hidden"), in_dim, hidden)?,
            out: Linear::new(store, rng, &format!("{name}/out"), hidden, out_dim)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.hidden.forward(g, x)?;
        let h = g.tanh(h);
        self.out.forward(g, h)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub stats: NormId,
    pub channels: usize,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        let gamma = store.add(format!("{name}/gamma"), Tensor::full(&[channels], 1.0), ParamKind::NormScale)?;
        let beta = store.add(format!("{name}/beta"), Tensor::zeros(&[channels]), ParamKind::NormShift)?;
        let stats = store.add_norm(name, channels);
        Ok(BatchNorm {
            gamma,
            beta,
            stats,
            channels,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma)?;
        let beta = g.param(self.beta)?;
        g.batch_norm(x, gamma, beta, self.stats)
    }

    /// Normalizes several sequences with statistics pooled over all of
    /// their positions (the batch), returning outputs in input shapes.
    pub fn forward_batch(&self, g: &mut Graph, xs: &[Var]) -> Result<Vec<Var>> {
        if xs.len() == 1 {
            return Ok(vec![self.forward(g, xs[0])?]);
        }
        let shapes: Vec<Vec<usize>> = xs.iter().map(|&x| g.shape(x).to_vec()).collect();
        let flat: Vec<Var> = xs
            .iter()
            .zip(&shapes)
            .map(|(&x, s)| {
                let rows = s.iter().product::<usize>() / self.channels;
                g.reshape(x, &[rows, self.channels])
            })
            .collect::<Result<_>>()?;
        let joined = g.concat_rows(&flat)?;
        let normed = self.forward(g, joined)?;
        let mut out = Vec::with_capacity(xs.len());
        let mut start = 0;
        for s in &shapes {
            let rows = s.iter().product::<usize>() / self.channels;
            let part = g.slice_rows(normed, start, rows)?;
            out.push(g.reshape(part, s)?);
            start += rows;
        }
        Ok(out)
    }
}

/// Weights of a standard (non-peephole) LSTM cell with gate order
/// `[input | forget | cell | output]`.
#[derive(Clone, Debug)]
pub struct LstmWeights {
    pub wx: ParamId,
    pub wh: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub hidden: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

/// Forget-gate bias at initialization.
pub const FORGET_BIAS: f64 = 1.0;

fn lstm_bias(hidden: usize) -> Tensor {
    let mut b = Tensor::zeros(&[4 * hidden]);
    b.data_mut()[hidden..2 * hidden].fill(FORGET_BIAS);
    b
}

impl LstmWeights {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, input: usize, hidden: usize) -> Result<Self> {
        let wx = store.add_glorot(format!("{name}/wx"), input, 4 * hidden, ParamKind::LstmWeight, rng)?;
        let wh = store.add_glorot(format!("{name}/wh"), hidden, 4 * hidden, ParamKind::LstmWeight, rng)?;
        let b = store.add(format!("{name}/b"), lstm_bias(hidden), ParamKind::LstmBias)?;
        Ok(LstmWeights {
            wx,
            wh,
            b,
            input,
            hidden,
        })
    }

    pub fn zero_state(&self, g: &mut Graph) -> LstmState {
        let h = g.constant(Tensor::zeros(&[1, self.hidden]));
        let c = g.constant(Tensor::zeros(&[1, self.hidden]));
        LstmState { h, c }
    }

    fn cell(&self, g: &mut Graph, z: Var, c: Var) -> Result<LstmState> {
        let hc = g.lstm_cell(z, c)?;
        let h = g.slice_cols(hc, 0, self.hidden)?;
        let c = g.slice_cols(hc, self.hidden, self.hidden)?;
        Ok(LstmState { h, c })
    }

    /// Runs the cell over the rows of `xs` (`T × input`), returning `T × hidden`
    /// outputs in input order. `reverse` processes time backwards.
    pub fn run(&self, g: &mut Graph, xs: Var, reverse: bool) -> Result<Var> {
        if g.value(xs).cols() != self.input {
            return Err(Error::dim(
                "lstm",
                format!("input {:?} does not match input size {}", g.shape(xs), self.input),
            ));
        }
        let t_len = g.value(xs).rows();
        let wx = g.param(self.wx)?;
        let xz = g.matmul(xs, wx)?;
        let b = g.param(self.b)?;
        let xz = g.add_bias(xz, b)?;
        let wh = g.param(self.wh)?;
        let mut state = self.zero_state(g);
        let mut outs = vec![None; t_len];
        for k in 0..t_len {
            let t = if reverse { t_len - 1 - k } else { k };
            let zx = g.slice_rows(xz, t, 1)?;
            let z = if k == 0 {
                zx
            } else {
                let zh = g.matmul(state.h, wh)?;
                g.add(zx, zh)?
            };
            state = self.cell(g, z, state.c)?;
            outs[t] = Some(state.h);
        }
        let outs: Vec<Var> = outs.into_iter().map(|v| v.expect("every step visited")).collect();
        g.concat_rows(&outs)
    }
}

/// A single LSTM step: `x` is `1 × input`.
pub fn lstm_step(g: &mut Graph, x: Var, state: &LstmState, w: &LstmWeights) -> Result<LstmState> {
    let (hs, cs) = (g.shape(state.h).to_vec(), g.shape(state.c).to_vec());
    if hs != [1, w.hidden] || cs != [1, w.hidden] {
        return Err(Error::dim(
            "lstm_step",
            format!("state shapes {hs:?}/{cs:?} do not match hidden size {}", w.hidden),
        ));
    }
    if g.shape(x) != [1, w.input] {
        return Err(Error::dim(
            "lstm_step",
            format!("input {:?} does not match input size {}", g.shape(x), w.input),
        ));
    }
    let wx = g.param(w.wx)?;
    let wh = g.param(w.wh)?;
    let b = g.param(w.b)?;
    let zx = g.matmul(x, wx)?;
    let zh = g.matmul(state.h, wh)?;
    let z = g.add(zx, zh)?;
    let z = g.add_bias(z, b)?;
    w.cell(g, z, state.c)
}

#[derive(Clone, Debug)]
pub struct BiLstm {
    pub fw: LstmWeights,
    pub bw: LstmWeights,
}

impl BiLstm {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, input: usize, hidden: usize) -> Result<Self> {
        Ok(BiLstm {
            fw: LstmWeights::new(store, rng, &format!("{name}/fw"), input, hidden)?,
            bw: LstmWeights::new(store, rng, &format!("{name}/bw"), input, hidden)?,
        })
    }

    /// `T × input` to `T × 2·hidden` (forward outputs first).
    pub fn forward(&self, g: &mut Graph, xs: Var) -> Result<Var> {
        let f = self.fw.run(g, xs, false)?;
        let b = self.bw.run(g, xs, true)?;
        g.concat_cols(&[f, b])
    }
}

#[derive(Clone, Debug)]
pub struct Conv2dLayer {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub stride: (usize, usize),
}

impl Conv2dLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        kernel: (usize, usize),
        in_ch: usize,
        out_ch: usize,
        stride: (usize, usize),
    ) -> Result<Self> {
        let (kh, kw) = kernel;
        let kernel = store.add_glorot_shaped(
            format!("{name}/kernel"),
            &[kh, kw, in_ch, out_ch],
            kh * kw * in_ch,
            kh * kw * out_ch,
            ParamKind::ConvKernel,
            rng,
        )?;
        let bias = store.add(format!("{name}/b"), Tensor::zeros(&[out_ch]), ParamKind::Bias)?;
        Ok(Conv2dLayer { kernel, bias, stride })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let k = g.param(self.kernel)?;
        let y = g.conv2d(x, k, self.stride)?;
        let b = g.param(self.bias)?;
        g.add_bias(y, b)
    }
}

/// One direction of a convolutional LSTM whose gates convolve across the
/// frequency axis only (`1 × width` filters, same padding).
#[derive(Clone, Debug)]
pub struct ConvLstmDir {
    pub wx: ParamId,
    pub wh: ParamId,
    pub b: ParamId,
    pub channels: usize,
    pub filters: usize,
}

impl ConvLstmDir {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        channels: usize,
        filters: usize,
        width: usize,
    ) -> Result<Self> {
        let wx = store.add_glorot_shaped(
            format!("{name}/wx"),
            &[1, width, channels, 4 * filters],
            width * channels,
            width * 4 * filters,
            ParamKind::LstmWeight,
            rng,
        )?;
        let wh = store.add_glorot_shaped(
            format!("{name}/wh"),
            &[1, width, filters, 4 * filters],
            width * filters,
            width * 4 * filters,
            ParamKind::LstmWeight,
            rng,
        )?;
        let b = store.add(format!("{name}/b"), lstm_bias(filters), ParamKind::LstmBias)?;
        Ok(ConvLstmDir {
            wx,
            wh,
            b,
            channels,
            filters,
        })
    }

    /// `T × F × C` to `(T·F) × filters`, rows in input time order.
    fn run(&self, g: &mut Graph, x: Var, reverse: bool) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let (t_len, freq) = (shape[0], shape[1]);
        let nf = self.filters;
        let wx = g.param(self.wx)?;
        let xz = g.conv2d(x, wx, (1, 1))?;
        let b = g.param(self.b)?;
        let xz = g.add_bias(xz, b)?;
        let xz = g.reshape(xz, &[t_len, freq * 4 * nf])?;
        let wh = g.param(self.wh)?;
        let mut h: Option<Var> = None;
        let mut c = g.constant(Tensor::zeros(&[freq, nf]));
        let mut outs = vec![None; t_len];
        for k in 0..t_len {
            let t = if reverse { t_len - 1 - k } else { k };
            let zx = g.slice_rows(xz, t, 1)?;
            let zx = g.reshape(zx, &[freq, 4 * nf])?;
            let z = match h {
                None => zx,
                Some(hp) => {
                    let hp = g.reshape(hp, &[1, freq, nf])?;
                    let zh = g.conv2d(hp, wh, (1, 1))?;
                    let zh = g.reshape(zh, &[freq, 4 * nf])?;
                    g.add(zx, zh)?
                }
            };
            let hc = g.lstm_cell(z, c)?;
            let hn = g.slice_cols(hc, 0, nf)?;
            c = g.slice_cols(hc, nf, nf)?;
            h = Some(hn);
            outs[t] = Some(hn);
        }
        let outs: Vec<Var> = outs.into_iter().map(|v| v.expect("every step visited")).collect();
        g.concat_rows(&outs)
    }
}

#[derive(Clone, Debug)]
pub struct ConvLstm {
    pub fw: ConvLstmDir,
    pub bw: ConvLstmDir,
}

impl ConvLstm {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        channels: usize,
        filters: usize,
        width: usize,
    ) -> Result<Self> {
        Ok(ConvLstm {
            fw: ConvLstmDir::new(store, rng, &format!("{name}/fw"), channels, filters, width)?,
            bw: ConvLstmDir::new(store, rng, &format!("{name}/bw"), channels, filters, width)?,
        })
    }

    pub fn output_depth(&self) -> usize {
        2 * self.fw.filters
    }

    /// Bidirectional conv-LSTM over time: `T × F × C` to `T × F × 2·filters`,
    /// forward direction first along depth.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.fw.channels {
            return Err(Error::dim(
                "conv_lstm",
                format!("input {shape:?} does not have {} channels", self.fw.channels),
            ));
        }
        let f = self.fw.run(g, x, false)?;
        let b = self.bw.run(g, x, true)?;
        let y = g.concat_cols(&[f, b])?;
        g.reshape(y, &[shape[0], shape[1], 2 * self.fw.filters])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check_params, Mode};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sig(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    // Straight-line gate equations, written independently of the graph.
    fn reference_step(x: &[f64], h: &[f64], c: &[f64], wx: &Tensor, wh: &Tensor, b: &Tensor) -> (Vec<f64>, Vec<f64>) {
        let n = h.len();
        let mut z = b.data().to_vec();
        for (j, zj) in z.iter_mut().enumerate() {
            for (i, xi) in x.iter().enumerate() {
                *zj += xi * wx.at(&[i, j]);
            }
            for (i, hi) in h.iter().enumerate() {
                *zj += hi * wh.at(&[i, j]);
            }
        }
        let mut h2 = vec![0.0; n];
        let mut c2 = vec![0.0; n];
        for u in 0..n {
            let i = sig(z[u]);
            let f = sig(z[n + u]);
            let gg = z[2 * n + u].tanh();
            let o = sig(z[3 * n + u]);
            c2[u] = f * c[u] + i * gg;
            h2[u] = o * c2[u].tanh();
        }
        (h2, c2)
    }

    #[test]
    fn lstm_step_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let w = LstmWeights::new(&mut store, &mut rng, "cell", 3, 4).unwrap();
        *store.value_mut(w.b) = random(&mut rng, &[16]);
        let x = random(&mut rng, &[1, 3]);
        let h = random(&mut rng, &[1, 4]);
        let c = random(&mut rng, &[1, 4]);
        let mut g = Graph::with_params(&store, Mode::Infer);
        let xv = g.constant(x.clone());
        let st = LstmState {
            h: g.constant(h.clone()),
            c: g.constant(c.clone()),
        };
        let out = lstm_step(&mut g, xv, &st, &w).unwrap();
        let (rh, rc) = reference_step(x.data(), h.data(), c.data(), store.value(w.wx), store.value(w.wh), store.value(w.b));
        for u in 0..4 {
            assert!((g.value(out.h).data()[u] - rh[u]).abs() < 1e-12);
            assert!((g.value(out.c).data()[u] - rc[u]).abs() < 1e-12);
            assert!(g.value(out.h).data()[u].abs() < 1.0);
        }
    }

    #[test]
    fn saturated_forget_gate_keeps_cell() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let w = LstmWeights::new(&mut store, &mut rng, "cell", 2, 3).unwrap();
        *store.value_mut(w.wx) = Tensor::zeros(&[2, 12]);
        *store.value_mut(w.wh) = Tensor::zeros(&[3, 12]);
        let mut b = Tensor::zeros(&[12]);
        b.data_mut()[0..3].fill(-50.0);
        b.data_mut()[3..6].fill(50.0);
        *store.value_mut(w.b) = b;
        let mut g = Graph::with_params(&store, Mode::Infer);
        let x = g.constant(Tensor::row(vec![0.3, -0.8]));
        let c = Tensor::row(vec![0.5, -1.5, 2.0]);
        let st = LstmState {
            h: g.constant(Tensor::zeros(&[1, 3])),
            c: g.constant(c.clone()),
        };
        let out = lstm_step(&mut g, x, &st, &w).unwrap();
        assert!(g.value(out.c).max_abs_diff(&c) < 1e-12);
    }

    #[test]
    fn lstm_step_rejects_bad_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let w = LstmWeights::new(&mut store, &mut rng, "cell", 2, 3).unwrap();
        let mut g = Graph::with_params(&store, Mode::Infer);
        let x = g.constant(Tensor::row(vec![0.3, -0.8]));
        let st = LstmState {
            h: g.constant(Tensor::zeros(&[1, 4])),
            c: g.constant(Tensor::zeros(&[1, 3])),
        };
        assert!(matches!(lstm_step(&mut g, x, &st, &w), Err(Error::Dimension { .. })));
    }

    #[test]
    fn lstm_step_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let w = LstmWeights::new(&mut store, &mut rng, "cell", 3, 4).unwrap();
        let x = random(&mut rng, &[1, 3]);
        let h = random(&mut rng, &[1, 4]);
        let c = random(&mut rng, &[1, 4]);
        let r = grad_check_params(
            &store,
            Mode::Train,
            |g| {
                let xv = g.constant(x.clone());
                let st = LstmState {
                    h: g.constant(h.clone()),
                    c: g.constant(c.clone()),
                };
                let out = lstm_step(g, xv, &st, &w)?;
                let both = g.concat_cols(&[out.h, out.c])?;
                Ok(g.sum(both))
            },
            1e-5,
            100,
            0,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn conv_lstm_zero_weights_and_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let layer = ConvLstm::new(&mut store, &mut rng, "clstm", 32, 32, 3).unwrap();
        let x = random(&mut rng, &[25, 20, 32]);
        let mut g = Graph::with_params(&store, Mode::Infer);
        let xv = g.constant(x.clone());
        let y = layer.forward(&mut g, xv).unwrap();
        assert_eq!(g.shape(y), &[25, 20, 64]);

        let mut zero = store.clone();
        for id in store.ids() {
            zero.value_mut(id).data_mut().fill(0.0);
        }
        let mut g = Graph::with_params(&zero, Mode::Infer);
        let xv = g.constant(x);
        let y = layer.forward(&mut g, xv).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_lstm_time_reversal_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let layer = ConvLstm::new(&mut store, &mut rng, "clstm", 2, 3, 3).unwrap();
        // Mirror the forward weights into the backward direction.
        for (f, b) in [(layer.fw.wx, layer.bw.wx), (layer.fw.wh, layer.bw.wh), (layer.fw.b, layer.bw.b)] {
            *store.value_mut(b) = store.value(f).clone();
        }
        let (t_len, freq, nf) = (6, 5, 3);
        let x = random(&mut rng, &[t_len, freq, 2]);
        let mut xr = x.clone();
        let row = freq * 2;
        for t in 0..t_len {
            xr.data_mut()[t * row..(t + 1) * row].copy_from_slice(&x.data()[(t_len - 1 - t) * row..(t_len - t) * row]);
        }
        let run = |input: &Tensor| {
            let mut g = Graph::with_params(&store, Mode::Infer);
            let v = g.constant(input.clone());
            let y = layer.forward(&mut g, v).unwrap();
            g.value(y).clone()
        };
        let (y, yr) = (run(&x), run(&xr));
        for t in 0..t_len {
            for f in 0..freq {
                for d in 0..nf {
                    let a = y.at(&[t, f, d]);
                    let b = yr.at(&[t_len - 1 - t, f, nf + d]);
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn conv_lstm_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let layer = ConvLstm::new(&mut store, &mut rng, "clstm", 2, 2, 3).unwrap();
        let x = random(&mut rng, &[4, 5, 2]);
        let r = grad_check_params(
            &store,
            Mode::Train,
            |g| {
                let v = g.constant(x.clone());
                let y = layer.forward(g, v)?;
                let sq = g.mul(y, y)?;
                Ok(g.sum(sq))
            },
            1e-5,
            100,
            0,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn batch_norm_pools_over_sequences() {
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 1).unwrap();
        let mut g = Graph::with_params(&store, Mode::Train);
        let a = g.constant(Tensor::new(vec![1, 1], vec![1.0]).unwrap());
        let b = g.constant(Tensor::new(vec![1, 1], vec![3.0]).unwrap());
        let out = bn.forward_batch(&mut g, &[a, b]).unwrap();
        assert!((g.value(out[0]).data()[0] + 0.999995).abs() < 1e-6);
        assert!((g.value(out[1]).data()[0] - 0.999995).abs() < 1e-6);
    }
}
