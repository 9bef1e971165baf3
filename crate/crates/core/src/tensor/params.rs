use rand::Rng;

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NormId(pub usize);

/// What a parameter is used for. Drives weight-noise and L2 scope.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Dense weight matrix (projections, attention networks, output layer).
    Weight,
    Bias,
    /// Input or recurrent weights of an LSTM or conv-LSTM cell.
    LstmWeight,
    LstmBias,
    ConvKernel,
    DecoderEmbedding,
    TextEmbedding,
    NormScale,
    NormShift,
}

impl ParamKind {
    /// Receives Gaussian weight noise during training.
    pub fn is_noisy(self) -> bool {
        matches!(self, ParamKind::LstmWeight | ParamKind::DecoderEmbedding)
    }

    pub fn is_bias_like(self) -> bool {
        matches!(
            self,
            ParamKind::Bias | ParamKind::LstmBias | ParamKind::NormScale | ParamKind::NormShift
        )
    }

    pub fn tag(self) -> &'static str {
        match self {
            ParamKind::Weight => "weight",
            ParamKind::Bias => "bias",
            ParamKind::LstmWeight => "lstm_weight",
            ParamKind::LstmBias => "lstm_bias",
            ParamKind::ConvKernel => "conv_kernel",
            ParamKind::DecoderEmbedding => "decoder_embedding",
            ParamKind::TextEmbedding => "text_embedding",
            ParamKind::NormScale => "norm_scale",
            ParamKind::NormShift => "norm_shift",
        }
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub kind: ParamKind,
}

/// Running moments of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub name: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub initialized: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    norms: Vec<NormStats>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, kind: ParamKind) -> Result<ParamId> {
        let name = name.into();
        if self.params.iter().any(|p| p.name == name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        self.params.push(Param { name, value, kind });
        Ok(ParamId(self.params.len() - 1))
    }

    /// Glorot-uniform initialized matrix `[fan_in, fan_out]`.
    pub fn add_glorot<R: Rng>(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        kind: ParamKind,
        rng: &mut R,
    ) -> Result<ParamId> {
        self.add_glorot_shaped(name, &[fan_in, fan_out], fan_in, fan_out, kind, rng)
    }

    pub fn add_glorot_shaped<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        fan_out: usize,
        kind: ParamKind,
        rng: &mut R,
    ) -> Result<ParamId> {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        self.add_uniform(name, shape, limit, kind, rng)
    }

    pub fn add_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        limit: f64,
        kind: ParamKind,
        rng: &mut R,
    ) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-limit..=limit)).collect();
        self.add(name, Tensor::new(shape.to_vec(), data)?, kind)
    }

    pub fn add_norm(&mut self, name: impl Into<String>, channels: usize) -> NormId {
        self.norms.push(NormStats {
            name: name.into(),
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            initialized: false,
        });
        NormId(self.norms.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Scalar count of parameters whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.value.len())
            .sum()
    }

    pub fn norm(&self, id: NormId) -> &NormStats {
        &self.norms[id.0]
    }

    pub fn norms(&self) -> &[NormStats] {
        &self.norms
    }

    pub fn norms_mut(&mut self) -> &mut [NormStats] {
        &mut self.norms
    }

    /// Folds batch statistics into the running moments:
    /// `running = momentum · running + (1 − momentum) · batch`. The first
    /// update seeds the moments with the batch statistics.
    pub fn apply_norm_updates(&mut self, updates: &[super::NormUpdate], momentum: f64) {
        for u in updates {
            let s = &mut self.norms[u.id.0];
            if !s.initialized {
                s.mean.clone_from(&u.mean);
                s.var.clone_from(&u.var);
                s.initialized = true;
                continue;
            }
            for (r, b) in s.mean.iter_mut().zip(&u.mean) {
                *r = momentum * *r + (1.0 - momentum) * b;
            }
            for (r, b) in s.var.iter_mut().zip(&u.var) {
                *r = momentum * *r + (1.0 - momentum) * b;
            }
        }
    }
}

/// Per-parameter gradients produced by [`super::Graph::param_grads`].
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn new(n: usize) -> Self {
        Gradients {
            grads: vec![None; n],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn set(&mut self, id: ParamId, g: Tensor) {
        if self.grads.len() <= id.0 {
            self.grads.resize(id.0 + 1, None);
        }
        self.grads[id.0] = Some(g);
    }

    /// Adds `g` into the slot for `id`.
    pub fn accumulate(&mut self, id: ParamId, g: &Tensor) {
        if self.grads.len() <= id.0 {
            self.grads.resize(id.0 + 1, None);
        }
        match &mut self.grads[id.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            slot => *slot = Some(g.clone()),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    pub fn global_norm(&self) -> f64 {
        self.iter().map(|(_, g)| g.norm_sq()).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
}
