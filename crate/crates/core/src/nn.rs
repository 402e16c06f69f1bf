//! Parameter storage, the handful of layers the toy models need, and AdamW.

use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Rng, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered parameter tensors owned by a model.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Ids whose name starts with `prefix`, in storage order.
    pub fn with_prefix(&self, prefix: &str) -> Vec<ParamId> {
        self.ids()
            .filter(|&id| self.names[id.0].starts_with(prefix))
            .collect()
    }

    pub fn numel(&self, ids: &[ParamId]) -> usize {
        ids.iter().map(|&id| self.tensors[id.0].len()).sum()
    }

    /// Record every parameter on `tape`; `trainable` decides which ones
    /// require gradients.
    pub fn bind(&self, tape: &mut Tape, trainable: impl Fn(&str) -> bool) -> Result<Bound> {
        let mut vars = Vec::with_capacity(self.tensors.len());
        let mut live = Vec::with_capacity(self.tensors.len());
        for (name, t) in self.names.iter().zip(&self.tensors) {
            let on = trainable(name);
            vars.push(tape.leaf(t.clone(), on)?);
            live.push(on);
        }
        Ok(Bound { vars, live })
    }

    /// Digest over the selected parameters' bytes.
    pub fn checksum(&self, ids: &[ParamId]) -> u64 {
        let mut acc = 0xcbf2_9ce4_8422_2325u64;
        for &id in ids {
            acc = acc.rotate_left(7) ^ self.tensors[id.0].checksum();
        }
        acc
    }
}

/// Parameters recorded on one tape.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
    live: Vec<bool>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Per-parameter gradients; `None` for parameters bound as constants.
    pub fn grads(&self, g: &Gradients) -> Vec<Option<Tensor>> {
        self.vars
            .iter()
            .zip(&self.live)
            .map(|(&v, &on)| on.then(|| g.wrt(v)))
            .collect()
    }
}

/// Flatten the gradients of `ids` into one vector in id order.
pub fn flatten_grads(grads: &[Option<Tensor>], store: &ParamStore, ids: &[ParamId]) -> Vec<f64> {
    let mut out = Vec::with_capacity(store.numel(ids));
    for &id in ids {
        match &grads[id.0] {
            Some(g) => out.extend_from_slice(g.data()),
            None => out.extend(std::iter::repeat_n(0.0, store.get(id).len())),
        }
    }
    out
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    /// Gaussian weights with std `1/sqrt(fan_in)`, zero bias.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut Rng,
    ) -> Self {
        let std = 1.0 / (fan_in as f64).sqrt();
        Self::with_weight(
            store,
            name,
            Tensor::randn(vec![fan_in, fan_out], std, rng),
            true,
        )
    }

    pub fn zeros(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Self::with_weight(store, name, Tensor::zeros(vec![fan_in, fan_out]), true)
    }

    pub fn with_weight(store: &mut ParamStore, name: &str, weight: Tensor, bias: bool) -> Self {
        let fan_out = weight.cols();
        let w = store.add(format!("{name}.w"), weight);
        let b = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(vec![1, fan_out])));
        Self { w, b }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p.var(self.w))?;
        match self.b {
            Some(b) => tape.add_broadcast(y, p.var(b)),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(vec![1, dim], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(vec![1, dim])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let n = tape.layer_norm(x)?;
        let s = tape.mul_broadcast(n, p.var(self.gamma))?;
        tape.add_broadcast(s, p.var(self.beta))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dims: (usize, usize, usize),
        rng: &mut Rng,
    ) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dims.0, dims.1, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), dims.1, dims.2, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, p, x)?;
        let h = tape.gelu(h)?;
        self.fc2.forward(tape, p, h)
    }
}

/// One sequence inside a row-stacked batch.
#[derive(Clone, Debug)]
pub struct Span {
    pub start: usize,
    pub len: usize,
    /// Rotary angles, `len × head_dim/2`, applied to queries and keys.
    pub angles: Option<Tensor>,
}

impl Span {
    pub fn uniform(batch: usize, len: usize) -> Vec<Span> {
        (0..batch)
            .map(|b| Span {
                start: b * len,
                len,
                angles: None,
            })
            .collect()
    }
}

/// Attention probabilities captured during a forward pass: `[span][head]`.
#[derive(Clone, Debug, Default)]
pub struct AttentionTrace {
    pub probs: Vec<Vec<Tensor>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Attention {
    pub qkv: Linear,
    pub proj: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl Attention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::InvalidConfig(format!(
                "dim {dim} not divisible into {heads} heads"
            )));
        }
        Ok(Self {
            qkv: Linear::new(store, &format!("{name}.qkv"), dim, 3 * dim, rng),
            proj: Linear::new(store, &format!("{name}.proj"), dim, dim, rng),
            heads,
            dim,
        })
    }

    /// Full (non-causal) multi-head attention within each span.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x: Var,
        spans: &[Span],
        mut trace: Option<&mut AttentionTrace>,
    ) -> Result<Var> {
        let qkv = self.qkv.forward(tape, p, x)?;
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(spans.len());
        for span in spans {
            let rows = tape.slice_rows(qkv, span.start, span.start + span.len)?;
            let mut heads = Vec::with_capacity(self.heads);
            let mut probs = Vec::new();
            for h in 0..self.heads {
                let mut q = tape.slice_cols(rows, h * dh, (h + 1) * dh)?;
                let mut k = tape.slice_cols(rows, self.dim + h * dh, self.dim + (h + 1) * dh)?;
                let v =
                    tape.slice_cols(rows, 2 * self.dim + h * dh, 2 * self.dim + (h + 1) * dh)?;
                if let Some(angles) = &span.angles {
                    q = tape.rotary(q, angles)?;
                    k = tape.rotary(k, angles)?;
                }
                let kt = tape.transpose(k)?;
                let s = tape.matmul(q, kt)?;
                let s = tape.scale(s, scale)?;
                let a = tape.softmax(s)?;
                if trace.is_some() {
                    probs.push(tape.value(a).clone());
                }
                heads.push(tape.matmul(a, v)?);
            }
            if let Some(t) = trace.as_deref_mut() {
                t.probs.push(probs);
            }
            outs.push(tape.concat_channels(&heads)?);
        }
        let merged = tape.concat_rows(&outs)?;
        self.proj.forward(tape, p, merged)
    }
}

/// Pre-norm transformer block: attention then MLP, each with a residual.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
    pub dropout: f64,
}

impl Block {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        dropout: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            attn: Attention::new(store, &format!("{name}.attn"), dim, heads, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            mlp: Mlp::new(
                store,
                &format!("{name}.mlp"),
                (dim, dim * mlp_ratio, dim),
                rng,
            ),
            dropout,
        })
    }

    /// Zero the residual-branch output projections so the block is the identity.
    pub fn make_identity(&self, store: &mut ParamStore) {
        for lin in [&self.attn.proj, &self.mlp.fc2] {
            store.get_mut(lin.w).data_mut().fill(0.0);
            if let Some(b) = lin.b {
                store.get_mut(b).data_mut().fill(0.0);
            }
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x: Var,
        spans: &[Span],
        rng: &mut Rng,
        trace: Option<&mut AttentionTrace>,
    ) -> Result<Var> {
        let h = self.ln1.forward(tape, p, x)?;
        let h = self.attn.forward(tape, p, h, spans, trace)?;
        let h = tape.dropout(h, self.dropout, rng)?;
        let x = tape.add(x, h)?;
        let h = self.ln2.forward(tape, p, x)?;
        let h = self.mlp.forward(tape, p, h)?;
        let h = tape.dropout(h, self.dropout, rng)?;
        tape.add(x, h)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// AdamW with decoupled weight decay on matrix-shaped parameters.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    steps: Vec<u64>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, store: &ParamStore) -> Self {
        let zeros = || {
            store
                .ids()
                .map(|id| Tensor::zeros(store.get(id).shape().to_vec()))
                .collect()
        };
        Self {
            cfg,
            m: zeros(),
            v: zeros(),
            steps: vec![0; store.len()],
        }
    }

    /// Apply one update at learning rate `lr`; parameters whose gradient is
    /// `None` are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>], lr: f64) {
        let c = self.cfg;
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            self.steps[i] += 1;
            let t = self.steps[i] as i32;
            let bc1 = 1.0 - c.beta1.powi(t);
            let bc2 = 1.0 - c.beta2.powi(t);
            let param = store.get_mut(ParamId(i));
            let decay = param.rows() > 1 && param.cols() > 1;
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, (w, &gj)) in param.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + c.eps);
                if decay {
                    *w -= lr * c.weight_decay * *w;
                }
                *w -= lr * update;
            }
        }
    }
}

/// SGD with heavy-ball momentum and decoupled weight decay on matrices.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    buf: Vec<Tensor>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64, store: &ParamStore) -> Self {
        Self {
            momentum,
            weight_decay,
            buf: store
                .ids()
                .map(|id| Tensor::zeros(store.get(id).shape().to_vec()))
                .collect(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>], lr: f64) {
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let param = store.get_mut(ParamId(i));
            let decay = param.rows() > 1 && param.cols() > 1;
            let buf = self.buf[i].data_mut();
            for (j, (w, &gj)) in param.data_mut().iter_mut().zip(g.data()).enumerate() {
                buf[j] = self.momentum * buf[j] + gj;
                if decay {
                    *w -= lr * self.weight_decay * *w;
                }
                *w -= lr * buf[j];
            }
        }
    }
}

/// Linear warmup over `warmup_ratio` of `total` steps, then cosine decay to 0
/// when `cosine` is set (constant otherwise).
pub fn scheduled_lr(base: f64, step: usize, total: usize, warmup_ratio: f64, cosine: bool) -> f64 {
    let warm = (warmup_ratio * total as f64).round() as usize;
    if step < warm {
        return base * (step + 1) as f64 / warm as f64;
    }
    if !cosine || total <= warm {
        return base;
    }
    let progress = (step - warm) as f64 / (total - warm) as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}
