//! Patch encoder with strided skip taps, channel-concatenation fusion with
//! stop-gradient on the shallowest taps, and class-token attention maps.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::{Rng, Tape, Tensor, Var};
use crate::emit;
use crate::error::{Error, Result};
use crate::glyph::{DenseBatch, DENSE_CLASSES};
use crate::nn::{AttentionTrace, Block, Bound, Linear, Mlp, ParamId, ParamStore, Span};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub total_blocks: usize,
    pub stride: usize,
    pub detach_count: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub patch_size: usize,
    pub image_size: usize,
    /// Initial multiplier on tapped features; each tap's gain is
    /// `skip_scale · exp(θ)` with a learned `θ` starting at 0.
    pub skip_scale: f64,
    pub mlp_ratio: usize,
    pub dropout: f64,
    pub class_token: bool,
    /// Start every encoder block as the identity map.
    pub identity_init: bool,
    pub adapter_hidden: usize,
    pub num_classes: usize,
    /// Weight of an auxiliary patch-pixel reconstruction loss (0 disables).
    pub aux_weight: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            total_blocks: 8,
            stride: 2,
            detach_count: 0,
            hidden_dim: 16,
            num_heads: 2,
            patch_size: 8,
            image_size: 32,
            skip_scale: 1.0,
            mlp_ratio: 2,
            dropout: 0.0,
            class_token: true,
            identity_init: false,
            adapter_hidden: 32,
            num_classes: DENSE_CLASSES,
            aux_weight: 0.0,
        }
    }
}

impl FusionConfig {
    /// Tapped block indices `S, 2S, ...` (1-based), shallow to deep.
    pub fn tap_layers(&self) -> Vec<usize> {
        if self.stride == 0 {
            return Vec::new();
        }
        (1..=self.total_blocks / self.stride)
            .map(|i| i * self.stride)
            .collect()
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size.max(1)
    }

    pub fn patches_per_image(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn tokens_per_image(&self) -> usize {
        self.patches_per_image() + usize::from(self.class_token)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.total_blocks == 0 || self.stride == 0 || self.hidden_dim == 0 {
            return bad("total_blocks, stride and hidden_dim must be positive".into());
        }
        if self.num_heads == 0 || !self.hidden_dim.is_multiple_of(self.num_heads) {
            return bad(format!(
                "hidden_dim {} not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            ));
        }
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return bad(format!(
                "patch_size {} must divide image_size {}",
                self.patch_size, self.image_size
            ));
        }
        if !self.skip_scale.is_finite() || self.skip_scale < 0.0 {
            return bad(format!(
                "skip_scale {} must be finite and >= 0",
                self.skip_scale
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidProbability(self.dropout));
        }
        select_skip_layers(self).map(|_| ())
    }
}

/// Split the tap set into (detached, live): the `D` shallowest taps are
/// detached.
pub fn select_skip_layers(cfg: &FusionConfig) -> Result<(Vec<usize>, Vec<usize>)> {
    if cfg.stride == 0 {
        return Err(Error::InvalidConfig("stride must be positive".into()));
    }
    let taps = cfg.tap_layers();
    if cfg.detach_count > taps.len() {
        return Err(Error::InvalidConfig(format!(
            "detach_count {} exceeds the {} taps of stride {} over {} blocks",
            cfg.detach_count,
            taps.len(),
            cfg.stride,
            cfg.total_blocks
        )));
    }
    let live = taps[cfg.detach_count..].to_vec();
    let mut detached = taps;
    detached.truncate(cfg.detach_count);
    Ok((detached, live))
}

/// Encoder outputs recorded on a tape.
#[derive(Clone, Debug)]
pub struct EncoderTaps {
    pub main: Var,
    /// `(block index, features)`, shallow to deep.
    pub taps: Vec<(usize, Var)>,
}

/// How many of the shallowest taps pass through stop-gradient.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Detach {
    /// Use the configured count.
    Configured,
    /// Detach every tap (main path only).
    All,
    Count(usize),
}

impl Detach {
    fn resolve(self, configured: usize, taps: usize) -> usize {
        match self {
            Detach::Configured => configured.min(taps),
            Detach::All => taps,
            Detach::Count(n) => n.min(taps),
        }
    }
}

/// Concatenate `[main, taps...]` along channels, multiplying each tap by
/// its `1×1` gain and stopping the gradient through the `detach` shallowest
/// taps. The gains themselves stay trainable.
pub fn fuse_features(
    tape: &mut Tape,
    taps: &EncoderTaps,
    gains: &[Var],
    detach: usize,
) -> Result<Var> {
    if gains.len() != taps.taps.len() {
        return Err(Error::LengthMismatch(gains.len(), taps.taps.len()));
    }
    let mut parts = vec![taps.main];
    for (i, (&(_, h), &g)) in taps.taps.iter().zip(gains).enumerate() {
        let h = if i < detach {
            tape.stop_gradient(h)?
        } else {
            h
        };
        let ones = tape.constant(Tensor::full([1, tape.value(h).cols()], 1.0))?;
        let row = tape.matmul(g, ones)?;
        parts.push(tape.mul_broadcast(h, row)?);
    }
    tape.concat_channels(&parts)
}

/// Row-stacked patch pixels and per-patch labels for one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseInput {
    pub batch: usize,
    /// `batch·patches × patch²`.
    pub patches: Tensor,
    pub labels: Vec<usize>,
}

impl DenseInput {
    pub fn from_batch(batch: &DenseBatch, patch: usize) -> Result<Self> {
        let mut rows = Vec::new();
        let mut ncols = 0;
        for img in &batch.images {
            let p = img.patches(patch)?;
            ncols = p.cols();
            rows.extend(p.into_data());
        }
        let n = rows.len() / ncols.max(1);
        Ok(Self {
            batch: batch.images.len(),
            patches: Tensor::matrix(n, ncols, rows)?,
            labels: batch.labels.concat(),
        })
    }
}

/// Tape values produced by one loss pass.
#[derive(Clone, Debug)]
pub struct PassOutput {
    pub loss: Var,
    /// Features at each tapped block before fusion.
    pub tap_values: Vec<Tensor>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FusionModel {
    pub cfg: FusionConfig,
    pub store: ParamStore,
    patch_embed: Linear,
    pos: ParamId,
    cls: Option<ParamId>,
    blocks: Vec<Block>,
    adapter: Mlp,
    /// Log-gain of each tap, `1×1`.
    log_gains: Vec<ParamId>,
    head: Linear,
    aux_head: Option<Linear>,
}

impl FusionModel {
    pub fn new(cfg: FusionConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.hidden_dim;
        let mut store = ParamStore::new();
        let patch_dim = cfg.patch_size * cfg.patch_size;
        let patch_embed = Linear::new(&mut store, "embed.patch", patch_dim, d, rng);
        let pos = store.add(
            "embed.pos",
            Tensor::randn([cfg.patches_per_image(), d], 0.02, rng),
        );
        let cls = cfg
            .class_token
            .then(|| store.add("embed.cls", Tensor::randn([1, d], 0.02, rng)));
        let mut blocks = Vec::with_capacity(cfg.total_blocks);
        for l in 1..=cfg.total_blocks {
            let b = Block::new(
                &mut store,
                &format!("encoder.block{l}"),
                d,
                cfg.num_heads,
                cfg.mlp_ratio,
                cfg.dropout,
                rng,
            )?;
            if cfg.identity_init {
                b.make_identity(&mut store);
            }
            blocks.push(b);
        }
        let fused = d * (1 + cfg.tap_layers().len());
        let adapter = Mlp::new(&mut store, "adapter", (fused, cfg.adapter_hidden, d), rng);
        let log_gains = cfg
            .tap_layers()
            .iter()
            .map(|l| store.add(format!("adapter.gain{l}"), Tensor::zeros([1, 1])))
            .collect();
        let head = Linear::new(&mut store, "head", d, cfg.num_classes, rng);
        let aux_head =
            (cfg.aux_weight > 0.0).then(|| Linear::new(&mut store, "aux_head", d, patch_dim, rng));
        Ok(Self {
            cfg,
            store,
            patch_embed,
            pos,
            cls,
            blocks,
            adapter,
            log_gains,
            head,
            aux_head,
        })
    }

    pub fn block_params(&self, layer: usize) -> Vec<ParamId> {
        self.store.with_prefix(&format!("encoder.block{layer}."))
    }

    /// Current multiplier of each tap.
    pub fn tap_gains(&self) -> Vec<f64> {
        self.log_gains
            .iter()
            .map(|&id| self.cfg.skip_scale * self.store.get(id).item().exp())
            .collect()
    }

    pub fn encoder_params(&self) -> Vec<ParamId> {
        self.store.with_prefix("encoder.")
    }

    pub fn spans(&self, batch: usize) -> Vec<Span> {
        Span::uniform(batch, self.cfg.tokens_per_image())
    }

    /// Project patches, add positions and prepend the class token per image.
    pub fn embed(&self, tape: &mut Tape, p: &Bound, patches: &Tensor, batch: usize) -> Result<Var> {
        let n = self.cfg.patches_per_image();
        if patches.rows() != batch * n {
            return Err(Error::shape(
                "embed",
                format!("{} patch rows for batch {batch} of {n}", patches.rows()),
            ));
        }
        let x = tape.constant(patches.clone())?;
        let x = self.patch_embed.forward(tape, p, x)?;
        let x = tape.add_broadcast(x, p.var(self.pos))?;
        let Some(cls) = self.cls else { return Ok(x) };
        let mut parts = Vec::with_capacity(2 * batch);
        for b in 0..batch {
            parts.push(p.var(cls));
            parts.push(tape.slice_rows(x, b * n, (b + 1) * n)?);
        }
        tape.concat_rows(&parts)
    }

    /// Run every block, recording the tapped outputs. `trace` captures the
    /// attention of one block (1-based index).
    pub fn encode_with_taps(
        &self,
        tape: &mut Tape,
        p: &Bound,
        tokens: Var,
        spans: &[Span],
        rng: &mut Rng,
        mut trace: Option<(usize, &mut AttentionTrace)>,
    ) -> Result<EncoderTaps> {
        let cols = tape.value(tokens).cols();
        if cols != self.cfg.hidden_dim {
            return Err(Error::shape(
                "encode_with_taps",
                format!("token dim {cols} vs hidden {}", self.cfg.hidden_dim),
            ));
        }
        let taps_at = self.cfg.tap_layers();
        let mut x = tokens;
        let mut taps = Vec::with_capacity(taps_at.len());
        for (i, block) in self.blocks.iter().enumerate() {
            let layer = i + 1;
            let t = match trace.as_mut() {
                Some((l, t)) if *l == layer => Some(&mut **t),
                _ => None,
            };
            x = block.forward(tape, p, x, spans, rng, t)?;
            if taps_at.contains(&layer) {
                taps.push((layer, x));
            }
        }
        Ok(EncoderTaps { main: x, taps })
    }

    /// Adapter over the fused channels.
    pub fn fuse(
        &self,
        tape: &mut Tape,
        p: &Bound,
        taps: &EncoderTaps,
        detach: Detach,
    ) -> Result<Var> {
        let want = self.cfg.hidden_dim * (1 + taps.taps.len());
        let d = detach.resolve(self.cfg.detach_count, taps.taps.len());
        let gains = self
            .log_gains
            .iter()
            .map(|&id| {
                let g = tape.exp(p.var(id))?;
                tape.scale(g, self.cfg.skip_scale)
            })
            .collect::<Result<Vec<_>>>()?;
        let cat = fuse_features(tape, taps, &gains, d)?;
        let got = tape.value(cat).cols();
        if got != want || got != self.store.get(self.adapter.fc1.w).rows() {
            return Err(Error::shape(
                "fuse",
                format!("adapter input {got} vs {want}"),
            ));
        }
        self.adapter.forward(tape, p, cat)
    }

    fn patch_rows(&self, batch: usize) -> Vec<usize> {
        let t = self.cfg.tokens_per_image();
        let off = usize::from(self.cfg.class_token);
        (0..batch)
            .flat_map(|b| (0..self.cfg.patches_per_image()).map(move |i| b * t + off + i))
            .collect()
    }

    /// Dense per-patch classification loss (plus the optional auxiliary
    /// reconstruction term).
    pub fn dense_loss(
        &self,
        tape: &mut Tape,
        p: &Bound,
        input: &DenseInput,
        rng: &mut Rng,
        detach: Detach,
    ) -> Result<PassOutput> {
        let tokens = self.embed(tape, p, &input.patches, input.batch)?;
        let spans = self.spans(input.batch);
        let taps = self.encode_with_taps(tape, p, tokens, &spans, rng, None)?;
        let z = self.fuse(tape, p, &taps, detach)?;
        let z = tape.gather_rows(z, &self.patch_rows(input.batch))?;
        let logits = self.head.forward(tape, p, z)?;
        let mut loss = tape.cross_entropy(logits, &input.labels)?;
        if let Some(aux) = &self.aux_head {
            let recon = aux.forward(tape, p, z)?;
            let mse = tape.mse_loss(recon, &input.patches)?;
            let mse = tape.scale(mse, self.cfg.aux_weight)?;
            loss = tape.add(loss, mse)?;
        }
        let tap_values = taps
            .taps
            .iter()
            .map(|&(_, v)| tape.value(v).clone())
            .collect();
        Ok(PassOutput { loss, tap_values })
    }

    /// Class-token attention of block `layer` (1-based) for one image given
    /// as `patches × patch²` pixels.
    pub fn attention_map(&self, layer: usize, patches: &Tensor) -> Result<AttentionMap> {
        if !self.cfg.class_token {
            return Err(Error::NoClassToken);
        }
        if layer == 0 || layer > self.cfg.total_blocks {
            return Err(Error::OutOfBounds(format!(
                "block {layer} of {}",
                self.cfg.total_blocks
            )));
        }
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, |_| false)?;
        let tokens = self.embed(&mut tape, &p, patches, 1)?;
        let mut trace = AttentionTrace::default();
        let mut rng = Rng::seed_from(0);
        self.encode_with_taps(
            &mut tape,
            &p,
            tokens,
            &self.spans(1),
            &mut rng,
            Some((layer, &mut trace)),
        )?;
        let heads = &trace.probs[0];
        let n = self.cfg.patches_per_image();
        let mut scores = vec![0.0; n];
        for h in heads {
            for (s, v) in scores.iter_mut().zip(&h.row(0)[1..]) {
                *s += v / heads.len() as f64;
            }
        }
        AttentionMap::from_scores(&scores, self.cfg.grid(), self.cfg.grid(), layer)
    }
}

/// Min-max normalized patch scores on the patch grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionMap {
    pub block: usize,
    pub rows: usize,
    pub cols: usize,
    pub grid: Vec<f64>,
}

impl AttentionMap {
    /// Normalize raster-order scores to `[0, 1]`. A constant map becomes all
    /// zeros.
    pub fn from_scores(scores: &[f64], rows: usize, cols: usize, block: usize) -> Result<Self> {
        if scores.len() != rows * cols {
            return Err(Error::shape(
                "attention_map",
                format!("{} scores for {rows}x{cols}", scores.len()),
            ));
        }
        let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let range = hi - lo;
        let grid = scores
            .iter()
            .map(|&s| {
                if range > 0.0 {
                    ((s - lo) / range).clamp(0.0, 1.0)
                } else {
                    0.0
                }
            })
            .collect();
        Ok(Self {
            block,
            rows,
            cols,
            grid,
        })
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.grid[r * self.cols + c]
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample(&self, factor: usize) -> (usize, usize, Vec<f64>) {
        let (h, w) = (self.rows * factor, self.cols * factor);
        let px = (0..h * w)
            .map(|i| self.at(i / w / factor, i % w / factor))
            .collect();
        (w, h, px)
    }

    pub fn write_pgm(&self, path: &Path, factor: usize) -> Result<()> {
        let (w, h, px) = self.upsample(factor.max(1));
        emit::write_pgm(path, w, h, &px)
    }
}

/// Scalar chain `h_k = w_k · h_{k-1}` with taps every `stride` blocks and a
/// linear adapter `z = a_main·h_K + Σ a_i·tap_i`.
#[derive(Clone, Debug)]
pub struct LinearChainModel {
    pub store: ParamStore,
    pub stride: usize,
    pub detach_count: usize,
    weights: Vec<ParamId>,
    main_gain: ParamId,
    tap_gains: Vec<ParamId>,
}

impl LinearChainModel {
    pub fn new(weights: &[f64], stride: usize, main_gain: f64, tap_gains: &[f64]) -> Result<Self> {
        if stride == 0 {
            return Err(Error::InvalidConfig("stride must be positive".into()));
        }
        let taps = weights.len() / stride;
        if tap_gains.len() != taps {
            return Err(Error::LengthMismatch(tap_gains.len(), taps));
        }
        let mut store = ParamStore::new();
        let weights = weights
            .iter()
            .enumerate()
            .map(|(k, &w)| store.add(format!("chain.w{}", k + 1), Tensor::scalar(w)))
            .collect();
        let main_gain = store.add("adapter.main", Tensor::scalar(main_gain));
        let tap_gains = tap_gains
            .iter()
            .enumerate()
            .map(|(i, &a)| store.add(format!("adapter.tap{}", i + 1), Tensor::scalar(a)))
            .collect();
        Ok(Self {
            store,
            stride,
            detach_count: 0,
            weights,
            main_gain,
            tap_gains,
        })
    }

    pub fn weight_ids(&self) -> &[ParamId] {
        &self.weights
    }

    pub fn tap_layers(&self) -> Vec<usize> {
        (1..=self.weights.len() / self.stride)
            .map(|i| i * self.stride)
            .collect()
    }

    /// `z` for input `x`, detaching the `detach` shallowest taps.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x: f64,
        detach: Detach,
    ) -> Result<PassOutput> {
        let mut h = tape.constant(Tensor::scalar(x))?;
        let mut taps = Vec::new();
        for (k, &w) in self.weights.iter().enumerate() {
            h = tape.mul(p.var(w), h)?;
            if (k + 1) % self.stride == 0 {
                taps.push((k + 1, h));
            }
        }
        let d = detach.resolve(self.detach_count, taps.len());
        let mut z = tape.mul(p.var(self.main_gain), h)?;
        for (i, &(_, t)) in taps.iter().enumerate() {
            let t = if i < d { tape.stop_gradient(t)? } else { t };
            let term = tape.mul(p.var(self.tap_gains[i]), t)?;
            z = tape.add(z, term)?;
        }
        let tap_values = taps.iter().map(|&(_, v)| tape.value(v).clone()).collect();
        Ok(PassOutput {
            loss: z,
            tap_values,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::glyph::downstream_task_batch;
    use crate::glyph::DatasetSpec;

    fn cfg(k: usize, s: usize, d: usize) -> FusionConfig {
        FusionConfig {
            total_blocks: k,
            stride: s,
            detach_count: d,
            ..FusionConfig::default()
        }
    }

    #[test]
    fn skip_layer_partition() {
        assert_eq!(
            select_skip_layers(&cfg(24, 6, 2)).unwrap(),
            (vec![6, 12], vec![18, 24])
        );
        assert_eq!(
            select_skip_layers(&cfg(24, 12, 0)).unwrap(),
            (vec![], vec![12, 24])
        );
        assert_eq!(
            select_skip_layers(&cfg(8, 3, 1)).unwrap(),
            (vec![3], vec![6])
        );
        assert!(select_skip_layers(&cfg(4, 6, 1)).is_err());
        assert_eq!(select_skip_layers(&cfg(4, 6, 0)).unwrap(), (vec![], vec![]));
        assert!(select_skip_layers(&cfg(4, 0, 0)).is_err());
    }

    fn input(model: &FusionModel, batch: usize) -> DenseInput {
        let spec = DatasetSpec::default();
        DenseInput::from_batch(
            &downstream_task_batch(&spec, 0, batch).unwrap(),
            model.cfg.patch_size,
        )
        .unwrap()
    }

    #[test]
    fn taps_at_stride_and_identity_passthrough() {
        let c = FusionConfig {
            total_blocks: 4,
            stride: 2,
            identity_init: true,
            ..FusionConfig::default()
        };
        let model = FusionModel::new(c, &mut Rng::seed_from(1)).unwrap();
        let inp = input(&model, 2);
        let mut tape = Tape::new();
        let p = model.store.bind(&mut tape, |_| true).unwrap();
        let tokens = model.embed(&mut tape, &p, &inp.patches, 2).unwrap();
        let taps = model
            .encode_with_taps(
                &mut tape,
                &p,
                tokens,
                &model.spans(2),
                &mut Rng::seed_from(0),
                None,
            )
            .unwrap();
        assert_eq!(
            taps.taps.iter().map(|t| t.0).collect::<Vec<_>>(),
            vec![2, 4]
        );
        for &(_, v) in &taps.taps {
            assert_eq!(tape.value(v), tape.value(tokens));
        }
        assert_eq!(tape.value(taps.main), tape.value(tokens));
    }

    #[test]
    fn fused_value_is_independent_of_detach_count() {
        let model = FusionModel::new(cfg(4, 1, 0), &mut Rng::seed_from(2)).unwrap();
        let inp = input(&model, 2);
        let run = |d: usize| {
            let mut tape = Tape::new();
            let p = model.store.bind(&mut tape, |_| true).unwrap();
            let out = model
                .dense_loss(
                    &mut tape,
                    &p,
                    &inp,
                    &mut Rng::seed_from(0),
                    Detach::Count(d),
                )
                .unwrap();
            tape.value(out.loss).item()
        };
        let base = run(0);
        for d in 1..=4 {
            assert_eq!(run(d).to_bits(), base.to_bits());
        }
    }

    #[test]
    fn minmax_examples() {
        let m = AttentionMap::from_scores(&[0.1, 0.2, 0.3, 0.4], 2, 2, 1).unwrap();
        let want = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
        for (g, w) in m.grid.iter().zip(want) {
            assert!((g - w).abs() < 1e-12);
        }
        let flat = AttentionMap::from_scores(&[0.25; 4], 2, 2, 1).unwrap();
        assert!(flat.grid.iter().all(|&v| v == 0.0));
        let mut one_hot = vec![0.0; 16];
        one_hot[2 * 4 + 3] = 0.7;
        let m = AttentionMap::from_scores(&one_hot, 4, 4, 1).unwrap();
        assert_eq!(m.at(2, 3), 1.0);
        assert_eq!(m.grid.iter().filter(|&&v| v != 0.0).count(), 1);
        let (w, h, px) = m.upsample(2);
        assert_eq!((w, h), (8, 8));
        assert_eq!(px[5 * 8 + 7], 1.0);
    }

    #[test]
    fn attention_export_needs_class_token() {
        let c = FusionConfig {
            class_token: false,
            ..FusionConfig::default()
        };
        let model = FusionModel::new(c, &mut Rng::seed_from(3)).unwrap();
        let inp = input(&model, 1);
        assert!(matches!(
            model.attention_map(1, &inp.patches),
            Err(Error::NoClassToken)
        ));
    }

    #[test]
    fn attention_export_in_unit_range() {
        let model = FusionModel::new(FusionConfig::default(), &mut Rng::seed_from(4)).unwrap();
        let inp = input(&model, 1);
        let m = model.attention_map(2, &inp.patches).unwrap();
        assert_eq!(m.grid.len(), 16);
        assert!(m.grid.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(model.attention_map(9, &inp.patches).is_err());
    }
}
