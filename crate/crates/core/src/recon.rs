//! Reconstruction probe: a frozen patch encoder and adapter feed a shallow
//! decoder that must repaint a target band from context, text and the
//! band's own visual tokens.

use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{Rng, Tape, Tensor, Var};
use crate::emit::{self, json17};
use crate::error::{Error, Result};
use crate::glyph::{probe_dataset, DatasetSpec, ReconSample, VOCAB};
use crate::nn::{AdamW, AdamWConfig, Block, Bound, LayerNorm, Linear, ParamId, ParamStore, Span};
use crate::pathwise::moving_average;

/// Merged tokens cover `MERGE × MERGE` encoder patches.
pub const MERGE: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum HeadInit {
    Random,
    /// Zero weights and every bias set to the value.
    Constant(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    /// Depth of the language model the decoder stands in for.
    pub lm_depth: usize,
    /// Defaults to `ceil(lm_depth / 4)`.
    pub decoder_depth: Option<usize>,
    pub tau: f64,
    pub max_steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub freeze_encoder: bool,
    pub freeze_adapter: bool,
    pub image_size: usize,
    pub patch_size: usize,
    pub encoder_dim: usize,
    pub encoder_depth: usize,
    pub encoder_heads: usize,
    pub decoder_heads: usize,
    pub max_text: usize,
    pub head_init: HeadInit,
    /// Horizon of the moving average applied before thresholding.
    pub smoothing: usize,
    pub encoder_seed: u64,
    pub train_count: usize,
    pub eval_count: usize,
    pub data_seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            lm_depth: 8,
            decoder_depth: None,
            tau: 0.06,
            max_steps: 600,
            lr: 3e-3,
            batch_size: 8,
            freeze_encoder: true,
            freeze_adapter: true,
            image_size: 32,
            patch_size: 4,
            encoder_dim: 8,
            encoder_depth: 2,
            encoder_heads: 2,
            decoder_heads: 4,
            max_text: 8,
            head_init: HeadInit::Random,
            smoothing: 20,
            encoder_seed: 7,
            train_count: 1024,
            eval_count: 128,
            data_seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn decoder_depth(&self) -> usize {
        self.decoder_depth
            .unwrap_or(self.lm_depth.div_ceil(4))
            .max(1)
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn merged_grid(&self) -> usize {
        self.grid() / MERGE
    }

    /// Channel width of a merged token, which is also the decoder width.
    pub fn token_dim(&self) -> usize {
        self.encoder_dim * MERGE * MERGE
    }

    /// Pixel side of the image region under one merged token.
    pub fn cell(&self) -> usize {
        self.patch_size * MERGE
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return bad("patch_size must divide image_size");
        }
        if !self.grid().is_multiple_of(MERGE) {
            return bad("patch grid must be even for 2x2 merging");
        }
        if self.decoder_heads == 0 || !self.token_dim().is_multiple_of(self.decoder_heads) {
            return bad("decoder heads must divide the token width");
        }
        if !(self.token_dim() / self.decoder_heads).is_multiple_of(4) {
            return bad("decoder head width must be a multiple of 4 for 2D rotary");
        }
        if self.tau.is_nan() || self.tau <= 0.0 {
            return bad("tau must be positive");
        }
        if self.batch_size == 0 || self.lm_depth == 0 {
            return bad("batch_size and lm_depth must be positive");
        }
        Ok(())
    }
}

/// Training and held-out probe samples drawn from disjoint seeds.
pub fn probe_splits(cfg: &ProbeConfig) -> Result<(Vec<ReconSample>, Vec<ReconSample>)> {
    let spec = |seed, count| DatasetSpec {
        seed,
        count,
        image_size: cfg.image_size,
        ..DatasetSpec::default()
    };
    Ok((
        probe_dataset(&spec(cfg.data_seed, cfg.train_count))?,
        probe_dataset(&spec(cfg.data_seed ^ 0x5eed_e7a1, cfg.eval_count))?,
    ))
}

/// Concatenate each 2×2 block of a row-major `grid_h × grid_w` patch grid
/// (per image, `batch` images stacked) along channels: top-left, top-right,
/// bottom-left, bottom-right.
pub fn merge_patches(
    tape: &mut Tape,
    x: Var,
    grid_h: usize,
    grid_w: usize,
    batch: usize,
) -> Result<Var> {
    if !grid_h.is_multiple_of(MERGE) || !grid_w.is_multiple_of(MERGE) {
        return Err(Error::shape(
            "merge_patches",
            format!("grid {grid_h}x{grid_w} is not even"),
        ));
    }
    let per = grid_h * grid_w;
    if tape.value(x).rows() != per * batch {
        return Err(Error::shape(
            "merge_patches",
            format!("{} rows for {batch} grids of {per}", tape.value(x).rows()),
        ));
    }
    let mut corners = Vec::with_capacity(4);
    for (dr, dc) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
        let rows: Vec<usize> = (0..batch)
            .flat_map(|b| {
                (0..grid_h / 2).flat_map(move |r| {
                    (0..grid_w / 2).map(move |c| b * per + (2 * r + dr) * grid_w + 2 * c + dc)
                })
            })
            .collect();
        corners.push(tape.gather_rows(x, &rows)?);
    }
    tape.concat_channels(&corners)
}

/// Position of a token in the merged grid of the original image.
pub type Coord = (usize, usize);

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceLayout {
    pub context_len: usize,
    pub text_len: usize,
    pub target_len: usize,
    /// `None` for text tokens.
    pub coords: Vec<Option<Coord>>,
    /// Rotary angles, one row per token, `head_dim / 2` columns.
    pub angles: Tensor,
}

impl SequenceLayout {
    pub fn len(&self) -> usize {
        self.context_len + self.text_len + self.target_len
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Start indices of the text and target segments.
    pub fn boundaries(&self) -> (usize, usize) {
        (self.context_len, self.context_len + self.text_len)
    }
}

/// Angles of a 2D rotary embedding: the first half of the pairs rotate with
/// the row, the second half with the column.
pub fn rotary_angles(coord: Option<Coord>, head_dim: usize) -> Vec<f64> {
    let pairs = head_dim / 2;
    let half = pairs / 2;
    let Some((r, c)) = coord else {
        return vec![0.0; pairs];
    };
    (0..pairs)
        .map(|j| {
            let (pos, k) = if j < half { (r, j) } else { (c, j - half) };
            pos as f64 / 10f64.powf(k as f64 / half.max(1) as f64)
        })
        .collect()
}

/// Order tokens as `[context, text, target]`. Angles come from each image
/// token's coordinate in the original grid, so they move with the token.
pub fn build_sequence(
    context: &[Coord],
    text_len: usize,
    target: &[Coord],
    head_dim: usize,
) -> Result<SequenceLayout> {
    if target.is_empty() {
        return Err(Error::Precondition("empty target segment".into()));
    }
    let coords: Vec<Option<Coord>> = context
        .iter()
        .map(|&c| Some(c))
        .chain(std::iter::repeat_n(None, text_len))
        .chain(target.iter().map(|&c| Some(c)))
        .collect();
    let data = coords
        .iter()
        .flat_map(|&c| rotary_angles(c, head_dim))
        .collect();
    Ok(SequenceLayout {
        context_len: context.len(),
        text_len,
        target_len: target.len(),
        angles: Tensor::matrix(coords.len(), head_dim / 2, data)?,
        coords,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum AdapterKind {
    Identity,
    /// Orthogonal projection onto a fixed `width`-dimensional subspace;
    /// subspaces of smaller widths are nested in larger ones.
    Bottleneck {
        width: usize,
        seed: u64,
    },
}

/// Seed shared by the bottleneck sweep so its subspaces nest.
pub const BOTTLENECK_SEED: u64 = 3;

impl AdapterKind {
    pub fn bottleneck(width: usize) -> Self {
        AdapterKind::Bottleneck {
            width,
            seed: BOTTLENECK_SEED,
        }
    }

    pub fn label(&self) -> String {
        match self {
            AdapterKind::Identity => "identity".into(),
            AdapterKind::Bottleneck { width, .. } => format!("bottleneck{width}"),
        }
    }

    pub fn matrix(&self, dim: usize) -> Result<Tensor> {
        match *self {
            AdapterKind::Identity => Ok(Tensor::identity(dim)),
            AdapterKind::Bottleneck { width, seed } => {
                if width == 0 || width > dim {
                    return Err(Error::InvalidConfig(format!(
                        "bottleneck width {width} of {dim}"
                    )));
                }
                let mut rng = Rng::with_stream(seed, 0xada9);
                let g = DMatrix::from_fn(dim, dim, |_, _| rng.normal());
                let q = g.qr().q();
                let u = q.columns(0, width);
                let p = u * u.transpose();
                Tensor::matrix(
                    dim,
                    dim,
                    (0..dim * dim).map(|i| p[(i / dim, i % dim)]).collect(),
                )
            }
        }
    }
}

/// Frozen patch encoder plus adapter.
#[derive(Clone, Debug)]
pub struct ProbeBackbone {
    pub store: ParamStore,
    pub kind: AdapterKind,
    patch_embed: Linear,
    pos: ParamId,
    blocks: Vec<Block>,
    adapter: Linear,
    grid: usize,
}

impl ProbeBackbone {
    /// The encoder depends only on `cfg.encoder_seed`, so every adapter
    /// shares it.
    pub fn new(cfg: &ProbeConfig, kind: AdapterKind) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::with_stream(cfg.encoder_seed, 0xe2c);
        let mut store = ParamStore::new();
        let d = cfg.encoder_dim;
        let patch_embed = Linear::new(
            &mut store,
            "encoder.patch",
            cfg.patch_size * cfg.patch_size,
            d,
            &mut rng,
        );
        let pos = store.add(
            "encoder.pos",
            Tensor::randn([cfg.grid() * cfg.grid(), d], 0.02, &mut rng),
        );
        let blocks = (1..=cfg.encoder_depth)
            .map(|l| {
                Block::new(
                    &mut store,
                    &format!("encoder.block{l}"),
                    d,
                    cfg.encoder_heads,
                    2,
                    0.0,
                    &mut rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let adapter = Linear::with_weight(
            &mut store,
            "adapter.proj",
            kind.matrix(cfg.token_dim())?,
            false,
        );
        Ok(Self {
            store,
            kind,
            patch_embed,
            pos,
            blocks,
            adapter,
            grid: cfg.grid(),
        })
    }

    pub fn encoder_ids(&self) -> Vec<ParamId> {
        self.store.with_prefix("encoder.")
    }

    pub fn adapter_ids(&self) -> Vec<ParamId> {
        self.store.with_prefix("adapter.")
    }

    /// Adapted merged tokens, `batch · merged² × token_dim`, raster order.
    pub fn encode(
        &self,
        tape: &mut Tape,
        p: &Bound,
        patches: &Tensor,
        batch: usize,
    ) -> Result<Var> {
        let x = tape.constant(patches.clone())?;
        let x = self.patch_embed.forward(tape, p, x)?;
        let mut x = tape.add_broadcast(x, p.var(self.pos))?;
        let spans = Span::uniform(batch, self.grid * self.grid);
        let mut rng = Rng::seed_from(0);
        for b in &self.blocks {
            x = b.forward(tape, p, x, &spans, &mut rng, None)?;
        }
        let merged = merge_patches(tape, x, self.grid, self.grid, batch)?;
        self.adapter.forward(tape, p, merged)
    }
}

/// A sample prepared for the probe.
#[derive(Clone, Debug)]
pub struct ProbeItem {
    pub patches: Tensor,
    pub text: Vec<usize>,
    pub target_cells: Vec<Coord>,
    /// `target tokens × cell²` pixels of the unmasked target.
    pub target_pixels: Tensor,
    /// Adapted merged tokens, filled in when the backbone is frozen.
    pub features: Option<Tensor>,
}

impl ProbeItem {
    pub fn new(sample: &ReconSample, cfg: &ProbeConfig) -> Result<Self> {
        let cell = cfg.cell();
        let r = sample.target_rect;
        if !r.x.is_multiple_of(cell)
            || !r.y.is_multiple_of(cell)
            || !r.width.is_multiple_of(cell)
            || !r.height.is_multiple_of(cell)
        {
            return Err(Error::InvalidConfig(format!(
                "target rect {r:?} not aligned to {cell}-pixel tokens"
            )));
        }
        let target_cells: Vec<Coord> = (0..r.height / cell)
            .flat_map(|i| (0..r.width / cell).map(move |j| (r.y / cell + i, r.x / cell + j)))
            .collect();
        if target_cells.is_empty() {
            return Err(Error::Precondition("empty target segment".into()));
        }
        let mut text = sample.text.clone();
        text.truncate(cfg.max_text);
        Ok(Self {
            patches: sample.context.patches(cfg.patch_size)?,
            text,
            target_cells,
            target_pixels: sample.target.patches(cell)?,
            features: None,
        })
    }
}

/// Trainable decoder and pixel head.
#[derive(Clone, Debug)]
pub struct ProbeDecoder {
    pub store: ParamStore,
    text_embed: ParamId,
    text_pos: ParamId,
    segments: ParamId,
    blocks: Vec<Block>,
    norm: LayerNorm,
    head: Linear,
    heads: usize,
}

impl ProbeDecoder {
    pub fn new(cfg: &ProbeConfig, seed: u64) -> Result<Self> {
        let mut rng = Rng::with_stream(seed, 0xdec);
        let d = cfg.token_dim();
        let mut store = ParamStore::new();
        let text_embed = store.add("decoder.text", Tensor::randn([VOCAB, d], 0.5, &mut rng));
        let text_pos = store.add(
            "decoder.text_pos",
            Tensor::randn([cfg.max_text, d], 0.5, &mut rng),
        );
        let segments = store.add("decoder.segments", Tensor::randn([3, d], 0.5, &mut rng));
        let blocks = (1..=cfg.decoder_depth())
            .map(|l| {
                Block::new(
                    &mut store,
                    &format!("decoder.block{l}"),
                    d,
                    cfg.decoder_heads,
                    2,
                    0.0,
                    &mut rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let norm = LayerNorm::new(&mut store, "decoder.norm", d);
        let px = cfg.cell() * cfg.cell();
        let head = match cfg.head_init {
            HeadInit::Random => Linear::new(&mut store, "head", d, px, &mut rng),
            HeadInit::Constant(v) => {
                let lin = Linear::zeros(&mut store, "head", d, px);
                if let Some(b) = lin.b {
                    store.get_mut(b).data_mut().fill(v);
                }
                lin
            }
        };
        Ok(Self {
            store,
            text_embed,
            text_pos,
            segments,
            blocks,
            norm,
            head,
            heads: cfg.decoder_heads,
        })
    }

    /// Per-token pixel predictions for the target segments of a batch.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        tokens: Var,
        items: &[&ProbeItem],
        merged: usize,
    ) -> Result<Var> {
        let d = tape.value(tokens).cols();
        let per = merged * merged;
        let context: Vec<Coord> = (0..per).map(|i| (i / merged, i % merged)).collect();
        let seg: Vec<Var> = (0..3)
            .map(|i| tape.slice_rows(p.var(self.segments), i, i + 1))
            .collect::<Result<_>>()?;
        let mut rows = Vec::new();
        let mut spans = Vec::with_capacity(items.len());
        let mut target_rows = Vec::new();
        let mut start = 0;
        for (b, item) in items.iter().enumerate() {
            let layout = build_sequence(
                &context,
                item.text.len(),
                &item.target_cells,
                d / self.heads,
            )?;
            let ctx = tape.slice_rows(tokens, b * per, (b + 1) * per)?;
            rows.push(tape.add_broadcast(ctx, seg[0])?);
            if !item.text.is_empty() {
                let t = tape.embed_lookup(p.var(self.text_embed), &item.text)?;
                let pos = tape.slice_rows(p.var(self.text_pos), 0, item.text.len())?;
                let t = tape.add(t, pos)?;
                rows.push(tape.add_broadcast(t, seg[1])?);
            }
            let idx: Vec<usize> = item
                .target_cells
                .iter()
                .map(|&(r, c)| b * per + r * merged + c)
                .collect();
            let tgt = tape.gather_rows(tokens, &idx)?;
            rows.push(tape.add_broadcast(tgt, seg[2])?);
            let (_, target_start) = layout.boundaries();
            target_rows.extend((0..layout.target_len).map(|i| start + target_start + i));
            spans.push(Span {
                start,
                len: layout.len(),
                angles: Some(layout.angles),
            });
            start += spans.last().map_or(0, |s| s.len);
        }
        let mut x = tape.concat_rows(&rows)?;
        let mut rng = Rng::seed_from(0);
        for b in &self.blocks {
            x = b.forward(tape, p, x, &spans, &mut rng, None)?;
        }
        let x = self.norm.forward(tape, p, x)?;
        let x = tape.gather_rows(x, &target_rows)?;
        self.head.forward(tape, p, x)
    }
}

/// Backbone, decoder and decoder optimizer for one probe run.
#[derive(Clone, Debug)]
pub struct Probe {
    pub cfg: ProbeConfig,
    pub backbone: ProbeBackbone,
    pub decoder: ProbeDecoder,
    opt: AdamW,
    backbone_opt: AdamW,
    frozen_sum: u64,
}

impl Probe {
    pub fn new(cfg: &ProbeConfig, kind: AdapterKind, seed: u64) -> Result<Self> {
        let backbone = ProbeBackbone::new(cfg, kind)?;
        let decoder = ProbeDecoder::new(cfg, seed)?;
        let adam = AdamWConfig {
            lr: cfg.lr,
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut probe = Self {
            opt: AdamW::new(adam, &decoder.store),
            backbone_opt: AdamW::new(adam, &backbone.store),
            cfg: cfg.clone(),
            backbone,
            decoder,
            frozen_sum: 0,
        };
        probe.frozen_sum = probe.frozen_checksum();
        Ok(probe)
    }

    fn frozen_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        if self.cfg.freeze_encoder {
            ids.extend(self.backbone.encoder_ids());
        }
        if self.cfg.freeze_adapter {
            ids.extend(self.backbone.adapter_ids());
        }
        ids
    }

    /// Digest of every parameter the config declares frozen.
    pub fn frozen_checksum(&self) -> u64 {
        self.backbone.store.checksum(&self.frozen_ids())
    }

    fn check_frozen(&self) -> Result<()> {
        if self.frozen_checksum() != self.frozen_sum {
            return Err(Error::FreezeViolation(
                "frozen encoder or adapter parameters changed".into(),
            ));
        }
        Ok(())
    }

    fn backbone_trainable(&self, name: &str) -> bool {
        (name.starts_with("encoder.") && !self.cfg.freeze_encoder)
            || (name.starts_with("adapter.") && !self.cfg.freeze_adapter)
    }

    fn frozen(&self) -> bool {
        self.cfg.freeze_encoder && self.cfg.freeze_adapter
    }

    /// Precompute backbone tokens for every item; a no-op unless the whole
    /// backbone is frozen.
    pub fn cache_features(&self, items: &mut [ProbeItem]) -> Result<()> {
        if !self.frozen() {
            return Ok(());
        }
        let per = self.cfg.merged_grid() * self.cfg.merged_grid();
        for chunk in items.chunks_mut(32) {
            let mut tape = Tape::new();
            let pb = self.backbone.store.bind(&mut tape, |_| false)?;
            let patches = stack_rows(chunk.iter().map(|i| &i.patches))?;
            let tokens = self
                .backbone
                .encode(&mut tape, &pb, &patches, chunk.len())?;
            let v = tape.value(tokens);
            let width = v.cols() * per;
            for (b, item) in chunk.iter_mut().enumerate() {
                let rows = v.data()[b * width..(b + 1) * width].to_vec();
                item.features = Some(Tensor::matrix(per, v.cols(), rows)?);
            }
        }
        Ok(())
    }

    fn tokens(&self, tape: &mut Tape, pb: &Bound, items: &[&ProbeItem]) -> Result<Var> {
        if self.frozen() && items.iter().all(|i| i.features.is_some()) {
            return tape.constant(stack_rows(
                items.iter().filter_map(|i| i.features.as_ref()),
            )?);
        }
        let patches = stack_rows(items.iter().map(|i| &i.patches))?;
        self.backbone.encode(tape, pb, &patches, items.len())
    }

    fn loss(&self, tape: &mut Tape, items: &[&ProbeItem]) -> Result<(Var, Bound, Bound)> {
        let pb = self
            .backbone
            .store
            .bind(tape, |n| self.backbone_trainable(n))?;
        let pd = self.decoder.store.bind(tape, |_| true)?;
        let tokens = self.tokens(tape, &pb, items)?;
        let pred = self
            .decoder
            .forward(tape, &pd, tokens, items, self.cfg.merged_grid())?;
        let target = stack_rows(items.iter().map(|i| &i.target_pixels))?;
        Ok((tape.mse_loss(pred, &target)?, pb, pd))
    }

    /// Per-token reconstruction MSE without updating anything.
    pub fn evaluate(&self, items: &[&ProbeItem]) -> Result<f64> {
        let mut tape = Tape::new();
        let (loss, _, _) = self.loss(&mut tape, items)?;
        Ok(tape.value(loss).item())
    }

    /// Predicted target pixels, one row per target token.
    pub fn reconstruct(&self, item: &ProbeItem) -> Result<Tensor> {
        let mut tape = Tape::new();
        let pb = self.backbone.store.bind(&mut tape, |_| false)?;
        let pd = self.decoder.store.bind(&mut tape, |_| false)?;
        let tokens = self.tokens(&mut tape, &pb, &[item])?;
        let pred = self
            .decoder
            .forward(&mut tape, &pd, tokens, &[item], self.cfg.merged_grid())?;
        Ok(tape.value(pred).clone())
    }

    /// One optimizer step on the decoder (and any unfrozen backbone part);
    /// returns the pre-update loss.
    pub fn probe_step(&mut self, items: &[&ProbeItem]) -> Result<f64> {
        self.check_frozen()?;
        let mut tape = Tape::new();
        let (loss, pb, pd) = self.loss(&mut tape, items)?;
        let value = tape.value(loss).item();
        let grads = tape.backward(loss)?;
        self.opt
            .step(&mut self.decoder.store, &pd.grads(&grads), self.cfg.lr);
        let bg = pb.grads(&grads);
        if bg.iter().any(Option::is_some) {
            self.backbone_opt
                .step(&mut self.backbone.store, &bg, self.cfg.lr);
        }
        self.check_frozen()?;
        Ok(value)
    }
}

fn stack_rows<'a>(parts: impl Iterator<Item = &'a Tensor>) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut cols = 0;
    for t in parts {
        cols = t.cols();
        data.extend_from_slice(t.data());
    }
    Tensor::matrix(data.len() / cols.max(1), cols, data)
}

/// First 0-based index with `loss < tau`.
pub fn steps_to_threshold(losses: &[f64], tau: f64) -> Option<usize> {
    losses.iter().position(|&l| l < tau)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRun {
    pub run_id: String,
    pub losses: Vec<f64>,
    pub smoothed: Vec<f64>,
    /// Steps until the smoothed training loss drops below `tau`.
    pub steps_to_threshold: Option<usize>,
    /// Held-out per-token MSE after training.
    pub final_loss: f64,
}

impl ProbeRun {
    pub fn jsonl(&self) -> Vec<String> {
        self.losses
            .iter()
            .enumerate()
            .map(|(step, &mse)| {
                format!(
                    "{{\"run_id\":{},\"step\":{step},\"mse\":{}}}",
                    serde_json::Value::String(self.run_id.clone()),
                    json17(mse)
                )
            })
            .collect()
    }
}

/// Train a probe from scratch on `train`, score it on `eval`.
pub fn train_probe(
    cfg: &ProbeConfig,
    kind: AdapterKind,
    train: &[ProbeItem],
    eval: &[ProbeItem],
    seed: u64,
    run_id: &str,
) -> Result<(ProbeRun, Probe)> {
    if train.is_empty() || eval.is_empty() {
        return Err(Error::Precondition(
            "probe needs train and eval items".into(),
        ));
    }
    let mut probe = Probe::new(cfg, kind, seed)?;
    let (mut train, mut eval) = (train.to_vec(), eval.to_vec());
    probe.cache_features(&mut train)?;
    probe.cache_features(&mut eval)?;
    let mut rng = Rng::with_stream(seed, 0xba7c);
    let mut losses = Vec::with_capacity(cfg.max_steps);
    for _ in 0..cfg.max_steps {
        let batch: Vec<&ProbeItem> = (0..cfg.batch_size)
            .map(|_| &train[rng.below(train.len())])
            .collect();
        let loss = probe.probe_step(&batch)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite { op: "probe_step" });
        }
        losses.push(loss);
    }
    let eval_refs: Vec<&ProbeItem> = eval.iter().collect();
    let final_loss = eval_refs
        .chunks(cfg.batch_size.max(1))
        .map(|c| probe.evaluate(c).map(|l| l * c.len() as f64))
        .sum::<Result<f64>>()?
        / eval.len() as f64;
    let smoothed = moving_average(&losses, cfg.smoothing);
    Ok((
        ProbeRun {
            run_id: run_id.to_string(),
            steps_to_threshold: steps_to_threshold(&smoothed, cfg.tau),
            losses,
            smoothed,
            final_loss,
        },
        probe,
    ))
}

pub fn prepare(
    samples: &[ReconSample],
    cfg: &ProbeConfig,
    mask_image: bool,
    drop_text: bool,
) -> Result<Vec<ProbeItem>> {
    samples
        .iter()
        .map(|s| ProbeItem::new(&s.with_flags(mask_image, drop_text), cfg))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mask_image: bool,
    pub drop_text: bool,
    pub run: ProbeRun,
}

/// The four (mask, drop-text) settings, masked rows first, each trained
/// with the same seed and step budget.
pub fn modality_ablation(
    train: &[ReconSample],
    eval: &[ReconSample],
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<Vec<AblationRow>> {
    let settings = [(true, true), (true, false), (false, true), (false, false)];
    settings
        .par_iter()
        .map(|&(mask, drop)| {
            let tr = prepare(train, cfg, mask, drop)?;
            let ev = prepare(eval, cfg, mask, drop)?;
            let id = format!(
                "modality.{}.{}.seed{seed}",
                if mask { "masked" } else { "full" },
                if drop { "notext" } else { "text" }
            );
            let (run, _) = train_probe(cfg, AdapterKind::Identity, &tr, &ev, seed, &id)?;
            Ok(AblationRow {
                mask_image: mask,
                drop_text: drop,
                run,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub adapters: Vec<AdapterKind>,
    pub runs: Vec<ProbeRun>,
    /// Adapter indices sorted by final loss, best first.
    pub ranking: Vec<usize>,
}

/// Probe every adapter on the same data, seed and decoder init.
pub fn adapter_sensitivity(
    train: &[ReconSample],
    eval: &[ReconSample],
    adapters: &[AdapterKind],
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<SensitivityReport> {
    let tr = prepare(train, cfg, false, false)?;
    let ev = prepare(eval, cfg, false, false)?;
    let runs: Vec<ProbeRun> = adapters
        .par_iter()
        .map(|a| {
            let id = format!("adapter.{}.seed{seed}", a.label());
            train_probe(cfg, a.clone(), &tr, &ev, seed, &id).map(|(r, _)| r)
        })
        .collect::<Result<_>>()?;
    let mut ranking: Vec<usize> = (0..runs.len()).collect();
    ranking.sort_by(|&a, &b| runs[a].final_loss.total_cmp(&runs[b].final_loss));
    Ok(SensitivityReport {
        adapters: adapters.to_vec(),
        runs,
        ranking,
    })
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::LengthMismatch(xs.len(), ys.len()));
    }
    let (rx, ry) = (ranks(xs), ranks(ys));
    let n = xs.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (vx * vy).sqrt())
}

/// Write the reconstruction and the ground truth of `item` side by side as
/// PGM files `<stem>.recon.pgm` and `<stem>.target.pgm`.
pub fn write_reconstruction(probe: &Probe, item: &ProbeItem, dir: &Path, stem: &str) -> Result<()> {
    let pred = probe.reconstruct(item)?;
    let cell = probe.cfg.cell();
    let rows = item
        .target_cells
        .iter()
        .map(|c| c.0)
        .collect::<std::collections::BTreeSet<_>>()
        .len();
    let cols = item.target_cells.len() / rows.max(1);
    let (w, h) = (cols * cell, rows * cell);
    let unpatch = |t: &Tensor| -> Vec<f64> {
        let mut px = vec![0.0; w * h];
        for (k, row) in (0..t.rows()).map(|k| (k, t.row(k))) {
            let (tr, tc) = (k / cols, k % cols);
            for (i, v) in row.iter().enumerate() {
                px[(tr * cell + i / cell) * w + tc * cell + i % cell] = *v;
            }
        }
        px
    };
    emit::write_pgm(
        &dir.join(format!("{stem}.recon.pgm")),
        w,
        h,
        &unpatch(&pred),
    )?;
    emit::write_pgm(
        &dir.join(format!("{stem}.target.pgm")),
        w,
        h,
        &unpatch(&item.target_pixels),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn merge_counts_and_layout() {
        let mut tape = Tape::new();
        let x: Vec<f64> = (0..64 * 8).map(|i| (i / 8) as f64).collect();
        let v = tape.constant(Tensor::matrix(64, 8, x).unwrap()).unwrap();
        let m = merge_patches(&mut tape, v, 8, 8, 1).unwrap();
        assert_eq!(tape.value(m).shape(), &[16, 32]);
        let first = tape.value(m).row(0);
        assert_eq!(
            [first[0], first[8], first[16], first[24]],
            [0.0, 1.0, 8.0, 9.0]
        );
        let v = tape.constant(Tensor::zeros([12, 2])).unwrap();
        assert!(merge_patches(&mut tape, v, 3, 4, 1).is_err());
    }

    #[test]
    fn sequence_boundaries() {
        let ctx: Vec<Coord> = (0..16).map(|i| (i / 4, i % 4)).collect();
        let tgt = [(1, 0), (1, 1), (1, 2), (1, 3)];
        let l = build_sequence(&ctx, 3, &tgt, 16).unwrap();
        assert_eq!(l.len(), 23);
        assert_eq!(l.boundaries(), (16, 19));
        let l = build_sequence(&ctx, 0, &tgt, 16).unwrap();
        assert_eq!(l.boundaries(), (16, 16));
        assert!(build_sequence(&ctx, 3, &[], 16).is_err());
    }

    #[test]
    fn threshold_scan() {
        assert_eq!(steps_to_threshold(&[1.0, 0.9, 0.74, 0.8], 0.75), Some(2));
        assert_eq!(steps_to_threshold(&[0.1, 2.0], 0.75), Some(0));
        assert_eq!(steps_to_threshold(&[1.0, 0.75], 0.75), None);
    }

    #[test]
    fn bottleneck_is_a_projection() {
        let p = AdapterKind::Bottleneck { width: 3, seed: 1 }
            .matrix(8)
            .unwrap();
        let m = DMatrix::from_row_slice(8, 8, p.data());
        assert!((&m * &m - &m).norm() < 1e-12);
        assert!((m.trace() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn spearman_examples() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[0.3, 0.2, 0.1]).unwrap() + 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[1.0, 5.0, 9.0]).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_head_on_flat_target_is_exact() {
        let cfg = ProbeConfig {
            head_init: HeadInit::Constant(0.5),
            ..ProbeConfig::default()
        };
        let spec = DatasetSpec {
            count: 2,
            ..DatasetSpec::default()
        };
        let mut items = prepare(&probe_dataset(&spec).unwrap(), &cfg, false, false).unwrap();
        for it in &mut items {
            it.target_pixels.data_mut().fill(0.5);
        }
        let probe = Probe::new(&cfg, AdapterKind::Identity, 0).unwrap();
        let refs: Vec<&ProbeItem> = items.iter().collect();
        assert_eq!(probe.evaluate(&refs).unwrap(), 0.0);
    }

    #[test]
    fn tampering_with_frozen_weights_is_detected() {
        let cfg = ProbeConfig::default();
        let spec = DatasetSpec {
            count: 2,
            ..DatasetSpec::default()
        };
        let items = prepare(&probe_dataset(&spec).unwrap(), &cfg, false, false).unwrap();
        let mut probe = Probe::new(&cfg, AdapterKind::Identity, 0).unwrap();
        let refs: Vec<&ProbeItem> = items.iter().collect();
        let l = probe.probe_step(&refs).unwrap();
        assert!(l > 0.0 && l.is_finite());
        let id = probe.backbone.encoder_ids()[0];
        probe.backbone.store.get_mut(id).data_mut()[0] += 1.0;
        assert!(matches!(
            probe.probe_step(&refs),
            Err(Error::FreezeViolation(_))
        ));
    }
}
