//! Experiment runner: training comparisons, gradient dynamics, the
//! stride/detach grid and the learning-rate sweep.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{Rng, Tape, Tensor};
use crate::emit::{self, fmt17, json17, Panel, PlotSpec, Series};
use crate::error::{Error, Result};
use crate::fusion::{DenseInput, Detach, FusionConfig, FusionModel};
use crate::glyph::{downstream_task_batch, DatasetSpec};
use crate::nn::{scheduled_lr, AdamW, AdamWConfig, ParamStore, Sgd};
use crate::pathwise::{
    assumption_report, decompose, moving_average, transition_step, AssumptionReport, GradSnapshot,
    ParamGroup, SnapshotRecord, TransitionReport, WindowStats,
};
use crate::recon::ProbeConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    AdamW,
    /// Momentum SGD; `beta1` is the momentum.
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerSpec {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_ratio: f64,
    pub cosine: bool,
    pub beta1: f64,
    pub beta2: f64,
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::AdamW,
            lr: 1e-3,
            weight_decay: 0.05,
            warmup_ratio: 0.1,
            cosine: true,
            beta1: 0.9,
            beta2: 0.999,
        }
    }
}

impl OptimizerSpec {
    fn build(&self, store: &ParamStore) -> Optimizer {
        match self.kind {
            OptimizerKind::AdamW => Optimizer::AdamW(AdamW::new(
                AdamWConfig {
                    lr: self.lr,
                    beta1: self.beta1,
                    beta2: self.beta2,
                    eps: 1e-8,
                    weight_decay: self.weight_decay,
                },
                store,
            )),
            OptimizerKind::Sgd => Optimizer::Sgd(Sgd::new(self.beta1, self.weight_decay, store)),
        }
    }
}

enum Optimizer {
    AdamW(AdamW),
    Sgd(Sgd),
}

impl Optimizer {
    fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>], lr: f64) {
        match self {
            Optimizer::AdamW(o) => o.step(store, grads, lr),
            Optimizer::Sgd(o) => o.step(store, grads, lr),
        }
    }
}

/// Settings of the pathwise capture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DynamicsSpec {
    /// Window length of the windowed statistics.
    pub window: usize,
    /// Parameter-name prefix of the probed group; empty means the first
    /// tapped block.
    pub group: String,
    pub transition_window: usize,
    pub consecutive: usize,
    /// Moving-average horizon of the plotted norms.
    pub smoothing: usize,
}

impl Default for DynamicsSpec {
    fn default() -> Self {
        Self {
            window: 10,
            group: String::new(),
            transition_window: 10,
            consecutive: 3,
            smoothing: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSpec {
    pub suite: String,
    pub fusion: FusionConfig,
    pub optimizer: OptimizerSpec,
    pub batch_size: usize,
    pub steps: usize,
    pub seeds: Vec<u64>,
    pub dataset: DatasetSpec,
    pub dynamics: DynamicsSpec,
    pub probe: Option<ProbeConfig>,
    /// Fraction of steps in which only the adapter and heads train.
    pub adapter_warmup: f64,
    pub output_dir: PathBuf,
    /// Held-out batches scored at the end of a run.
    pub eval_batches: usize,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            suite: "train".into(),
            fusion: FusionConfig::default(),
            optimizer: OptimizerSpec::default(),
            batch_size: 8,
            steps: 300,
            seeds: vec![0, 1, 2, 3, 4],
            dataset: DatasetSpec::default(),
            dynamics: DynamicsSpec::default(),
            probe: None,
            adapter_warmup: 0.1,
            output_dir: PathBuf::from("runs"),
            eval_batches: 4,
        }
    }
}

impl ExperimentSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.fusion.validate()?;
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.adapter_warmup) {
            return Err(Error::InvalidConfig(
                "adapter_warmup must lie in [0, 1]".into(),
            ));
        }
        if self.optimizer.lr.is_nan() || self.optimizer.lr <= 0.0 {
            return Err(Error::InvalidConfig("lr must be positive".into()));
        }
        Ok(())
    }

    fn data(&self, seed: u64) -> DatasetSpec {
        DatasetSpec {
            seed: self.dataset.seed.wrapping_add(seed),
            image_size: self.fusion.image_size,
            patch: self.fusion.patch_size,
            ..self.dataset.clone()
        }
    }

    fn batch(&self, seed: u64, index: usize) -> Result<DenseInput> {
        let b = downstream_task_batch(&self.data(seed), index, self.batch_size)?;
        DenseInput::from_batch(&b, self.fusion.patch_size)
    }

    /// Held-out batches come from an index range training never reaches.
    fn eval_batch(&self, seed: u64, i: usize) -> Result<DenseInput> {
        self.batch(seed, usize::MAX / 2 + i)
    }

    fn warmup_steps(&self) -> usize {
        (self.adapter_warmup * self.steps as f64).round() as usize
    }

    pub fn run_id(&self, seed: u64) -> String {
        format!(
            "{}.S{}.D{}.seed{seed}",
            self.suite, self.fusion.stride, self.fusion.detach_count
        )
    }
}

/// One line of a metric stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub suite: String,
    pub run_id: String,
    pub step: usize,
    pub values: BTreeMap<String, f64>,
}

impl MetricRecord {
    pub fn to_json_line(&self) -> String {
        let values: Vec<String> = self
            .values
            .iter()
            .map(|(k, v)| format!("{}:{}", serde_json::Value::String(k.clone()), json17(*v)))
            .collect();
        format!(
            "{{\"suite\":{},\"run_id\":{},\"step\":{},\"values\":{{{}}}}}",
            serde_json::Value::String(self.suite.clone()),
            serde_json::Value::String(self.run_id.clone()),
            self.step,
            values.join(",")
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NumericFailure {
    pub step: usize,
    pub detail: String,
}

#[derive(Clone, Debug)]
pub struct TrainRun {
    pub run_id: String,
    pub seed: u64,
    pub records: Vec<MetricRecord>,
    pub snapshots: Vec<GradSnapshot>,
    /// Mean loss over the held-out batches after the last step.
    pub eval_loss: Option<f64>,
    pub failure: Option<NumericFailure>,
}

impl TrainRun {
    pub fn losses(&self) -> Vec<f64> {
        self.records
            .iter()
            .filter_map(|r| r.values.get("loss").copied())
            .collect()
    }

    pub fn jsonl(&self) -> Vec<String> {
        self.records
            .iter()
            .map(MetricRecord::to_json_line)
            .collect()
    }
}

fn is_head(name: &str) -> bool {
    name.starts_with("adapter.") || name.starts_with("head.") || name.starts_with("aux_head.")
}

fn probe_group(spec: &ExperimentSpec, model: &FusionModel) -> Result<ParamGroup> {
    let prefix = if spec.dynamics.group.is_empty() {
        let first = *spec
            .fusion
            .tap_layers()
            .first()
            .ok_or_else(|| Error::MissingParamGroup("no tapped block to probe".into()))?;
        format!("encoder.block{first}.")
    } else {
        spec.dynamics.group.clone()
    };
    ParamGroup::by_prefix(&model.store, &prefix)
}

/// Train the fusion model on the dense glyph task. With `capture`, every
/// step is decomposed into main and skip gradients of the probed group.
fn train(spec: &ExperimentSpec, seed: u64, capture: bool) -> Result<TrainRun> {
    spec.validate()?;
    let mut init = Rng::with_stream(seed, 0x1417);
    let mut model = FusionModel::new(spec.fusion.clone(), &mut init)?;
    let mut opt = spec.optimizer.build(&model.store);
    let mut rng = Rng::with_stream(seed, 0xd20);
    let group = if capture {
        Some(probe_group(spec, &model)?)
    } else {
        None
    };
    let run_id = spec.run_id(seed);
    let warmup = spec.warmup_steps();
    let mut run = TrainRun {
        run_id: run_id.clone(),
        seed,
        records: Vec::with_capacity(spec.steps),
        snapshots: Vec::new(),
        eval_loss: None,
        failure: None,
    };
    for step in 0..spec.steps {
        let input = spec.batch(seed, step)?;
        let stage_a = step < warmup;
        let trainable = |n: &str| !stage_a || is_head(n);
        let (loss, grads) = match &group {
            Some(g) => match decompose(&model, &input, g, &mut rng, trainable, step) {
                Ok(d) => {
                    run.snapshots.push(d.snapshot);
                    (d.loss, d.full_grads)
                }
                Err(Error::NonFinite { .. }) => (f64::NAN, Vec::new()),
                Err(e) => return Err(e),
            },
            None => match plain_step(&model, &input, &mut rng, trainable) {
                Ok(r) => r,
                Err(Error::NonFinite { .. }) => (f64::NAN, Vec::new()),
                Err(e) => return Err(e),
            },
        };
        let lr = scheduled_lr(
            spec.optimizer.lr,
            step,
            spec.steps,
            spec.optimizer.warmup_ratio,
            spec.optimizer.cosine,
        );
        if !loss.is_finite() {
            let detail = format!("non-finite loss at step {step}");
            let mut values = BTreeMap::new();
            values.insert("nan_at".to_string(), step as f64);
            run.records.push(MetricRecord {
                suite: spec.suite.clone(),
                run_id: run_id.clone(),
                step,
                values,
            });
            run.failure = Some(NumericFailure { step, detail });
            return Ok(run);
        }
        let mut values = BTreeMap::new();
        values.insert("loss".to_string(), loss);
        values.insert("lr".to_string(), lr);
        values.insert("stage".to_string(), if stage_a { 0.0 } else { 1.0 });
        run.records.push(MetricRecord {
            suite: spec.suite.clone(),
            run_id: run_id.clone(),
            step,
            values,
        });
        opt.step(&mut model.store, &grads, lr);
    }
    if spec.steps > 0 && spec.eval_batches > 0 {
        let mut total = 0.0;
        for i in 0..spec.eval_batches {
            let input = spec.eval_batch(seed, i)?;
            let mut tape = Tape::new();
            let p = model.store.bind(&mut tape, |_| false)?;
            let mut r = Rng::seed_from(0);
            let out = model.dense_loss(&mut tape, &p, &input, &mut r, Detach::Configured)?;
            total += tape.value(out.loss).item();
        }
        run.eval_loss = Some(total / spec.eval_batches as f64);
    }
    Ok(run)
}

fn plain_step(
    model: &FusionModel,
    input: &DenseInput,
    rng: &mut Rng,
    trainable: impl Fn(&str) -> bool,
) -> Result<(f64, Vec<Option<Tensor>>)> {
    let mut tape = Tape::new();
    let p = model.store.bind(&mut tape, trainable)?;
    let out = model.dense_loss(&mut tape, &p, input, rng, Detach::Configured)?;
    let loss = tape.value(out.loss).item();
    if !loss.is_finite() {
        return Ok((loss, Vec::new()));
    }
    let grads = p.grads(&tape.backward(out.loss)?);
    if grads.iter().flatten().any(|g| !g.all_finite()) {
        return Err(Error::NonFinite { op: "backward" });
    }
    Ok((loss, grads))
}

pub fn run_training(spec: &ExperimentSpec, seed: u64) -> Result<TrainRun> {
    train(spec, seed, false)
}

/// Every configured seed in parallel, merged in seed order.
pub fn run_training_seeds(spec: &ExperimentSpec) -> Result<Vec<TrainRun>> {
    spec.seeds
        .par_iter()
        .map(|&s| run_training(spec, s))
        .collect()
}

#[derive(Clone, Debug)]
pub struct DynamicsRun {
    pub train: TrainRun,
    pub records: Vec<SnapshotRecord>,
    /// First step at which the probed group trains; windows and the
    /// transition series start here.
    pub probe_start: usize,
    /// `(last step of window, stats)` for each complete window.
    pub windows: Vec<(usize, WindowStats)>,
    pub transition: TransitionReport,
    /// Assumption estimates over the first complete window.
    pub early: Option<AssumptionReport>,
}

impl DynamicsRun {
    pub fn ratios(&self) -> Vec<f64> {
        self.transition.ratio.clone()
    }

    /// Transition as a training step.
    pub fn t_trans_step(&self) -> Option<usize> {
        self.transition.t_trans.map(|t| t + self.probe_start)
    }

    pub fn jsonl(&self) -> Vec<String> {
        self.records
            .iter()
            .map(SnapshotRecord::to_json_line)
            .collect()
    }
}

pub fn run_grad_dynamics(spec: &ExperimentSpec, seed: u64) -> Result<DynamicsRun> {
    let train = train(spec, seed, true)?;
    let k = spec.dynamics.window.max(1);
    let snaps = &train.snapshots;
    let records = (1..=snaps.len())
        .map(|n| SnapshotRecord::from_history(&snaps[..n], k))
        .collect::<Result<Vec<_>>>()?;
    // The probed block is frozen during the adapter-only warmup.
    let start = spec.warmup_steps().min(snaps.len());
    let live = &snaps[start..];
    let windows = live
        .chunks_exact(k)
        .map(|w| Ok((w[w.len() - 1].step, WindowStats::compute(w)?)))
        .collect::<Result<Vec<_>>>()?;
    let ratios: Vec<f64> = live.iter().map(GradSnapshot::ratio).collect();
    let transition = if ratios.len() >= spec.dynamics.transition_window {
        transition_step(
            &ratios,
            spec.dynamics.transition_window,
            spec.dynamics.consecutive,
        )?
    } else {
        TransitionReport {
            t_trans: None,
            ratio: ratios,
            window: spec.dynamics.transition_window,
            consecutive: spec.dynamics.consecutive,
        }
    };
    let early = if k >= 2 && live.len() >= k {
        Some(assumption_report(&live[..k])?)
    } else {
        None
    };
    Ok(DynamicsRun {
        probe_start: start,
        train,
        records,
        windows,
        transition,
        early,
    })
}

/// Norms with moving averages, variance traces, per-step cosine and
/// windowed δ, one panel each.
pub fn dynamics_panels(run: &DynamicsRun, smoothing: usize) -> Vec<Panel> {
    let steps: Vec<f64> = run.records.iter().map(|r| r.step as f64).collect();
    let pts =
        |ys: &[f64]| -> Vec<(f64, f64)> { steps.iter().copied().zip(ys.iter().copied()).collect() };
    let nm: Vec<f64> = run.records.iter().map(|r| r.norm_main.sqrt()).collect();
    let ns: Vec<f64> = run.records.iter().map(|r| r.norm_skip.sqrt()).collect();
    let wsteps: Vec<f64> = run.windows.iter().map(|w| w.0 as f64).collect();
    let wpts = |f: &dyn Fn(&WindowStats) -> f64| -> Vec<(f64, f64)> {
        wsteps
            .iter()
            .copied()
            .zip(run.windows.iter().map(|w| f(&w.1)))
            .collect()
    };
    let panel = |title: &str, y: &str, series: Vec<Series>| Panel {
        title: title.into(),
        x_label: "step".into(),
        y_label: y.into(),
        series,
    };
    vec![
        panel(
            "gradient norms",
            "norm",
            vec![
                Series::line("main", pts(&nm)),
                Series::line("skip", pts(&ns)),
                Series::line("main (avg)", pts(&moving_average(&nm, smoothing))),
                Series::line("skip (avg)", pts(&moving_average(&ns, smoothing))),
            ],
        ),
        panel(
            "variance traces",
            "trace",
            vec![
                Series::line("main", wpts(&|w| w.tr_m)),
                Series::line("skip", wpts(&|w| w.tr_s)),
            ],
        ),
        panel(
            "main/skip cosine",
            "cos",
            vec![Series::scatter(
                "cos",
                pts(&run.records.iter().map(|r| r.cos).collect::<Vec<_>>()),
            )],
        ),
        panel(
            "delta ratio",
            "delta",
            vec![Series::scatter("delta", wpts(&|w| w.delta))],
        ),
    ]
}

pub fn dynamics_svg(run: &DynamicsRun, smoothing: usize) -> Result<String> {
    let spec = PlotSpec {
        title: format!("gradient dynamics {}", run.train.run_id),
        columns: 2,
        ..PlotSpec::default()
    };
    emit::emit_svg_plot(&dynamics_panels(run, smoothing), &spec)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub stride: usize,
    pub detach: usize,
    /// Mean held-out loss over seeds.
    pub metric: f64,
    /// `metric - baseline metric`; negative is better.
    pub delta: f64,
    pub seed_metrics: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkippedCell {
    pub stride: usize,
    pub detach: usize,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub cells: Vec<GridCell>,
    pub skipped: Vec<SkippedCell>,
    /// Largest valid stride with nothing detached.
    pub baseline: (usize, usize),
    /// Held-out loss of the model without skip taps.
    pub no_fusion: f64,
    pub no_fusion_delta: f64,
}

fn cell_metric(spec: &ExperimentSpec, stride: usize, detach: usize) -> Result<Vec<f64>> {
    let mut s = spec.clone();
    s.fusion.stride = stride;
    s.fusion.detach_count = detach;
    s.seeds
        .par_iter()
        .map(|&seed| {
            let run = run_training(&s, seed)?;
            if let Some(f) = run.failure {
                return Err(Error::NonFinite {
                    op: if f.step == 0 {
                        "first step"
                    } else {
                        "training"
                    },
                });
            }
            run.eval_loss
                .ok_or_else(|| Error::Precondition("grid cells need steps and eval batches".into()))
        })
        .collect()
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

/// Valid `(stride, detach)` pairs in grid order and the rejected ones.
pub fn grid_cells(
    total_blocks: usize,
    strides: &[usize],
    detach_counts: &[usize],
) -> (Vec<(usize, usize)>, Vec<SkippedCell>) {
    let mut ok = Vec::new();
    let mut skipped = Vec::new();
    for &s in strides {
        for &d in detach_counts {
            let cfg = FusionConfig {
                total_blocks,
                stride: s,
                detach_count: d,
                ..FusionConfig::default()
            };
            match crate::fusion::select_skip_layers(&cfg) {
                Ok((detached, live)) if detached.len() + live.len() > 0 => ok.push((s, d)),
                Ok(_) => skipped.push(SkippedCell {
                    stride: s,
                    detach: d,
                    reason: format!("stride {s} taps no block of {total_blocks}"),
                }),
                Err(e) => skipped.push(SkippedCell {
                    stride: s,
                    detach: d,
                    reason: e.to_string(),
                }),
            }
        }
    }
    (ok, skipped)
}

pub fn run_ablation_grid(
    spec: &ExperimentSpec,
    strides: &[usize],
    detach_counts: &[usize],
) -> Result<GridReport> {
    spec.validate()?;
    let (valid, skipped) = grid_cells(spec.fusion.total_blocks, strides, detach_counts);
    let base_stride = valid
        .iter()
        .map(|c| c.0)
        .max()
        .ok_or_else(|| Error::InvalidConfig("no valid grid cell".into()))?;
    let baseline = (base_stride, 0);
    let mut todo = valid.clone();
    if !todo.contains(&baseline) {
        todo.push(baseline);
    }
    let no_fusion_cell = (spec.fusion.total_blocks + 1, 0);
    todo.push(no_fusion_cell);
    let metrics: Vec<Vec<f64>> = todo
        .par_iter()
        .map(|&(s, d)| cell_metric(spec, s, d))
        .collect::<Result<_>>()?;
    let base_metric = mean(&metrics[todo.iter().position(|c| *c == baseline).unwrap_or(0)]);
    let no_fusion = mean(&metrics[metrics.len() - 1]);
    let cells = valid
        .iter()
        .zip(&metrics)
        .map(|(&(stride, detach), m)| GridCell {
            stride,
            detach,
            metric: mean(m),
            delta: mean(m) - base_metric,
            seed_metrics: m.clone(),
        })
        .collect();
    Ok(GridReport {
        cells,
        skipped,
        baseline,
        no_fusion,
        no_fusion_delta: no_fusion - base_metric,
    })
}

/// Bubble chart over (stride, detach); bubble size is the magnitude of the
/// delta against the baseline cell.
pub fn grid_svg(report: &GridReport) -> Result<String> {
    let (better, worse): (Vec<&GridCell>, Vec<&GridCell>) =
        report.cells.iter().partition(|c| c.delta <= 0.0);
    let bubble = |name: &str, cells: &[&GridCell]| {
        Series::bubble(
            name,
            cells
                .iter()
                .map(|c| (c.stride as f64, c.detach as f64))
                .collect(),
            cells.iter().map(|c| c.delta.abs()).collect(),
        )
    };
    let mut series = Vec::new();
    if !better.is_empty() {
        series.push(bubble("better than baseline", &better));
    }
    if !worse.is_empty() {
        series.push(bubble("worse than baseline", &worse));
    }
    series.push(Series::scatter(
        format!(
            "baseline S={} D=0; no fusion delta {}",
            report.baseline.0,
            fmt17(report.no_fusion_delta)
        ),
        vec![(report.baseline.0 as f64, 0.0)],
    ));
    let panel = Panel {
        title: "stride/detach grid".into(),
        x_label: "stride S".into(),
        y_label: "detached taps D".into(),
        series,
    };
    emit::emit_svg_plot(&[panel], &PlotSpec::default())
}

pub fn grid_csv(report: &GridReport) -> (Vec<&'static str>, Vec<Vec<String>>) {
    let mut rows: Vec<Vec<String>> = report
        .cells
        .iter()
        .map(|c| {
            vec![
                c.stride.to_string(),
                c.detach.to_string(),
                fmt17(c.metric),
                fmt17(c.delta),
                if (c.stride, c.detach) == report.baseline {
                    "baseline".into()
                } else {
                    String::new()
                },
            ]
        })
        .collect();
    rows.push(vec![
        "none".into(),
        "0".into(),
        fmt17(report.no_fusion),
        fmt17(report.no_fusion_delta),
        "no-fusion".into(),
    ]);
    (
        vec!["stride", "detach", "eval_loss", "delta", "label"],
        rows,
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrRow {
    pub seed: u64,
    pub lr: f64,
    pub t_trans: Option<usize>,
    pub median_cos: f64,
    pub median_delta: f64,
    /// Medians over the first quarter of the horizon.
    pub early_median_cos: f64,
    pub early_median_delta: f64,
}

fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn lr_row(run: &DynamicsRun, seed: u64, lr: f64) -> LrRow {
    let live = &run.records[run.probe_start.min(run.records.len())..];
    let cos: Vec<f64> = live.iter().map(|r| r.cos).collect();
    let delta: Vec<f64> = run.windows.iter().map(|w| w.1.delta).collect();
    let early_end = run.probe_start + live.len().div_ceil(4);
    let early_cos = &cos[..live.len().div_ceil(4)];
    let early_delta: Vec<f64> = run
        .windows
        .iter()
        .filter(|w| w.0 < early_end)
        .map(|w| w.1.delta)
        .collect();
    LrRow {
        seed,
        lr,
        t_trans: run.t_trans_step(),
        median_cos: median(&cos),
        median_delta: median(&delta),
        early_median_cos: median(early_cos),
        early_median_delta: median(&early_delta),
    }
}

/// Gradient dynamics at every `(seed, lr)`, rows ordered by seed then by
/// the given lr order.
pub fn run_lr_sweep(spec: &ExperimentSpec, lrs: &[f64]) -> Result<Vec<LrRow>> {
    if lrs.len() < 2 {
        return Err(Error::Precondition(
            "lr sweep needs at least two learning rates".into(),
        ));
    }
    let jobs: Vec<(u64, f64)> = spec
        .seeds
        .iter()
        .flat_map(|&s| lrs.iter().map(move |&lr| (s, lr)))
        .collect();
    jobs.par_iter()
        .map(|&(seed, lr)| {
            let mut s = spec.clone();
            s.optimizer.lr = lr;
            s.suite = format!("{}.lr{lr:e}", spec.suite);
            let run = run_grad_dynamics(&s, seed)?;
            Ok(lr_row(&run, seed, lr))
        })
        .collect()
}

/// Absent transitions are written as `/`.
pub fn lr_csv(rows: &[LrRow]) -> (Vec<&'static str>, Vec<Vec<String>>) {
    let body = rows
        .iter()
        .map(|r| {
            vec![
                r.seed.to_string(),
                fmt17(r.lr),
                r.t_trans.map_or("/".to_string(), |t| t.to_string()),
                fmt17(r.median_cos),
                fmt17(r.median_delta),
                fmt17(r.early_median_cos),
                fmt17(r.early_median_delta),
            ]
        })
        .collect();
    (
        vec![
            "seed",
            "lr",
            "t_trans",
            "median_cos",
            "median_delta",
            "early_median_cos",
            "early_median_delta",
        ],
        body,
    )
}

/// True when, ordering rows by increasing lr, no present transition step
/// increases and absent ones only occur before any present one.
pub fn t_trans_non_increasing(rows: &[LrRow]) -> bool {
    let mut sorted: Vec<&LrRow> = rows.iter().collect();
    sorted.sort_by(|a, b| a.lr.total_cmp(&b.lr));
    let mut last: Option<usize> = None;
    for r in sorted {
        match (r.t_trans, last) {
            (None, Some(_)) => return false,
            (Some(t), Some(prev)) if t > prev => return false,
            (Some(t), _) => last = Some(t),
            (None, None) => {}
        }
    }
    true
}

/// Seconds since the Unix epoch, kept out of metric streams.
pub fn write_sidecar(dir: &Path, spec: &ExperimentSpec) -> Result<()> {
    let stamp = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let body = serde_json::json!({ "finished_unix": stamp, "spec": spec });
    emit::write_bytes(
        &dir.join("run_info.json"),
        serde_json::to_string_pretty(&body)?.as_bytes(),
    )
}
