//! Two-pass gradient decomposition into main-path and skip-path parts, and
//! the trailing-window statistics computed over the resulting streams.

use serde::{Deserialize, Serialize};

use crate::autograd::{Rng, Tape, Tensor};
use crate::emit::json17;
use crate::error::{Error, Result};
use crate::fusion::{DenseInput, Detach, FusionModel, LinearChainModel, PassOutput};
use crate::nn::{flatten_grads, Bound, ParamId, ParamStore};

/// Added to the skip variance trace in the denominator of the δ-ratio.
pub const DELTA_EPS: f64 = 1e-12;

/// A model whose loss pass can detach its skip taps on request.
pub trait PathwiseModel {
    type Batch;

    fn store(&self) -> &ParamStore;

    fn pass(
        &self,
        tape: &mut Tape,
        p: &Bound,
        batch: &Self::Batch,
        rng: &mut Rng,
        detach: Detach,
    ) -> Result<PassOutput>;
}

impl PathwiseModel for FusionModel {
    type Batch = DenseInput;

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn pass(
        &self,
        tape: &mut Tape,
        p: &Bound,
        batch: &DenseInput,
        rng: &mut Rng,
        detach: Detach,
    ) -> Result<PassOutput> {
        self.dense_loss(tape, p, batch, rng, detach)
    }
}

impl PathwiseModel for LinearChainModel {
    type Batch = f64;

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn pass(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x: &f64,
        _rng: &mut Rng,
        detach: Detach,
    ) -> Result<PassOutput> {
        self.forward(tape, p, *x, detach)
    }
}

/// Named set of parameters whose gradients are flattened together.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamGroup {
    pub name: String,
    pub ids: Vec<ParamId>,
}

impl ParamGroup {
    /// Every parameter whose name starts with `prefix`.
    pub fn by_prefix(store: &ParamStore, prefix: &str) -> Result<Self> {
        let ids = store.with_prefix(prefix);
        if ids.is_empty() {
            return Err(Error::MissingParamGroup(prefix.to_string()));
        }
        Ok(Self {
            name: prefix.to_string(),
            ids,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradSnapshot {
    pub step: usize,
    pub group: String,
    pub main: Vec<f64>,
    pub skip: Vec<f64>,
    pub full: Vec<f64>,
}

impl GradSnapshot {
    /// Build from the two raw passes. The skip part is `full - main` and the
    /// stored full gradient is `main + skip`, so the sum holds bitwise; it
    /// can differ from `full` by one rounding step.
    pub fn from_passes(step: usize, group: &str, main: Vec<f64>, full: &[f64]) -> Result<Self> {
        if main.len() != full.len() {
            return Err(Error::LengthMismatch(main.len(), full.len()));
        }
        let skip: Vec<f64> = full.iter().zip(&main).map(|(f, m)| f - m).collect();
        let full = main.iter().zip(&skip).map(|(m, s)| m + s).collect();
        Ok(Self {
            step,
            group: group.to_string(),
            main,
            skip,
            full,
        })
    }

    /// Snapshot from explicit main and skip parts.
    pub fn from_parts(step: usize, main: Vec<f64>, skip: Vec<f64>) -> Result<Self> {
        if main.len() != skip.len() {
            return Err(Error::LengthMismatch(main.len(), skip.len()));
        }
        let full = main.iter().zip(&skip).map(|(m, s)| m + s).collect();
        Ok(Self {
            step,
            group: String::new(),
            main,
            skip,
            full,
        })
    }

    pub fn branch(&self, b: Branch) -> &[f64] {
        match b {
            Branch::Main => &self.main,
            Branch::Skip => &self.skip,
            Branch::Full => &self.full,
        }
    }

    /// `‖g_skip‖ / ‖g_main‖`; 0 when both vanish.
    pub fn ratio(&self) -> f64 {
        let (s, m) = (norm_sq(&self.skip).sqrt(), norm_sq(&self.main).sqrt());
        if s == 0.0 {
            0.0
        } else {
            s / m
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Branch {
    Main,
    Skip,
    Full,
}

/// Result of one decomposition step.
#[derive(Clone, Debug)]
pub struct Decomposition {
    pub snapshot: GradSnapshot,
    /// Per-parameter gradients of the standard pass, for the optimizer.
    pub full_grads: Vec<Option<Tensor>>,
    pub loss: f64,
    /// Tapped features seen by the detached pass.
    pub main_taps: Vec<Tensor>,
    /// Tapped features seen by the standard pass.
    pub full_taps: Vec<Tensor>,
}

/// Detached pass then standard pass from the same RNG state; the skip part
/// is their difference over `group`.
pub fn decompose<M: PathwiseModel>(
    model: &M,
    batch: &M::Batch,
    group: &ParamGroup,
    rng: &mut Rng,
    trainable: impl Fn(&str) -> bool,
    step: usize,
) -> Result<Decomposition> {
    let store = model.store();
    let saved = rng.save();

    let mut tape = Tape::new();
    let p = store.bind(&mut tape, &trainable)?;
    let out = model.pass(&mut tape, &p, batch, rng, Detach::All)?;
    let main_grads = p.grads(&tape.backward(out.loss)?);
    let main = flatten_grads(&main_grads, store, &group.ids);
    let main_taps = out.tap_values;

    rng.restore(&saved)?;
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, &trainable)?;
    let out = model.pass(&mut tape, &p, batch, rng, Detach::Configured)?;
    let loss = tape.value(out.loss).item();
    let full_grads = p.grads(&tape.backward(out.loss)?);
    let full = flatten_grads(&full_grads, store, &group.ids);

    if !main.iter().chain(&full).all(|v| v.is_finite()) {
        return Err(Error::NonFinite { op: "decompose" });
    }
    Ok(Decomposition {
        snapshot: GradSnapshot::from_passes(step, &group.name, main, &full)?,
        full_grads,
        loss,
        main_taps,
        full_taps: out.tap_values,
    })
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

fn check_window(window: &[GradSnapshot]) -> Result<usize> {
    let first = window.first().ok_or(Error::EmptyWindow)?;
    let d = first.main.len();
    for s in window {
        if s.main.len() != d || s.skip.len() != d || s.full.len() != d {
            return Err(Error::LengthMismatch(s.main.len(), d));
        }
    }
    Ok(d)
}

pub fn window_mean(window: &[GradSnapshot], b: Branch) -> Result<Vec<f64>> {
    let d = check_window(window)?;
    let mut mean = vec![0.0; d];
    for s in window {
        for (m, v) in mean.iter_mut().zip(s.branch(b)) {
            *m += v;
        }
    }
    let k = window.len() as f64;
    mean.iter_mut().for_each(|m| *m /= k);
    Ok(mean)
}

/// Mean squared norm over the window.
pub fn second_moment(window: &[GradSnapshot], b: Branch) -> Result<f64> {
    check_window(window)?;
    Ok(window.iter().map(|s| norm_sq(s.branch(b))).sum::<f64>() / window.len() as f64)
}

/// `(1/K) Σ ‖g_i‖² − ‖ĝ‖²`.
pub fn variance_trace(window: &[GradSnapshot], b: Branch) -> Result<f64> {
    Ok(second_moment(window, b)? - norm_sq(&window_mean(window, b)?))
}

/// Cosine similarity; 0 when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch(a.len(), b.len()));
    }
    let (na, nb) = (norm_sq(a), norm_sq(b));
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok((dot(a, b) / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

/// `2 |mean⟨g_main, g_skip⟩ − ⟨m̂, ŝ⟩| / (tr Σ̂_skip + ε)`.
pub fn delta_ratio(window: &[GradSnapshot]) -> Result<f64> {
    check_window(window)?;
    let inner = window.iter().map(|s| dot(&s.main, &s.skip)).sum::<f64>() / window.len() as f64;
    let m = window_mean(window, Branch::Main)?;
    let s = window_mean(window, Branch::Skip)?;
    let cross = inner - dot(&m, &s);
    Ok(2.0 * cross.abs() / (variance_trace(window, Branch::Skip)?.max(0.0) + DELTA_EPS))
}

/// `‖ĝ‖² / mean ‖g‖²`; 0 for an all-zero window.
pub fn snr(window: &[GradSnapshot], b: Branch) -> Result<f64> {
    let second = second_moment(window, b)?;
    if second == 0.0 {
        return Ok(0.0);
    }
    Ok((norm_sq(&window_mean(window, b)?) / second).clamp(0.0, 1.0))
}

/// All window estimates at once.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowStats {
    pub k: usize,
    pub mean_main: Vec<f64>,
    pub mean_skip: Vec<f64>,
    pub second_main: f64,
    pub second_skip: f64,
    pub second_full: f64,
    pub tr_m: f64,
    pub tr_s: f64,
    pub cos_means: f64,
    pub delta: f64,
    pub snr_main: f64,
    pub snr_skip: f64,
    pub snr_full: f64,
}

impl WindowStats {
    pub fn compute(window: &[GradSnapshot]) -> Result<Self> {
        let mean_main = window_mean(window, Branch::Main)?;
        let mean_skip = window_mean(window, Branch::Skip)?;
        Ok(Self {
            k: window.len(),
            cos_means: cosine(&mean_main, &mean_skip)?,
            second_main: second_moment(window, Branch::Main)?,
            second_skip: second_moment(window, Branch::Skip)?,
            second_full: second_moment(window, Branch::Full)?,
            tr_m: variance_trace(window, Branch::Main)?,
            tr_s: variance_trace(window, Branch::Skip)?,
            delta: delta_ratio(window)?,
            snr_main: snr(window, Branch::Main)?,
            snr_skip: snr(window, Branch::Skip)?,
            snr_full: snr(window, Branch::Full)?,
            mean_main,
            mean_skip,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransitionReport {
    /// 0-based index into the ratio series.
    pub t_trans: Option<usize>,
    pub ratio: Vec<f64>,
    pub window: usize,
    pub consecutive: usize,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Median of the trailing window `[t + 1 - w, t]`.
pub fn running_median(series: &[f64], t: usize, w: usize) -> f64 {
    median(&mut series[t + 1 - w..=t].to_vec())
}

/// First index `t` at which the trailing length-`window` median is below 1
/// and stays below 1 for the following `consecutive - 1` back-to-back
/// windows (ending at `t + window`, `t + 2·window`, ...).
pub fn transition_step(
    ratio: &[f64],
    window: usize,
    consecutive: usize,
) -> Result<TransitionReport> {
    if window == 0 || consecutive == 0 {
        return Err(Error::InvalidConfig(
            "transition window and consecutive count must be positive".into(),
        ));
    }
    if ratio.len() < window {
        return Err(Error::Precondition(format!(
            "series of {} shorter than window {window}",
            ratio.len()
        )));
    }
    let n = ratio.len();
    let span = (consecutive - 1) * window;
    let t_trans = (window - 1..n.saturating_sub(span))
        .find(|&t| (0..consecutive).all(|c| running_median(ratio, t + c * window, window) < 1.0));
    Ok(TransitionReport {
        t_trans,
        ratio: ratio.to_vec(),
        window,
        consecutive,
    })
}

/// Trailing simple moving average; the first `horizon - 1` entries average
/// the available prefix.
pub fn moving_average(series: &[f64], horizon: usize) -> Vec<f64> {
    let h = horizon.max(1);
    (0..series.len())
        .map(|i| {
            let window = &series[(i + 1).saturating_sub(h)..=i];
            window.iter().sum::<f64>() / window.len() as f64
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssumptionReport {
    /// `tr Σ̂_skip / tr Σ̂_main`; absent when the main trace is zero.
    pub c_hat: Option<f64>,
    /// `‖ŝ‖ / ‖m̂‖`; absent when the main mean is zero.
    pub rho_hat: Option<f64>,
    pub delta_hat: f64,
    pub mean_inner: f64,
    pub cos_means: f64,
}

pub fn assumption_report(window: &[GradSnapshot]) -> Result<AssumptionReport> {
    if window.len() < 2 {
        return Err(Error::Precondition("assumption report needs K >= 2".into()));
    }
    let m = window_mean(window, Branch::Main)?;
    let s = window_mean(window, Branch::Skip)?;
    let tr_m = variance_trace(window, Branch::Main)?;
    let tr_s = variance_trace(window, Branch::Skip)?;
    let nm = norm_sq(&m).sqrt();
    Ok(AssumptionReport {
        c_hat: (tr_m > 0.0).then(|| tr_s.max(0.0) / tr_m),
        rho_hat: (nm > 0.0).then(|| norm_sq(&s).sqrt() / nm),
        delta_hat: delta_ratio(window)?,
        mean_inner: dot(&m, &s),
        cos_means: cosine(&m, &s)?,
    })
}

/// One line of the snapshot stream.
#[derive(Clone, Debug, PartialEq)]
pub struct SnapshotRecord {
    pub step: usize,
    pub group: String,
    pub norm_main: f64,
    pub norm_skip: f64,
    pub norm_full: f64,
    pub cos: f64,
    pub delta: f64,
    pub snr_main: f64,
    pub snr_skip: f64,
    pub tr_m: f64,
    pub tr_s: f64,
}

impl SnapshotRecord {
    /// Per-step squared norms and cosine, window statistics over the
    /// trailing window of up to `k` snapshots ending at `history.last()`.
    pub fn from_history(history: &[GradSnapshot], k: usize) -> Result<Self> {
        let last = history.last().ok_or(Error::EmptyWindow)?;
        let window = &history[history.len().saturating_sub(k.max(1))..];
        Ok(Self {
            step: last.step,
            group: last.group.clone(),
            norm_main: norm_sq(&last.main),
            norm_skip: norm_sq(&last.skip),
            norm_full: norm_sq(&last.full),
            cos: cosine(&last.main, &last.skip)?,
            delta: delta_ratio(window)?,
            snr_main: snr(window, Branch::Main)?,
            snr_skip: snr(window, Branch::Skip)?,
            tr_m: variance_trace(window, Branch::Main)?,
            tr_s: variance_trace(window, Branch::Skip)?,
        })
    }

    pub fn to_json_line(&self) -> String {
        format!(
            concat!(
                "{{\"step\":{},\"group\":{},\"norm_main\":{},\"norm_skip\":{},\"norm_full\":{},",
                "\"cos\":{},\"delta\":{},\"snr_main\":{},\"snr_skip\":{},\"tr_m\":{},\"tr_s\":{}}}"
            ),
            self.step,
            serde_json::Value::String(self.group.clone()),
            json17(self.norm_main),
            json17(self.norm_skip),
            json17(self.norm_full),
            json17(self.cos),
            json17(self.delta),
            json17(self.snr_main),
            json17(self.snr_skip),
            json17(self.tr_m),
            json17(self.tr_s),
        )
    }
}
