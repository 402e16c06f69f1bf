//! Closed-form and Monte-Carlo checks of the Bayes-risk gap, the fused
//! second-moment identity, the one-step descent bound and the detach
//! condition on isotropic quadratics.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::autograd::Rng;
use crate::error::{Error, Result};
use crate::pathwise::{dot, norm_sq};

/// Fraction of `|rhs|` by which the two sides of the detach condition must
/// differ for a model to count as decisive.
pub const TIE_MARGIN: f64 = 0.05;

/// Absolute slack for comparisons whose standard error is zero.
fn roundoff(target: f64) -> f64 {
    1e-9 * target.abs().max(1.0)
}

/// One line of a check report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub check: String,
    pub params: Value,
    pub target: f64,
    pub estimate: f64,
    pub stderr: f64,
    pub pass: bool,
}

/// Sample mean and standard error of the mean.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanEstimate {
    pub mean: f64,
    pub stderr: f64,
}

impl MeanEstimate {
    pub fn within(&self, target: f64, sigmas: f64) -> bool {
        (self.mean - target).abs() <= sigmas * self.stderr + roundoff(target)
    }
}

/// Streaming mean/variance (Welford).
#[derive(Clone, Copy, Debug, Default)]
struct Moments {
    n: usize,
    mean: f64,
    m2: f64,
}

impl Moments {
    fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    fn estimate(&self) -> MeanEstimate {
        let var = if self.n > 1 {
            self.m2 / (self.n - 1) as f64
        } else {
            0.0
        };
        MeanEstimate {
            mean: self.mean,
            stderr: (var.max(0.0) / self.n.max(1) as f64).sqrt(),
        }
    }
}

/// `Y = alpha·A + beta·B + noise` with `(A, B)` standard Gaussian,
/// correlation `corr`, and independent noise of std `sigma_noise`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianTriplet {
    pub alpha: f64,
    pub beta: f64,
    pub sigma_noise: f64,
    pub corr: f64,
}

impl GaussianTriplet {
    fn validate(&self) -> Result<()> {
        if self.corr.is_nan() || self.corr.abs() >= 1.0 {
            return Err(Error::InvalidConfig(format!(
                "|corr| = {} must be < 1",
                self.corr.abs()
            )));
        }
        if self.sigma_noise.is_nan() || self.sigma_noise < 0.0 {
            return Err(Error::InvalidConfig("sigma_noise must be >= 0".into()));
        }
        Ok(())
    }

    fn params(&self) -> Value {
        json!({"alpha": self.alpha, "beta": self.beta, "sigma_noise": self.sigma_noise, "corr": self.corr})
    }
}

/// `E[(E[Y|A,B] − E[Y|A])²] = beta²·(1 − corr²)`.
pub fn bayes_gap_analytic(model: &GaussianTriplet) -> Result<f64> {
    model.validate()?;
    Ok(model.beta * model.beta * (1.0 - model.corr * model.corr))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapEstimate {
    pub risk_deep: MeanEstimate,
    pub risk_fused: MeanEstimate,
    /// `risk(E[Y|A]) − risk(E[Y|A,B])`.
    pub risk_difference: MeanEstimate,
    /// Mean squared difference of the two predictors.
    pub predictor_difference: MeanEstimate,
    /// Mean of the per-draw gap between the two forms.
    pub cross_term: MeanEstimate,
}

impl GapEstimate {
    /// Standard error of the difference between the two forms, treating them
    /// as independent estimates.
    pub fn combined_stderr(&self) -> f64 {
        self.risk_difference
            .stderr
            .hypot(self.predictor_difference.stderr)
    }

    pub fn forms_agree(&self, sigmas: f64) -> bool {
        let gap = (self.risk_difference.mean - self.predictor_difference.mean).abs();
        gap <= sigmas * self.combined_stderr() + roundoff(self.predictor_difference.mean)
    }
}

pub fn bayes_gap_monte_carlo(
    model: &GaussianTriplet,
    samples: usize,
    seed: u64,
) -> Result<GapEstimate> {
    model.validate()?;
    if samples == 0 {
        return Err(Error::InvalidConfig("samples must be positive".into()));
    }
    let mut rng = Rng::seed_from(seed);
    let rho = model.corr;
    let tail = (1.0 - rho * rho).sqrt();
    let mut deep = Moments::default();
    let mut fused = Moments::default();
    let mut diff = Moments::default();
    let mut pred = Moments::default();
    let mut cross = Moments::default();
    for _ in 0..samples {
        let a = rng.normal();
        let b = rho * a + tail * rng.normal();
        let y = model.alpha * a + model.beta * b + model.sigma_noise * rng.normal();
        let f_deep = (model.alpha + model.beta * rho) * a;
        let f_fused = model.alpha * a + model.beta * b;
        let (rd, rf) = ((y - f_deep).powi(2), (y - f_fused).powi(2));
        let p = (f_fused - f_deep).powi(2);
        deep.push(rd);
        fused.push(rf);
        diff.push(rd - rf);
        pred.push(p);
        cross.push(rd - rf - p);
    }
    Ok(GapEstimate {
        risk_deep: deep.estimate(),
        risk_fused: fused.estimate(),
        risk_difference: diff.estimate(),
        predictor_difference: pred.estimate(),
        cross_term: cross.estimate(),
    })
}

/// Gap reports for one Gaussian model: each form against the closed form,
/// the agreement of the two forms, and nonnegativity.
pub fn bayes_gap_reports(
    model: &GaussianTriplet,
    samples: usize,
    seed: u64,
) -> Result<Vec<CheckReport>> {
    let target = bayes_gap_analytic(model)?;
    let est = bayes_gap_monte_carlo(model, samples, seed)?;
    let params = model.params();
    let rd = est.risk_difference;
    let pd = est.predictor_difference;
    Ok(vec![
        CheckReport {
            check: "bayes_gap.risk_difference".into(),
            params: params.clone(),
            target,
            estimate: rd.mean,
            stderr: rd.stderr,
            pass: rd.within(target, 3.0),
        },
        CheckReport {
            check: "bayes_gap.predictor_difference".into(),
            params: params.clone(),
            target,
            estimate: pd.mean,
            stderr: pd.stderr,
            pass: pd.within(target, 3.0),
        },
        CheckReport {
            check: "bayes_gap.forms_agree".into(),
            params: params.clone(),
            target: pd.mean,
            estimate: rd.mean,
            stderr: est.combined_stderr(),
            pass: est.forms_agree(3.0),
        },
        CheckReport {
            check: "bayes_gap.nonnegative".into(),
            params,
            target: 0.0,
            estimate: rd.mean,
            stderr: rd.stderr,
            pass: rd.mean >= -3.0 * rd.stderr - roundoff(0.0),
        },
    ])
}

/// Mean and covariance blocks of a (main, skip) gradient pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathGradModel {
    pub m: Vec<f64>,
    pub s: Vec<f64>,
    /// Row-major `d × d`.
    pub sigma_m: Vec<f64>,
    pub sigma_s: Vec<f64>,
    /// Cross-covariance `Cov(g_main, g_skip)`.
    pub sigma_ms: Vec<f64>,
}

fn trace(a: &[f64], d: usize) -> f64 {
    (0..d).map(|i| a[i * d + i]).sum()
}

impl PathGradModel {
    pub fn dim(&self) -> usize {
        self.m.len()
    }

    fn validate(&self) -> Result<usize> {
        let d = self.dim();
        if self.s.len() != d {
            return Err(Error::LengthMismatch(self.s.len(), d));
        }
        for blk in [&self.sigma_m, &self.sigma_s, &self.sigma_ms] {
            if blk.len() != d * d {
                return Err(Error::LengthMismatch(blk.len(), d * d));
            }
        }
        Ok(d)
    }

    /// The `2d × 2d` joint covariance.
    pub fn block_covariance(&self) -> Result<DMatrix<f64>> {
        let d = self.validate()?;
        Ok(DMatrix::from_fn(2 * d, 2 * d, |r, c| {
            match (r < d, c < d) {
                (true, true) => self.sigma_m[r * d + c],
                (false, false) => self.sigma_s[(r - d) * d + (c - d)],
                (true, false) => self.sigma_ms[r * d + (c - d)],
                (false, true) => self.sigma_ms[c * d + (r - d)],
            }
        }))
    }

    pub fn expected_main_sq(&self) -> f64 {
        norm_sq(&self.m) + trace(&self.sigma_m, self.dim())
    }

    /// `‖m + s‖² + tr(Σm + Σs + Σms + Σmsᵀ)`.
    pub fn expected_full_sq(&self) -> f64 {
        let d = self.dim();
        let ms: Vec<f64> = self.m.iter().zip(&self.s).map(|(a, b)| a + b).collect();
        norm_sq(&ms)
            + trace(&self.sigma_m, d)
            + trace(&self.sigma_s, d)
            + 2.0 * trace(&self.sigma_ms, d)
    }

    fn params(&self) -> Value {
        json!({"d": self.dim(), "m": self.m, "s": self.s, "tr_sigma_m": trace(&self.sigma_m, self.dim()),
               "tr_sigma_s": trace(&self.sigma_s, self.dim()), "tr_sigma_ms": trace(&self.sigma_ms, self.dim())})
    }
}

/// Draws `(g_main, g_skip)` pairs through a square-root factor of the joint
/// covariance.
pub struct PairSampler {
    d: usize,
    mean: DVector<f64>,
    factor: DMatrix<f64>,
}

impl PairSampler {
    pub fn new(model: &PathGradModel) -> Result<Self> {
        let cov = model.block_covariance()?;
        let d = model.dim();
        let scale = cov.iter().fold(1.0f64, |a, v| a.max(v.abs()));
        let eig = SymmetricEigen::new(cov);
        let min = eig.eigenvalues.min();
        if min < -1e-10 * scale {
            return Err(Error::NotPositiveSemidefinite(min));
        }
        let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
        let factor = &eig.eigenvectors * DMatrix::from_diagonal(&roots);
        let mean = DVector::from_iterator(2 * d, model.m.iter().chain(&model.s).copied());
        Ok(Self { d, mean, factor })
    }

    /// One `(g_main, g_skip)` draw.
    pub fn draw(&self, rng: &mut Rng) -> (Vec<f64>, Vec<f64>) {
        let z = DVector::from_fn(2 * self.d, |_, _| rng.normal());
        let x = &self.mean + &self.factor * z;
        (
            x.rows(0, self.d).iter().copied().collect(),
            x.rows(self.d, self.d).iter().copied().collect(),
        )
    }
}

/// Empirical `E‖g_main + g_skip‖²` against the mean/covariance identity.
pub fn second_moment_check(
    model: &PathGradModel,
    samples: usize,
    seed: u64,
) -> Result<CheckReport> {
    if samples == 0 {
        return Err(Error::InvalidConfig("samples must be positive".into()));
    }
    let sampler = PairSampler::new(model)?;
    let mut rng = Rng::seed_from(seed);
    let mut acc = Moments::default();
    for _ in 0..samples {
        let (gm, gs) = sampler.draw(&mut rng);
        acc.push(gm.iter().zip(&gs).map(|(a, b)| (a + b) * (a + b)).sum());
    }
    let est = acc.estimate();
    let target = model.expected_full_sq();
    let mut params = model.params();
    params["samples"] = json!(samples);
    params["z_score"] = json!(if est.stderr > 0.0 {
        (est.mean - target) / est.stderr
    } else {
        0.0
    });
    Ok(CheckReport {
        check: "second_moment".into(),
        params,
        target,
        estimate: est.mean,
        stderr: est.stderr,
        pass: est.within(target, 3.0),
    })
}

/// `loss(θ) = ½ Σ curvature_i θ_i²`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadraticProblem {
    pub curvature: Vec<f64>,
    pub theta0: Vec<f64>,
}

impl QuadraticProblem {
    pub fn isotropic(l: f64, theta0: Vec<f64>) -> Self {
        Self {
            curvature: vec![l; theta0.len()],
            theta0,
        }
    }

    /// Isotropic problem whose gradient at `theta0` equals `grad`.
    pub fn with_gradient(l: f64, grad: &[f64]) -> Self {
        Self::isotropic(l, grad.iter().map(|g| g / l).collect())
    }

    pub fn smoothness(&self) -> f64 {
        self.curvature.iter().copied().fold(0.0, f64::max)
    }

    pub fn is_isotropic(&self) -> bool {
        self.curvature.windows(2).all(|w| w[0] == w[1])
    }

    pub fn loss(&self, theta: &[f64]) -> f64 {
        0.5 * self
            .curvature
            .iter()
            .zip(theta)
            .map(|(h, t)| h * t * t)
            .sum::<f64>()
    }

    pub fn gradient(&self, theta: &[f64]) -> Vec<f64> {
        self.curvature
            .iter()
            .zip(theta)
            .map(|(h, t)| h * t)
            .collect()
    }
}

/// `g = ∇loss(θ0) + bias + N(0, noise_std² I)`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GradEstimator {
    pub bias: Option<Vec<f64>>,
    pub noise_std: f64,
}

impl GradEstimator {
    pub fn exact() -> Self {
        Self::default()
    }

    pub fn noisy(noise_std: f64) -> Self {
        Self {
            bias: None,
            noise_std,
        }
    }

    fn mean(&self, grad: &[f64]) -> Vec<f64> {
        match &self.bias {
            Some(b) => grad.iter().zip(b).map(|(g, b)| g + b).collect(),
            None => grad.to_vec(),
        }
    }
}

/// Right-hand side of the smoothness bound
/// `loss(θ) − γ⟨∇loss, E g⟩ + (Lγ²/2) E‖g‖²`.
pub fn one_step_bound(problem: &QuadraticProblem, est: &GradEstimator, gamma: f64) -> f64 {
    let grad = problem.gradient(&problem.theta0);
    let mean = est.mean(&grad);
    let d = grad.len() as f64;
    let second = norm_sq(&mean) + d * est.noise_std * est.noise_std;
    problem.loss(&problem.theta0) - gamma * dot(&grad, &mean)
        + 0.5 * problem.smoothness() * gamma * gamma * second
}

/// Mean loss after `θ − γ g` against the bound. Deterministic estimators are
/// evaluated once and, on isotropic problems, must meet the bound to 1e-12.
pub fn one_step_check(
    problem: &QuadraticProblem,
    est: &GradEstimator,
    gamma: f64,
    samples: usize,
    seed: u64,
) -> Result<CheckReport> {
    if gamma.is_nan() || gamma < 0.0 {
        return Err(Error::InvalidConfig(format!("gamma {gamma} must be >= 0")));
    }
    if est
        .bias
        .as_ref()
        .is_some_and(|b| b.len() != problem.theta0.len())
    {
        return Err(Error::LengthMismatch(
            est.bias.as_ref().map_or(0, Vec::len),
            problem.theta0.len(),
        ));
    }
    let bound = one_step_bound(problem, est, gamma);
    let grad = problem.gradient(&problem.theta0);
    let mean = est.mean(&grad);
    let step = |g: &[f64]| -> f64 {
        let next: Vec<f64> = problem
            .theta0
            .iter()
            .zip(g)
            .map(|(t, g)| t - gamma * g)
            .collect();
        problem.loss(&next)
    };
    let params = json!({"curvature": problem.curvature, "theta0": problem.theta0, "gamma": gamma,
                        "noise_std": est.noise_std, "bias": est.bias});
    if est.noise_std == 0.0 {
        let value = step(&mean);
        let pass = if problem.is_isotropic() {
            (value - bound).abs() <= 1e-12
        } else {
            value <= bound + 1e-12
        };
        return Ok(CheckReport {
            check: "one_step.exact".into(),
            params,
            target: bound,
            estimate: value,
            stderr: 0.0,
            pass,
        });
    }
    let mut rng = Rng::seed_from(seed);
    let mut acc = Moments::default();
    for _ in 0..samples.max(1) {
        let g: Vec<f64> = mean
            .iter()
            .map(|m| m + est.noise_std * rng.normal())
            .collect();
        acc.push(step(&g));
    }
    let e = acc.estimate();
    Ok(CheckReport {
        check: "one_step.noisy".into(),
        params,
        target: bound,
        estimate: e.mean,
        stderr: e.stderr,
        pass: e.mean <= bound + 3.0 * e.stderr + roundoff(bound),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Winner {
    Detach,
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetachDecision {
    /// `⟨∇loss, s⟩`.
    pub lhs: f64,
    /// `(Lγ/2)(E‖g_full‖² − E‖g_main‖²)`.
    pub rhs: f64,
    pub condition_holds: bool,
    /// `|lhs − rhs| > TIE_MARGIN · |rhs|`.
    pub decisive: bool,
    pub predicted: Winner,
    pub empirical: Winner,
    /// Mean of `loss_full − loss_detach` after one step, common draws.
    pub loss_gap: MeanEstimate,
}

impl DetachDecision {
    pub fn agrees(&self) -> bool {
        self.predicted == self.empirical
    }
}

/// Compare one step with `g_main` against one step with `g_main + g_skip`
/// on an isotropic quadratic whose gradient at `theta0` is `model.m`.
pub fn detach_condition_check(
    problem: &QuadraticProblem,
    model: &PathGradModel,
    gamma: f64,
    samples: usize,
    seed: u64,
) -> Result<DetachDecision> {
    if !problem.is_isotropic() {
        return Err(Error::NonIsotropicHessian);
    }
    let d = model.validate()?;
    if problem.theta0.len() != d {
        return Err(Error::LengthMismatch(problem.theta0.len(), d));
    }
    let grad = problem.gradient(&problem.theta0);
    let tol = 1e-9 * norm_sq(&model.m).sqrt().max(1.0);
    if grad.iter().zip(&model.m).any(|(g, m)| (g - m).abs() > tol) {
        return Err(Error::Precondition(
            "loss gradient at theta0 must equal the main-path mean".into(),
        ));
    }
    let l = problem.smoothness();
    let lhs = dot(&grad, &model.s);
    let rhs = 0.5 * l * gamma * (model.expected_full_sq() - model.expected_main_sq());
    let sampler = PairSampler::new(model)?;
    let mut rng = Rng::seed_from(seed);
    let mut acc = Moments::default();
    let mut next = vec![0.0; d];
    for _ in 0..samples.max(1) {
        let (gm, gs) = sampler.draw(&mut rng);
        for i in 0..d {
            next[i] = problem.theta0[i] - gamma * gm[i];
        }
        let detach = problem.loss(&next);
        for i in 0..d {
            next[i] = problem.theta0[i] - gamma * (gm[i] + gs[i]);
        }
        acc.push(problem.loss(&next) - detach);
    }
    let loss_gap = acc.estimate();
    let condition_holds = lhs <= rhs;
    Ok(DetachDecision {
        lhs,
        rhs,
        condition_holds,
        decisive: (lhs - rhs).abs() > TIE_MARGIN * rhs.abs(),
        predicted: if condition_holds {
            Winner::Detach
        } else {
            Winner::Full
        },
        empirical: if loss_gap.mean > 0.0 {
            Winner::Detach
        } else {
            Winner::Full
        },
        loss_gap,
    })
}

fn random_psd(d: usize, scale: f64, rng: &mut Rng) -> DMatrix<f64> {
    let g = DMatrix::from_fn(d, d, |_, _| rng.normal());
    (&g * g.transpose()) * (scale / d as f64)
}

fn to_rows(m: &DMatrix<f64>) -> Vec<f64> {
    let (r, c) = m.shape();
    (0..r * c).map(|i| m[(i / c, i % c)]).collect()
}

/// Seeded random model: `s = a·m + b·noise` and a random joint covariance
/// of overall scale `cov_scale`.
pub fn random_path_model(d: usize, cov_scale: f64, rng: &mut Rng) -> PathGradModel {
    let m: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
    let a = 2.0 * rng.uniform() - 1.0;
    let b = rng.uniform();
    let s = m.iter().map(|mi| a * mi + b * rng.normal()).collect();
    let joint = random_psd(2 * d, cov_scale, rng);
    PathGradModel {
        m,
        s,
        sigma_m: to_rows(&joint.view((0, 0), (d, d)).into_owned()),
        sigma_s: to_rows(&joint.view((d, d), (d, d)).into_owned()),
        sigma_ms: to_rows(&joint.view((0, d), (d, d)).into_owned()),
    }
}

/// Skip path that exactly cancels the main-path noise: `Σs = Σm`,
/// `Σms = −Σm`.
pub fn cancelling_model(m: Vec<f64>, s: Vec<f64>, sigma_m: Vec<f64>) -> PathGradModel {
    PathGradModel {
        sigma_s: sigma_m.clone(),
        sigma_ms: sigma_m.iter().map(|v| -v).collect(),
        m,
        s,
        sigma_m,
    }
}

/// Seeded Gaussian models: the two fixed anchors followed by random ones.
pub fn gaussian_models(count: usize, seed: u64) -> Vec<GaussianTriplet> {
    let mut rng = Rng::with_stream(seed, 0x6a55);
    let mut out = vec![
        GaussianTriplet {
            alpha: 1.0,
            beta: 0.0,
            sigma_noise: 0.5,
            corr: 0.3,
        },
        GaussianTriplet {
            alpha: 1.0,
            beta: 2.0,
            sigma_noise: 0.0,
            corr: 0.0,
        },
    ];
    while out.len() < count {
        out.push(GaussianTriplet {
            alpha: 4.0 * rng.uniform() - 2.0,
            beta: 4.0 * rng.uniform() - 2.0,
            sigma_noise: 2.0 * rng.uniform(),
            corr: 1.8 * rng.uniform() - 0.9,
        });
    }
    out.truncate(count);
    out
}

/// Seeded path models: a pure-variance case, a cancelling case, then random.
pub fn path_models(count: usize, d: usize, seed: u64) -> Vec<PathGradModel> {
    let mut rng = Rng::with_stream(seed, 0xe95);
    let eye: Vec<f64> = (0..d * d)
        .map(|i| if i % (d + 1) == 0 { 1.0 } else { 0.0 })
        .collect();
    let mut out = vec![
        PathGradModel {
            m: vec![0.0; d],
            s: vec![0.0; d],
            sigma_m: eye.clone(),
            sigma_s: eye.clone(),
            sigma_ms: vec![0.0; d * d],
        },
        cancelling_model(
            (0..d).map(|i| i as f64 + 1.0).collect(),
            vec![0.5; d],
            to_rows(&random_psd(d, 1.0, &mut rng)),
        ),
    ];
    while out.len() < count {
        let scale = 0.2 + 2.0 * rng.uniform();
        out.push(random_path_model(d, scale, &mut rng));
    }
    out.truncate(count);
    out
}

/// Draw random models until `wanted` decisive ones are found; returns every
/// decision evaluated, decisive or not.
pub fn detach_tournament(
    wanted: usize,
    d: usize,
    gamma: f64,
    samples: usize,
    seed: u64,
) -> Result<Vec<DetachDecision>> {
    let mut out = Vec::new();
    let mut decisive = 0;
    let mut batch_start = 0u64;
    while decisive < wanted {
        let batch: Vec<u64> = (batch_start..batch_start + 16).collect();
        batch_start += 16;
        let results: Vec<Result<DetachDecision>> = batch
            .par_iter()
            .map(|&i| {
                let mut rng = Rng::with_stream(seed, 0xd7ac << 20 | i);
                let scale = 0.05 + rng.uniform();
                let model = random_path_model(d, scale, &mut rng);
                let problem = QuadraticProblem::with_gradient(1.0, &model.m);
                detach_condition_check(&problem, &model, gamma, samples, seed.wrapping_add(i))
            })
            .collect();
        for r in results {
            let r = r?;
            if decisive < wanted && r.decisive {
                decisive += 1;
                out.push(r);
            } else if !r.decisive {
                out.push(r);
            }
        }
        if batch_start > 100 * wanted as u64 + 1000 {
            return Err(Error::Precondition("too few decisive models".into()));
        }
    }
    Ok(out)
}

/// Sizes for [`theory_suite`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TheoryConfig {
    pub seed: u64,
    pub models: usize,
    pub gap_samples: usize,
    pub moment_samples: usize,
    pub step_samples: usize,
    pub detach_models: usize,
    pub detach_samples: usize,
    pub gamma: f64,
    pub dim: usize,
}

impl Default for TheoryConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            models: 20,
            gap_samples: 200_000,
            moment_samples: 100_000,
            step_samples: 100_000,
            detach_models: 50,
            detach_samples: 200_000,
            gamma: 0.5,
            dim: 3,
        }
    }
}

/// Every check at the configured sizes, in a fixed order.
pub fn theory_suite(cfg: &TheoryConfig) -> Result<Vec<CheckReport>> {
    let gap: Vec<Vec<CheckReport>> = gaussian_models(cfg.models, cfg.seed)
        .par_iter()
        .enumerate()
        .map(|(i, m)| bayes_gap_reports(m, cfg.gap_samples, cfg.seed ^ (i as u64) << 8))
        .collect::<Result<_>>()?;
    let moments: Vec<CheckReport> = path_models(cfg.models, cfg.dim, cfg.seed)
        .par_iter()
        .enumerate()
        .map(|(i, m)| second_moment_check(m, cfg.moment_samples, cfg.seed ^ (i as u64) << 16))
        .collect::<Result<_>>()?;
    let mut out: Vec<CheckReport> = gap.into_iter().flatten().chain(moments).collect();

    let theta0 = vec![1.0; 2];
    let quad = QuadraticProblem::isotropic(1.0, theta0);
    out.push(one_step_check(
        &quad,
        &GradEstimator::exact(),
        0.1,
        1,
        cfg.seed,
    )?);
    out.push(one_step_check(
        &quad,
        &GradEstimator::exact(),
        0.0,
        1,
        cfg.seed,
    )?);
    let mut rng = Rng::with_stream(cfg.seed, 0x57e9);
    for i in 0..cfg.models {
        let d = cfg.dim;
        let problem = QuadraticProblem {
            curvature: (0..d).map(|_| 0.5 + rng.uniform()).collect(),
            theta0: (0..d).map(|_| rng.normal()).collect(),
        };
        let est = GradEstimator {
            bias: Some((0..d).map(|_| 0.3 * rng.normal()).collect()),
            noise_std: 0.2 + rng.uniform(),
        };
        let gamma = 0.05 + 0.5 * rng.uniform();
        out.push(one_step_check(
            &problem,
            &est,
            gamma,
            cfg.step_samples,
            cfg.seed ^ (i as u64) << 24,
        )?);
    }

    for r in detach_tournament(
        cfg.detach_models,
        cfg.dim,
        cfg.gamma,
        cfg.detach_samples,
        cfg.seed,
    )? {
        out.push(CheckReport {
            check: if r.decisive {
                "detach_condition"
            } else {
                "detach_condition.near_tie"
            }
            .into(),
            params: json!({"gamma": cfg.gamma, "lhs": r.lhs, "rhs": r.rhs, "margin": TIE_MARGIN,
                           "predicted": r.predicted, "empirical": r.empirical}),
            target: r.rhs - r.lhs,
            estimate: r.loss_gap.mean / cfg.gamma,
            stderr: r.loss_gap.stderr / cfg.gamma,
            pass: !r.decisive || r.agrees(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn analytic_gap_examples() {
        let m = GaussianTriplet {
            alpha: 1.0,
            beta: 0.0,
            sigma_noise: 1.0,
            corr: 0.5,
        };
        assert_eq!(bayes_gap_analytic(&m).unwrap(), 0.0);
        let m = GaussianTriplet {
            alpha: 1.0,
            beta: 2.0,
            sigma_noise: 0.0,
            corr: 0.0,
        };
        assert_eq!(bayes_gap_analytic(&m).unwrap(), 4.0);
        let m = GaussianTriplet {
            alpha: 1.0,
            beta: 1.0,
            sigma_noise: 0.0,
            corr: 1.0,
        };
        assert!(bayes_gap_analytic(&m).is_err());
    }

    #[test]
    fn exact_step_factor() {
        let q = QuadraticProblem::isotropic(1.0, vec![1.0, 1.0]);
        let r = one_step_check(&q, &GradEstimator::exact(), 0.1, 1, 0).unwrap();
        assert!((r.estimate - 0.81).abs() < 1e-12 && (r.target - 0.81).abs() < 1e-12);
        assert!(r.pass);
        let r = one_step_check(&q, &GradEstimator::exact(), 0.0, 1, 0).unwrap();
        assert_eq!(r.estimate, q.loss(&q.theta0));
        assert_eq!(r.target, q.loss(&q.theta0));
    }

    #[test]
    fn non_psd_rejected() {
        let m = PathGradModel {
            m: vec![0.0],
            s: vec![0.0],
            sigma_m: vec![1.0],
            sigma_s: vec![1.0],
            sigma_ms: vec![2.0],
        };
        assert!(matches!(
            PairSampler::new(&m),
            Err(Error::NotPositiveSemidefinite(_))
        ));
    }

    #[test]
    fn anisotropic_detach_check_rejected() {
        let m = cancelling_model(vec![1.0, 1.0], vec![0.0, 0.0], vec![1.0, 0.0, 0.0, 1.0]);
        let q = QuadraticProblem {
            curvature: vec![1.0, 2.0],
            theta0: vec![1.0, 0.5],
        };
        assert!(matches!(
            detach_condition_check(&q, &m, 0.1, 10, 0),
            Err(Error::NonIsotropicHessian)
        ));
    }

    #[test]
    fn cancelling_model_has_constant_sum() {
        let m = cancelling_model(vec![1.0, 0.0], vec![0.0, 1.0], vec![2.0, 0.5, 0.5, 1.0]);
        let r = second_moment_check(&m, 10_000, 3).unwrap();
        assert!((r.target - 2.0).abs() < 1e-12);
        assert!(r.stderr < 1e-9, "{}", r.stderr);
        assert!(r.pass);
    }
}
