//! Independent oracles and graph builders shared by the integration tests.
#![allow(dead_code)]

use detachlab::autograd::{Rng, Tape, Tensor, Var};
use detachlab::pathwise::GradSnapshot;
use detachlab::Result;

pub const GRAD_TOL: f64 = 1e-6;
pub const FD_STEP: f64 = 1e-5;

pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}

/// Scalar loss `Σ w ⊙ y` with a fixed random weight, so every output
/// coordinate matters and no gradient vanishes by symmetry.
pub fn weighted_sum(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(y).shape().to_vec();
    let w = Tensor::randn(shape, 1.0, &mut Rng::with_stream(seed, 0xfeed));
    let w = tape.constant(w)?;
    let prod = tape.mul(y, w)?;
    tape.sum(prod)
}

type Case = Box<dyn Fn(&mut Tape, Var) -> Result<Var> + Sync>;

/// `(op name, input, scalar function of the input)` for instance `seed`.
/// Binary ops are checked against each operand in turn.
pub fn op_instances(seed: u64) -> Vec<(&'static str, Tensor, Case)> {
    let mut rng = Rng::with_stream(seed, 0x0b5);
    // Three or more channels: layer norm over two is constant up to eps.
    let (r, c) = (2 + rng.below(3), 3 + rng.below(4));
    let x = Tensor::randn([r, c], 1.0, &mut rng);
    let other = Tensor::randn([r, c], 1.0, &mut rng);
    let right = Tensor::randn([c, 3], 1.0, &mut rng);
    let left = Tensor::randn([3, r], 1.0, &mut rng);
    let target = Tensor::randn([r, c], 1.0, &mut rng);
    let table = Tensor::randn([5, c], 1.0, &mut rng);
    let ids: Vec<usize> = (0..r + 1).map(|_| rng.below(5)).collect();
    let p = 0.1 + 0.5 * rng.uniform();

    let mut out: Vec<(&'static str, Tensor, Case)> = Vec::new();
    {
        let b = right.clone();
        out.push((
            "matmul",
            x.clone(),
            Box::new(move |t, v| {
                let b = t.constant(b.clone())?;
                let y = t.matmul(v, b)?;
                weighted_sum(t, y, seed)
            }),
        ));
        let a = left.clone();
        out.push((
            "matmul",
            x.clone(),
            Box::new(move |t, v| {
                let a = t.constant(a.clone())?;
                let y = t.matmul(a, v)?;
                weighted_sum(t, y, seed)
            }),
        ));
    }
    for name in ["add", "mul"] {
        for lhs in [true, false] {
            let o = other.clone();
            out.push((
                name,
                x.clone(),
                Box::new(move |t, v| {
                    let o = t.constant(o.clone())?;
                    let (a, b) = if lhs { (v, o) } else { (o, v) };
                    let y = if name == "add" {
                        t.add(a, b)?
                    } else {
                        t.mul(a, b)?
                    };
                    weighted_sum(t, y, seed)
                }),
            ));
        }
    }
    {
        let o = other.clone();
        out.push((
            "concat_channels",
            x.clone(),
            Box::new(move |t, v| {
                let o = t.constant(o.clone())?;
                let sq = t.mul(v, v)?;
                let y = t.concat_channels(&[o, v, sq])?;
                weighted_sum(t, y, seed)
            }),
        ));
    }
    out.push((
        "gelu",
        x.clone(),
        Box::new(move |t, v| {
            let y = t.gelu(v)?;
            weighted_sum(t, y, seed)
        }),
    ));
    out.push((
        "softmax",
        x.clone(),
        Box::new(move |t, v| {
            let y = t.softmax(v)?;
            weighted_sum(t, y, seed)
        }),
    ));
    out.push((
        "layer_norm",
        x.clone(),
        Box::new(move |t, v| {
            let y = t.layer_norm(v)?;
            weighted_sum(t, y, seed)
        }),
    ));
    out.push((
        "dropout",
        x.clone(),
        Box::new(move |t, v| {
            // Same stream on every call: the mask is a constant of the function.
            let y = t.dropout(v, p, &mut Rng::with_stream(seed, 0xd0))?;
            weighted_sum(t, y, seed)
        }),
    ));
    out.push((
        "mse_loss",
        x.clone(),
        Box::new(move |t, v| t.mse_loss(v, &target)),
    ));
    out.push((
        "embed_lookup",
        table,
        Box::new(move |t, v| {
            let y = t.embed_lookup(v, &ids)?;
            weighted_sum(t, y, seed)
        }),
    ));
    out
}

pub const OP_SET: [&str; 10] = [
    "matmul",
    "add",
    "mul",
    "concat_channels",
    "gelu",
    "softmax",
    "layer_norm",
    "dropout",
    "mse_loss",
    "embed_lookup",
];

/// Random DAG over `x` with one edge that can be detached.
pub struct DetachGraph {
    pub x: Tensor,
    pub ops: Vec<u8>,
    pub seed: u64,
}

impl DetachGraph {
    pub fn random(seed: u64) -> Self {
        let mut rng = Rng::with_stream(seed, 0x57);
        let (n, c) = (2 + rng.below(4), 4 + rng.below(3));
        let x = Tensor::randn([n, c], 1.0, &mut rng);
        let ops = (0..3 + rng.below(4)).map(|_| rng.below(5) as u8).collect();
        Self { x, ops, seed }
    }

    fn chain(&self, t: &mut Tape, mut h: Var) -> Result<Var> {
        let c = self.x.cols();
        let mut rng = Rng::with_stream(self.seed, 0xc4a1);
        for &op in &self.ops {
            h = match op {
                0 => t.gelu(h)?,
                1 => t.softmax(h)?,
                2 => t.layer_norm(h)?,
                3 => {
                    let k = t.constant(Tensor::randn(self.x.shape().to_vec(), 1.0, &mut rng))?;
                    t.mul(h, k)?
                }
                _ => {
                    let m = t.constant(Tensor::randn([c, c], 0.7, &mut rng))?;
                    t.matmul(h, m)?
                }
            };
        }
        Ok(h)
    }

    /// `sum(w ⊙ (f(x) + g(x')))` where `x' = gelu(x)` optionally passes
    /// through stop-gradient. Returns `(loss, x', cut)` where `cut` is the
    /// node consumed downstream.
    pub fn build(&self, t: &mut Tape, x: Var, detach: bool) -> Result<(Var, Var, Var)> {
        let live = self.chain(t, x)?;
        let branch = t.gelu(x)?;
        let cut = if detach {
            t.stop_gradient(branch)?
        } else {
            branch
        };
        let side = t.layer_norm(cut)?;
        let y = t.add(live, side)?;
        Ok((weighted_sum(t, y, self.seed)?, branch, cut))
    }

    /// The same function with the branch frozen to its value at `self.x`.
    pub fn live_only(&self, t: &mut Tape, x: Var) -> Result<Var> {
        let live = self.chain(t, x)?;
        let mut scratch = Tape::new();
        let xc = scratch.constant(self.x.clone())?;
        let frozen = scratch.gelu(xc)?;
        let c = t.constant(scratch.value(frozen).clone())?;
        let side = t.layer_norm(c)?;
        let y = t.add(live, side)?;
        weighted_sum(t, y, self.seed)
    }
}

/// Random snapshot window with `k` entries of dimension `d`.
pub fn random_window(rng: &mut Rng, k: usize, d: usize) -> Vec<GradSnapshot> {
    let scale_m = 0.1 + 3.0 * rng.uniform();
    let scale_s = 0.1 + 3.0 * rng.uniform();
    let bias: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
    (0..k)
        .map(|i| {
            let main: Vec<f64> = bias.iter().map(|b| b + scale_m * rng.normal()).collect();
            let skip: Vec<f64> = main
                .iter()
                .map(|m| 0.3 * m + scale_s * rng.normal())
                .collect();
            GradSnapshot::from_parts(i, main, skip).unwrap()
        })
        .collect()
}

fn columns(window: &[GradSnapshot], pick: fn(&GradSnapshot) -> &[f64]) -> Vec<Vec<f64>> {
    window.iter().map(|s| pick(s).to_vec()).collect()
}

fn centered(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let k = rows.len() as f64;
    let d = rows[0].len();
    let mean: Vec<f64> = (0..d)
        .map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / k)
        .collect();
    rows.iter()
        .map(|r| r.iter().zip(&mean).map(|(v, m)| v - m).collect())
        .collect()
}

/// Two-pass population trace `(1/K) Σ ‖g_i − ḡ‖²`.
pub fn oracle_trace(rows: &[Vec<f64>]) -> f64 {
    let c = centered(rows);
    c.iter().flatten().map(|v| v * v).sum::<f64>() / rows.len() as f64
}

pub fn oracle_trace_main(w: &[GradSnapshot]) -> f64 {
    oracle_trace(&columns(w, |s| &s.main))
}

pub fn oracle_trace_skip(w: &[GradSnapshot]) -> f64 {
    oracle_trace(&columns(w, |s| &s.skip))
}

/// `2 |(1/K) Σ ⟨m_i − m̄, s_i − s̄⟩| / (tr Σ_skip + 1e-12)` from centred rows.
pub fn oracle_delta(w: &[GradSnapshot]) -> f64 {
    let m = centered(&columns(w, |s| &s.main));
    let s = centered(&columns(w, |s| &s.skip));
    let cov: f64 = m
        .iter()
        .zip(&s)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>())
        .sum::<f64>()
        / w.len() as f64;
    2.0 * cov.abs() / (oracle_trace_skip(w) + 1e-12)
}

/// `‖ḡ‖² / (‖ḡ‖² + tr Σ)` for the main branch.
pub fn oracle_snr_main(w: &[GradSnapshot]) -> f64 {
    let rows = columns(w, |s| &s.main);
    let k = rows.len() as f64;
    let mean_sq: f64 = (0..rows[0].len())
        .map(|j| (rows.iter().map(|r| r[j]).sum::<f64>() / k).powi(2))
        .sum();
    let denom = mean_sq + oracle_trace(&rows);
    if denom == 0.0 {
        0.0
    } else {
        mean_sq / denom
    }
}

/// Brute force: every trailing median computed by sorting, then a linear
/// scan for the first run of `c` spaced medians all below one.
pub fn oracle_t_trans(ratio: &[f64], w: usize, c: usize) -> Option<usize> {
    let medians: Vec<Option<f64>> = (0..ratio.len())
        .map(|t| {
            if t + 1 < w {
                return None;
            }
            let mut v = ratio[t + 1 - w..=t].to_vec();
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            Some(if w % 2 == 1 {
                v[w / 2]
            } else {
                (v[w / 2 - 1] + v[w / 2]) / 2.0
            })
        })
        .collect();
    'outer: for t in 0..ratio.len() {
        for j in 0..c {
            match medians.get(t + j * w).copied().flatten() {
                Some(m) if m < 1.0 => {}
                _ => continue 'outer,
            }
        }
        return Some(t);
    }
    None
}
