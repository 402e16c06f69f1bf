use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use detachlab::emit::{self, Panel, PlotSpec, Series};
use detachlab::recon::{self, AdapterKind};
use detachlab::runlab::{self, ExperimentSpec};
use detachlab::theory::{theory_suite, TheoryConfig};
use detachlab::{Error, Result};

/// Output root used when `--out` is absent.
const OUT_ENV: &str = "DETACHLAB_OUT";

#[derive(Parser)]
#[command(
    name = "detachlab",
    version,
    about = "Detached skip fusion experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON experiment spec; defaults apply to anything it omits.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run a single seed instead of the spec's list.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override a spec field by dotted path, e.g. `fusion.stride=4`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the fusion model on the dense glyph task.
    Train(Common),
    /// Record main/skip gradient dynamics of the first tapped block.
    Dynamics(Common),
    /// Stride × detach-count grid.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
        strides: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        detach: Vec<usize>,
    },
    /// Transition step and medians across learning rates.
    Lrsweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "3e-4,1e-3,3e-3")]
        lrs: Vec<f64>,
    },
    /// Reconstruction probe: modality ablation and adapter sensitivity.
    Probe {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "1,4,16")]
        widths: Vec<usize>,
    },
    /// Monte-Carlo checks of the analytic results.
    Theory {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Plot numeric fields of a JSONL stream against `step`.
    Plot {
        input: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "loss")]
        fields: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NonFinite { .. } => 3,
        Error::Io { .. } => 4,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn set_path(root: &mut Value, key: &str, raw: &str) -> Result<()> {
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node.as_object_mut().ok_or_else(|| {
            Error::InvalidConfig(format!("`{key}` does not name an object field"))
        })?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

fn load_spec(c: &Common, suite: &str) -> Result<ExperimentSpec> {
    let mut spec = match &c.config {
        Some(p) => ExperimentSpec::load(p)?,
        None => ExperimentSpec {
            suite: suite.into(),
            ..ExperimentSpec::default()
        },
    };
    if !c.overrides.is_empty() {
        let mut v = serde_json::to_value(&spec)?;
        for o in &c.overrides {
            let (k, val) = o
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("override `{o}` is not KEY=VALUE")))?;
            set_path(&mut v, k, val)?;
        }
        spec = serde_json::from_value(v)?;
    }
    if let Some(s) = c.seed {
        spec.seeds = vec![s];
    }
    if let Some(n) = c.steps {
        spec.steps = n;
    }
    if let Some(out) = c
        .out
        .clone()
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
    {
        spec.output_dir = out;
    }
    spec.validate()?;
    Ok(spec)
}

fn suite_dir(spec: &ExperimentSpec) -> Result<PathBuf> {
    let dir = spec.output_dir.join(&spec.suite);
    std::fs::create_dir_all(&dir).map_err(|e| Error::Io {
        path: dir.clone(),
        source: e,
    })?;
    Ok(dir)
}

fn run(cmd: Command) -> Result<u8> {
    match cmd {
        Command::Train(c) => train(&load_spec(&c, "train")?),
        Command::Dynamics(c) => dynamics(&load_spec(&c, "dynamics")?),
        Command::Ablate {
            common,
            strides,
            detach,
        } => ablate(&load_spec(&common, "ablate")?, &strides, &detach),
        Command::Lrsweep { common, lrs } => lrsweep(&load_spec(&common, "lrsweep")?, &lrs),
        Command::Probe { common, widths } => probe(&load_spec(&common, "probe")?, &widths),
        Command::Theory { out, seed } => theory(out, seed),
        Command::Plot { input, fields, out } => plot(&input, &fields, &out),
    }
}

fn train(spec: &ExperimentSpec) -> Result<u8> {
    let dir = suite_dir(spec)?;
    let runs = runlab::run_training_seeds(spec)?;
    let mut code = 0;
    for run in &runs {
        emit::write_lines(&dir.join(format!("{}.jsonl", run.run_id)), &run.jsonl())?;
        match &run.failure {
            Some(f) => {
                eprintln!("{}: {}", run.run_id, f.detail);
                code = 3;
            }
            None => println!(
                "{} final loss {:.6} eval {:?}",
                run.run_id,
                run.losses().last().copied().unwrap_or(f64::NAN),
                run.eval_loss
            ),
        }
    }
    runlab::write_sidecar(&dir, spec)?;
    Ok(code)
}

fn dynamics(spec: &ExperimentSpec) -> Result<u8> {
    let dir = suite_dir(spec)?;
    for &seed in &spec.seeds {
        let run = runlab::run_grad_dynamics(spec, seed)?;
        let id = &run.train.run_id;
        emit::write_lines(&dir.join(format!("{id}.snapshots.jsonl")), &run.jsonl())?;
        emit::write_lines(&dir.join(format!("{id}.jsonl")), &run.train.jsonl())?;
        let svg = runlab::dynamics_svg(&run, spec.dynamics.smoothing)?;
        emit::write_bytes(&dir.join(format!("{id}.svg")), svg.as_bytes())?;
        println!(
            "{id} t_trans {} early c_hat {:?}",
            run.t_trans_step().map_or("/".into(), |t| t.to_string()),
            run.early.as_ref().and_then(|a| a.c_hat)
        );
        if run.train.failure.is_some() {
            return Ok(3);
        }
    }
    runlab::write_sidecar(&dir, spec)?;
    Ok(0)
}

fn ablate(spec: &ExperimentSpec, strides: &[usize], detach: &[usize]) -> Result<u8> {
    let dir = suite_dir(spec)?;
    let report = runlab::run_ablation_grid(spec, strides, detach)?;
    for s in &report.skipped {
        eprintln!("skipped S={} D={}: {}", s.stride, s.detach, s.reason);
    }
    let (header, rows) = runlab::grid_csv(&report);
    emit::write_csv(&dir.join("grid.csv"), &header, &rows)?;
    emit::write_bytes(&dir.join("grid.svg"), runlab::grid_svg(&report)?.as_bytes())?;
    emit::write_bytes(
        &dir.join("grid.json"),
        serde_json::to_string_pretty(&report)?.as_bytes(),
    )?;
    print!("{}", emit::csv_string(&header, &rows));
    runlab::write_sidecar(&dir, spec)?;
    Ok(0)
}

fn lrsweep(spec: &ExperimentSpec, lrs: &[f64]) -> Result<u8> {
    let dir = suite_dir(spec)?;
    let rows = runlab::run_lr_sweep(spec, lrs)?;
    let (header, body) = runlab::lr_csv(&rows);
    emit::write_csv(&dir.join("lr_sweep.csv"), &header, &body)?;
    print!("{}", emit::csv_string(&header, &body));
    runlab::write_sidecar(&dir, spec)?;
    Ok(0)
}

fn probe(spec: &ExperimentSpec, widths: &[usize]) -> Result<u8> {
    let dir = suite_dir(spec)?;
    let mut cfg = spec.probe.clone().unwrap_or_default();
    if spec.steps != ExperimentSpec::default().steps {
        cfg.max_steps = spec.steps;
    }
    let (train, eval) = recon::probe_splits(&cfg)?;
    let mut adapters = vec![AdapterKind::Identity];
    adapters.extend(widths.iter().map(|&w| AdapterKind::bottleneck(w)));
    let mut summary = Vec::new();
    for &seed in &spec.seeds {
        let rep = recon::adapter_sensitivity(&train, &eval, &adapters, &cfg, seed)?;
        for r in &rep.runs {
            emit::write_lines(&dir.join(format!("{}.jsonl", r.run_id)), &r.jsonl())?;
            summary.push(serde_json::json!({
                "run_id": r.run_id,
                "final_loss": r.final_loss,
                "steps_to_threshold": r.steps_to_threshold,
            }));
        }
        for row in recon::modality_ablation(&train, &eval, &cfg, seed)? {
            let r = &row.run;
            emit::write_lines(&dir.join(format!("{}.jsonl", r.run_id)), &r.jsonl())?;
            summary.push(serde_json::json!({
                "run_id": r.run_id,
                "final_loss": r.final_loss,
                "steps_to_threshold": r.steps_to_threshold,
            }));
        }
    }
    for s in &summary {
        println!("{s}");
    }
    let seed = spec.seeds.first().copied().unwrap_or(0);
    let items = recon::prepare(&eval[..eval.len().min(4)], &cfg, true, false)?;
    let masked_train = recon::prepare(&train, &cfg, true, false)?;
    let eval_items = recon::prepare(&eval, &cfg, true, false)?;
    let (_, model) = recon::train_probe(
        &cfg,
        AdapterKind::Identity,
        &masked_train,
        &eval_items,
        seed,
        "recon",
    )?;
    for (i, item) in items.iter().enumerate() {
        recon::write_reconstruction(&model, item, &dir, &format!("masked{i}"))?;
    }
    emit::write_lines(
        &dir.join("summary.jsonl"),
        &summary.iter().map(Value::to_string).collect::<Vec<_>>(),
    )?;
    runlab::write_sidecar(&dir, spec)?;
    Ok(0)
}

fn theory(out: Option<PathBuf>, seed: Option<u64>) -> Result<u8> {
    let cfg = TheoryConfig {
        seed: seed.unwrap_or(TheoryConfig::default().seed),
        ..TheoryConfig::default()
    };
    let reports = theory_suite(&cfg)?;
    let lines: Vec<String> = reports
        .iter()
        .map(serde_json::to_string)
        .collect::<std::result::Result<_, _>>()?;
    if let Some(dir) = out.or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from)) {
        emit::write_lines(&dir.join("theory").join("theory.jsonl"), &lines)?;
    }
    let failed = reports.iter().filter(|r| !r.pass).count();
    for r in &reports {
        println!(
            "{:<34} {} estimate {:.6e} target {:.6e}",
            r.check,
            if r.pass { "ok  " } else { "FAIL" },
            r.estimate,
            r.target
        );
    }
    println!("{} checks, {failed} failed", reports.len());
    Ok(0)
}

fn field(v: &Value, name: &str) -> Option<f64> {
    v.get(name)
        .or_else(|| v.get("values").and_then(|m| m.get(name)))
        .and_then(Value::as_f64)
}

fn plot(input: &Path, fields: &[String], out: &Path) -> Result<u8> {
    let text = std::fs::read_to_string(input).map_err(|e| Error::Io {
        path: input.to_path_buf(),
        source: e,
    })?;
    let rows = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str::<Value>)
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let panels: Vec<Panel> = fields
        .iter()
        .map(|f| Panel {
            title: f.clone(),
            x_label: "step".into(),
            y_label: f.clone(),
            series: vec![Series::line(
                f.clone(),
                rows.iter()
                    .filter_map(|r| Some((field(r, "step")?, field(r, f)?)))
                    .collect(),
            )],
        })
        .collect();
    let spec = PlotSpec {
        title: input.display().to_string(),
        ..PlotSpec::default()
    };
    emit::write_bytes(out, emit::emit_svg_plot(&panels, &spec)?.as_bytes())?;
    Ok(0)
}
