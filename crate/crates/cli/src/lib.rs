//! Commands behind the `metrosynth` binary.

use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use thiserror::Error;

use metrosynth::agents::{Agent, AgentParameters};
use metrosynth::config::RunConfig;
use metrosynth::models::{dc_lower_bound, BoundSpec, Regime, SensorModel};
use metrosynth::precision::{bin_precision, PrecisionPoint};
use metrosynth::simulation::{evaluate, EpisodeSummary};
use metrosynth::training::{pointwise_value, train, HistoryRow, Pointwise};

/// Episodes whose control trajectories are written separately.
pub const TRAJECTORY_EXAMPLES: usize = 5;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] metrosynth::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("invalid argument `{arg}`: {reason}")]
    Usage { arg: String, reason: String },
}

impl CliError {
    fn usage(arg: &str, reason: impl Into<String>) -> Self {
        CliError::Usage {
            arg: arg.to_string(),
            reason: reason.into(),
        }
    }

    /// 2 for configuration problems, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(metrosynth::Error::Config { .. }) | CliError::Usage { .. } => 2,
            _ => 1,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn read(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(io_err(path))
}

fn write(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(io_err(path))
}

pub fn load_config(path: &Path) -> CliResult<RunConfig> {
    Ok(RunConfig::from_json(&read(path)?)?)
}

/// A fresh `<out>/<command>-<timestamp>` directory; never reuses an existing one.
pub fn run_directory(out: &Path, command: &str) -> CliResult<PathBuf> {
    fs::create_dir_all(out).map_err(io_err(out))?;
    let stamp = chrono::Local::now().format("%Y%m%dT%H%M%S%.3f").to_string();
    let base = out.join(format!("{command}-{stamp}"));
    let mut dir = base.clone();
    let mut n = 1;
    loop {
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                dir = PathBuf::from(format!("{}-{n}", base.display()));
                n += 1;
            }
            Err(e) => return Err(io_err(&dir)(e)),
        }
    }
}

fn csv_writer(path: &Path) -> CliResult<csv::Writer<fs::File>> {
    let f = fs::File::create(path).map_err(io_err(path))?;
    Ok(csv::Writer::from_writer(f))
}

fn num(x: f64) -> String {
    format!("{x}")
}

/// Train the configured agent; writes checkpoint, loss history, timing and the resolved config.
pub fn cmd_train(config: &Path, seed: Option<u64>, out: &Path) -> CliResult<PathBuf> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if !cfg.is_trainable() {
        return Err(CliError::Core(metrosynth::Error::config(
            "agent.kind",
            "only mlp and static_table agents can be trained",
        )));
    }
    let model = cfg.build_model()?;
    let params = cfg
        .initial_parameters(model.as_ref())?
        .expect("trainable agents have parameters");
    let spec = cfg.loss_spec(model.as_ref())?;
    let dir = run_directory(out, "train")?;
    write(&dir.join("config.json"), &cfg.to_json()?)?;
    info!("training {} for {} steps into {}", model.name(), cfg.steps, dir.display());
    let trained = train(model.as_ref(), params, &cfg.simulation(), &spec, &cfg.training(), |row| {
        info!("step {} loss {:.6e}", row.step, row.loss)
    })?;
    write(&dir.join("checkpoint.json"), &trained.params.to_json()?)?;
    write_history(&dir, &trained.history)?;
    Ok(dir)
}

fn write_history(dir: &Path, history: &[HistoryRow]) -> CliResult<()> {
    let mut h = csv_writer(&dir.join("history.csv"))?;
    h.write_record(["step", "loss", "learning_rate"])?;
    let mut t = csv_writer(&dir.join("timing.csv"))?;
    t.write_record(["step", "seconds"])?;
    for r in history {
        h.write_record([r.step.to_string(), num(r.loss), num(r.learning_rate)])?;
        t.write_record([r.step.to_string(), num(r.seconds)])?;
    }
    h.flush().map_err(io_err(&dir.join("history.csv")))?;
    t.flush().map_err(io_err(&dir.join("timing.csv")))?;
    Ok(())
}

/// Seed used for evaluation episodes when none is given, distinct from the training stream.
pub fn default_evaluation_seed(train_seed: u64) -> u64 {
    train_seed ^ 0x5EED_E7A1_0000_0001
}

/// The agent described by `cfg`, with parameters from `checkpoint` when given.
pub fn resolve_agent(cfg: &RunConfig, model: &dyn SensorModel, checkpoint: Option<&Path>) -> CliResult<Agent> {
    let params = match checkpoint {
        Some(path) => {
            if !cfg.is_trainable() {
                warn!("checkpoint ignored for a parameter-free agent");
                None
            } else {
                let p = AgentParameters::from_json(&read(path)?)?;
                let sim = cfg.simulation();
                p.check_compatible(
                    metrosynth::simulation::input_dim(model),
                    &model.controls(),
                    sim.steps_for(model),
                )?;
                Some(p)
            }
        }
        None => {
            if cfg.is_trainable() {
                warn!("no checkpoint given; evaluating the initial parameters");
            }
            None
        }
    };
    Ok(cfg.build_agent(model, params)?)
}

/// Evaluate E episodes and write per-step rows, precision points and example trajectories.
pub fn cmd_evaluate(
    config: &Path,
    checkpoint: Option<&Path>,
    episodes: usize,
    seed: Option<u64>,
    out: &Path,
) -> CliResult<PathBuf> {
    let cfg = load_config(config)?;
    let model = cfg.build_model()?;
    let agent = resolve_agent(&cfg, model.as_ref(), checkpoint)?;
    let spec = cfg.loss_spec(model.as_ref())?;
    let seed = seed.unwrap_or_else(|| default_evaluation_seed(cfg.seed));
    let summaries = evaluate(model.as_ref(), &agent, &cfg.simulation(), episodes, seed)?;
    let dir = run_directory(out, "evaluate")?;
    write_evaluation(&dir, model.as_ref(), &summaries, spec.pointwise, &spec.weights)?;
    Ok(dir)
}

fn loss_column(p: Pointwise) -> &'static str {
    match p {
        Pointwise::Mse => "SquaredError",
        Pointwise::Discrimination => "ProbError",
    }
}

fn axis_names(prefix: &str, d: usize) -> Vec<String> {
    if d == 1 {
        vec![prefix.to_string()]
    } else {
        (0..d).map(|i| format!("{prefix}{i}")).collect()
    }
}

/// Write evaluation.csv, points.csv and trajectories.csv.
pub fn write_evaluation(
    dir: &Path,
    model: &dyn SensorModel,
    summaries: &[EpisodeSummary],
    pointwise: Pointwise,
    weights: &metrosynth::autodiff::Tensor,
) -> CliResult<()> {
    let d = model.param_dim();
    let controls: Vec<String> = model.controls().into_iter().map(|c| c.name).collect();
    let mut header: Vec<String> = vec!["Episode".into(), "MeasStep".into(), "Resources".into()];
    header.extend(controls.iter().cloned());
    header.push("Outcome".into());
    header.extend(axis_names("Estimator", d));
    header.extend(axis_names("Truth", d));
    header.push(loss_column(pointwise).into());

    let mut ev = csv_writer(&dir.join("evaluation.csv"))?;
    ev.write_record(&header)?;
    let mut pts = csv_writer(&dir.join("points.csv"))?;
    pts.write_record(["Resources", "Loss"])?;
    let mut tr = csv_writer(&dir.join("trajectories.csv"))?;
    let mut th: Vec<String> = vec!["Episode".into(), "MeasStep".into(), "Resources".into()];
    th.extend(controls.iter().cloned());
    tr.write_record(&th)?;

    for (k, e) in summaries.iter().enumerate() {
        for (t, s) in e.steps.iter().enumerate() {
            let loss = pointwise_value(pointwise, weights, &s.estimate, &e.theta);
            let mut row = vec![k.to_string(), (t + 1).to_string(), num(s.cumulative)];
            row.extend(s.control.iter().map(|&c| num(c)));
            row.push(s.outcome.to_string());
            row.extend(s.estimate.iter().map(|&x| num(x)));
            row.extend(e.theta.iter().map(|&x| num(x)));
            row.push(num(loss));
            ev.write_record(&row)?;
            pts.write_record([num(s.cumulative), num(loss)])?;
            if k < TRAJECTORY_EXAMPLES {
                let mut row = vec![k.to_string(), (t + 1).to_string(), num(s.cumulative)];
                row.extend(s.control.iter().map(|&c| num(c)));
                tr.write_record(&row)?;
            }
        }
    }
    for (w, name) in [(&mut ev, "evaluation.csv"), (&mut pts, "points.csv"), (&mut tr, "trajectories.csv")] {
        w.flush().map_err(io_err(&dir.join(name)))?;
    }
    Ok(())
}

pub fn read_points(path: &Path) -> CliResult<Vec<PrecisionPoint>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(source) => CliError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => CliError::usage("points", format!("{other:?}")),
    })?;
    Ok(r.deserialize().collect::<Result<Vec<PrecisionPoint>, _>>()?)
}

/// Bin a points CSV into barycenters of width δ.
pub fn cmd_precision_bin(points: &Path, delta: f64, out: &Path) -> CliResult<PathBuf> {
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(CliError::usage("delta", "bin width must be positive"));
    }
    let pts = read_points(points)?;
    let binned = bin_precision(&pts, delta)?;
    let dir = run_directory(out, "precision-bin")?;
    let path = dir.join("binned.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["Resources", "Loss", "Count"])?;
    for b in &binned {
        w.write_record([num(b.resources), num(b.loss), b.count.to_string()])?;
    }
    w.flush().map_err(io_err(&path))?;
    Ok(dir)
}

pub fn parse_regime(s: &str) -> CliResult<Regime> {
    match s {
        "measurement_limited" | "measurements" => Ok(Regime::MeasurementLimited),
        "time_limited" | "time" => Ok(Regime::TimeLimited),
        other => Err(CliError::usage("regime", format!("unknown regime `{other}`"))),
    }
}

/// Resource grid start, start + step, … up to end inclusive; empty when start > end.
pub fn grid(start: f64, end: f64, step: f64) -> CliResult<Vec<f64>> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(CliError::usage("step", "must be positive"));
    }
    let mut out = Vec::new();
    let mut i = 0u64;
    loop {
        let x = start + i as f64 * step;
        if x > end + 1e-9 * step {
            break;
        }
        out.push(x);
        i += 1;
    }
    Ok(out)
}

/// Tabulate the DC magnetometry lower bound.
pub fn cmd_bounds(regime: &str, t2_star: Option<f64>, start: f64, end: f64, step: f64, out: &Path) -> CliResult<PathBuf> {
    let spec = BoundSpec {
        regime: parse_regime(regime)?,
        t2_star,
    };
    if let Some(t) = t2_star {
        if !(t > 0.0) {
            return Err(CliError::usage("t2-star", "must be positive"));
        }
    }
    let xs = grid(start, end, step)?;
    let dir = run_directory(out, "bounds")?;
    let path = dir.join("bounds.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["Resources", "Bound"])?;
    for x in xs {
        w.write_record([num(x), num(dc_lower_bound(spec, x))])?;
    }
    w.flush().map_err(io_err(&path))?;
    Ok(dir)
}

/// Size the global worker pool from METROSYNTH_THREADS when set.
pub fn configure_threads() -> CliResult<()> {
    if let Ok(v) = std::env::var("METROSYNTH_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| CliError::usage("METROSYNTH_THREADS", "expected a positive integer"))?;
        if n == 0 {
            return Err(CliError::usage("METROSYNTH_THREADS", "expected a positive integer"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::usage("METROSYNTH_THREADS", e.to_string()))?;
    }
    Ok(())
}
