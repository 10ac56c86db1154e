//! Monte-Carlo runs, the privacy audit, and CSV/report output.
//!
//! Every replicate draws its own loss stream from `(seed, replicate)`. All
//! privacy levels of one replicate share that stream and the same noise
//! streams; only the noise scale differs. Replicates run in parallel, and all
//! files are written afterwards in `(epsilon, replicate, t)` order, so output
//! is byte-identical for a given config.

use std::fs::{self, File};
use std::io::BufReader;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;

use crate::bounds::{
    estimate_smoothness, pushsum_constants, BoundError, BoundInputs, BoundReport,
};
use crate::config::{
    epsilon_label, ConfigError, ConstraintKind, Problem, RunConfig, ScheduleSource,
    SensitivitySetting,
};
use crate::dataset::{
    accuracy, batch_event, batch_stream, parse_libsvm, read_idx, split,
    synthetic_classification, DatasetError, DenseDataset,
};
use crate::engine::{
    period_matrices, run_simulation, BlockPartition, EngineError, EngineKind, SimulationConfig,
    SimulationResult,
};
use crate::graph::{GraphError, TopologySchedule};
use crate::loss::{
    hindsight_path, synth_olr_event, synth_olr_stream, GradientNoiseSpec, LossError, LossEvent,
    SolverOptions,
};
use crate::privacy::{PrivacyError, PrivacyParams, SensitivityMode};
use crate::projection::{ConstraintSet, ProjectionError, StepSchedule};
use crate::rng::{Purpose, StreamKey};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DatasetError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Bound(#[from] BoundError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Projection(#[from] ProjectionError),
    #[error(transparent)]
    Privacy(#[from] PrivacyError),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),
    #[error("invariant violated: {0}")]
    Invariant(String),
}

impl ExperimentError {
    /// 2 for configuration problems, 3 for data problems, 4 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::Graph(_) | Self::Bound(_) | Self::Privacy(_) => 2,
            Self::Projection(_) => 2,
            Self::Engine(EngineError::Disconnected(_) | EngineError::Dimension { .. }) => 2,
            Self::Engine(EngineError::BadPartition(_)) => 2,
            Self::Data(_) | Self::Io { .. } | Self::Csv(_) | Self::MissingFile(_) => 3,
            Self::Engine(_) | Self::Loss(_) | Self::Invariant(_) => 4,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Everything shared by the replicates of one configuration.
#[derive(Debug, Clone)]
pub struct Setup {
    pub schedule: TopologySchedule,
    pub partition: BlockPartition,
    pub set: ConstraintSet,
    pub data: Option<crate::dataset::Split>,
}

impl Setup {
    pub fn d(&self) -> usize {
        self.partition.d()
    }
}

pub fn load_schedule(cfg: &RunConfig) -> Result<TopologySchedule, ExperimentError> {
    let sched = match &cfg.schedule {
        ScheduleSource::Default => TopologySchedule::default_directed(),
        ScheduleSource::Complete => TopologySchedule::complete(cfg.n, true)?,
        ScheduleSource::File(p) => {
            TopologySchedule::from_text(&fs::read_to_string(p).map_err(io_err(p))?)?
        }
    };
    Ok(match cfg.engine {
        EngineKind::Circulation if sched.is_directed() => sched.undirected(),
        _ => sched,
    })
}

fn load_dataset(cfg: &RunConfig) -> Result<DenseDataset, ExperimentError> {
    match (&cfg.dataset, &cfg.labels) {
        (None, _) => {
            let mut rng = StreamKey::new(cfg.seed, u64::MAX).global(Purpose::Data);
            Ok(synthetic_classification(
                &mut rng,
                cfg.synthetic_samples,
                cfg.synthetic_dim(),
                cfg.label_flip,
            )?)
        }
        (Some(images), Some(labels)) => {
            let im = File::open(images).map_err(io_err(images))?;
            let lb = File::open(labels).map_err(io_err(labels))?;
            Ok(read_idx(BufReader::new(im), BufReader::new(lb), cfg.digits)?)
        }
        (Some(path), None) => {
            let f = File::open(path).map_err(io_err(path))?;
            Ok(parse_libsvm(BufReader::new(f), cfg.libsvm_dim)?)
        }
    }
}

pub fn prepare(cfg: &RunConfig) -> Result<Setup, ExperimentError> {
    cfg.validate()?;
    let schedule = load_schedule(cfg)?;
    let data = match cfg.problem {
        Problem::Olr => None,
        Problem::Obc => {
            let full = load_dataset(cfg)?;
            let libsvm = cfg.dataset.is_some() && cfg.labels.is_none();
            let train = cfg.train_size.unwrap_or(if libsvm { 6000 } else { 8000 });
            let test = cfg.test_size.or(if libsvm { Some(2000) } else { None });
            let mut rng = StreamKey::new(cfg.seed, 0).global(Purpose::Split);
            Some(split(&full, train, test, &mut rng)?)
        }
    };
    let d = match &data {
        Some(s) => s.train.d(),
        None => cfg.synthetic_dim(),
    };
    let partition = BlockPartition::equal(d, schedule.n())?;
    let set = match cfg.constraint_kind() {
        ConstraintKind::Box => ConstraintSet::uniform_box(cfg.box_lo, cfg.box_hi, d)?,
        ConstraintKind::Ball => ConstraintSet::ball(cfg.radius, d)?,
    };
    Ok(Setup {
        schedule,
        partition,
        set,
        data,
    })
}

fn sensitivity_mode(cfg: &RunConfig) -> SensitivityMode {
    match cfg.sensitivity {
        SensitivitySetting::Fixed(v) => SensitivityMode::Fixed(v),
        SensitivitySetting::Theoretical => SensitivityMode::Theoretical,
    }
}

pub fn simulation_config(
    cfg: &RunConfig,
    setup: &Setup,
    epsilon: Option<f64>,
    key: StreamKey,
) -> Result<SimulationConfig, ExperimentError> {
    Ok(SimulationConfig {
        engine: cfg.engine,
        schedule: setup.schedule.clone(),
        weighting: cfg.weights,
        partition: setup.partition.clone(),
        set: setup.set.clone(),
        privacy: PrivacyParams::new(epsilon, sensitivity_mode(cfg), cfg.lhat)?,
        grad_noise: GradientNoiseSpec::new(cfg.grad_noise_var)?,
        steps: StepSchedule::InverseSqrt,
        key,
        record_history: false,
    })
}

/// Loss stream of one replicate; `x_hat` is the OLR ground truth.
pub struct ReplicateStream {
    pub events: Vec<LossEvent>,
    pub x_hat: Option<Vec<f64>>,
}

pub fn replicate_stream(
    cfg: &RunConfig,
    setup: &Setup,
    key: StreamKey,
) -> Result<ReplicateStream, ExperimentError> {
    let mut rng = key.global(Purpose::Data);
    match &setup.data {
        None => {
            let (events, x_hat) =
                synth_olr_stream(&mut rng, setup.d(), cfg.horizon, cfg.obs_noise_var)?;
            Ok(ReplicateStream {
                events,
                x_hat: Some(x_hat),
            })
        }
        Some(data) => Ok(ReplicateStream {
            events: batch_stream(&data.train, cfg.horizon, cfg.batch_size, &mut rng)?,
            x_hat: None,
        }),
    }
}

fn hindsight_horizons(stride: usize, horizon: usize) -> Vec<usize> {
    let mut h: Vec<usize> = (stride..=horizon).step_by(stride).collect();
    if h.last() != Some(&horizon) {
        h.push(horizon);
    }
    h
}

fn solver_options(cfg: &RunConfig) -> SolverOptions {
    match cfg.problem {
        Problem::Olr => SolverOptions::default(),
        Problem::Obc => SolverOptions {
            tolerance: 1e-6,
            max_iterations: 5000,
            failure_threshold: f64::INFINITY,
        },
    }
}

/// One CSV row of `rounds.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundRow {
    pub epsilon: Option<f64>,
    pub replicate: usize,
    pub t: usize,
    pub cost: f64,
    pub cum_cost: f64,
    pub regret_over_t: Option<f64>,
    pub running_avg_regret_over_t: Option<f64>,
    pub consensus_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyRow {
    pub epsilon: Option<f64>,
    pub replicate: usize,
    pub train: f64,
    pub test: f64,
}

struct RunOutcome {
    rows: Vec<RoundRow>,
    accuracy: Option<AccuracyRow>,
    max_block_grad_norm: f64,
    max_grad_norm: f64,
    phi: f64,
}

struct ReplicateOutcome {
    runs: Vec<RunOutcome>,
    smoothness: f64,
}

fn run_replicate(
    cfg: &RunConfig,
    setup: &Setup,
    rep: usize,
) -> Result<ReplicateOutcome, ExperimentError> {
    let key = StreamKey::new(cfg.seed, rep as u64);
    let stream = replicate_stream(cfg, setup, key)?;
    let horizons = hindsight_horizons(cfg.hindsight_stride(), cfg.horizon);
    let hindsight = hindsight_path(&stream.events, &setup.set, &horizons, solver_options(cfg))?;
    let mut h_at = vec![None; cfg.horizon + 1];
    for (&t, h) in horizons.iter().zip(&hindsight) {
        h_at[t] = Some(h.value);
    }
    let mut runs = Vec::with_capacity(cfg.epsilons.len());
    for &eps in &cfg.epsilons {
        let sim_cfg = simulation_config(cfg, setup, eps, key)?;
        let mut sim = run_simulation(&sim_cfg, &stream.events)?;
        for (t, h) in h_at.iter().enumerate().skip(1) {
            if let Some(h) = h {
                sim.trace.set_hindsight(t, *h);
            }
        }
        runs.push(collect_run(cfg, setup, eps, rep, &sim)?);
    }
    Ok(ReplicateOutcome {
        runs,
        smoothness: estimate_smoothness(&stream.events),
    })
}

fn collect_run(
    cfg: &RunConfig,
    setup: &Setup,
    eps: Option<f64>,
    rep: usize,
    sim: &SimulationResult,
) -> Result<RunOutcome, ExperimentError> {
    let rows = (1..=sim.horizon())
        .map(|t| RoundRow {
            epsilon: eps,
            replicate: rep,
            t,
            cost: sim.trace.cost(t),
            cum_cost: sim.trace.cumulative_cost(t),
            regret_over_t: sim.trace.regret(t).map(|r| r / t as f64),
            running_avg_regret_over_t: sim.trace.running_avg_regret(t).map(|r| r / t as f64),
            consensus_err: sim.consensus_errors[t - 1],
        })
        .collect();
    let accuracy = match &setup.data {
        Some(data) => {
            let x = sim.output(cfg.horizon);
            Some(AccuracyRow {
                epsilon: eps,
                replicate: rep,
                train: accuracy(x, &data.train)?,
                test: accuracy(x, &data.test)?,
            })
        }
        None => None,
    };
    Ok(RunOutcome {
        rows,
        accuracy,
        max_block_grad_norm: sim.max_block_grad_norm,
        max_grad_norm: sim.max_grad_norm,
        phi: sim.phi,
    })
}

/// Replicate means for one privacy level. Vectors are indexed by `t - 1`.
#[derive(Debug, Clone)]
pub struct EpsilonSummary {
    pub epsilon: Option<f64>,
    pub sigma: f64,
    pub mean_cost: Vec<f64>,
    pub mean_cum_cost: Vec<f64>,
    pub mean_regret_over_t: Vec<Option<f64>>,
    pub se_regret_over_t: Vec<Option<f64>>,
    pub mean_running_avg_regret_over_t: Vec<Option<f64>>,
    pub mean_consensus: Vec<f64>,
    pub bounds: BoundReport,
    pub mean_train_accuracy: Option<f64>,
    pub mean_test_accuracy: Option<f64>,
}

impl EpsilonSummary {
    /// Mean pseudo-regret (not divided by `t`) at round `t`.
    pub fn mean_regret(&self, t: usize) -> Option<f64> {
        self.mean_regret_over_t[t - 1].map(|r| r * t as f64)
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub rows: Vec<RoundRow>,
    pub accuracy: Vec<AccuracyRow>,
    pub summaries: Vec<EpsilonSummary>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn std_err(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
    (var / v.len() as f64).sqrt()
}

fn mean_opt(v: &[Option<f64>]) -> Option<f64> {
    let vals: Option<Vec<f64>> = v.iter().copied().collect();
    vals.map(|x| mean(&x))
}

/// Runs every privacy level and replicate in memory.
pub fn simulate_experiment(cfg: &RunConfig) -> Result<ExperimentOutcome, ExperimentError> {
    let setup = prepare(cfg)?;
    let reps: Vec<ReplicateOutcome> = (0..cfg.replicates)
        .into_par_iter()
        .map(|rep| run_replicate(cfg, &setup, rep))
        .collect::<Result<_, _>>()?;

    let n = setup.schedule.n();
    let mats = period_matrices(&setup.schedule, cfg.engine, cfg.weights);
    let pushsum = match cfg.engine {
        EngineKind::PushSum => {
            let entries: Vec<_> = mats.iter().map(|m| m.entries().clone()).collect();
            let horizon = cfg
                .gamma_horizon
                .unwrap_or(10 * setup.schedule.window() * setup.schedule.period());
            Some(pushsum_constants(n, setup.schedule.window(), &entries, horizon)?)
        }
        EngineKind::Circulation => None,
    };
    let smoothness = reps.iter().map(|r| r.smoothness).fold(0.0, f64::max);

    let mut rows = Vec::with_capacity(cfg.epsilons.len() * cfg.replicates * cfg.horizon);
    let mut acc_rows = Vec::new();
    let mut summaries = Vec::with_capacity(cfg.epsilons.len());
    for (e, &eps) in cfg.epsilons.iter().enumerate() {
        let runs: Vec<&RunOutcome> = reps.iter().map(|r| &r.runs[e]).collect();
        for r in &runs {
            rows.extend(r.rows.iter().cloned());
            acc_rows.extend(r.accuracy.clone());
        }
        let per_t = |f: &dyn Fn(&RoundRow) -> f64| -> Vec<f64> {
            (0..cfg.horizon)
                .map(|t| mean(&runs.iter().map(|r| f(&r.rows[t])).collect::<Vec<_>>()))
                .collect()
        };
        let regret_t: Vec<Vec<Option<f64>>> = (0..cfg.horizon)
            .map(|t| runs.iter().map(|r| r.rows[t].regret_over_t).collect())
            .collect();
        let mean_regret_over_t: Vec<Option<f64>> = regret_t.iter().map(|v| mean_opt(v)).collect();
        let se_regret_over_t = regret_t
            .iter()
            .map(|v| v.iter().copied().collect::<Option<Vec<f64>>>().map(|x| std_err(&x)))
            .collect();
        let mean_running_avg_regret_over_t = (0..cfg.horizon)
            .map(|t| {
                mean_opt(
                    &runs
                        .iter()
                        .map(|r| r.rows[t].running_avg_regret_over_t)
                        .collect::<Vec<_>>(),
                )
            })
            .collect();

        let privacy = PrivacyParams::new(eps, sensitivity_mode(cfg), cfg.lhat)?;
        let sigma = privacy.sigma_for_round(n, 0);
        let lhat_emp = runs.iter().map(|r| r.max_block_grad_norm).fold(0.0, f64::max);
        let lhat = match cfg.sensitivity {
            SensitivitySetting::Theoretical => lhat_emp.max(cfg.lhat),
            SensitivitySetting::Fixed(_) => lhat_emp.max(1e-12),
        };
        let inputs = BoundInputs {
            n,
            dim: setup.d(),
            window: setup.schedule.window(),
            phi: runs.iter().map(|r| r.phi).fold(1.0, f64::min),
            epsilon: (sigma > 0.0).then(|| 2.0 * n as f64 * lhat / sigma),
            lhat,
            l: runs.iter().map(|r| r.max_grad_norm).fold(0.0, f64::max),
            g: smoothness,
            d_chi: setup.set.diameter(),
            c_psi: setup.set.c_psi(),
        };
        let accs: Vec<&AccuracyRow> = runs.iter().filter_map(|r| r.accuracy.as_ref()).collect();
        summaries.push(EpsilonSummary {
            epsilon: eps,
            sigma,
            mean_cost: per_t(&|r| r.cost),
            mean_cum_cost: per_t(&|r| r.cum_cost),
            mean_regret_over_t,
            se_regret_over_t,
            mean_running_avg_regret_over_t,
            mean_consensus: per_t(&|r| r.consensus_err),
            bounds: BoundReport::new(cfg.engine, inputs, pushsum)?,
            mean_train_accuracy: (!accs.is_empty())
                .then(|| mean(&accs.iter().map(|a| a.train).collect::<Vec<_>>())),
            mean_test_accuracy: (!accs.is_empty())
                .then(|| mean(&accs.iter().map(|a| a.test).collect::<Vec<_>>())),
        });
    }
    let expected = cfg.epsilons.len() * cfg.replicates * cfg.horizon;
    if rows.len() != expected {
        return Err(ExperimentError::Invariant(format!(
            "{} round rows, expected {expected}",
            rows.len()
        )));
    }
    Ok(ExperimentOutcome {
        rows,
        accuracy: acc_rows,
        summaries,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

fn writer(dir: &Path, name: &str) -> Result<csv::Writer<File>, ExperimentError> {
    let path = dir.join(name);
    let f = File::create(&path).map_err(io_err(&path))?;
    Ok(csv::Writer::from_writer(f))
}

fn engine_label(e: EngineKind) -> &'static str {
    match e {
        EngineKind::Circulation => "C",
        EngineKind::PushSum => "PS",
    }
}

/// Writes `rounds.csv`, `aggregate.csv`, `bounds.csv`, `accuracy.csv` (OBC)
/// and `config.txt` into `dir`.
pub fn write_experiment(
    cfg: &RunConfig,
    outcome: &ExperimentOutcome,
    dir: &Path,
) -> Result<(), ExperimentError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let cfg_path = dir.join("config.txt");
    fs::write(&cfg_path, cfg.to_text()).map_err(io_err(&cfg_path))?;

    let mut w = writer(dir, "rounds.csv")?;
    w.write_record([
        "epsilon",
        "replicate",
        "t",
        "cost",
        "cum_cost",
        "avg_regret_over_t",
        "running_avg_regret_over_t",
        "consensus_err",
    ])?;
    for r in &outcome.rows {
        w.write_record([
            epsilon_label(r.epsilon),
            r.replicate.to_string(),
            r.t.to_string(),
            r.cost.to_string(),
            r.cum_cost.to_string(),
            fmt_opt(r.regret_over_t),
            fmt_opt(r.running_avg_regret_over_t),
            r.consensus_err.to_string(),
        ])?;
    }
    w.flush().map_err(io_err(dir))?;

    let mut w = writer(dir, "aggregate.csv")?;
    w.write_record([
        "epsilon",
        "t",
        "mean_cost",
        "mean_cum_cost",
        "mean_avg_regret_over_t",
        "se_avg_regret_over_t",
        "mean_running_avg_regret_over_t",
        "mean_consensus_err",
    ])?;
    for s in &outcome.summaries {
        for t in 0..s.mean_cost.len() {
            w.write_record([
                epsilon_label(s.epsilon),
                (t + 1).to_string(),
                s.mean_cost[t].to_string(),
                s.mean_cum_cost[t].to_string(),
                fmt_opt(s.mean_regret_over_t[t]),
                fmt_opt(s.se_regret_over_t[t]),
                fmt_opt(s.mean_running_avg_regret_over_t[t]),
                s.mean_consensus[t].to_string(),
            ])?;
        }
    }
    w.flush().map_err(io_err(dir))?;

    let mut w = writer(dir, "bounds.csv")?;
    w.write_record([
        "epsilon",
        "engine",
        "n",
        "d",
        "window",
        "phi",
        "theta",
        "gamma_estimate",
        "beta",
        "lambda",
        "one_minus_lambda",
        "lhat_estimate",
        "epsilon_effective",
        "l_estimate",
        "g_estimate",
        "d_chi",
        "c_psi",
        "consensus_bound",
        "max_mean_consensus_err",
        "m",
        "regret_bound_at_T",
        "running_avg_regret_bound_at_T",
        "mean_regret_at_T",
        "vacuous",
    ])?;
    for s in &outcome.summaries {
        let b = &s.bounds;
        let horizon = s.mean_cost.len();
        let ps = b.pushsum;
        w.write_record([
            epsilon_label(s.epsilon),
            engine_label(b.engine).to_string(),
            b.inputs.n.to_string(),
            b.inputs.dim.to_string(),
            b.inputs.window.to_string(),
            b.inputs.phi.to_string(),
            b.theta.to_string(),
            fmt_opt(ps.map(|p| p.gamma)),
            fmt_opt(ps.map(|p| p.beta)),
            fmt_opt(ps.map(|p| p.lambda)),
            fmt_opt(ps.map(|p| p.one_minus_lambda)),
            b.inputs.lhat.to_string(),
            epsilon_label(b.inputs.epsilon),
            b.inputs.l.to_string(),
            b.inputs.g.to_string(),
            b.inputs.d_chi.to_string(),
            b.inputs.c_psi.to_string(),
            b.consensus_bound.to_string(),
            s.mean_consensus.iter().copied().fold(0.0, f64::max).to_string(),
            b.m.to_string(),
            b.regret_bound(horizon).to_string(),
            b.running_avg_regret_bound(horizon).to_string(),
            fmt_opt(s.mean_regret(horizon)),
            b.vacuous().to_string(),
        ])?;
    }
    w.flush().map_err(io_err(dir))?;

    if !outcome.accuracy.is_empty() {
        let mut w = writer(dir, "accuracy.csv")?;
        w.write_record(["epsilon", "replicate", "train_accuracy", "test_accuracy"])?;
        for a in &outcome.accuracy {
            w.write_record([
                epsilon_label(a.epsilon),
                a.replicate.to_string(),
                a.train.to_string(),
                a.test.to_string(),
            ])?;
        }
        w.flush().map_err(io_err(dir))?;
    }
    Ok(())
}

/// Simulates and writes all CSVs into `cfg.out`.
pub fn run_experiment(cfg: &RunConfig) -> Result<ExperimentOutcome, ExperimentError> {
    let outcome = simulate_experiment(cfg)?;
    write_experiment(cfg, &outcome, &cfg.out)?;
    Ok(outcome)
}

/// One round of both coupled audit runs.
#[derive(Debug, Clone, PartialEq)]
pub struct AuditRow {
    pub epsilon: Option<f64>,
    pub replicate: usize,
    pub t: usize,
    pub x: f64,
    pub x_prime: f64,
}

#[derive(Debug, Clone)]
pub struct AuditSummary {
    pub epsilon: Option<f64>,
    /// `|[x]_c - [x']_c|` of the output after round `t0`, per replicate.
    pub diffs: Vec<f64>,
    pub mean_diff: f64,
    pub se_diff: f64,
}

#[derive(Debug, Clone)]
pub struct AuditOutcome {
    pub t0: usize,
    pub coord: usize,
    pub trace: Vec<AuditRow>,
    pub summaries: Vec<AuditSummary>,
}

fn replacement_event(
    cfg: &RunConfig,
    setup: &Setup,
    stream: &ReplicateStream,
    key: StreamKey,
) -> Result<LossEvent, ExperimentError> {
    let mut rng = key.stream(0, cfg.audit_t0 as u64, Purpose::AuditPerturbation);
    match (&setup.data, &stream.x_hat) {
        (Some(data), _) => Ok(batch_event(&data.train, cfg.batch_size, &mut rng)?),
        (None, Some(x_hat)) => Ok(synth_olr_event(&mut rng, x_hat, cfg.obs_noise_var)?),
        (None, None) => Err(ExperimentError::Invariant("OLR stream without ground truth".into())),
    }
}

fn same_bits(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Runs adjacent streams that differ only at round `audit_t0` (when
/// `perturb`) with identical coupled randomness, for every privacy level.
pub fn simulate_audit(cfg: &RunConfig, perturb: bool) -> Result<AuditOutcome, ExperimentError> {
    cfg.validate_audit()?;
    let setup = prepare(cfg)?;
    let t0 = cfg.audit_t0;
    let coord = cfg.audit_coord;
    if coord > setup.d() {
        return Err(ConfigError::Constraint {
            key: "audit_coord",
            msg: format!("exceeds dimension {}", setup.d()),
        }
        .into());
    }
    let per_rep: Vec<Vec<(Vec<AuditRow>, f64)>> = (0..cfg.replicates)
        .into_par_iter()
        .map(|rep| {
            let key = StreamKey::new(cfg.seed, rep as u64);
            let stream = replicate_stream(cfg, &setup, key)?;
            let mut adjacent = stream.events.clone();
            if perturb {
                adjacent[t0 - 1] = replacement_event(cfg, &setup, &stream, key)?;
            }
            cfg.epsilons
                .iter()
                .map(|&eps| {
                    let sim_cfg = simulation_config(cfg, &setup, eps, key)?;
                    let a = run_simulation(&sim_cfg, &stream.events)?;
                    let b = run_simulation(&sim_cfg, &adjacent)?;
                    // states 0..t0-1 never saw the differing event
                    for s in 0..t0 {
                        if !same_bits(&a.states_x[s], &b.states_x[s]) {
                            return Err(ExperimentError::Invariant(format!(
                                "coupled audit runs differ at state {s} before round {t0}"
                            )));
                        }
                    }
                    let rows = (1..=cfg.horizon)
                        .map(|t| AuditRow {
                            epsilon: eps,
                            replicate: rep,
                            t,
                            x: a.output(t)[coord - 1],
                            x_prime: b.output(t)[coord - 1],
                        })
                        .collect();
                    let diff = (a.output(t0)[coord - 1] - b.output(t0)[coord - 1]).abs();
                    Ok((rows, diff))
                })
                .collect::<Result<Vec<_>, ExperimentError>>()
        })
        .collect::<Result<_, _>>()?;

    let mut trace = Vec::new();
    let mut summaries = Vec::new();
    for (e, &eps) in cfg.epsilons.iter().enumerate() {
        let diffs: Vec<f64> = per_rep.iter().map(|r| r[e].1).collect();
        for r in &per_rep {
            trace.extend(r[e].0.iter().cloned());
        }
        summaries.push(AuditSummary {
            epsilon: eps,
            mean_diff: mean(&diffs),
            se_diff: std_err(&diffs),
            diffs,
        });
    }
    Ok(AuditOutcome {
        t0,
        coord,
        trace,
        summaries,
    })
}

/// Simulates the audit and writes `audit_trace.csv`, `audit.csv` and
/// `audit_summary.csv` into `cfg.out`.
pub fn run_privacy_audit(cfg: &RunConfig) -> Result<AuditOutcome, ExperimentError> {
    let outcome = simulate_audit(cfg, true)?;
    let dir = &cfg.out;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut w = writer(dir, "audit_trace.csv")?;
    w.write_record(["epsilon", "replicate", "t", "x", "x_prime", "abs_diff"])?;
    for r in &outcome.trace {
        w.write_record([
            epsilon_label(r.epsilon),
            r.replicate.to_string(),
            r.t.to_string(),
            r.x.to_string(),
            r.x_prime.to_string(),
            (r.x - r.x_prime).abs().to_string(),
        ])?;
    }
    w.flush().map_err(io_err(dir))?;

    let mut w = writer(dir, "audit.csv")?;
    w.write_record(["epsilon", "replicate", "t0", "coordinate", "abs_diff"])?;
    for s in &outcome.summaries {
        for (rep, d) in s.diffs.iter().enumerate() {
            w.write_record([
                epsilon_label(s.epsilon),
                rep.to_string(),
                outcome.t0.to_string(),
                outcome.coord.to_string(),
                d.to_string(),
            ])?;
        }
    }
    w.flush().map_err(io_err(dir))?;

    let mut w = writer(dir, "audit_summary.csv")?;
    w.write_record(["epsilon", "t0", "coordinate", "mean_abs_diff", "se_abs_diff"])?;
    for s in &outcome.summaries {
        w.write_record([
            epsilon_label(s.epsilon),
            outcome.t0.to_string(),
            outcome.coord.to_string(),
            s.mean_diff.to_string(),
            s.se_diff.to_string(),
        ])?;
    }
    w.flush().map_err(io_err(dir))?;
    Ok(outcome)
}

/// Markdown summary plus a whitespace-separated regret curve file.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub markdown: String,
    pub curves: String,
}

struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn read(path: &Path) -> Result<Option<Self>, ExperimentError> {
        if !path.exists() {
            return Ok(None);
        }
        let mut r = csv::Reader::from_path(path)?;
        let header = r.headers()?.iter().map(str::to_string).collect();
        let rows = r
            .records()
            .map(|rec| rec.map(|r| r.iter().map(str::to_string).collect()))
            .collect::<Result<_, _>>()?;
        Ok(Some(Self { header, rows }))
    }

    fn col(&self, name: &str) -> Result<usize, ExperimentError> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| ExperimentError::Invariant(format!("column {name} missing")))
    }

    /// Distinct values of a column in first-seen order.
    fn distinct(&self, c: usize) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r[c]) {
                out.push(r[c].clone());
            }
        }
        out
    }
}

fn md_table(out: &mut String, header: &[String], rows: &[Vec<String>]) {
    out.push_str(&format!("| {} |\n", header.join(" | ")));
    out.push_str(&format!("|{}\n", "---|".repeat(header.len())));
    for r in rows {
        out.push_str(&format!("| {} |\n", r.join(" | ")));
    }
    out.push('\n');
}

fn short(v: &str) -> String {
    v.parse::<f64>()
        .map(|x| format!("{x:.4e}"))
        .unwrap_or_else(|_| v.to_string())
}

fn pct(v: f64) -> String {
    format!("{:.2}%", 100.0 * v)
}

/// Renders the CSVs in `dir`. `aggregate.csv` must exist.
pub fn render_report(dir: &Path) -> Result<Report, ExperimentError> {
    let agg_path = dir.join("aggregate.csv");
    let agg = Table::read(&agg_path)?.ok_or(ExperimentError::MissingFile(agg_path))?;
    let mut md = String::from("# Experiment report\n\n## Regret\n\n");
    let mut curves = String::new();
    let (ce, ct) = (agg.col("epsilon")?, agg.col("t")?);
    let (cr, cra, cc) = (
        agg.col("mean_avg_regret_over_t")?,
        agg.col("mean_running_avg_regret_over_t")?,
        agg.col("mean_consensus_err")?,
    );
    let eps = agg.distinct(ce);
    if agg.rows.is_empty() {
        md.push_str("no data\n\n");
    } else {
        let mut rows = Vec::new();
        for e in &eps {
            let last = agg
                .rows
                .iter()
                .filter(|r| &r[ce] == e)
                .max_by_key(|r| r[ct].parse::<usize>().unwrap_or(0))
                .expect("epsilon has rows");
            rows.push(vec![
                e.clone(),
                last[ct].clone(),
                short(&last[cr]),
                short(&last[cra]),
                short(&last[cc]),
            ]);
        }
        md_table(
            &mut md,
            &[
                "epsilon".into(),
                "T".into(),
                "regret/T".into(),
                "running-average regret/T".into(),
                "consensus error".into(),
            ],
            &rows,
        );
        curves.push_str(&format!("# t {}\n", eps.iter().map(|e| format!("eps={e}")).collect::<Vec<_>>().join(" ")));
        let ts = agg.distinct(ct);
        for t in &ts {
            let vals: Vec<String> = eps
                .iter()
                .map(|e| {
                    agg.rows
                        .iter()
                        .find(|r| &r[ce] == e && &r[ct] == t)
                        .map(|r| if r[cr].is_empty() { "nan".to_string() } else { r[cr].clone() })
                        .unwrap_or_else(|| "nan".into())
                })
                .collect();
            curves.push_str(&format!("{t} {}\n", vals.join(" ")));
        }
    }

    if let Some(acc) = Table::read(&dir.join("accuracy.csv"))? {
        md.push_str("## Accuracy\n\n");
        let (ae, atr, ate) = (
            acc.col("epsilon")?,
            acc.col("train_accuracy")?,
            acc.col("test_accuracy")?,
        );
        let levels = acc.distinct(ae);
        let avg = |e: &String, c: usize| {
            let v: Vec<f64> = acc
                .rows
                .iter()
                .filter(|r| &r[ae] == e)
                .filter_map(|r| r[c].parse().ok())
                .collect();
            pct(mean(&v))
        };
        let mut header = vec![String::new()];
        header.extend(levels.iter().map(|e| format!("epsilon={e}")));
        let mut train = vec!["Training Accuracy".to_string()];
        let mut test = vec!["Testing Accuracy".to_string()];
        for e in &levels {
            train.push(avg(e, atr));
            test.push(avg(e, ate));
        }
        md_table(&mut md, &header, &[train, test]);
    }

    if let Some(audit) = Table::read(&dir.join("audit_summary.csv"))? {
        md.push_str("## Privacy audit\n\n");
        let (ae, at0, am) = (
            audit.col("epsilon")?,
            audit.col("t0")?,
            audit.col("mean_abs_diff")?,
        );
        if audit.rows.is_empty() {
            md.push_str("no data\n\n");
        } else {
            let mut header = vec![String::new()];
            header.extend(audit.rows.iter().map(|r| format!("epsilon={}", r[ae])));
            let mut row = vec![format!("Output difference at t={}", audit.rows[0][at0])];
            row.extend(audit.rows.iter().map(|r| short(&r[am])));
            md_table(&mut md, &header, &[row]);
        }
    }

    if let Some(b) = Table::read(&dir.join("bounds.csv"))? {
        md.push_str("## Theoretical bounds\n\n");
        md.push_str("Lhat, L, G and gamma are empirical estimates.\n\n");
        let cols = [
            ("epsilon", "epsilon"),
            ("consensus_bound", "consensus bound"),
            ("max_mean_consensus_err", "max mean consensus error"),
            ("m", "M"),
            ("regret_bound_at_T", "M sqrt(T)"),
            ("mean_regret_at_T", "mean regret at T"),
            ("vacuous", "vacuous"),
        ];
        let idx: Vec<usize> = cols.iter().map(|(c, _)| b.col(c)).collect::<Result<_, _>>()?;
        let rows: Vec<Vec<String>> = b
            .rows
            .iter()
            .map(|r| {
                idx.iter()
                    .enumerate()
                    .map(|(k, &i)| if k == 0 || k == 6 { r[i].clone() } else { short(&r[i]) })
                    .collect()
            })
            .collect();
        let header: Vec<String> = cols.iter().map(|(_, h)| h.to_string()).collect();
        if rows.is_empty() {
            md.push_str("no data\n\n");
        } else {
            md_table(&mut md, &header, &rows);
        }
    }
    Ok(Report {
        markdown: md,
        curves,
    })
}
