//! Synchronous-round simulation of the private dual-averaging protocol.
//!
//! Each round every node perturbs its dual vector with Laplace noise, the
//! perturbed messages are exchanged instantaneously, every node folds the
//! received messages and its own scaled block gradient into a new dual
//! vector, and the primal iterate is recovered by the proximal projection.
//!
//! Two mixing rules are provided:
//!
//! * circulation (`C`): `z_i <- n u_i e_i + h_i + sum_j W_ij (h_j - h_i)` with a
//!   row-stochastic `W` on an undirected graph;
//! * push-sum (`PS`): `z_i <- n u_i e_i + sum_j A_ij h_j`, `w_i <- sum_j A_ij w_j`
//!   with a column-stochastic `A` on a digraph, projecting `z_i / w_i`.
//!
//! State indices count completed rounds: state 0 is the initialization, and
//! round `r` (1-based) commits the decision of state `r - 1`, reveals `f_r`,
//! and produces state `r`.

use std::ops::Range;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::graph::{
    metropolis_row_weights, pushsum_column_weights, uniform_row_weights, window_product, Edge,
    GraphError, MixingMatrix, StochasticKind, TopologySchedule,
};
use crate::loss::{GradientNoiseSpec, LossError, LossEvent, RegretTrace};
use crate::privacy::{laplace_vector, perturb_dual, PrivacyError, PrivacyParams};
use crate::projection::{norm, prox_project_into, ConstraintSet, ProjectionError, StepSchedule};
use crate::rng::{Purpose, StreamKey};

/// Push-sum weights below this are treated as a collapsed network.
pub const MIN_PUSH_SUM_WEIGHT: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum EngineError {
    #[error("invalid block partition: {0}")]
    BadPartition(String),
    #[error("{what} has dimension {got}, expected {expected}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("mixing matrix is {got:?}, engine needs {expected:?}")]
    WrongKind {
        expected: StochasticKind,
        got: StochasticKind,
    },
    #[error("push-sum weight of node {node} fell to {weight:e}")]
    WeightCollapse { node: usize, weight: f64 },
    #[error("schedule fails its {0}-round connectivity requirement")]
    Disconnected(usize),
    #[error("history for round {0} was not recorded")]
    MissingHistory(usize),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Projection(#[from] ProjectionError),
    #[error(transparent)]
    Privacy(#[from] PrivacyError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Contiguous coordinate blocks, one per node, covering `[0, d)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockPartition {
    ranges: Vec<Range<usize>>,
    owner: Vec<usize>,
}

impl BlockPartition {
    pub fn from_sizes(sizes: &[usize]) -> Result<Self, EngineError> {
        if sizes.is_empty() {
            return Err(EngineError::BadPartition("no nodes".into()));
        }
        if let Some(i) = sizes.iter().position(|&s| s == 0) {
            return Err(EngineError::BadPartition(format!("node {i} has an empty block")));
        }
        let mut ranges = Vec::with_capacity(sizes.len());
        let mut owner = Vec::new();
        let mut start = 0;
        for (i, &s) in sizes.iter().enumerate() {
            ranges.push(start..start + s);
            owner.extend(std::iter::repeat_n(i, s));
            start += s;
        }
        Ok(Self { ranges, owner })
    }

    /// Equal blocks of `d / n`; the remainder goes to the last node.
    pub fn equal(d: usize, n: usize) -> Result<Self, EngineError> {
        if n == 0 || d < n {
            return Err(EngineError::BadPartition(format!(
                "cannot split {d} coordinates over {n} nodes"
            )));
        }
        let base = d / n;
        let mut sizes = vec![base; n];
        sizes[n - 1] += d - base * n;
        Self::from_sizes(&sizes)
    }

    pub fn n(&self) -> usize {
        self.ranges.len()
    }

    pub fn d(&self) -> usize {
        self.owner.len()
    }

    pub fn block(&self, i: usize) -> Range<usize> {
        self.ranges[i].clone()
    }

    /// Node controlling coordinate `k`.
    pub fn owner(&self, k: usize) -> usize {
        self.owner[k]
    }

    /// Concatenates per-node block vectors into a `d`-vector.
    pub fn stack(&self, blocks: &[Vec<f64>]) -> Vec<f64> {
        blocks.iter().flatten().copied().collect()
    }
}

/// One node's local variables.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeState {
    /// Dual vector.
    pub z: Vec<f64>,
    /// Primal estimate of the whole decision, always feasible.
    pub y: Vec<f64>,
    /// Push-sum weight (stays 1 for the circulation engine).
    pub w: f64,
}

impl NodeState {
    fn initial(set: &ConstraintSet, steps: StepSchedule) -> Result<Self, EngineError> {
        let d = set.dim();
        let z = vec![0.0; d];
        let mut y = vec![0.0; d];
        prox_project_into(&z, steps.alpha(0), set, &mut y)?;
        Ok(Self { z, y, w: 1.0 })
    }

    /// This node's slice of the global decision.
    pub fn x_block<'a>(&'a self, partition: &BlockPartition, i: usize) -> &'a [f64] {
        &self.y[partition.block(i)]
    }
}

/// Fresh states with zero duals and unit weights.
pub fn initial_states(
    partition: &BlockPartition,
    set: &ConstraintSet,
    steps: StepSchedule,
) -> Result<Vec<NodeState>, EngineError> {
    (0..partition.n())
        .map(|_| NodeState::initial(set, steps))
        .collect()
}

/// Global decision assembled from each node's own block.
pub fn global_decision(states: &[NodeState], partition: &BlockPartition) -> Vec<f64> {
    let mut x = vec![0.0; partition.d()];
    for (i, s) in states.iter().enumerate() {
        let b = partition.block(i);
        x[b.clone()].copy_from_slice(&s.y[b]);
    }
    x
}

/// Everything a round needs besides the states, the matrix and the loss.
#[derive(Debug, Clone, Copy)]
pub struct RoundContext<'a> {
    pub partition: &'a BlockPartition,
    pub set: &'a ConstraintSet,
    pub privacy: PrivacyParams,
    pub grad_noise: GradientNoiseSpec,
    pub steps: StepSchedule,
    pub key: StreamKey,
}

/// Randomness realized in one round, kept for oracle checks.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    /// `eta_i(t)` per node, full dimension.
    pub eta: Vec<Vec<f64>>,
    /// Noisy block gradient `u_i(t)` per node, block dimension.
    pub u: Vec<Vec<f64>>,
}

/// Perturbation and local gradient step shared by both engines. `t` is the
/// 0-based round index used for noise keys and the step size.
fn draw_messages(
    states: &[NodeState],
    f_t: &LossEvent,
    ctx: &RoundContext<'_>,
    t: usize,
) -> Result<(Vec<Vec<f64>>, RoundRecord), EngineError> {
    let n = ctx.partition.n();
    let d = ctx.partition.d();
    if states.len() != n {
        return Err(EngineError::Dimension {
            what: "state list",
            expected: n,
            got: states.len(),
        });
    }
    let sigma = ctx.privacy.sigma_for_round(n, t);
    let mut messages = Vec::with_capacity(n);
    let mut eta = Vec::with_capacity(n);
    let mut u = Vec::with_capacity(n);
    for (i, s) in states.iter().enumerate() {
        if s.z.len() != d || s.y.len() != d {
            return Err(EngineError::Dimension {
                what: "node state",
                expected: d,
                got: s.z.len(),
            });
        }
        let mut noise_rng = ctx.key.stream(i as u64, t as u64, Purpose::PrivacyNoise);
        let noise = laplace_vector(sigma, d, i, t, &mut noise_rng);
        messages.push(perturb_dual(&s.z, &noise)?);
        eta.push(noise.values);
        let mut grad_rng = ctx.key.stream(i as u64, t as u64, Purpose::GradientNoise);
        u.push(crate::loss::noisy_block_grad(
            f_t,
            &s.y,
            ctx.partition.block(i),
            ctx.grad_noise,
            &mut grad_rng,
        )?);
    }
    Ok((messages, RoundRecord { eta, u }))
}

fn check_matrix(m: &MixingMatrix, n: usize, kind: StochasticKind) -> Result<(), EngineError> {
    if m.kind() != kind {
        return Err(EngineError::WrongKind {
            expected: kind,
            got: m.kind(),
        });
    }
    if m.n() != n {
        return Err(EngineError::Dimension {
            what: "mixing matrix",
            expected: n,
            got: m.n(),
        });
    }
    Ok(())
}

fn add_own_gradient(z: &mut [f64], u: &[f64], block: Range<usize>, n: usize) {
    let scale = n as f64;
    for (zk, uk) in z[block].iter_mut().zip(u) {
        *zk += scale * uk;
    }
}

/// One circulation-based round on row-stochastic `w_t`.
pub fn dpsda_c_round(
    states: &mut [NodeState],
    w_t: &MixingMatrix,
    f_t: &LossEvent,
    ctx: &RoundContext<'_>,
    t: usize,
) -> Result<RoundRecord, EngineError> {
    let n = ctx.partition.n();
    check_matrix(w_t, n, StochasticKind::RowStochastic)?;
    let (h, record) = draw_messages(states, f_t, ctx, t)?;
    let w = w_t.entries();
    let alpha = ctx.steps.alpha(t);
    for (i, state) in states.iter_mut().enumerate() {
        let hi = &h[i];
        let z = &mut state.z;
        z.copy_from_slice(hi);
        for (j, hj) in h.iter().enumerate() {
            let wij = w[(i, j)];
            if wij == 0.0 || j == i {
                continue;
            }
            for ((zk, hjk), hik) in z.iter_mut().zip(hj).zip(hi) {
                *zk += wij * (hjk - hik);
            }
        }
        add_own_gradient(z, &record.u[i], ctx.partition.block(i), n);
        prox_project_into(&state.z, alpha, ctx.set, &mut state.y)?;
    }
    Ok(record)
}

/// One push-sum round on column-stochastic `a_t`.
pub fn dpsda_ps_round(
    states: &mut [NodeState],
    a_t: &MixingMatrix,
    f_t: &LossEvent,
    ctx: &RoundContext<'_>,
    t: usize,
) -> Result<RoundRecord, EngineError> {
    let n = ctx.partition.n();
    check_matrix(a_t, n, StochasticKind::ColumnStochastic)?;
    let (h, record) = draw_messages(states, f_t, ctx, t)?;
    let a = a_t.entries();
    let old_w: Vec<f64> = states.iter().map(|s| s.w).collect();
    let alpha = ctx.steps.alpha(t);
    let mut ratio = vec![0.0; ctx.partition.d()];
    for (i, state) in states.iter_mut().enumerate() {
        state.z.iter_mut().for_each(|v| *v = 0.0);
        let mut weight = 0.0;
        for (j, hj) in h.iter().enumerate() {
            let aij = a[(i, j)];
            if aij == 0.0 {
                continue;
            }
            for (zk, hjk) in state.z.iter_mut().zip(hj) {
                *zk += aij * hjk;
            }
            weight += aij * old_w[j];
        }
        add_own_gradient(&mut state.z, &record.u[i], ctx.partition.block(i), n);
        if weight < MIN_PUSH_SUM_WEIGHT {
            return Err(EngineError::WeightCollapse { node: i, weight });
        }
        state.w = weight;
        for (r, zk) in ratio.iter_mut().zip(&state.z) {
            *r = zk / weight;
        }
        prox_project_into(&ratio, alpha, ctx.set, &mut state.y)?;
    }
    Ok(record)
}

/// `z_bar = (1/n) sum_i z_i`.
pub fn network_average(states: &[NodeState]) -> Vec<f64> {
    let n = states.len() as f64;
    let d = states[0].z.len();
    let mut avg = vec![0.0; d];
    for s in states {
        avg.iter_mut().zip(&s.z).for_each(|(a, z)| *a += z);
    }
    avg.iter_mut().for_each(|a| *a /= n);
    avg
}

/// `sum_i ||z_i - z_bar||^2` for the circulation engine and
/// `sum_i ||z_i / w_i - z_bar||^2` for push-sum.
pub fn consensus_error(states: &[NodeState], kind: EngineKind) -> f64 {
    let avg = network_average(states);
    states
        .iter()
        .map(|s| {
            let scale = match kind {
                EngineKind::Circulation => 1.0,
                EngineKind::PushSum => 1.0 / s.w,
            };
            s.z.iter()
                .zip(&avg)
                .map(|(z, a)| (z * scale - a).powi(2))
                .sum::<f64>()
        })
        .sum()
}

fn closed_form_dual(
    matrices: &[DMatrix<f64>],
    history: &[RoundRecord],
    partition: &BlockPartition,
    i: usize,
    k: usize,
    t: usize,
) -> Result<f64, EngineError> {
    if t == 0 {
        return Ok(0.0);
    }
    if history.len() < t {
        return Err(EngineError::MissingHistory(history.len()));
    }
    let n = partition.n() as f64;
    let owner = partition.owner(k);
    let offset = k - partition.block(owner).start;
    let mut total = 0.0;
    for (s, rec) in history.iter().enumerate().take(t) {
        let gain = window_product(matrices, t - 1, s + 1)?;
        total += n * gain[(i, owner)] * rec.u[owner][offset];
        let spread = window_product(matrices, t - 1, s)?;
        for (j, eta_j) in rec.eta.iter().enumerate() {
            total += spread[(i, j)] * eta_j[k];
        }
    }
    Ok(total)
}

/// `z_i^k(t)` of the circulation engine from the full noise and gradient
/// history, via products of the mixing matrices.
pub fn closed_form_dual_c(
    matrices: &[DMatrix<f64>],
    history: &[RoundRecord],
    partition: &BlockPartition,
    i: usize,
    k: usize,
    t: usize,
) -> Result<f64, EngineError> {
    closed_form_dual(matrices, history, partition, i, k, t)
}

/// `z_i^k(t)` of the push-sum engine from the full history.
pub fn closed_form_dual_ps(
    matrices: &[DMatrix<f64>],
    history: &[RoundRecord],
    partition: &BlockPartition,
    i: usize,
    k: usize,
    t: usize,
) -> Result<f64, EngineError> {
    closed_form_dual(matrices, history, partition, i, k, t)
}

/// Network-average dual after `t` rounds:
/// `(1/n) sum_{s<t} sum_i eta_i(s) + sum_{s<t} u(s)`, with `u(s)` the stacked
/// block signals.
pub fn dual_average_recursion(
    history: &[RoundRecord],
    partition: &BlockPartition,
    t: usize,
) -> Result<Vec<f64>, EngineError> {
    if history.len() < t {
        return Err(EngineError::MissingHistory(history.len()));
    }
    let n = partition.n() as f64;
    let mut out = vec![0.0; partition.d()];
    for rec in &history[..t] {
        for eta in &rec.eta {
            out.iter_mut().zip(eta).for_each(|(o, e)| *o += e / n);
        }
        out.iter_mut()
            .zip(partition.stack(&rec.u))
            .for_each(|(o, u)| *o += u);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EngineKind {
    /// Row-stochastic circulation on undirected graphs.
    Circulation,
    /// Column-stochastic push-sum on directed graphs.
    PushSum,
}

/// Weight rule for the circulation engine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Weighting {
    /// `1/deg_i` on closed neighborhoods (generally asymmetric).
    #[default]
    Uniform,
    /// Symmetric Metropolis weights.
    Metropolis,
}

/// Mixing matrices for one period of `schedule`.
pub fn period_matrices(
    schedule: &TopologySchedule,
    engine: EngineKind,
    weighting: Weighting,
) -> Vec<MixingMatrix> {
    let n = schedule.n();
    schedule
        .rounds()
        .iter()
        .map(|edges| match engine {
            EngineKind::Circulation => {
                let undirected: Vec<Edge> = {
                    let mut e: Vec<Edge> = edges.iter().map(|&(a, b)| (a.min(b), a.max(b))).collect();
                    e.sort_unstable();
                    e.dedup();
                    e
                };
                match weighting {
                    Weighting::Uniform => uniform_row_weights(&undirected, n),
                    Weighting::Metropolis => metropolis_row_weights(&undirected, n),
                }
            }
            EngineKind::PushSum => {
                if schedule.is_directed() {
                    pushsum_column_weights(edges, n)
                } else {
                    let both: Vec<Edge> = edges.iter().flat_map(|&(a, b)| [(a, b), (b, a)]).collect();
                    pushsum_column_weights(&both, n)
                }
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct SimulationConfig {
    pub engine: EngineKind,
    pub schedule: TopologySchedule,
    pub weighting: Weighting,
    pub partition: BlockPartition,
    pub set: ConstraintSet,
    pub privacy: PrivacyParams,
    pub grad_noise: GradientNoiseSpec,
    pub steps: StepSchedule,
    pub key: StreamKey,
    /// Keep matrices, noise, gradients and duals of every round.
    pub record_history: bool,
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        if self.schedule.n() != self.partition.n() {
            return Err(EngineError::Dimension {
                what: "schedule node count",
                expected: self.partition.n(),
                got: self.schedule.n(),
            });
        }
        if self.set.dim() != self.partition.d() {
            return Err(EngineError::Dimension {
                what: "constraint set",
                expected: self.partition.d(),
                got: self.set.dim(),
            });
        }
        if !self.schedule.check_window_connectivity() {
            return Err(EngineError::Disconnected(self.schedule.window()));
        }
        Ok(())
    }
}

/// Full per-round record kept when `record_history` is set.
#[derive(Debug, Clone, Default)]
pub struct History {
    /// Mixing matrix used in round `t` (0-based).
    pub matrices: Vec<DMatrix<f64>>,
    pub rounds: Vec<RoundRecord>,
    /// `duals[s][i]` is `z_i` at state `s`.
    pub duals: Vec<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone)]
pub struct SimulationResult {
    /// Global decision at each state `0..=T`; round `r` commits `states_x[r-1]`.
    pub states_x: Vec<Vec<f64>>,
    /// Consensus error at states `1..=T`.
    pub consensus_errors: Vec<f64>,
    /// `sum_i w_i` at states `0..=T`.
    pub weight_sums: Vec<f64>,
    pub trace: RegretTrace,
    /// Largest noisy block-gradient norm seen (estimate of the moment bound).
    pub max_block_grad_norm: f64,
    /// Largest full-gradient norm at a committed decision.
    pub max_grad_norm: f64,
    /// Smallest positive mixing weight used.
    pub phi: f64,
    pub key: StreamKey,
    pub history: Option<History>,
}

impl SimulationResult {
    pub fn horizon(&self) -> usize {
        self.consensus_errors.len()
    }

    /// Decision committed in round `r` (1-based).
    pub fn decision(&self, r: usize) -> &[f64] {
        &self.states_x[r - 1]
    }

    /// Output produced by round `r`, i.e. the decision after `f_r` is processed.
    pub fn output(&self, r: usize) -> &[f64] {
        &self.states_x[r]
    }
}

/// Runs one replicate over `events` (round `r` reveals `events[r-1]`).
pub fn run_simulation(
    config: &SimulationConfig,
    events: &[LossEvent],
) -> Result<SimulationResult, EngineError> {
    config.validate()?;
    let d = config.partition.d();
    if let Some(e) = events.iter().find(|e| e.dim() != d) {
        return Err(EngineError::Dimension {
            what: "loss event",
            expected: d,
            got: e.dim(),
        });
    }
    let mats = period_matrices(&config.schedule, config.engine, config.weighting);
    let phi = mats.iter().map(MixingMatrix::phi).fold(f64::INFINITY, f64::min);
    let ctx = RoundContext {
        partition: &config.partition,
        set: &config.set,
        privacy: config.privacy,
        grad_noise: config.grad_noise,
        steps: config.steps,
        key: config.key,
    };
    let mut states = initial_states(&config.partition, &config.set, config.steps)?;
    let horizon = events.len();
    let mut states_x = Vec::with_capacity(horizon + 1);
    states_x.push(global_decision(&states, &config.partition));
    let mut weight_sums = vec![states.iter().map(|s| s.w).sum::<f64>()];
    let mut consensus_errors = Vec::with_capacity(horizon);
    let mut trace = RegretTrace::new();
    let mut running_sum = vec![0.0; d];
    let mut max_block_grad_norm = 0.0f64;
    let mut max_grad_norm = 0.0f64;
    let mut history = config.record_history.then(|| History {
        duals: vec![states.iter().map(|s| s.z.clone()).collect()],
        ..History::default()
    });

    for (t, f_t) in events.iter().enumerate() {
        let x = &states_x[t];
        running_sum.iter_mut().zip(x).for_each(|(s, v)| *s += v);
        let x_tilde: Vec<f64> = running_sum.iter().map(|s| s / (t + 1) as f64).collect();
        trace.regret_update(t + 1, f_t, x, &x_tilde)?;
        max_grad_norm = max_grad_norm.max(norm(&f_t.grad(x)?));

        let m = &mats[t % mats.len()];
        let record = match config.engine {
            EngineKind::Circulation => dpsda_c_round(&mut states, m, f_t, &ctx, t)?,
            EngineKind::PushSum => dpsda_ps_round(&mut states, m, f_t, &ctx, t)?,
        };
        for u in &record.u {
            max_block_grad_norm = max_block_grad_norm.max(norm(u));
        }
        states_x.push(global_decision(&states, &config.partition));
        weight_sums.push(states.iter().map(|s| s.w).sum());
        consensus_errors.push(consensus_error(&states, config.engine));
        if let Some(h) = history.as_mut() {
            h.matrices.push(m.entries().clone());
            h.rounds.push(record);
            h.duals.push(states.iter().map(|s| s.z.clone()).collect());
        }
    }

    Ok(SimulationResult {
        states_x,
        consensus_errors,
        weight_sums,
        trace,
        max_block_grad_norm,
        max_grad_norm,
        phi,
        key: config.key,
        history,
    })
}
