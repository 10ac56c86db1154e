//! Online loss sequences, gradient oracles, the hindsight comparator and regret
//! bookkeeping.

use std::ops::Range;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use thiserror::Error;

use crate::projection::{norm, ConstraintSet};

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("point has dimension {got}, loss expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("feature buffer of length {len} is not a multiple of dimension {dim}")]
    RaggedFeatures { len: usize, dim: usize },
    #[error("{rows} feature rows but {labels} labels")]
    LabelCount { rows: usize, labels: usize },
    #[error("label {0} is not +1 or -1")]
    NonBinaryLabel(f64),
    #[error("loss event has an empty batch")]
    EmptyBatch,
    #[error("block {start}..{end} exceeds dimension {dim}")]
    BlockOutOfRange { start: usize, end: usize, dim: usize },
    #[error("hindsight needs at least one loss event")]
    NoEvents,
    #[error("gradient noise variance must be nonnegative, got {0}")]
    BadVariance(f64),
    #[error("hindsight solver stopped after {iterations} iterations with projected gradient norm {grad_norm:e}")]
    NotConverged { iterations: usize, grad_norm: f64 },
    #[error("round {got} appended out of order, expected {expected}")]
    OutOfOrder { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossFamily {
    LeastSquares,
    Hinge,
    Logistic,
}

/// The function revealed in one round: a batch-averaged loss of a linear model.
#[derive(Debug, Clone, PartialEq)]
pub struct LossEvent {
    family: LossFamily,
    dim: usize,
    features: Vec<f64>,
    labels: Vec<f64>,
    averaged: bool,
}

/// `log(1 + exp(v))` without overflow.
fn softplus(v: f64) -> f64 {
    if v > 0.0 {
        v + (-v).exp().ln_1p()
    } else {
        v.exp().ln_1p()
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Four independent accumulators so the loop vectorizes.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

impl LossEvent {
    /// `features` is row-major with `dim` columns.
    pub fn new(
        family: LossFamily,
        dim: usize,
        features: Vec<f64>,
        labels: Vec<f64>,
    ) -> Result<Self, LossError> {
        if dim == 0 || features.len() % dim != 0 {
            return Err(LossError::RaggedFeatures {
                len: features.len(),
                dim,
            });
        }
        let rows = features.len() / dim;
        if rows != labels.len() {
            return Err(LossError::LabelCount {
                rows,
                labels: labels.len(),
            });
        }
        if rows == 0 {
            return Err(LossError::EmptyBatch);
        }
        if family != LossFamily::LeastSquares {
            if let Some(&b) = labels.iter().find(|&&b| b != 1.0 && b != -1.0) {
                return Err(LossError::NonBinaryLabel(b));
            }
        }
        Ok(Self {
            family,
            dim,
            features,
            labels,
            averaged: true,
        })
    }

    /// Sum over the batch instead of averaging.
    pub fn summed(mut self) -> Self {
        self.averaged = false;
        self
    }

    pub fn family(&self) -> LossFamily {
        self.family
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn batch_size(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    pub fn rows(&self) -> impl Iterator<Item = (&[f64], f64)> {
        self.features
            .chunks_exact(self.dim)
            .zip(self.labels.iter().copied())
    }

    fn weight(&self) -> f64 {
        if self.averaged {
            1.0 / self.batch_size() as f64
        } else {
            1.0
        }
    }

    fn check(&self, x: &[f64]) -> Result<(), LossError> {
        if x.len() != self.dim {
            return Err(LossError::DimensionMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        Ok(())
    }

    pub fn eval(&self, x: &[f64]) -> Result<f64, LossError> {
        self.check(x)?;
        let total: f64 = self
            .rows()
            .map(|(a, b)| {
                let p = dot(a, x);
                match self.family {
                    LossFamily::LeastSquares => (b - p).powi(2),
                    LossFamily::Hinge => (1.0 - b * p).max(0.0),
                    LossFamily::Logistic => softplus(-b * p),
                }
            })
            .sum();
        Ok(total * self.weight())
    }

    /// Derivative of the per-sample loss with respect to the prediction `a.x`.
    fn link_derivative(&self, p: f64, b: f64) -> f64 {
        match self.family {
            LossFamily::LeastSquares => -2.0 * (b - p),
            // subgradient 0 at the kink
            LossFamily::Hinge => {
                if b * p < 1.0 {
                    -b
                } else {
                    0.0
                }
            }
            LossFamily::Logistic => -b * sigmoid(-b * p),
        }
    }

    /// Gradient coordinates in `block`, written to `out` (length `block.len()`).
    pub fn grad_block_into(
        &self,
        x: &[f64],
        block: Range<usize>,
        out: &mut [f64],
    ) -> Result<(), LossError> {
        self.check(x)?;
        if block.end > self.dim || block.start > block.end {
            return Err(LossError::BlockOutOfRange {
                start: block.start,
                end: block.end,
                dim: self.dim,
            });
        }
        out.iter_mut().for_each(|v| *v = 0.0);
        for (a, b) in self.rows() {
            let g = self.link_derivative(dot(a, x), b);
            if g != 0.0 {
                for (o, ak) in out.iter_mut().zip(&a[block.clone()]) {
                    *o += g * ak;
                }
            }
        }
        let w = self.weight();
        out.iter_mut().for_each(|v| *v *= w);
        Ok(())
    }

    pub fn grad(&self, x: &[f64]) -> Result<Vec<f64>, LossError> {
        let mut out = vec![0.0; self.dim];
        self.grad_block_into(x, 0..self.dim, &mut out)?;
        Ok(out)
    }

    /// Upper bound on the gradient's Lipschitz constant (trace bound on the
    /// Hessian). `None` for the nonsmooth hinge loss.
    pub fn smoothness(&self) -> Option<f64> {
        let mean_sq = self.rows().map(|(a, _)| dot(a, a)).sum::<f64>() * self.weight();
        match self.family {
            LossFamily::LeastSquares => Some(2.0 * mean_sq),
            LossFamily::Logistic => Some(0.25 * mean_sq),
            LossFamily::Hinge => None,
        }
    }

    /// Bound on the subgradient norm of the hinge loss.
    fn hinge_lipschitz(&self) -> f64 {
        self.rows().map(|(a, _)| norm(a)).sum::<f64>() * self.weight()
    }
}

/// Zero-mean Gaussian error added to each gradient coordinate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientNoiseSpec {
    variance: f64,
}

impl GradientNoiseSpec {
    pub fn new(variance: f64) -> Result<Self, LossError> {
        if !(variance >= 0.0 && variance.is_finite()) {
            return Err(LossError::BadVariance(variance));
        }
        Ok(Self { variance })
    }

    pub fn variance(&self) -> f64 {
        self.variance
    }
}

impl Default for GradientNoiseSpec {
    fn default() -> Self {
        Self { variance: 0.1 }
    }
}

/// Block of the gradient at `y` plus i.i.d. Gaussian error.
pub fn noisy_block_grad<R: Rng + ?Sized>(
    f: &LossEvent,
    y: &[f64],
    block: Range<usize>,
    noise: GradientNoiseSpec,
    rng: &mut R,
) -> Result<Vec<f64>, LossError> {
    let mut out = vec![0.0; block.len()];
    f.grad_block_into(y, block, &mut out)?;
    if noise.variance > 0.0 {
        let normal = Normal::new(0.0, noise.variance.sqrt()).expect("finite std");
        for v in &mut out {
            *v += normal.sample(rng);
        }
    }
    Ok(out)
}

/// A convex objective the hindsight solver can minimize.
pub trait Objective {
    fn dim(&self) -> usize;
    fn value(&self, x: &[f64]) -> f64;
    fn grad_into(&self, x: &[f64], out: &mut [f64]);
    /// Gradient Lipschitz bound; `None` when nonsmooth.
    fn smoothness(&self) -> Option<f64>;
    /// Subgradient norm bound, used for nonsmooth objectives.
    fn lipschitz(&self) -> f64;
}

/// `sum_t f_t` over a slice of events.
pub struct EventSum<'a> {
    events: &'a [LossEvent],
}

impl<'a> EventSum<'a> {
    pub fn new(events: &'a [LossEvent]) -> Result<Self, LossError> {
        let first = events.first().ok_or(LossError::NoEvents)?;
        if let Some(e) = events.iter().find(|e| e.dim != first.dim) {
            return Err(LossError::DimensionMismatch {
                expected: first.dim,
                got: e.dim,
            });
        }
        Ok(Self { events })
    }
}

impl Objective for EventSum<'_> {
    fn dim(&self) -> usize {
        self.events[0].dim
    }

    fn value(&self, x: &[f64]) -> f64 {
        self.events.iter().map(|e| e.eval(x).expect("dim checked")).sum()
    }

    fn grad_into(&self, x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        let mut tmp = vec![0.0; out.len()];
        for e in self.events {
            e.grad_block_into(x, 0..out.len(), &mut tmp).expect("dim checked");
            out.iter_mut().zip(&tmp).for_each(|(o, t)| *o += t);
        }
    }

    fn smoothness(&self) -> Option<f64> {
        self.events.iter().map(LossEvent::smoothness).sum()
    }

    fn lipschitz(&self) -> f64 {
        self.events.iter().map(LossEvent::hinge_lipschitz).sum()
    }
}

/// Accumulated least-squares objective `x'Qx/2 + c'x + k`. Adding events is
/// O(batch d^2), after which evaluations no longer depend on the horizon.
#[derive(Debug, Clone)]
pub struct QuadraticObjective {
    dim: usize,
    hessian: Vec<f64>,
    linear: Vec<f64>,
    constant: f64,
}

impl QuadraticObjective {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            hessian: vec![0.0; dim * dim],
            linear: vec![0.0; dim],
            constant: 0.0,
        }
    }

    pub fn add(&mut self, e: &LossEvent) -> Result<(), LossError> {
        if e.family != LossFamily::LeastSquares || e.dim != self.dim {
            return Err(LossError::DimensionMismatch {
                expected: self.dim,
                got: e.dim,
            });
        }
        let w = e.weight();
        let d = self.dim;
        for (a, b) in e.rows() {
            for i in 0..d {
                let ai = 2.0 * w * a[i];
                if ai == 0.0 {
                    continue;
                }
                for j in 0..d {
                    self.hessian[i * d + j] += ai * a[j];
                }
                self.linear[i] -= ai * b;
            }
            self.constant += w * b * b;
        }
        Ok(())
    }

    fn largest_eigenvalue(&self) -> f64 {
        let d = self.dim;
        let trace: f64 = (0..d).map(|i| self.hessian[i * d + i]).sum();
        if trace == 0.0 {
            return 0.0;
        }
        let mut v: Vec<f64> = (0..d).map(|i| 1.0 + 0.01 * i as f64).collect();
        let mut est = 0.0;
        for _ in 0..200 {
            let mut next = vec![0.0; d];
            self.apply(&v, &mut next);
            let nrm = norm(&next);
            if nrm == 0.0 {
                return trace;
            }
            est = dot(&v, &next) / dot(&v, &v);
            v = next.into_iter().map(|x| x / nrm).collect();
        }
        // power iteration approaches from below
        (1.05 * est).min(trace)
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        let d = self.dim;
        for i in 0..d {
            out[i] = dot(&self.hessian[i * d..(i + 1) * d], x);
        }
    }
}

impl Objective for QuadraticObjective {
    fn dim(&self) -> usize {
        self.dim
    }

    fn value(&self, x: &[f64]) -> f64 {
        let mut qx = vec![0.0; self.dim];
        self.apply(x, &mut qx);
        0.5 * dot(x, &qx) + dot(&self.linear, x) + self.constant
    }

    fn grad_into(&self, x: &[f64], out: &mut [f64]) {
        self.apply(x, out);
        out.iter_mut().zip(&self.linear).for_each(|(o, c)| *o += c);
    }

    fn smoothness(&self) -> Option<f64> {
        Some(self.largest_eigenvalue())
    }

    fn lipschitz(&self) -> f64 {
        f64::INFINITY
    }
}

/// Best fixed decision in hindsight.
#[derive(Debug, Clone, PartialEq)]
pub struct Hindsight {
    pub point: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub grad_norm: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct SolverOptions {
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Above this projected-gradient norm at the cap, smooth solves fail.
    pub failure_threshold: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-8,
            max_iterations: 100_000,
            failure_threshold: 1e-4,
        }
    }
}

/// Minimizes a convex objective over `set`. Smooth objectives use projected
/// gradient steps of length `1/L` with Nesterov momentum and gradient-based
/// restarts; nonsmooth ones use projected subgradient steps `1/(L sqrt(k))`
/// and keep the best iterate.
pub fn minimize<O: Objective>(
    obj: &O,
    set: &ConstraintSet,
    start: Option<&[f64]>,
    opts: SolverOptions,
) -> Result<Hindsight, LossError> {
    let d = obj.dim();
    if set.dim() != d {
        return Err(LossError::DimensionMismatch {
            expected: d,
            got: set.dim(),
        });
    }
    let mut x = match start {
        Some(s) => set.project(s),
        None => set.project(&vec![0.0; d]),
    };
    match obj.smoothness() {
        Some(l) if l > 0.0 => minimize_smooth(obj, set, &mut x, l, opts),
        Some(_) => {
            // constant objective
            let value = obj.value(&x);
            Ok(Hindsight {
                point: x,
                value,
                iterations: 0,
                grad_norm: 0.0,
                converged: true,
            })
        }
        None => Ok(minimize_subgradient(obj, set, x, opts)),
    }
}

fn projected_grad_norm(
    x: &[f64],
    g: &[f64],
    step: f64,
    set: &ConstraintSet,
    scratch: &mut [f64],
) -> f64 {
    for ((s, xi), gi) in scratch.iter_mut().zip(x).zip(g) {
        *s = xi - step * gi;
    }
    set.project_in_place(scratch);
    let diff: f64 = x
        .iter()
        .zip(scratch.iter())
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    diff / step
}

fn minimize_smooth<O: Objective>(
    obj: &O,
    set: &ConstraintSet,
    x: &mut Vec<f64>,
    lipschitz: f64,
    opts: SolverOptions,
) -> Result<Hindsight, LossError> {
    let d = x.len();
    let step = 1.0 / lipschitz;
    let mut y = x.clone();
    let mut momentum = 1.0f64;
    let mut g = vec![0.0; d];
    let mut scratch = vec![0.0; d];
    let mut next = vec![0.0; d];
    let mut grad_norm = f64::INFINITY;
    let mut iterations = 0;
    while iterations < opts.max_iterations {
        obj.grad_into(x, &mut g);
        grad_norm = projected_grad_norm(x, &g, step, set, &mut scratch);
        if grad_norm < opts.tolerance {
            break;
        }
        iterations += 1;
        obj.grad_into(&y, &mut g);
        for ((n, yi), gi) in next.iter_mut().zip(&y).zip(&g) {
            *n = yi - step * gi;
        }
        set.project_in_place(&mut next);
        // restart when the gradient mapping at y points against the last move
        let restart = y
            .iter()
            .zip(next.iter().zip(x.iter()))
            .map(|(yi, (ni, xi))| (yi - ni) * (ni - xi))
            .sum::<f64>()
            > 0.0;
        if restart {
            momentum = 1.0;
            y.copy_from_slice(&next);
        } else {
            let new_momentum = 0.5 * (1.0 + (1.0 + 4.0 * momentum * momentum).sqrt());
            let beta = (momentum - 1.0) / new_momentum;
            for ((yi, ni), xi) in y.iter_mut().zip(&next).zip(x.iter()) {
                *yi = ni + beta * (ni - xi);
            }
            momentum = new_momentum;
        }
        x.copy_from_slice(&next);
    }
    let converged = grad_norm < opts.tolerance;
    if !converged && grad_norm > opts.failure_threshold {
        return Err(LossError::NotConverged {
            iterations,
            grad_norm,
        });
    }
    Ok(Hindsight {
        value: obj.value(x),
        point: x.clone(),
        iterations,
        grad_norm,
        converged,
    })
}

fn minimize_subgradient<O: Objective>(
    obj: &O,
    set: &ConstraintSet,
    mut x: Vec<f64>,
    opts: SolverOptions,
) -> Hindsight {
    let d = x.len();
    let lip = obj.lipschitz().max(f64::MIN_POSITIVE);
    let mut g = vec![0.0; d];
    let mut best = x.clone();
    let mut best_value = obj.value(&x);
    let mut iterations = 0;
    let mut grad_norm = f64::INFINITY;
    for k in 1..=opts.max_iterations {
        obj.grad_into(&x, &mut g);
        grad_norm = norm(&g);
        if grad_norm == 0.0 {
            break;
        }
        iterations = k;
        let step = 1.0 / (lip * (k as f64).sqrt());
        x.iter_mut().zip(&g).for_each(|(xi, gi)| *xi -= step * gi);
        set.project_in_place(&mut x);
        let v = obj.value(&x);
        if v < best_value {
            best_value = v;
            best.copy_from_slice(&x);
        }
    }
    Hindsight {
        point: best,
        value: best_value,
        iterations,
        grad_norm,
        converged: grad_norm == 0.0,
    }
}

/// `min_{v in set} sum_t f_t(v)`.
pub fn hindsight_optimum(
    events: &[LossEvent],
    set: &ConstraintSet,
) -> Result<Hindsight, LossError> {
    minimize(&EventSum::new(events)?, set, None, SolverOptions::default())
}

/// Hindsight optima for each prefix length in `horizons` (ascending), warm
/// starting each solve from the previous one. Least-squares streams go
/// through an accumulated quadratic.
pub fn hindsight_path(
    events: &[LossEvent],
    set: &ConstraintSet,
    horizons: &[usize],
    opts: SolverOptions,
) -> Result<Vec<Hindsight>, LossError> {
    let first = events.first().ok_or(LossError::NoEvents)?;
    let mut out: Vec<Hindsight> = Vec::with_capacity(horizons.len());
    let all_ls = events.iter().all(|e| e.family == LossFamily::LeastSquares);
    let mut quad = QuadraticObjective::new(first.dim);
    let mut added = 0;
    for &h in horizons {
        if h == 0 || h > events.len() {
            return Err(LossError::NoEvents);
        }
        let start = out.last().map(|p| p.point.as_slice());
        let sol = if all_ls {
            for e in &events[added..h] {
                quad.add(e)?;
            }
            added = h;
            minimize(&quad, set, start, opts)?
        } else {
            minimize(&EventSum::new(&events[..h])?, set, start, opts)?
        };
        out.push(sol);
    }
    Ok(out)
}

/// Per-round costs of one run plus the hindsight comparator where known.
/// Round indices are 1-based.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RegretTrace {
    costs: Vec<f64>,
    running_avg_costs: Vec<f64>,
    cum_costs: Vec<f64>,
    cum_running_avg_costs: Vec<f64>,
    hindsight: Vec<Option<f64>>,
}

impl RegretTrace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.costs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.costs.is_empty()
    }

    /// Records `f_t(x(t))` and `f_t(x~(t))` for round `t`.
    pub fn regret_update(
        &mut self,
        t: usize,
        f_t: &LossEvent,
        x_t: &[f64],
        x_tilde_t: &[f64],
    ) -> Result<(), LossError> {
        let cost = f_t.eval(x_t)?;
        let avg_cost = f_t.eval(x_tilde_t)?;
        self.push_costs(t, cost, avg_cost)
    }

    pub fn push_costs(&mut self, t: usize, cost: f64, avg_cost: f64) -> Result<(), LossError> {
        if t != self.len() + 1 {
            return Err(LossError::OutOfOrder {
                expected: self.len() + 1,
                got: t,
            });
        }
        let prev = self.cum_costs.last().copied().unwrap_or(0.0);
        let prev_avg = self.cum_running_avg_costs.last().copied().unwrap_or(0.0);
        self.costs.push(cost);
        self.running_avg_costs.push(avg_cost);
        self.cum_costs.push(prev + cost);
        self.cum_running_avg_costs.push(prev_avg + avg_cost);
        self.hindsight.push(None);
        Ok(())
    }

    pub fn set_hindsight(&mut self, t: usize, value: f64) {
        self.hindsight[t - 1] = Some(value);
    }

    pub fn cost(&self, t: usize) -> f64 {
        self.costs[t - 1]
    }

    pub fn running_avg_cost(&self, t: usize) -> f64 {
        self.running_avg_costs[t - 1]
    }

    pub fn cumulative_cost(&self, t: usize) -> f64 {
        self.cum_costs[t - 1]
    }

    pub fn cumulative_running_avg_cost(&self, t: usize) -> f64 {
        self.cum_running_avg_costs[t - 1]
    }

    pub fn hindsight_value(&self, t: usize) -> Option<f64> {
        self.hindsight[t - 1]
    }

    pub fn regret(&self, t: usize) -> Option<f64> {
        self.hindsight_value(t).map(|h| self.cumulative_cost(t) - h)
    }

    pub fn running_avg_regret(&self, t: usize) -> Option<f64> {
        self.hindsight_value(t)
            .map(|h| self.cumulative_running_avg_cost(t) - h)
    }
}

/// Synthetic online linear regression: `a(t)` uniform on `[-0.5, 0.5]^d`,
/// `x_hat` standard normal, `b(t) = a(t)'x_hat + N(0, noise_var)`.
pub fn synth_olr_stream<R: Rng + ?Sized>(
    rng: &mut R,
    d: usize,
    horizon: usize,
    noise_var: f64,
) -> Result<(Vec<LossEvent>, Vec<f64>), LossError> {
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let x_hat: Vec<f64> = (0..d).map(|_| std_normal.sample(rng)).collect();
    let events = (0..horizon)
        .map(|_| synth_olr_event(rng, &x_hat, noise_var))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((events, x_hat))
}

/// One event of [`synth_olr_stream`] for a given `x_hat`.
pub fn synth_olr_event<R: Rng + ?Sized>(
    rng: &mut R,
    x_hat: &[f64],
    noise_var: f64,
) -> Result<LossEvent, LossError> {
    let obs = GradientNoiseSpec::new(noise_var)?;
    let unif = Uniform::new_inclusive(-0.5, 0.5).expect("valid interval");
    let noise = Normal::new(0.0, obs.variance.sqrt()).expect("finite std");
    let a: Vec<f64> = x_hat.iter().map(|_| unif.sample(rng)).collect();
    let b = dot(&a, x_hat) + noise.sample(rng);
    LossEvent::new(LossFamily::LeastSquares, x_hat.len(), a, vec![b])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Purpose, StreamKey};
    use approx::assert_abs_diff_eq;

    fn rng(seed: u64) -> rand_chacha::ChaCha8Rng {
        StreamKey::new(seed, 0).global(Purpose::Data)
    }

    #[test]
    fn eval_examples() {
        let ls = LossEvent::new(LossFamily::LeastSquares, 2, vec![1.0, 0.0], vec![2.0]).unwrap();
        assert_eq!(ls.eval(&[2.0, 9.0]).unwrap(), 0.0);
        assert_eq!(ls.grad(&[2.0, 9.0]).unwrap(), vec![0.0, 0.0]);
        let h = LossEvent::new(LossFamily::Hinge, 1, vec![1.0], vec![1.0]).unwrap();
        assert_eq!(h.eval(&[0.0]).unwrap(), 1.0);
        let lg = LossEvent::new(LossFamily::Logistic, 3, vec![0.0; 3], vec![-1.0]).unwrap();
        assert_abs_diff_eq!(lg.eval(&[4.0, -2.0, 7.0]).unwrap(), std::f64::consts::LN_2);
        let lg1 = LossEvent::new(LossFamily::Logistic, 1, vec![1.0], vec![1.0]).unwrap();
        assert_abs_diff_eq!(lg1.grad(&[0.0]).unwrap()[0], -0.5);
    }

    #[test]
    fn hinge_kink_subgradient_is_zero() {
        let h = LossEvent::new(LossFamily::Hinge, 2, vec![1.0, 1.0], vec![1.0]).unwrap();
        assert_eq!(h.grad(&[0.5, 0.5]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(h.grad(&[0.25, 0.5]).unwrap(), vec![-1.0, -1.0]);
    }

    #[test]
    fn logistic_is_overflow_safe() {
        let lg = LossEvent::new(LossFamily::Logistic, 1, vec![1.0], vec![1.0]).unwrap();
        for m in [-1e4, -700.0, 0.0, 700.0, 1e4] {
            let v = lg.eval(&[m]).unwrap();
            let g = lg.grad(&[m]).unwrap()[0];
            assert!(v.is_finite() && g.is_finite(), "margin {m}");
        }
        assert_abs_diff_eq!(lg.eval(&[-1e4]).unwrap(), 1e4);
    }

    #[test]
    fn rejects_malformed_events() {
        assert!(matches!(
            LossEvent::new(LossFamily::Hinge, 1, vec![1.0], vec![0.5]),
            Err(LossError::NonBinaryLabel(_))
        ));
        assert!(matches!(
            LossEvent::new(LossFamily::LeastSquares, 2, vec![1.0; 3], vec![1.0]),
            Err(LossError::RaggedFeatures { .. })
        ));
        let ls = LossEvent::new(LossFamily::LeastSquares, 2, vec![1.0; 2], vec![1.0]).unwrap();
        assert!(matches!(ls.eval(&[1.0]), Err(LossError::DimensionMismatch { .. })));
    }

    #[test]
    fn noisy_block_gradient() {
        let f = LossEvent::new(
            LossFamily::Logistic,
            4,
            vec![0.3, -1.0, 0.5, 2.0, 1.0, 0.2, -0.4, 0.1],
            vec![1.0, -1.0],
        )
        .unwrap();
        let y = [0.1, 0.2, -0.3, 0.4];
        let full = f.grad(&y).unwrap();
        let exact = GradientNoiseSpec::new(0.0).unwrap();
        let mut r = rng(1);
        assert_eq!(noisy_block_grad(&f, &y, 1..3, exact, &mut r).unwrap(), full[1..3].to_vec());
        assert_eq!(noisy_block_grad(&f, &y, 0..4, exact, &mut r).unwrap(), full);

        let v = 0.1;
        let spec = GradientNoiseSpec::new(v).unwrap();
        let draws = 100_000;
        let mut sum = [0.0; 2];
        for _ in 0..draws {
            let g = noisy_block_grad(&f, &y, 2..4, spec, &mut r).unwrap();
            sum[0] += g[0];
            sum[1] += g[1];
        }
        let tol = 3.0 * (v / draws as f64).sqrt();
        for k in 0..2 {
            assert!((sum[k] / draws as f64 - full[2 + k]).abs() < tol);
        }
        assert!(matches!(
            noisy_block_grad(&f, &y, 3..5, spec, &mut r),
            Err(LossError::BlockOutOfRange { .. })
        ));
    }

    #[test]
    fn hindsight_interior_and_corner() {
        // one event in one dimension: unique minimizer b/a
        let e = LossEvent::new(LossFamily::LeastSquares, 1, vec![0.5], vec![1.0]).unwrap();
        let set = ConstraintSet::uniform_box(-5.0, 5.0, 1).unwrap();
        let h = hindsight_optimum(&[e], &set).unwrap();
        assert!((h.point[0] - 2.0).abs() < 1e-6);
        assert!(h.converged);

        // targets far outside the box pull towards the (5, -5) corner
        let events: Vec<LossEvent> = (0..3)
            .map(|k| {
                LossEvent::new(
                    LossFamily::LeastSquares,
                    2,
                    vec![1.0, 0.1 * k as f64, 0.2, -1.0],
                    vec![40.0, 40.0],
                )
                .unwrap()
            })
            .collect();
        let set2 = ConstraintSet::uniform_box(-5.0, 5.0, 2).unwrap();
        let h = hindsight_optimum(&events, &set2).unwrap();
        assert_abs_diff_eq!(h.point[0], 5.0, epsilon = 1e-9);
        assert_abs_diff_eq!(h.point[1], -5.0, epsilon = 1e-9);
    }

    #[test]
    fn hindsight_path_matches_independent_solves() {
        let (events, _) = synth_olr_stream(&mut rng(4), 3, 40, 0.2).unwrap();
        let set = ConstraintSet::uniform_box(-5.0, 5.0, 3).unwrap();
        let path = hindsight_path(&events, &set, &[5, 20, 40], SolverOptions::default()).unwrap();
        for (h, sol) in [5, 20, 40].iter().zip(&path) {
            let direct = hindsight_optimum(&events[..*h], &set).unwrap();
            assert_abs_diff_eq!(sol.value, direct.value, epsilon = 1e-8);
        }
    }

    #[test]
    fn hinge_hindsight_returns_best_iterate() {
        let events = vec![
            LossEvent::new(LossFamily::Hinge, 2, vec![1.0, 0.0, 0.0, 1.0], vec![1.0, -1.0])
                .unwrap(),
        ];
        let set = ConstraintSet::uniform_box(-2.0, 2.0, 2).unwrap();
        let opts = SolverOptions {
            max_iterations: 5000,
            ..SolverOptions::default()
        };
        let h = minimize(&EventSum::new(&events).unwrap(), &set, None, opts).unwrap();
        assert!(h.value < 1e-3, "value {}", h.value);
    }

    #[test]
    fn regret_trace_bookkeeping() {
        let e = LossEvent::new(LossFamily::LeastSquares, 1, vec![1.0], vec![1.0]).unwrap();
        let mut tr = RegretTrace::new();
        tr.regret_update(1, &e, &[0.0], &[0.0]).unwrap();
        tr.regret_update(2, &e, &[2.0], &[1.0]).unwrap();
        assert_eq!(
            tr.regret_update(4, &e, &[0.0], &[0.0]),
            Err(LossError::OutOfOrder { expected: 3, got: 4 })
        );
        assert_eq!(tr.cumulative_cost(2), 2.0);
        assert_eq!(tr.cumulative_running_avg_cost(2), 1.0);
        assert_eq!(tr.regret(2), None);
        tr.set_hindsight(2, 0.0);
        assert_eq!(tr.regret(2), Some(2.0));
        assert_eq!(tr.running_avg_regret(2), Some(1.0));
    }

    #[test]
    fn olr_stream_shape() {
        let (events, x_hat) = synth_olr_stream(&mut rng(9), 21, 500, 0.2).unwrap();
        assert_eq!(events.len(), 500);
        assert_eq!(x_hat.len(), 21);
        assert!(events.iter().all(|e| e.batch_size() == 1 && e.dim() == 21));
        assert!(events
            .iter()
            .flat_map(|e| e.rows().flat_map(|(a, _)| a.to_vec()))
            .all(|v| (-0.5..=0.5).contains(&v)));
    }
}
