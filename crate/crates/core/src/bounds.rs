//! Theoretical constants and bounds, evaluated for comparison with empirical traces.
//!
//! The consensus bounds are stated for one scalar coordinate per node. When
//! each node owns a block of several coordinates the per-coordinate bound is
//! summed over all `d` coordinates, i.e. scaled by `d / n`.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::engine::EngineKind;
use crate::loss::{LossError, LossEvent};
use crate::projection::norm;

/// Bounds above this are reported as vacuous at the simulated scale.
pub const VACUOUS_THRESHOLD: f64 = 1e12;

/// The fixed push-sum contraction multiplier.
pub const PUSH_SUM_BETA: f64 = 2.0;

#[derive(Debug, Error, PartialEq)]
pub enum BoundError {
    #[error("minimum positive weight must lie in (0, 1], got {0}")]
    BadPhi(f64),
    #[error("{0} must be positive")]
    NonPositive(&'static str),
    #[error("push-sum constants need at least one mixing matrix")]
    NoMatrices,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundInputs {
    pub n: usize,
    /// Number of coordinates of the stacked decision.
    pub dim: usize,
    /// Connectivity window.
    pub window: usize,
    /// Smallest positive mixing weight.
    pub phi: f64,
    /// `None` drops every privacy term.
    pub epsilon: Option<f64>,
    pub lhat: f64,
    pub l: f64,
    pub g: f64,
    pub d_chi: f64,
    pub c_psi: f64,
}

impl BoundInputs {
    fn validate(&self) -> Result<(), BoundError> {
        if self.n == 0 {
            return Err(BoundError::NonPositive("n"));
        }
        if self.window == 0 {
            return Err(BoundError::NonPositive("window"));
        }
        if !(self.phi > 0.0 && self.phi <= 1.0) {
            return Err(BoundError::BadPhi(self.phi));
        }
        if self.epsilon.is_some_and(|e| !(e > 0.0)) {
            return Err(BoundError::NonPositive("epsilon"));
        }
        if !(self.lhat > 0.0) {
            return Err(BoundError::NonPositive("lhat"));
        }
        Ok(())
    }

    fn coordinate_scale(&self) -> f64 {
        (self.dim as f64 / self.n as f64).max(1.0)
    }
}

/// `1 - phi / (4 n^2)`.
pub fn theta(phi: f64, n: usize) -> Result<f64, BoundError> {
    if !(phi > 0.0 && phi <= 1.0) {
        return Err(BoundError::BadPhi(phi));
    }
    if n == 0 {
        return Err(BoundError::NonPositive("n"));
    }
    Ok(1.0 - phi / (4.0 * (n * n) as f64))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PushSumConstants {
    /// Estimate of the infimum of the push-sum weights over a finite horizon.
    pub gamma: f64,
    pub beta: f64,
    pub lambda: f64,
    /// `1 - lambda`, computed without cancellation.
    pub one_minus_lambda: f64,
}

/// `lambda = (1 - n^{-nB})^{1/B}` and `1 - lambda`.
pub fn pushsum_lambda(n: usize, window: usize) -> (f64, f64) {
    let b = window as f64;
    let tiny = (-(n as f64) * b * (n as f64).ln()).exp();
    if tiny >= 1.0 {
        return (0.0, 1.0);
    }
    let log_lambda = (-tiny).ln_1p() / b;
    (log_lambda.exp(), -log_lambda.exp_m1())
}

/// Push-sum constants; `gamma` is the minimum entry of `A(t:0) 1` over
/// `horizon` rounds of the periodic `matrices`.
pub fn pushsum_constants(
    n: usize,
    window: usize,
    matrices: &[DMatrix<f64>],
    horizon: usize,
) -> Result<PushSumConstants, BoundError> {
    if matrices.is_empty() {
        return Err(BoundError::NoMatrices);
    }
    let mut w = DVector::from_element(n, 1.0);
    let mut gamma = 1.0f64;
    for t in 0..horizon {
        w = &matrices[t % matrices.len()] * w;
        gamma = gamma.min(w.min());
    }
    let (lambda, one_minus_lambda) = pushsum_lambda(n, window);
    Ok(PushSumConstants {
        gamma,
        beta: PUSH_SUM_BETA,
        lambda,
        one_minus_lambda,
    })
}

/// Consensus bound of the circulation engine for scalar blocks.
pub fn consensus_bound_c(n: usize, lhat: f64, theta: f64, epsilon: Option<f64>) -> f64 {
    let n = n as f64;
    let l2 = lhat * lhat;
    let tt = (theta * (1.0 - theta)).powi(2);
    let mut b = 3.0 * n.powi(4) * l2 / tt + 3.0 * n.powi(4) * l2;
    if let Some(eps) = epsilon {
        b += 24.0 * n.powi(6) * l2 / (tt * eps * eps);
    }
    b
}

/// Consensus bound of the push-sum engine (ratio form) for scalar blocks.
pub fn consensus_bound_ps(n: usize, c: &PushSumConstants, lhat: f64, epsilon: Option<f64>) -> f64 {
    let n = n as f64;
    let l2 = lhat * lhat;
    let b2 = c.beta * c.beta;
    let g2 = c.gamma * c.gamma;
    let oml2 = c.one_minus_lambda * c.one_minus_lambda;
    let mut b = 8.0 * n * n * b2 * l2 / (g2 * c.lambda * c.lambda * oml2);
    if let Some(eps) = epsilon {
        b += 64.0 * n.powi(4) * b2 * l2 / (g2 * oml2 * eps * eps);
    }
    b
}

/// Regret constant `M` from a consensus bound `consensus` (already summed
/// over coordinates): `16n²L̂²/ε² + 2nL̂² + C + 2(L + √n D G) √(n consensus)`.
pub fn regret_constant(inputs: &BoundInputs, consensus: f64) -> f64 {
    let n = inputs.n as f64;
    let l2 = inputs.lhat * inputs.lhat;
    let privacy = inputs
        .epsilon
        .map_or(0.0, |e| 16.0 * n * n * l2 / (e * e));
    privacy
        + 2.0 * n * l2
        + inputs.c_psi
        + 2.0 * (inputs.l + n.sqrt() * inputs.d_chi * inputs.g) * (n * consensus).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundReport {
    pub engine: EngineKind,
    pub inputs: BoundInputs,
    pub theta: f64,
    pub pushsum: Option<PushSumConstants>,
    /// Consensus bound summed over all coordinates.
    pub consensus_bound: f64,
    pub m: f64,
}

impl BoundReport {
    pub fn new(
        engine: EngineKind,
        inputs: BoundInputs,
        pushsum: Option<PushSumConstants>,
    ) -> Result<Self, BoundError> {
        inputs.validate()?;
        let th = theta(inputs.phi, inputs.n)?;
        let per_scalar = match (engine, pushsum) {
            (EngineKind::Circulation, _) => {
                consensus_bound_c(inputs.n, inputs.lhat, th, inputs.epsilon)
            }
            (EngineKind::PushSum, Some(c)) => {
                consensus_bound_ps(inputs.n, &c, inputs.lhat, inputs.epsilon)
            }
            (EngineKind::PushSum, None) => return Err(BoundError::NoMatrices),
        };
        let consensus_bound = per_scalar * inputs.coordinate_scale();
        Ok(Self {
            engine,
            inputs,
            theta: th,
            pushsum,
            consensus_bound,
            m: regret_constant(&inputs, consensus_bound),
        })
    }

    /// `M sqrt(T)`.
    pub fn regret_bound(&self, t: usize) -> f64 {
        self.m * (t as f64).sqrt()
    }

    /// `2 M sqrt(T)`, for the running-average decisions.
    pub fn running_avg_regret_bound(&self, t: usize) -> f64 {
        2.0 * self.regret_bound(t)
    }

    pub fn vacuous(&self) -> bool {
        !(self.m <= VACUOUS_THRESHOLD && self.consensus_bound <= VACUOUS_THRESHOLD)
    }
}

/// Largest full-gradient norm over the given events and points.
pub fn estimate_lipschitz(events: &[LossEvent], points: &[Vec<f64>]) -> Result<f64, LossError> {
    let mut best = 0.0f64;
    for e in events {
        for p in points {
            best = best.max(norm(&e.grad(p)?));
        }
    }
    Ok(best)
}

/// Largest per-event smoothness bound; infinite for nonsmooth losses.
pub fn estimate_smoothness(events: &[LossEvent]) -> f64 {
    events
        .iter()
        .map(|e| e.smoothness().unwrap_or(f64::INFINITY))
        .fold(0.0, f64::max)
}
