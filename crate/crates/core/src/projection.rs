//! Proximal projection with `psi(x) = ||x||^2 / 2`, feasible sets and step sizes.
//!
//! With this `psi`, `argmin_x { <z, x> + psi(x) / alpha }` over a closed convex
//! set is the Euclidean projection of `-alpha z` onto the set.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ProjectionError {
    #[error("box bounds need matching lengths, got {lo} and {hi}")]
    BoundLengths { lo: usize, hi: usize },
    #[error("box coordinate {0} has lo >= hi")]
    EmptyInterval(usize),
    #[error("ball radius must be positive, got {0}")]
    BadRadius(f64),
    #[error("set has dimension {set}, vector has {vector}")]
    DimensionMismatch { set: usize, vector: usize },
    #[error("step size must be positive, got {0}")]
    BadStep(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub enum ConstraintSet {
    /// Per-coordinate intervals `[lo_k, hi_k]`.
    Box { lo: Vec<f64>, hi: Vec<f64> },
    /// Centered Euclidean ball.
    Ball { radius: f64, dim: usize },
}

impl ConstraintSet {
    pub fn boxed(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self, ProjectionError> {
        if lo.len() != hi.len() {
            return Err(ProjectionError::BoundLengths {
                lo: lo.len(),
                hi: hi.len(),
            });
        }
        if let Some(k) = lo.iter().zip(&hi).position(|(l, h)| !(l < h)) {
            return Err(ProjectionError::EmptyInterval(k));
        }
        Ok(Self::Box { lo, hi })
    }

    /// `[lo, hi]^dim`.
    pub fn uniform_box(lo: f64, hi: f64, dim: usize) -> Result<Self, ProjectionError> {
        Self::boxed(vec![lo; dim], vec![hi; dim])
    }

    pub fn ball(radius: f64, dim: usize) -> Result<Self, ProjectionError> {
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(ProjectionError::BadRadius(radius));
        }
        Ok(Self::Ball { radius, dim })
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Box { lo, .. } => lo.len(),
            Self::Ball { dim, .. } => *dim,
        }
    }

    /// Per-coordinate diameter for boxes (widest interval), `2B` for balls.
    pub fn diameter(&self) -> f64 {
        match self {
            Self::Box { lo, hi } => lo
                .iter()
                .zip(hi)
                .map(|(l, h)| h - l)
                .fold(0.0, f64::max),
            Self::Ball { radius, .. } => 2.0 * radius,
        }
    }

    /// Exact maximum of `psi` over the set.
    pub fn c_psi(&self) -> f64 {
        match self {
            Self::Box { lo, hi } => {
                0.5 * lo
                    .iter()
                    .zip(hi)
                    .map(|(l, h)| (l * l).max(h * h))
                    .sum::<f64>()
            }
            Self::Ball { radius, .. } => 0.5 * radius * radius,
        }
    }

    pub fn contains(&self, x: &[f64], tol: f64) -> bool {
        match self {
            Self::Box { lo, hi } => x
                .iter()
                .zip(lo.iter().zip(hi))
                .all(|(v, (l, h))| *v >= l - tol && *v <= h + tol),
            Self::Ball { radius, .. } => norm(x) <= radius + tol,
        }
    }

    /// Euclidean projection, in place.
    pub fn project_in_place(&self, x: &mut [f64]) {
        match self {
            Self::Box { lo, hi } => {
                for (v, (l, h)) in x.iter_mut().zip(lo.iter().zip(hi)) {
                    *v = v.clamp(*l, *h);
                }
            }
            Self::Ball { radius, .. } => {
                let nrm = norm(x);
                if nrm > *radius {
                    let scale = radius / nrm;
                    x.iter_mut().for_each(|v| *v *= scale);
                }
            }
        }
    }

    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        let mut out = x.to_vec();
        self.project_in_place(&mut out);
        out
    }
}

pub(crate) fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn psi(x: &[f64]) -> f64 {
    0.5 * x.iter().map(|v| v * v).sum::<f64>()
}

/// `argmin_{x in set} <z, x> + psi(x) / alpha`.
pub fn prox_project(
    z: &[f64],
    alpha: f64,
    set: &ConstraintSet,
) -> Result<Vec<f64>, ProjectionError> {
    let mut out = vec![0.0; z.len()];
    prox_project_into(z, alpha, set, &mut out)?;
    Ok(out)
}

/// Allocation-free form of [`prox_project`].
pub fn prox_project_into(
    z: &[f64],
    alpha: f64,
    set: &ConstraintSet,
    out: &mut [f64],
) -> Result<(), ProjectionError> {
    if !(alpha > 0.0) {
        return Err(ProjectionError::BadStep(alpha));
    }
    if z.len() != set.dim() || out.len() != set.dim() {
        return Err(ProjectionError::DimensionMismatch {
            set: set.dim(),
            vector: z.len(),
        });
    }
    for (o, v) in out.iter_mut().zip(z) {
        *o = -alpha * v;
    }
    set.project_in_place(out);
    Ok(())
}

/// Step-size rule for the primal update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StepSchedule {
    /// `1/sqrt(t)`, extended with `alpha(0) = 1`.
    #[default]
    InverseSqrt,
}

impl StepSchedule {
    pub fn alpha(&self, t: usize) -> f64 {
        match self {
            Self::InverseSqrt => step_alpha(t),
        }
    }
}

pub fn step_alpha(t: usize) -> f64 {
    if t == 0 {
        1.0
    } else {
        1.0 / (t as f64).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn psi_examples() {
        assert_eq!(psi(&[0.0, 0.0]), 0.0);
        assert_eq!(psi(&[3.0, 4.0]), 12.5);
        let set = ConstraintSet::uniform_box(-5.0, 5.0, 21).unwrap();
        assert_eq!(set.c_psi(), 262.5);
        assert_eq!(psi(&[5.0; 21]), 262.5);
        assert_eq!(set.diameter(), 10.0);
        let ball = ConstraintSet::ball(5.0, 3).unwrap();
        assert_eq!(ball.c_psi(), 12.5);
        assert_eq!(ball.diameter(), 10.0);
    }

    #[test]
    fn heterogeneous_box_uses_widest_interval() {
        let set = ConstraintSet::boxed(vec![-1.0, 0.0, -3.0], vec![1.0, 0.5, 4.0]).unwrap();
        assert_eq!(set.diameter(), 7.0);
        assert_eq!(set.c_psi(), 0.5 * (1.0 + 0.25 + 16.0));
        assert_eq!(
            ConstraintSet::boxed(vec![1.0], vec![1.0]),
            Err(ProjectionError::EmptyInterval(0))
        );
    }

    #[test]
    fn projection_examples() {
        let bx = ConstraintSet::uniform_box(-5.0, 5.0, 2).unwrap();
        assert_eq!(prox_project(&[0.0, 0.0], 0.3, &bx).unwrap(), vec![0.0, 0.0]);
        assert_eq!(prox_project(&[10.0, -10.0], 1.0, &bx).unwrap(), vec![-5.0, 5.0]);
        let ball = ConstraintSet::ball(5.0, 2).unwrap();
        assert_eq!(prox_project(&[3.0, 4.0], 2.0, &ball).unwrap(), vec![-3.0, -4.0]);
        assert_eq!(
            prox_project(&[1.0], 0.0, &bx),
            Err(ProjectionError::BadStep(0.0))
        );
    }

    #[test]
    fn step_examples() {
        assert_eq!(step_alpha(0), 1.0);
        assert_eq!(step_alpha(4), 0.5);
        assert_eq!(step_alpha(100), 0.1);
        let mut prev = step_alpha(1);
        for t in 2..500 {
            let a = StepSchedule::InverseSqrt.alpha(t);
            assert!(a > 0.0 && a <= prev);
            prev = a;
        }
    }

    fn any_set() -> impl Strategy<Value = ConstraintSet> {
        prop_oneof![
            (0.1f64..10.0, 0.1f64..10.0)
                .prop_map(|(a, b)| ConstraintSet::boxed(vec![-a, -b, -1.0], vec![b, a, 2.0]).unwrap()),
            (0.1f64..10.0).prop_map(|r| ConstraintSet::ball(r, 3).unwrap()),
        ]
    }

    proptest! {
        #[test]
        fn feasible_and_nonexpansive(
            set in any_set(),
            z1 in prop::collection::vec(-100.0f64..100.0, 3),
            z2 in prop::collection::vec(-100.0f64..100.0, 3),
            alpha in 1e-3f64..10.0,
        ) {
            let p1 = prox_project(&z1, alpha, &set).unwrap();
            let p2 = prox_project(&z2, alpha, &set).unwrap();
            prop_assert!(set.contains(&p1, 1e-12));
            let lhs = norm(&p1.iter().zip(&p2).map(|(a, b)| a - b).collect::<Vec<_>>());
            let rhs = alpha * norm(&z1.iter().zip(&z2).map(|(a, b)| a - b).collect::<Vec<_>>());
            prop_assert!(lhs <= rhs * (1.0 + 1e-12) + 1e-12);
        }
    }
}
