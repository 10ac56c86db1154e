//! Laplace mechanism on dual messages.

use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum PrivacyError {
    #[error("epsilon must be positive and finite, got {0}")]
    BadEpsilon(f64),
    #[error("fixed sensitivity must be positive, got {0}")]
    BadSensitivity(f64),
    #[error("gradient moment bound must be positive, got {0}")]
    BadMomentBound(f64),
    #[error("noise has dimension {noise}, dual has {dual}")]
    DimensionMismatch { dual: usize, noise: usize },
}

/// How the sensitivity is obtained.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SensitivityMode {
    /// `2 n L̂`, the worst-case bound shared by both engines.
    Theoretical,
    /// A configured constant.
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrivacyParams {
    /// `None` is the non-private setting (no noise).
    epsilon: Option<f64>,
    sensitivity: SensitivityMode,
    /// Bound on the noisy block-gradient norm.
    lhat: f64,
}

impl PrivacyParams {
    pub fn new(
        epsilon: Option<f64>,
        sensitivity: SensitivityMode,
        lhat: f64,
    ) -> Result<Self, PrivacyError> {
        if let Some(e) = epsilon {
            if !(e > 0.0 && e.is_finite()) {
                return Err(PrivacyError::BadEpsilon(e));
            }
        }
        if let SensitivityMode::Fixed(d) = sensitivity {
            if !(d > 0.0 && d.is_finite()) {
                return Err(PrivacyError::BadSensitivity(d));
            }
        }
        if !(lhat > 0.0 && lhat.is_finite()) {
            return Err(PrivacyError::BadMomentBound(lhat));
        }
        Ok(Self {
            epsilon,
            sensitivity,
            lhat,
        })
    }

    pub fn non_private() -> Self {
        Self {
            epsilon: None,
            sensitivity: SensitivityMode::Fixed(1.0),
            lhat: 1.0,
        }
    }

    pub fn epsilon(&self) -> Option<f64> {
        self.epsilon
    }

    pub fn sensitivity_mode(&self) -> SensitivityMode {
        self.sensitivity
    }

    pub fn lhat(&self) -> f64 {
        self.lhat
    }

    pub fn sensitivity(&self, n: usize) -> f64 {
        match self.sensitivity {
            SensitivityMode::Theoretical => 2.0 * n as f64 * self.lhat,
            SensitivityMode::Fixed(d) => d,
        }
    }

    /// Laplace scale for round `t`. The sensitivity bound does not depend on
    /// `t`, so neither does the scale.
    pub fn sigma_for_round(&self, n: usize, _t: usize) -> f64 {
        match self.epsilon {
            None => 0.0,
            Some(eps) => self.sensitivity(n) / eps,
        }
    }
}

/// One node's perturbation for one round.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw {
    pub values: Vec<f64>,
    pub round: usize,
    pub node: usize,
}

impl NoiseDraw {
    pub fn zeros(d: usize, node: usize, round: usize) -> Self {
        Self {
            values: vec![0.0; d],
            round,
            node,
        }
    }
}

/// One standard Laplace(1) variate by inverse CDF.
pub fn standard_laplace<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.random::<f64>() - 0.5;
        if u > -0.5 {
            return -u.signum() * (1.0 - 2.0 * u.abs()).ln();
        }
    }
}

/// `d` i.i.d. Laplace(`sigma`) samples. `sigma = 0` yields zeros without
/// consuming randomness.
pub fn laplace_vector<R: Rng + ?Sized>(
    sigma: f64,
    d: usize,
    node: usize,
    round: usize,
    rng: &mut R,
) -> NoiseDraw {
    if sigma == 0.0 {
        return NoiseDraw::zeros(d, node, round);
    }
    let values = (0..d).map(|_| sigma * standard_laplace(rng)).collect();
    NoiseDraw {
        values,
        round,
        node,
    }
}

/// The broadcast message `z + eta`.
pub fn perturb_dual(z: &[f64], noise: &NoiseDraw) -> Result<Vec<f64>, PrivacyError> {
    if z.len() != noise.values.len() {
        return Err(PrivacyError::DimensionMismatch {
            dual: z.len(),
            noise: noise.values.len(),
        });
    }
    Ok(z.iter().zip(&noise.values).map(|(a, b)| a + b).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Purpose, StreamKey};

    #[test]
    fn sensitivity_modes() {
        let th = PrivacyParams::new(Some(1.0), SensitivityMode::Theoretical, 1.0).unwrap();
        assert_eq!(th.sensitivity(7), 14.0);
        let fixed = PrivacyParams::new(Some(1.0), SensitivityMode::Fixed(1.0), 3.0).unwrap();
        assert_eq!(fixed.sensitivity(7), 1.0);
        assert_eq!(fixed.sensitivity(100), 1.0);
        let unit = PrivacyParams::new(None, SensitivityMode::Theoretical, 0.5).unwrap();
        assert_eq!(unit.sensitivity(1), 1.0);
    }

    #[test]
    fn sigma_pairs() {
        let mk = |e| PrivacyParams::new(e, SensitivityMode::Fixed(1.0), 1.0).unwrap();
        assert_eq!(mk(None).sigma_for_round(7, 3), 0.0);
        assert_eq!(mk(Some(1.0)).sigma_for_round(7, 3), 1.0);
        assert_eq!(mk(Some(0.5)).sigma_for_round(7, 3), 2.0);
        assert_eq!(mk(Some(0.2)).sigma_for_round(7, 3), 5.0);
    }

    #[test]
    fn sigma_decreases_in_epsilon() {
        let eps = [0.05, 0.1, 0.2, 0.5, 1.0, 2.0, 10.0];
        let sig: Vec<f64> = eps
            .iter()
            .map(|&e| {
                PrivacyParams::new(Some(e), SensitivityMode::Theoretical, 0.7)
                    .unwrap()
                    .sigma_for_round(5, 0)
            })
            .collect();
        assert!(sig.windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn rejects_bad_params() {
        assert_eq!(
            PrivacyParams::new(Some(0.0), SensitivityMode::Theoretical, 1.0),
            Err(PrivacyError::BadEpsilon(0.0))
        );
        assert_eq!(
            PrivacyParams::new(Some(1.0), SensitivityMode::Fixed(-1.0), 1.0),
            Err(PrivacyError::BadSensitivity(-1.0))
        );
    }

    #[test]
    fn zero_scale_gives_zero_vector() {
        let mut rng = StreamKey::new(1, 0).global(Purpose::PrivacyNoise);
        assert_eq!(laplace_vector(0.0, 3, 0, 0, &mut rng).values, vec![0.0; 3]);
    }

    #[test]
    fn absolute_value_median_is_ln2() {
        let mut rng = StreamKey::new(11, 0).global(Purpose::PrivacyNoise);
        let draws = 1_000_000;
        let above = (0..draws)
            .filter(|_| standard_laplace(&mut rng).abs() > std::f64::consts::LN_2)
            .count();
        let frac = above as f64 / draws as f64;
        assert!((frac - 0.5).abs() < 0.005, "fraction {frac}");
    }

    #[test]
    fn deterministic_per_key() {
        let key = StreamKey::new(5, 2);
        let a = laplace_vector(2.0, 4, 3, 8, &mut key.stream(3, 8, Purpose::PrivacyNoise));
        let b = laplace_vector(2.0, 4, 3, 8, &mut key.stream(3, 8, Purpose::PrivacyNoise));
        assert_eq!(a, b);
    }

    #[test]
    fn perturbation_is_elementwise_and_invertible() {
        let z = [1.0, 2.0];
        let eta = NoiseDraw {
            values: vec![0.5, -0.5],
            round: 0,
            node: 0,
        };
        assert_eq!(perturb_dual(&z, &eta).unwrap(), vec![1.5, 1.5]);
        assert_eq!(perturb_dual(&z, &NoiseDraw::zeros(2, 0, 0)).unwrap(), z.to_vec());

        let mut rng = StreamKey::new(3, 1).global(Purpose::PrivacyNoise);
        let z = [0.3, -7.25, 1e3];
        let eta = laplace_vector(1.5, 3, 0, 0, &mut rng);
        let h = perturb_dual(&z, &eta).unwrap();
        let back: Vec<f64> = h.iter().zip(&eta.values).map(|(a, b)| a - b).collect();
        for (orig, rec) in z.iter().zip(&back) {
            assert!((orig - rec).abs() <= 1e-12 * orig.abs().max(1.0));
        }
        assert!(matches!(
            perturb_dual(&z, &NoiseDraw::zeros(2, 0, 0)),
            Err(PrivacyError::DimensionMismatch { .. })
        ));
    }
}
