//! Per-iterate training losses.

use std::fmt;
use std::str::FromStr;

use crate::error::{Result, SpenError};
use crate::minimizer::Trajectory;
use crate::tensor::Tensor;

/// Probabilities are floored here before taking logs.
const LOG_FLOOR: f64 = 1e-300;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IterateLoss {
    /// Mean squared error over all entries.
    SquaredError,
    /// Mean over rows of `−Σ_d y*[d] ln y[d]`; for simplex outputs.
    LogLoss,
}

impl IterateLoss {
    /// `(ℓ(y, y*), ∂ℓ/∂y)`.
    pub fn eval(self, y: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
        y.check_same_shape(target, "loss")?;
        match self {
            IterateLoss::SquaredError => {
                let n = y.len() as f64;
                let d = y.sub(target);
                let value = d.dot(&d) / n;
                Ok((value, d.scale(2.0 / n)))
            }
            IterateLoss::LogLoss => {
                let rows = (y.len() / y.last_dim()) as f64;
                let mut value = 0.0;
                let grad = y.zip_map(target, |p, t| {
                    if t == 0.0 {
                        0.0
                    } else {
                        -t / p.max(LOG_FLOOR) / rows
                    }
                });
                for (p, t) in y.data().iter().zip(target.data()) {
                    if *t != 0.0 {
                        value -= t * p.max(LOG_FLOOR).ln();
                    }
                }
                Ok((value / rows, grad))
            }
        }
    }
}

impl fmt::Display for IterateLoss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            IterateLoss::SquaredError => "squared-error",
            IterateLoss::LogLoss => "log-loss",
        })
    }
}

impl FromStr for IterateLoss {
    type Err = SpenError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "squared-error" => Ok(IterateLoss::SquaredError),
            "log-loss" => Ok(IterateLoss::LogLoss),
            other => Err(SpenError::Config(format!("unknown loss `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LossWeights {
    /// `w_t = 1 / (T − t + 1)`.
    AvgWeighted,
    /// Only the last iterate, with unit coefficient.
    FinalOnly,
    /// Explicit `w_1 … w_T`.
    Custom(Vec<f64>),
}

impl fmt::Display for LossWeights {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossWeights::AvgWeighted => f.write_str("avg-weighted"),
            LossWeights::FinalOnly => f.write_str("final-only"),
            LossWeights::Custom(w) => {
                let parts: Vec<String> = w.iter().map(|v| format!("{v:?}")).collect();
                write!(f, "custom:{}", parts.join(","))
            }
        }
    }
}

impl FromStr for LossWeights {
    type Err = SpenError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "avg-weighted" => Ok(LossWeights::AvgWeighted),
            "final-only" => Ok(LossWeights::FinalOnly),
            other => {
                let Some(list) = other.strip_prefix("custom:") else {
                    return Err(SpenError::Config(format!("unknown loss weights `{other}`")));
                };
                let w = list
                    .split(',')
                    .map(|v| {
                        v.trim()
                            .parse::<f64>()
                            .map_err(|_| SpenError::Config(format!("bad loss weight `{v}`")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(LossWeights::Custom(w))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub loss: IterateLoss,
    pub weights: LossWeights,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            loss: IterateLoss::SquaredError,
            weights: LossWeights::AvgWeighted,
        }
    }
}

impl LossConfig {
    /// `w_1 … w_T`.
    pub fn weights(&self, steps: usize) -> Result<Vec<f64>> {
        let w = match &self.weights {
            LossWeights::AvgWeighted => (1..=steps).map(|t| 1.0 / (steps - t + 1) as f64).collect(),
            LossWeights::FinalOnly => {
                let mut w = vec![0.0; steps];
                w[steps - 1] = steps as f64;
                w
            }
            LossWeights::Custom(w) => {
                if w.len() != steps {
                    return Err(SpenError::Config(format!(
                        "{} loss weights given for T = {steps}",
                        w.len()
                    )));
                }
                w.clone()
            }
        };
        if let Some(bad) = w.iter().find(|v| !(**v >= 0.0 && v.is_finite())) {
            return Err(SpenError::Config(format!(
                "loss weight {bad} is not non-negative"
            )));
        }
        Ok(w)
    }

    /// Per-iterate coefficients `w_t / T` applied to `ℓ(y_t)`, `t = 1 … T`.
    pub fn coefficients(&self, steps: usize) -> Result<Vec<f64>> {
        Ok(self
            .weights(steps)?
            .into_iter()
            .map(|w| w / steps as f64)
            .collect())
    }
}

/// `(1/T) Σ_t w_t ℓ(y_t, y*)` over a trajectory.
pub fn unroll_loss(traj: &Trajectory, target: &Tensor, lc: &LossConfig) -> Result<f64> {
    let steps = traj.len() - 1;
    let coef = lc.coefficients(steps)?;
    let mut total = 0.0;
    for (t, c) in coef.iter().enumerate() {
        if *c != 0.0 {
            total += c * lc.loss.eval(&traj.iterates[t + 1], target)?.0;
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::fd_gradient;

    fn traj(iterates: Vec<Tensor>) -> Trajectory {
        Trajectory {
            energies: vec![0.0; iterates.len()],
            steps: vec![0.1; iterates.len() - 1],
            converged_at: iterates.len() - 1,
            iterates,
            logits: None,
            momenta: None,
            guard_clamps: 0,
        }
    }

    #[test]
    fn weights() {
        let lc = LossConfig::default();
        assert_eq!(lc.weights(3).unwrap(), vec![1.0 / 3.0, 0.5, 1.0]);
        assert_eq!(
            lc.weights(5).unwrap(),
            vec![1.0 / 5.0, 1.0 / 4.0, 1.0 / 3.0, 1.0 / 2.0, 1.0]
        );
        let fo = LossConfig {
            weights: LossWeights::FinalOnly,
            ..lc.clone()
        };
        assert_eq!(
            fo.coefficients(7).unwrap(),
            vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]
        );
        let bad = LossConfig {
            weights: LossWeights::Custom(vec![1.0, -1.0]),
            ..lc
        };
        assert!(bad.weights(2).is_err());
        assert!(bad.weights(3).is_err());
    }

    #[test]
    fn loss_values() {
        let target = Tensor::zeros(&[1]);
        // ℓ values 4 and 1.
        let tr = traj(vec![
            Tensor::vector(vec![9.0]),
            Tensor::vector(vec![2.0]),
            Tensor::vector(vec![1.0]),
        ]);
        let v = unroll_loss(&tr, &target, &LossConfig::default()).unwrap();
        assert!((v - 1.5).abs() < 1e-15);
        let at_target = traj(vec![target.clone(), target.clone(), target.clone()]);
        assert_eq!(
            unroll_loss(&at_target, &target, &LossConfig::default()).unwrap(),
            0.0
        );
    }

    #[test]
    fn log_loss_gradient() {
        let y = Tensor::from_slice(&[2, 3], &[0.2, 0.5, 0.3, 0.6, 0.1, 0.3]).unwrap();
        let t = Tensor::from_slice(&[2, 3], &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let (v, g) = IterateLoss::LogLoss.eval(&y, &t).unwrap();
        assert!((v - (-(0.5f64.ln() + 0.6f64.ln()) / 2.0)).abs() < 1e-15);
        let fd = fd_gradient(|y| IterateLoss::LogLoss.eval(y, &t).unwrap().0, &y, 1e-6);
        assert!(crate::tensor::relative_error(&g, &fd) < 1e-7);
        let (_, g) = IterateLoss::SquaredError.eval(&y, &t).unwrap();
        let fd = fd_gradient(
            |y| IterateLoss::SquaredError.eval(y, &t).unwrap().0,
            &y,
            1e-6,
        );
        assert!(crate::tensor::relative_error(&g, &fd) < 1e-8);
    }

    #[test]
    fn parse_round_trip() {
        for w in [
            LossWeights::AvgWeighted,
            LossWeights::FinalOnly,
            LossWeights::Custom(vec![0.0, 0.25, 1.0]),
        ] {
            assert_eq!(w.to_string().parse::<LossWeights>().unwrap(), w);
        }
        assert!("sum".parse::<LossWeights>().is_err());
    }
}
