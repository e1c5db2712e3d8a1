use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::GaussianKernel;
use crate::scalar::Scalar;

/// Parameters of the guidance operators.
///
/// Timesteps count down from `T` to 1. A step belongs to the early,
/// vote-collecting phase when `t - 1 > beta * T`, and to the guidance window
/// when `t - 1 > window * T`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceConfig {
    pub beta: f64,
    pub gamma: f64,
    /// Base step size; `alpha_t = alpha0 * sqrt(1 - alpha_bar_t)`.
    pub alpha0: f64,
    /// Explicit per-step sizes indexed by `t - 1`; overrides `alpha0` when set.
    pub alphas: Option<Vec<f64>>,
    /// Object token positions in the prompt; all word tokens when unset.
    pub tokens: Option<Vec<usize>>,
    pub window: f64,
    pub kernel_size: usize,
    pub kernel_sigma: f64,
    /// Compute the loss on the attention maps before suppression.
    pub raw_maps: bool,
    /// Suppress relative to every prompt token instead of the object tokens only.
    pub ftr_all_tokens: bool,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            beta: 0.85,
            gamma: 0.1,
            alpha0: 0.3,
            alphas: None,
            tokens: None,
            window: 0.5,
            kernel_size: 3,
            kernel_sigma: 1.0,
            raw_maps: false,
            ftr_all_tokens: false,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(Error::Config(format!("beta {} outside (0, 1)", self.beta)));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!(
                "gamma {} outside [0, 1]",
                self.gamma
            )));
        }
        if !(self.alpha0 >= 0.0 && self.alpha0.is_finite()) {
            return Err(Error::Config(
                "alpha0 must be finite and non-negative".into(),
            ));
        }
        if let Some(a) = &self.alphas {
            if a.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
                return Err(Error::Config(
                    "step sizes must be finite and non-negative".into(),
                ));
            }
        }
        if let Some(s) = &self.tokens {
            if s.is_empty() {
                return Err(Error::Config("object token set is empty".into()));
            }
        }
        if !(0.0..1.0).contains(&self.window) {
            return Err(Error::Config(format!(
                "window {} outside [0, 1)",
                self.window
            )));
        }
        self.kernel::<f64>()?;
        Ok(())
    }

    pub fn kernel<F: Scalar>(&self) -> Result<GaussianKernel<F>> {
        GaussianKernel::new(self.kernel_size, F::lit(self.kernel_sigma))
    }

    /// Step size at timestep `t` given the cumulative signal level there.
    pub fn alpha_at(&self, t: usize, alpha_bar: f64) -> Result<f64> {
        match &self.alphas {
            Some(a) => a.get(t.wrapping_sub(1)).copied().ok_or_else(|| {
                Error::Config(format!("no step size for t={t} ({} given)", a.len()))
            }),
            None => Ok(self.alpha0 * (1.0 - alpha_bar).max(0.0).sqrt()),
        }
    }

    pub fn collects_votes(&self, t: usize, total: usize) -> bool {
        after_threshold(t, total, self.beta)
    }

    pub fn in_window(&self, t: usize, total: usize) -> bool {
        after_threshold(t, total, self.window)
    }

    /// Object token positions for a prompt of `len` positions whose first is the background.
    pub fn object_tokens(&self, len: usize) -> Result<Vec<usize>> {
        match &self.tokens {
            Some(s) => {
                if let Some(&bad) = s.iter().find(|&&i| i >= len) {
                    return Err(Error::Config(format!(
                        "object token {bad} outside prompt of {len} positions"
                    )));
                }
                let mut s = s.clone();
                s.sort_unstable();
                s.dedup();
                Ok(s)
            }
            None if len > 1 => Ok((1..len).collect()),
            None => Err(Error::Config("prompt has no object tokens".into())),
        }
    }
}

/// `t - 1 > fraction * total`.
fn after_threshold(t: usize, total: usize, fraction: f64) -> bool {
    (t as f64 - 1.0) > fraction * total as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seven_early_steps_at_defaults() {
        let c = GuidanceConfig::default();
        let early: Vec<usize> = (1..=50)
            .rev()
            .filter(|&t| c.collects_votes(t, 50))
            .collect();
        assert_eq!(early, (44..=50).rev().collect::<Vec<_>>());
        assert_eq!((1..=50).filter(|&t| c.in_window(t, 50)).count(), 24);
    }

    #[test]
    fn default_step_size_follows_noise_level() {
        let c = GuidanceConfig::default();
        assert_eq!(c.alpha_at(10, 1.0).unwrap(), 0.0);
        assert!((c.alpha_at(10, 0.75).unwrap() - 0.15).abs() < 1e-12);
        let explicit = GuidanceConfig {
            alphas: Some(vec![0.5, 0.25]),
            ..c
        };
        assert_eq!(explicit.alpha_at(2, 0.1).unwrap(), 0.25);
        assert!(explicit.alpha_at(3, 0.1).is_err());
    }

    #[test]
    fn invalid_ranges_rejected() {
        for bad in [
            GuidanceConfig {
                beta: 1.0,
                ..Default::default()
            },
            GuidanceConfig {
                gamma: 1.5,
                ..Default::default()
            },
            GuidanceConfig {
                tokens: Some(vec![]),
                ..Default::default()
            },
            GuidanceConfig {
                kernel_size: 2,
                ..Default::default()
            },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
        assert!(GuidanceConfig::default().validate().is_ok());
    }
}
