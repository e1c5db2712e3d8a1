use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

/// Variance schedule indexed by timestep `t` in `1..=T`; `t = 0` is the clean signal.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
    /// Row of the model's timestep table used at each step.
    model_rows: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub train_steps: usize,
    pub sample_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            train_steps: 200,
            sample_steps: 50,
            beta_start: 1e-4,
            beta_end: 0.1,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.train_steps == 0 || self.sample_steps == 0 || self.sample_steps > self.train_steps {
            return Err(Error::Config(
                "need 1 <= sample_steps <= train_steps".into(),
            ));
        }
        if !self.train_steps.is_multiple_of(self.sample_steps) {
            return Err(Error::Config("sample_steps must divide train_steps".into()));
        }
        if !(0.0 < self.beta_start && self.beta_start <= self.beta_end && self.beta_end < 1.0) {
            return Err(Error::Config(
                "betas must satisfy 0 < start <= end < 1".into(),
            ));
        }
        Ok(())
    }

    pub fn training(&self) -> Result<NoiseSchedule> {
        self.validate()?;
        NoiseSchedule::linear(self.train_steps, self.beta_start, self.beta_end)
    }

    pub fn sampling(&self) -> Result<NoiseSchedule> {
        self.training()?.strided(self.sample_steps)
    }
}

impl NoiseSchedule {
    /// Linearly spaced variances.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::param("schedule needs at least one step"));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() || betas.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(Error::param("variances must lie in (0, 1)"));
        }
        let mut acc = 1.0;
        let alpha_bars = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        let model_rows = (0..betas.len()).collect();
        Ok(Self {
            betas,
            alpha_bars,
            model_rows,
        })
    }

    /// Keeps every `len / steps`-th level, ending at the last one. Variances
    /// are re-derived so the cumulative products are preserved exactly.
    pub fn strided(&self, steps: usize) -> Result<Self> {
        let n = self.len();
        if steps == 0 || steps > n || !n.is_multiple_of(steps) {
            return Err(Error::param(format!(
                "cannot stride {n} steps down to {steps}"
            )));
        }
        let stride = n / steps;
        let rows: Vec<usize> = (1..=steps).map(|i| i * stride - 1).collect();
        let alpha_bars: Vec<f64> = rows.iter().map(|&r| self.alpha_bars[r]).collect();
        let betas = alpha_bars
            .iter()
            .enumerate()
            .map(|(i, &a)| 1.0 - a / if i == 0 { 1.0 } else { alpha_bars[i - 1] })
            .collect();
        let model_rows = rows.iter().map(|&r| self.model_rows[r]).collect();
        Ok(Self {
            betas,
            alpha_bars,
            model_rows,
        })
    }

    /// Number of noisy levels `T`.
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    fn check(&self, t: usize) -> Result<()> {
        if t > self.len() {
            return Err(Error::param(format!(
                "timestep {t} outside 0..={}",
                self.len()
            )));
        }
        Ok(())
    }

    /// Variance added at step `t >= 1`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// Cumulative signal level; `1` at `t = 0`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn model_row(&self, t: usize) -> usize {
        self.model_rows[t - 1]
    }
}

/// The latent being denoised and its timestep.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentState<F> {
    pub z: Tensor<F>,
    pub t: usize,
}

/// `sqrt(alpha_bar_t) * z0 + sqrt(1 - alpha_bar_t) * eps`.
pub fn add_noise<F: Scalar>(
    schedule: &NoiseSchedule,
    z0: &Tensor<F>,
    t: usize,
    eps: &Tensor<F>,
) -> Result<Tensor<F>> {
    schedule.check(t)?;
    z0.ensure_same_shape(eps, "noise")?;
    let ab = schedule.alpha_bar(t);
    if ab == 1.0 {
        return Ok(z0.clone());
    }
    let (s, n) = (F::lit(ab.sqrt()), F::lit((1.0 - ab).sqrt()));
    z0.zip_map(eps, |a, e| s * a + n * e)
}

/// Standard normal tensor.
pub fn gaussian<F: Scalar>(shape: Vec<usize>, rng: &mut impl Rng) -> Tensor<F> {
    Tensor::from_fn(shape, |_| F::lit(rng.sample::<f64, _>(StandardNormal)))
}

/// How one denoising step is taken.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StepConfig {
    /// Fresh noise at each step (DDPM posterior variance) instead of deterministic DDIM.
    pub ancestral: bool,
    /// Clamp the clean-signal estimate to `[-1, 1]`.
    pub clip: bool,
}

impl Default for StepConfig {
    fn default() -> Self {
        Self {
            ancestral: false,
            clip: true,
        }
    }
}

/// Clean-signal estimate `(z_t - sqrt(1 - alpha_bar_t) eps) / sqrt(alpha_bar_t)`.
pub fn predict_clean<F: Scalar>(
    schedule: &NoiseSchedule,
    state: &LatentState<F>,
    eps: &Tensor<F>,
) -> Result<Tensor<F>> {
    schedule.check(state.t)?;
    let ab = schedule.alpha_bar(state.t);
    let (s, n) = (F::lit(ab.sqrt()), F::lit((1.0 - ab).sqrt()));
    state.z.zip_map(eps, |z, e| (z - n * e) / s)
}

/// Moves from `t` to `t - 1`.
///
/// DDIM with `eta = 0` by default:
/// `z_{t-1} = sqrt(ab_{t-1}) x0 + sqrt(1 - ab_{t-1}) eps`, where `x0` is the
/// clean estimate. Clipping `x0` to `[-1, 1]` re-derives `eps` from it. The
/// ancestral variant uses the DDPM posterior variance
/// `sigma^2 = (1 - ab_{t-1}) / (1 - ab_t) * (1 - ab_t / ab_{t-1})` and adds
/// `sigma * xi` with `xi` drawn from `rng`.
pub fn denoise_step<F: Scalar>(
    schedule: &NoiseSchedule,
    state: &LatentState<F>,
    eps: &Tensor<F>,
    config: &StepConfig,
    rng: &mut impl Rng,
) -> Result<LatentState<F>> {
    if state.t == 0 {
        return Err(Error::Usage("cannot denoise past t = 0".into()));
    }
    state.z.ensure_same_shape(eps, "noise prediction")?;
    let (ab, prev) = (schedule.alpha_bar(state.t), schedule.alpha_bar(state.t - 1));
    let mut x0 = predict_clean(schedule, state, eps)?;
    let mut eps = std::borrow::Cow::Borrowed(eps);
    if config.clip {
        x0 = x0.map(|v| v.max(-F::one()).min(F::one()));
        let (s, n) = (F::lit(ab.sqrt()), F::lit((1.0 - ab).sqrt()));
        eps = std::borrow::Cow::Owned(state.z.zip_map(&x0, |z, x| (z - s * x) / n)?);
    }
    let sigma2 = if config.ancestral {
        (1.0 - prev) / (1.0 - ab) * (1.0 - ab / prev)
    } else {
        0.0
    };
    let (a, b) = (
        F::lit(prev.sqrt()),
        F::lit((1.0 - prev - sigma2).max(0.0).sqrt()),
    );
    let mut z = x0.zip_map(&eps, |x, e| a * x + b * e)?;
    if sigma2 > 0.0 {
        let xi = gaussian::<F>(z.shape().to_vec(), rng);
        z.axpy(F::lit(sigma2.sqrt()), &xi)?;
    }
    z.ensure_finite("denoised latent")?;
    Ok(LatentState { z, t: state.t - 1 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sched() -> NoiseSchedule {
        ScheduleConfig::default().sampling().unwrap()
    }

    #[test]
    fn cumulative_products_decrease_and_start_at_one_minus_beta() {
        for s in [ScheduleConfig::default().training().unwrap(), sched()] {
            assert!((s.alpha_bar(1) - (1.0 - s.beta(1))).abs() < 1e-6);
            for t in 1..s.len() {
                assert!(s.alpha_bar(t + 1) < s.alpha_bar(t));
                assert!(s.alpha_bar(t) > 0.0 && s.alpha_bar(t) <= 1.0);
            }
        }
        let train = ScheduleConfig::default().training().unwrap();
        let s = sched();
        assert_eq!(s.len(), 50);
        assert_eq!(s.alpha_bar(50), train.alpha_bar(200));
        assert_eq!(s.alpha_bar(1), train.alpha_bar(4));
        assert_eq!((s.model_row(1), s.model_row(50)), (3, 199));
    }

    #[test]
    fn add_noise_closed_forms() {
        let z0 = Tensor::<f64>::from_fn(vec![2, 2], |i| i as f64 - 1.0);
        let eps = Tensor::from_fn(vec![2, 2], |i| 0.5 * i as f64);
        let s = NoiseSchedule::from_betas(vec![0.75]).unwrap();
        let zt = add_noise(&s, &z0, 1, &eps).unwrap();
        for i in 0..4 {
            let want = 0.5 * z0.data()[i] + 0.75f64.sqrt() * eps.data()[i];
            assert!((zt.data()[i] - want).abs() < 1e-15);
        }
        assert_eq!(add_noise(&s, &z0, 0, &eps).unwrap(), z0);
        let zero = Tensor::zeros(vec![2, 2]);
        assert_eq!(add_noise(&s, &z0, 1, &zero).unwrap(), z0.scale(0.5));
        assert!(add_noise(&s, &z0, 2, &eps).is_err());
    }

    #[test]
    fn single_step_ddim_is_clean_estimate() {
        let s = NoiseSchedule::from_betas(vec![0.3]).unwrap();
        let st = LatentState {
            z: Tensor::<f64>::from_fn(vec![3], |i| i as f64 * 0.7 - 0.4),
            t: 1,
        };
        let eps = Tensor::from_fn(vec![3], |i| 1.0 - i as f64);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let plain = StepConfig {
            clip: false,
            ..Default::default()
        };
        let out = denoise_step(&s, &st, &eps, &plain, &mut rng).unwrap();
        assert_eq!(out.t, 0);
        for i in 0..3 {
            let want = (st.z.data()[i] - 0.3f64.sqrt() * eps.data()[i]) / 0.7f64.sqrt();
            assert!((out.z.data()[i] - want).abs() < 1e-12);
        }
        let at0 = LatentState {
            z: st.z.clone(),
            t: 0,
        };
        assert!(matches!(
            denoise_step(&s, &at0, &eps, &StepConfig::default(), &mut rng),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn true_noise_round_trips_at_every_step() {
        let s = sched();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z0: Tensor<f64> = gaussian(vec![1, 1, 4, 4], &mut rng);
        let eps: Tensor<f64> = gaussian(vec![1, 1, 4, 4], &mut rng);
        for t in 1..=s.len() {
            let st = LatentState {
                z: add_noise(&s, &z0, t, &eps).unwrap(),
                t,
            };
            let plain = StepConfig {
                clip: false,
                ..Default::default()
            };
            let down = denoise_step(&s, &st, &eps, &plain, &mut rng).unwrap();
            let want = add_noise(&s, &z0, t - 1, &eps).unwrap();
            for (a, b) in down.z.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-5, "t={t}");
            }
        }
    }

    #[test]
    fn clipped_final_step_stays_in_range() {
        let s = NoiseSchedule::from_betas(vec![0.3]).unwrap();
        let st = LatentState {
            z: Tensor::<f64>::new(vec![3], vec![-5.0, 0.1, 5.0]).unwrap(),
            t: 1,
        };
        let eps = Tensor::zeros(vec![3]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = denoise_step(&s, &st, &eps, &StepConfig::default(), &mut rng).unwrap();
        assert_eq!(out.z.data()[0], -1.0);
        assert_eq!(out.z.data()[2], 1.0);
        assert!((out.z.data()[1] - 0.1 / 0.7f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn ancestral_steps_are_seeded() {
        let s = sched();
        let st = LatentState {
            z: Tensor::<f64>::ones(vec![4]),
            t: 20,
        };
        let eps = Tensor::zeros(vec![4]);
        let cfg = StepConfig {
            ancestral: true,
            clip: false,
        };
        let a = denoise_step(&s, &st, &eps, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = denoise_step(&s, &st, &eps, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let c = denoise_step(
            &s,
            &st,
            &eps,
            &StepConfig::default(),
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
