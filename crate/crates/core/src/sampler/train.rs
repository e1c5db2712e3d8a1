use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::checkpoint::OptimizerSnapshot;
use crate::model::{
    forward_on_tape, prompt_positions, token_for, DenoiserWeights, ForwardRequest, Group, MaskMode,
};
use crate::numerics::{Tape, Tensor};
use crate::scalar::Scalar;
use crate::scenes::{example, scene_seed, SceneDistribution};

use super::schedule::{add_noise, gaussian, NoiseSchedule};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Global gradient-norm ceiling; `0` disables clipping.
    pub grad_clip: f64,
    /// Seeds the scene stream, timesteps and noise.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 16,
            learning_rate: 2e-3,
            warmup_steps: 100,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            grad_clip: 1.0,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || !(self.epsilon > 0.0)
        {
            return Err(Error::Config("Adam coefficients out of range".into()));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(Error::Config("grad_clip must be non-negative".into()));
        }
        Ok(())
    }

    fn lr_at(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            self.learning_rate * (step + 1) as f64 / self.warmup_steps as f64
        } else {
            self.learning_rate
        }
    }
}

impl Group {
    pub fn name(self) -> &'static str {
        match self {
            Group::Base => "base",
            Group::Control => "control",
        }
    }
}

/// Adam moments for the parameters of one group.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<F> {
    pub group: Group,
    pub step: u64,
    indices: Vec<usize>,
    first: Vec<Tensor<F>>,
    second: Vec<Tensor<F>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(weights: &DenoiserWeights<F>, group: Group) -> Self {
        let indices: Vec<usize> = (0..weights.len())
            .filter(|&i| weights.specs()[i].group == group)
            .collect();
        let zeros = |i: &usize| Tensor::zeros(weights.tensors()[*i].shape().to_vec());
        Self {
            group,
            step: 0,
            first: indices.iter().map(zeros).collect(),
            second: indices.iter().map(zeros).collect(),
            indices,
        }
    }

    pub fn snapshot(&self, weights: &DenoiserWeights<F>) -> OptimizerSnapshot<F> {
        let names = self
            .indices
            .iter()
            .map(|&i| weights.specs()[i].name.clone());
        OptimizerSnapshot {
            phase: self.group.name().to_string(),
            step: self.step,
            first: names.clone().zip(self.first.iter().cloned()).collect(),
            second: names.zip(self.second.iter().cloned()).collect(),
        }
    }

    pub fn restore(weights: &DenoiserWeights<F>, snap: &OptimizerSnapshot<F>) -> Result<Self> {
        let group = match snap.phase.as_str() {
            "base" => Group::Base,
            "control" => Group::Control,
            p => return Err(Error::Checkpoint(format!("unknown optimizer phase {p:?}"))),
        };
        let mut adam = Self::new(weights, group);
        adam.step = snap.step;
        for (slot, src) in [
            (&mut adam.first, &snap.first),
            (&mut adam.second, &snap.second),
        ] {
            if src.len() != adam.indices.len() {
                return Err(Error::Checkpoint(
                    "optimizer state does not cover the parameter group".into(),
                ));
            }
            for (k, (name, t)) in src.iter().enumerate() {
                let i = adam.indices[k];
                if &weights.specs()[i].name != name || t.shape() != weights.tensors()[i].shape() {
                    return Err(Error::Checkpoint(format!(
                        "optimizer entry {name} does not match the weights"
                    )));
                }
                slot[k] = t.clone();
            }
        }
        Ok(adam)
    }

    /// Applies one update, leaving the weights untouched if the result is not finite.
    fn apply(
        &mut self,
        weights: &mut DenoiserWeights<F>,
        grads: &[Tensor<F>],
        cfg: &TrainConfig,
    ) -> Result<()> {
        let step = self.step + 1;
        let sq: f64 = grads
            .iter()
            .map(|g| {
                g.data()
                    .iter()
                    .map(|v| v.to_f64().unwrap().powi(2))
                    .sum::<f64>()
            })
            .sum();
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Err(Error::Training {
                step: step as usize,
                reason: "gradient is not finite".into(),
            });
        }
        let clip = if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
            cfg.grad_clip / norm
        } else {
            1.0
        };
        let lr = cfg.lr_at(self.step);
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 - b1.powi(step as i32);
        let c2 = 1.0 - b2.powi(step as i32);
        let mut updated = Vec::with_capacity(self.indices.len());
        let mut first = Vec::with_capacity(self.indices.len());
        let mut second = Vec::with_capacity(self.indices.len());
        for (k, &i) in self.indices.iter().enumerate() {
            let p = &weights.tensors()[i];
            let (mut w, mut m, mut v) = (
                p.data().to_vec(),
                self.first[k].data().to_vec(),
                self.second[k].data().to_vec(),
            );
            for j in 0..w.len() {
                let g = grads[k].data()[j].to_f64().unwrap() * clip;
                let mj = b1 * m[j].to_f64().unwrap() + (1.0 - b1) * g;
                let vj = b2 * v[j].to_f64().unwrap() + (1.0 - b2) * g * g;
                let upd = lr * (mj / c1) / ((vj / c2).sqrt() + cfg.epsilon);
                w[j] = F::lit(w[j].to_f64().unwrap() - upd);
                m[j] = F::lit(mj);
                v[j] = F::lit(vj);
            }
            let shape = p.shape().to_vec();
            let nw = Tensor::new(shape.clone(), w).map_err(|_| Error::Training {
                step: step as usize,
                reason: format!("{} became non-finite", weights.specs()[i].name),
            })?;
            updated.push(nw);
            first.push(Tensor::new(shape.clone(), m)?);
            second.push(Tensor::new(shape, v)?);
        }
        for (k, &i) in self.indices.iter().enumerate() {
            weights.tensors_mut()[i] = std::mem::replace(&mut updated[k], Tensor::zeros(vec![0]));
        }
        self.first = first;
        self.second = second;
        self.step = step;
        Ok(())
    }
}

/// One training batch: clean latents, prompts, conditions, timesteps and noise.
pub struct Batch<F> {
    pub z0: Tensor<F>,
    pub prompts: Vec<Vec<usize>>,
    pub conditions: Tensor<F>,
    /// Timesteps in `1..=T` of the training schedule.
    pub timesteps: Vec<usize>,
    pub noise: Tensor<F>,
}

/// Deterministic batch for a given optimizer step; independent of any earlier step.
pub fn make_batch<F: Scalar>(
    dist: &SceneDistribution,
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
    salt: u64,
    step: u64,
    max_tokens: usize,
) -> Result<Batch<F>> {
    let b = cfg.batch_size;
    let n = dist.canvas;
    let mut rng = ChaCha8Rng::seed_from_u64(scene_seed(cfg.seed ^ salt, step));
    let mut z0 = Vec::with_capacity(b * n * n);
    let mut cond = Vec::with_capacity(b * n * n);
    let mut prompts = Vec::with_capacity(b);
    for k in 0..b as u64 {
        let ex = example(dist, cfg.seed, step * b as u64 + k)?;
        z0.extend_from_slice(ex.scene.image.to_latent::<F>().data());
        cond.extend(ex.condition.edges.to_values::<F>());
        let words: Vec<usize> = ex.scene.caption.iter().map(|&c| token_for(c)).collect();
        prompts.push(prompt_positions(&words, max_tokens)?);
    }
    let timesteps = (0..b)
        .map(|_| rng.random_range(1..=schedule.len()))
        .collect();
    let noise = gaussian(vec![b, 1, n, n], &mut rng);
    Ok(Batch {
        z0: Tensor::new(vec![b, 1, n, n], z0)?,
        prompts,
        conditions: Tensor::new(vec![b, 1, n, n], cond)?,
        timesteps,
        noise,
    })
}

/// Gradients are computed on this many fixed slices of every batch, in
/// parallel, so results do not depend on the number of cores.
pub const GRAD_CHUNKS: usize = 4;

fn slice_rows<F: Scalar>(t: &Tensor<F>, range: std::ops::Range<usize>) -> Result<Tensor<F>> {
    let per: usize = t.shape()[1..].iter().product();
    let mut shape = t.shape().to_vec();
    shape[0] = range.len();
    Tensor::new(shape, t.data()[range.start * per..range.end * per].to_vec())
}

fn chunk_loss<F: Scalar>(
    weights: &DenoiserWeights<F>,
    schedule: &NoiseSchedule,
    batch: &Batch<F>,
    range: std::ops::Range<usize>,
    control: bool,
    group: Option<Group>,
) -> Result<(f64, Vec<Tensor<F>>)> {
    let b = range.len();
    let n = weights.arch.image_size;
    let per = n * n;
    let z0 = slice_rows(&batch.z0, range.clone())?;
    let noise = slice_rows(&batch.noise, range.clone())?;
    let conditions = slice_rows(&batch.conditions, range.clone())?;
    let timesteps = &batch.timesteps[range.clone()];
    let mut zt = Vec::with_capacity(z0.len());
    for i in 0..b {
        let x = Tensor::new(vec![per], z0.data()[i * per..(i + 1) * per].to_vec())?;
        let e = Tensor::new(vec![per], noise.data()[i * per..(i + 1) * per].to_vec())?;
        zt.extend_from_slice(add_noise(schedule, &x, timesteps[i], &e)?.data());
    }
    let rows: Vec<usize> = timesteps.iter().map(|&t| schedule.model_row(t)).collect();
    let mut tape = Tape::new();
    let z = tape.leaf(Tensor::new(vec![b, 1, n, n], zt)?, false);
    let req = ForwardRequest {
        time_index: &rows,
        prompts: &batch.prompts[range],
        control,
        condition: control.then_some(&conditions),
        mask: MaskMode::None,
        ftr: None,
    };
    let nodes = forward_on_tape(weights, &mut tape, z, &req, group)?;
    let loss = tape.mse(nodes.eps, noise)?;
    let value = tape.value(loss).data()[0].to_f64().unwrap();
    let Some(group) = group else {
        return Ok((value, Vec::new()));
    };
    if !value.is_finite() {
        return Ok((value, Vec::new()));
    }
    let mut grads = tape.backward(loss)?;
    let out = (0..weights.len())
        .filter(|&i| weights.specs()[i].group == group)
        .map(|i| {
            nodes.params[i]
                .and_then(|v| grads.take(v))
                .unwrap_or_else(|| Tensor::zeros(weights.tensors()[i].shape().to_vec()))
        })
        .collect();
    Ok((value, out))
}

/// Mean squared noise-prediction error on a batch, with gradients for `group` when given.
pub fn batch_loss<F: Scalar>(
    weights: &DenoiserWeights<F>,
    schedule: &NoiseSchedule,
    batch: &Batch<F>,
    control: bool,
    group: Option<Group>,
) -> Result<(f64, Vec<Tensor<F>>)> {
    let b = batch.timesteps.len();
    if b == 0 {
        return Err(Error::Config("empty batch".into()));
    }
    let chunks = GRAD_CHUNKS.min(b);
    let ranges: Vec<_> = (0..chunks)
        .map(|c| c * b / chunks..(c + 1) * b / chunks)
        .collect();
    let parts: Vec<Result<(f64, Vec<Tensor<F>>)>> = ranges
        .par_iter()
        .map(|r| chunk_loss(weights, schedule, batch, r.clone(), control, group))
        .collect();
    let mut value = 0.0;
    let mut total: Vec<Tensor<F>> = Vec::new();
    for (r, part) in ranges.iter().zip(parts) {
        let (v, grads) = part?;
        let share = r.len() as f64 / b as f64;
        value += v * share;
        if group.is_none() || !v.is_finite() {
            continue;
        }
        let w = F::lit(share);
        if total.is_empty() {
            total = grads.into_iter().map(|g| g.scale(w)).collect();
        } else {
            for (acc, g) in total.iter_mut().zip(&grads) {
                acc.axpy(w, g)?;
            }
        }
    }
    if !value.is_finite() {
        total.clear();
    }
    Ok((value, total))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    /// `(optimizer step, loss)` pairs.
    pub points: Vec<(u64, f64)>,
}

impl LossCurve {
    /// Mean of up to `window` losses starting at `from` (negative counts from the end).
    pub fn window_mean(&self, from: isize, window: usize) -> Option<f64> {
        let n = self.points.len() as isize;
        let start = if from < 0 {
            (n + from).max(0)
        } else {
            from.min(n)
        } as usize;
        let slice = &self.points[start..(start + window).min(self.points.len())];
        (!slice.is_empty()).then(|| slice.iter().map(|p| p.1).sum::<f64>() / slice.len() as f64)
    }

    /// Median of up to `window` losses starting at `from`; insensitive to
    /// isolated spikes from single hard batches.
    pub fn window_median(&self, from: isize, window: usize) -> Option<f64> {
        let n = self.points.len() as isize;
        let start = if from < 0 {
            (n + from).max(0)
        } else {
            from.min(n)
        } as usize;
        let mut v: Vec<f64> = self.points[start..(start + window).min(self.points.len())]
            .iter()
            .map(|p| p.1)
            .collect();
        if v.is_empty() {
            return None;
        }
        v.sort_by(f64::total_cmp);
        let m = v.len() / 2;
        Some(if v.len() % 2 == 1 {
            v[m]
        } else {
            0.5 * (v[m - 1] + v[m])
        })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss\n");
        for (k, l) in &self.points {
            s.push_str(&format!("{k},{l}\n"));
        }
        s
    }
}

const BASE_SALT: u64 = 0x0B45E;
const CONTROL_SALT: u64 = 0xC0274;

/// Trains one parameter group for `cfg.steps` optimizer steps, continuing
/// from `adam` (a fresh optimizer starts at step 0).
///
/// On divergence the weights keep their last finite values and the error
/// names the failing step.
pub fn train_phase<F: Scalar>(
    weights: &mut DenoiserWeights<F>,
    adam: &mut Adam<F>,
    dist: &SceneDistribution,
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
    mut progress: impl FnMut(u64, f64),
) -> Result<LossCurve> {
    cfg.validate()?;
    dist.validate()?;
    if schedule.len() != weights.arch.train_timesteps {
        return Err(Error::Config(format!(
            "schedule has {} steps but the model table has {}",
            schedule.len(),
            weights.arch.train_timesteps
        )));
    }
    let (control, salt) = match adam.group {
        Group::Base => (false, BASE_SALT),
        Group::Control => {
            if weights.base_steps == 0 {
                return Err(Error::Usage(
                    "train the base denoiser before the control branch".into(),
                ));
            }
            (true, CONTROL_SALT)
        }
    };
    let mut curve = LossCurve::default();
    let end = adam.step + cfg.steps;
    while adam.step < end {
        let step = adam.step;
        let batch = make_batch(dist, schedule, cfg, salt, step, weights.arch.max_tokens)?;
        let (loss, grads) = batch_loss(weights, schedule, &batch, control, Some(adam.group))?;
        if !loss.is_finite() {
            return Err(Error::Training {
                step: step as usize + 1,
                reason: format!("loss is {loss}"),
            });
        }
        adam.apply(weights, &grads, cfg)?;
        match adam.group {
            Group::Base => weights.base_steps = adam.step,
            Group::Control => weights.control_steps = adam.step,
        }
        curve.points.push((step, loss));
        progress(step, loss);
    }
    Ok(curve)
}

/// Fits the noise predictor without the control branch.
pub fn train_denoiser<F: Scalar>(
    weights: &mut DenoiserWeights<F>,
    dist: &SceneDistribution,
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<(LossCurve, Adam<F>)> {
    let mut adam = Adam::new(weights, Group::Base);
    let curve = train_phase(weights, &mut adam, dist, schedule, cfg, |_, _| {})?;
    Ok((curve, adam))
}

/// Fits the control branch against the frozen base model, starting the
/// control encoder from a copy of the base encoder.
pub fn train_control_branch<F: Scalar>(
    weights: &mut DenoiserWeights<F>,
    dist: &SceneDistribution,
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<(LossCurve, Adam<F>)> {
    if weights.control_steps == 0 {
        weights.copy_encoder_into_control();
    }
    let mut adam = Adam::new(weights, Group::Control);
    let curve = train_phase(weights, &mut adam, dist, schedule, cfg, |_, _| {})?;
    Ok((curve, adam))
}
