use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

use super::arch::ArchConfig;

/// Which training phase owns a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Group {
    Base,
    Control,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    Zero,
    /// Normal with standard deviation `gain / sqrt(fan_in)`.
    Fan(f64),
    Normal(f64),
    Sinusoidal,
}

#[derive(Clone, Debug)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub group: Group,
    init: Init,
}

fn spec(name: &str, shape: &[usize], group: Group, init: Init) -> ParamSpec {
    ParamSpec {
        name: name.to_string(),
        shape: shape.to_vec(),
        group,
        init,
    }
}

/// Parameter inventory in storage order.
pub fn layout(a: &ArchConfig) -> Vec<ParamSpec> {
    use Group::*;
    use Init::*;
    let [c0, c1, c2] = a.channels;
    let (ci, e, d) = (a.image_channels, a.embed_dim, a.attn_dim);
    let he = Fan(2f64.sqrt());
    let mut out = Vec::new();
    let conv = |out: &mut Vec<ParamSpec>,
                name: &str,
                co: usize,
                cin: usize,
                k: usize,
                g: Group,
                init: Init| {
        out.push(spec(&format!("{name}.w"), &[co, cin, k, k], g, init));
        out.push(spec(&format!("{name}.b"), &[co], g, Zero));
    };
    out.push(spec(
        "token_embedding",
        &[a.vocab_size(), e],
        Base,
        Normal(1.0),
    ));
    out.push(spec(
        "time_table",
        &[a.train_timesteps, e],
        Base,
        Sinusoidal,
    ));
    for (i, c) in [c0, c1, c2].into_iter().enumerate() {
        out.push(spec(&format!("time_proj{i}"), &[e, c], Base, Fan(1.0)));
    }
    conv(&mut out, "enc0a", c0, ci, 3, Base, he);
    conv(&mut out, "enc0b", c0, c0, 3, Base, he);
    conv(&mut out, "enc1a", c1, c0, 3, Base, he);
    conv(&mut out, "enc1b", c1, c1, 3, Base, he);
    conv(&mut out, "enc2a", c2, c1, 3, Base, he);
    conv(&mut out, "enc2b", c2, c2, 3, Base, he);
    out.push(spec("attn.q", &[c2, d], Base, Fan(1.0)));
    out.push(spec("attn.k", &[e, d], Base, Fan(1.0)));
    out.push(spec("attn.v", &[e, c2], Base, Fan(1.0)));
    out.push(spec("attn.o", &[c2, c2], Base, Fan(1.0)));
    conv(&mut out, "mid", c2, c2, 3, Base, he);
    conv(&mut out, "dec1a", c1, c2 + c1, 3, Base, he);
    conv(&mut out, "dec1b", c1, c1, 3, Base, he);
    conv(&mut out, "dec0a", c0, c1 + c0, 3, Base, he);
    conv(&mut out, "dec0b", c0, c0, 3, Base, he);
    conv(&mut out, "out", ci, c0, 3, Base, Fan(0.1));
    for (i, c) in [c0, c1, c2].into_iter().enumerate() {
        out.push(spec(
            &format!("ctl.time_proj{i}"),
            &[e, c],
            Control,
            Fan(1.0),
        ));
    }
    conv(&mut out, "ctl.enc0a", c0, ci + 1, 3, Control, he);
    conv(&mut out, "ctl.enc0b", c0, c0, 3, Control, he);
    conv(&mut out, "ctl.enc1a", c1, c0, 3, Control, he);
    conv(&mut out, "ctl.enc1b", c1, c1, 3, Control, he);
    conv(&mut out, "ctl.enc2a", c2, c1, 3, Control, he);
    conv(&mut out, "ctl.enc2b", c2, c2, 3, Control, he);
    for (i, c) in [c0, c1, c2].into_iter().enumerate() {
        conv(&mut out, &format!("ctl.zero{i}"), c, c, 1, Control, Zero);
    }
    out
}

/// Names of the control-branch output projections, zero at initialization.
pub const ZERO_PROJECTIONS: [&str; 6] = [
    "ctl.zero0.w",
    "ctl.zero0.b",
    "ctl.zero1.w",
    "ctl.zero1.b",
    "ctl.zero2.w",
    "ctl.zero2.b",
];

fn sinusoidal(rows: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; rows * dim];
    for t in 0..rows {
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half.max(1) as f64).exp();
            out[t * dim + i] = (t as f64 * freq).sin();
            out[t * dim + half + i] = (t as f64 * freq).cos();
        }
    }
    out
}

/// All trainable tensors of the denoiser and its control branch.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserWeights<F> {
    pub arch: ArchConfig,
    specs: Vec<ParamSpec>,
    tensors: Vec<Tensor<F>>,
    index: HashMap<String, usize>,
    /// Optimizer steps taken by each phase.
    pub base_steps: u64,
    pub control_steps: u64,
}

impl PartialEq for ParamSpec {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name && self.shape == other.shape && self.group == other.group
    }
}

impl<F: Scalar> DenoiserWeights<F> {
    /// Deterministic initialization; control projections start at exactly zero.
    pub fn init(arch: &ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let specs = layout(arch);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
        let tensors = specs
            .iter()
            .map(|s| {
                let n: usize = s.shape.iter().product();
                let fan_in: usize = if s.shape.len() == 4 {
                    s.shape[1..].iter().product()
                } else {
                    s.shape[0]
                };
                let data: Vec<f64> = match s.init {
                    Init::Zero => vec![0.0; n],
                    Init::Sinusoidal => sinusoidal(s.shape[0], s.shape[1]),
                    Init::Normal(sd) => (0..n).map(|_| sd * std_normal.sample(&mut rng)).collect(),
                    Init::Fan(gain) => {
                        let sd = gain / (fan_in as f64).sqrt();
                        (0..n).map(|_| sd * std_normal.sample(&mut rng)).collect()
                    }
                };
                Tensor::from_fn(s.shape.clone(), |i| F::lit(data[i]))
            })
            .collect();
        Ok(Self::assemble(arch.clone(), specs, tensors, 0, 0))
    }

    fn assemble(
        arch: ArchConfig,
        specs: Vec<ParamSpec>,
        tensors: Vec<Tensor<F>>,
        base_steps: u64,
        control_steps: u64,
    ) -> Self {
        let index = specs
            .iter()
            .enumerate()
            .map(|(i, s)| (s.name.clone(), i))
            .collect();
        Self {
            arch,
            specs,
            tensors,
            index,
            base_steps,
            control_steps,
        }
    }

    /// Rebuilds weights from tensors listed by name, e.g. from a checkpoint.
    pub fn from_named(
        arch: &ArchConfig,
        named: Vec<(String, Tensor<F>)>,
        base_steps: u64,
        control_steps: u64,
    ) -> Result<Self> {
        arch.validate()?;
        let specs = layout(arch);
        let mut by_name: HashMap<String, Tensor<F>> = named.into_iter().collect();
        let mut tensors = Vec::with_capacity(specs.len());
        for s in &specs {
            let t = by_name
                .remove(&s.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {}", s.name)))?;
            if t.shape() != s.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} has shape {:?}, expected {:?}",
                    s.name,
                    t.shape(),
                    s.shape
                )));
            }
            t.ensure_finite(&s.name)?;
            tensors.push(t);
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected tensor {extra}")));
        }
        Ok(Self::assemble(
            arch.clone(),
            specs,
            tensors,
            base_steps,
            control_steps,
        ))
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn tensors(&self) -> &[Tensor<F>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> &Tensor<F> {
        &self.tensors[self.index[name]]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor<F> {
        let i = self.index[name];
        &mut self.tensors[i]
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// True while every control output projection is exactly zero.
    pub fn control_is_identity(&self) -> bool {
        ZERO_PROJECTIONS
            .iter()
            .all(|n| self.get(n).data().iter().all(|v| *v == F::zero()))
    }

    pub fn ensure_finite(&self) -> Result<()> {
        for (s, t) in self.specs.iter().zip(&self.tensors) {
            t.ensure_finite(&s.name)?;
        }
        Ok(())
    }

    /// Starts the control encoder from the base encoder, the usual warm start.
    /// The extra condition input channel keeps its own initialization.
    pub fn copy_encoder_into_control(&mut self) {
        for name in ["enc0b", "enc1a", "enc1b", "enc2a", "enc2b"] {
            for suffix in [".w", ".b"] {
                let src = self.get(&format!("{name}{suffix}")).clone();
                *self.get_mut(&format!("ctl.{name}{suffix}")) = src;
            }
        }
        for i in 0..3 {
            let src = self.get(&format!("time_proj{i}")).clone();
            *self.get_mut(&format!("ctl.time_proj{i}")) = src;
        }
        let src = self.get("enc0a.w").clone();
        let ci = self.arch.image_channels;
        let dst = self.get_mut("ctl.enc0a.w");
        let (co, cin) = (dst.shape()[0], dst.shape()[1]);
        for o in 0..co {
            for c in 0..ci {
                let from = &src.data()[(o * ci + c) * 9..][..9];
                dst.data_mut()[(o * cin + c) * 9..][..9].copy_from_slice(from);
            }
        }
        let b = self.get("enc0a.b").clone();
        *self.get_mut("ctl.enc0a.b") = b;
    }

    pub fn cast<G: Scalar>(&self) -> DenoiserWeights<G> {
        DenoiserWeights::assemble(
            self.arch.clone(),
            self.specs.clone(),
            self.tensors.iter().map(Tensor::cast).collect(),
            self.base_steps,
            self.control_steps,
        )
    }
}
