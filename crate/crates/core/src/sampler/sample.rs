use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidance::{
    match_control_concept, rdloss, rdloss_gradient, update_latent, ConceptMatchState, ControlMask,
    GuidanceConfig, RdLoss,
};
use crate::model::{
    attention_on_tape, attention_seed, embed_prompt, extract_attention, forward_on_tape,
    DenoiserWeights, ForwardRequest, FtrDirective, MaskMode, TokenPrompt,
};
use crate::numerics::{GaussianKernel, Tape, Tensor};
use crate::scalar::Scalar;
use crate::scenes::ConditionImage;

use super::combine::noise_mask_combine;
use super::schedule::{denoise_step, gaussian, LatentState, NoiseSchedule, StepConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Control branch everywhere, no guidance.
    Naive,
    /// Two predictions per step blended by the mask.
    NoiseMask,
    /// Control residuals gated by the mask at every step.
    FeatureMask,
    /// Every component selected by the toggles.
    FullMethod,
}

impl Mode {
    pub const ALL: [Mode; 4] = [
        Mode::Naive,
        Mode::NoiseMask,
        Mode::FeatureMask,
        Mode::FullMethod,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Naive => "naive",
            Mode::NoiseMask => "noise_mask",
            Mode::FeatureMask => "feature_mask",
            Mode::FullMethod => "full_method",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }
}

/// Components active in [`Mode::FullMethod`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Toggles {
    pub rdloss: bool,
    pub ftr: bool,
    pub fmc: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self::ALL
    }
}

impl Toggles {
    pub const ALL: Toggles = Toggles {
        rdloss: true,
        ftr: true,
        fmc: true,
    };
    pub const NONE: Toggles = Toggles {
        rdloss: false,
        ftr: false,
        fmc: false,
    };

    /// The six rows of the component ablation, baseline first.
    pub const ABLATION: [Toggles; 6] = [
        Toggles::NONE,
        Toggles {
            rdloss: true,
            ftr: false,
            fmc: false,
        },
        Toggles {
            rdloss: false,
            ftr: false,
            fmc: true,
        },
        Toggles {
            rdloss: true,
            ftr: false,
            fmc: true,
        },
        Toggles {
            rdloss: true,
            ftr: true,
            fmc: false,
        },
        Toggles::ALL,
    ];

    pub fn label(self) -> String {
        let mut parts = Vec::new();
        if self.rdloss {
            parts.push("rdloss");
        }
        if self.ftr {
            parts.push("ftr");
        }
        if self.fmc {
            parts.push("fmc");
        }
        if parts.is_empty() {
            "none".into()
        } else {
            parts.join("+")
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let mut t = Toggles::NONE;
        for part in s.split('+').map(str::trim) {
            match part {
                "none" | "" => {}
                "rdloss" => t.rdloss = true,
                "ftr" => t.ftr = true,
                "fmc" => t.fmc = true,
                other => return Err(Error::Validation(format!("unknown component {other:?}"))),
            }
        }
        if t.ftr && !t.rdloss {
            return Err(Error::Validation(
                "suppression is only defined together with rdloss".into(),
            ));
        }
        Ok(t)
    }

    /// Components a mode actually runs.
    pub fn effective(self, mode: Mode) -> Toggles {
        match mode {
            Mode::Naive | Mode::NoiseMask => Toggles::NONE,
            Mode::FeatureMask => Toggles {
                fmc: true,
                ..Toggles::NONE
            },
            Mode::FullMethod => self,
        }
    }
}

/// Everything recorded about one denoising step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub t: usize,
    pub in_window: bool,
    /// Selected control concept (prompt position).
    pub control: Option<usize>,
    /// Whether `control` came from the frozen majority vote.
    pub frozen: bool,
    /// Per object token loss, in object-token order.
    pub rdloss: Option<Vec<f64>>,
    pub l: Option<f64>,
    pub achieving_token: Option<usize>,
    /// Gap protecting `l` from switching to another maximum.
    pub margin: Option<f64>,
    pub alpha: f64,
    pub grad_norm: Option<f64>,
    pub update_norm: Option<f64>,
    /// `l` re-evaluated on the updated latent with the same control concept.
    pub l_after: Option<f64>,
}

pub const DIAGNOSTICS_CSV_HEADER: &str =
    "t,in_window,control,frozen,l,achieving_token,margin,alpha,grad_norm,update_norm,l_after,rdloss";

fn opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map(T::to_string).unwrap_or_default()
}

pub fn diagnostics_csv(steps: &[StepDiagnostics]) -> String {
    let mut s = format!("{DIAGNOSTICS_CSV_HEADER}\n");
    for d in steps {
        let losses = d
            .rdloss
            .as_ref()
            .map(|v| v.iter().map(f64::to_string).collect::<Vec<_>>().join(";"))
            .unwrap_or_default();
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}\n",
            d.t,
            d.in_window,
            opt(&d.control),
            d.frozen,
            opt(&d.l),
            opt(&d.achieving_token),
            opt(&d.margin),
            d.alpha,
            opt(&d.grad_norm),
            opt(&d.update_norm),
            opt(&d.l_after),
            losses
        ));
    }
    s
}

/// Inputs of one sampling run.
pub struct SampleRequest<'a, F> {
    pub weights: &'a DenoiserWeights<F>,
    pub schedule: &'a NoiseSchedule,
    /// Word token ids.
    pub prompt: &'a [usize],
    pub condition: Option<&'a ConditionImage>,
    pub mask: Option<&'a ControlMask>,
    pub guidance: &'a GuidanceConfig,
    pub mode: Mode,
    pub toggles: Toggles,
    pub step: StepConfig,
    pub seed: u64,
    /// Permit sampling from weights that were never trained.
    pub allow_untrained: bool,
}

pub struct SampleResult<F> {
    pub image: Tensor<F>,
    pub diagnostics: Vec<StepDiagnostics>,
    pub concept: ConceptMatchState,
    pub prompt: Vec<usize>,
}

fn to_f64<F: Scalar>(v: F) -> f64 {
    v.to_f64().unwrap()
}

struct Prepared<'a, F: Scalar> {
    prompt: TokenPrompt<F>,
    objects: Vec<usize>,
    condition: Option<Tensor<F>>,
    mask: Option<&'a ControlMask>,
    kernel: GaussianKernel<F>,
    toggles: Toggles,
}

fn prepare<'a, F: Scalar>(req: &SampleRequest<'a, F>) -> Result<Prepared<'a, F>> {
    req.guidance.validate()?;
    let w = req.weights;
    if w.base_steps == 0 && !req.allow_untrained {
        return Err(Error::Usage(
            "weights are untrained; train or load a checkpoint first".into(),
        ));
    }
    let size = w.arch.image_size;
    let prompt = embed_prompt(w, req.prompt)?;
    let objects = req.guidance.object_tokens(prompt.len())?;
    let condition = match req.condition {
        Some(c) => {
            if c.edges.width != size || c.edges.height != size {
                return Err(Error::Validation(format!(
                    "condition is {}x{}, model expects {size}x{size}",
                    c.edges.width, c.edges.height
                )));
            }
            Some(Tensor::new(vec![1, 1, size, size], c.edges.to_values())?)
        }
        None => None,
    };
    if let Some(m) = req.mask {
        if m.image().width != size || m.image().height != size {
            return Err(Error::Validation(format!(
                "mask is {}x{}, model expects {size}x{size}",
                m.image().width,
                m.image().height
            )));
        }
    }
    let toggles = req.toggles.effective(req.mode);
    let needs_mask = req.mode == Mode::NoiseMask || toggles.fmc || toggles.rdloss;
    if needs_mask && req.mask.is_none() {
        return Err(Error::Validation(format!(
            "mode {} needs a control mask",
            req.mode.name()
        )));
    }
    if (req.mode == Mode::NoiseMask || toggles.fmc) && condition.is_none() {
        return Err(Error::Validation(format!(
            "mode {} needs a condition image",
            req.mode.name()
        )));
    }
    Ok(Prepared {
        prompt,
        objects,
        condition,
        mask: req.mask,
        kernel: req.guidance.kernel()?,
        toggles,
    })
}

struct Pass<F: Scalar> {
    tape: Tape<F>,
    z: crate::numerics::Var,
    eps: crate::numerics::Var,
    loss_node: crate::numerics::Var,
}

fn run_forward<F: Scalar>(
    req: &SampleRequest<'_, F>,
    prep: &Prepared<'_, F>,
    state: &LatentState<F>,
    control: bool,
    mask: MaskMode<'_>,
    ftr: Option<&FtrDirective<F>>,
    track: bool,
) -> Result<Pass<F>> {
    let mut tape = Tape::new();
    let z = tape.leaf(state.z.clone(), track);
    let prompts = [prep.prompt.tokens.clone()];
    let row = [req.schedule.model_row(state.t)];
    let fr = ForwardRequest {
        time_index: &row,
        prompts: &prompts,
        control,
        condition: if control {
            prep.condition.as_ref()
        } else {
            None
        },
        mask,
        ftr,
    };
    let nodes = forward_on_tape(req.weights, &mut tape, z, &fr, None)?;
    let loss_node = if req.guidance.raw_maps {
        nodes.raw_attention
    } else {
        nodes.attention
    };
    Ok(Pass {
        tape,
        z,
        eps: nodes.eps,
        loss_node,
    })
}

/// Like [`run_forward`], stopping at the attention scores; `eps` is unset.
fn run_attention<F: Scalar>(
    req: &SampleRequest<'_, F>,
    prep: &Prepared<'_, F>,
    state: &LatentState<F>,
    ftr: Option<&FtrDirective<F>>,
    track: bool,
) -> Result<(Tape<F>, crate::numerics::Var, crate::numerics::Var)> {
    let mut tape = Tape::new();
    let z = tape.leaf(state.z.clone(), track);
    let prompts = [prep.prompt.tokens.clone()];
    let row = [req.schedule.model_row(state.t)];
    let fr = ForwardRequest {
        time_index: &row,
        prompts: &prompts,
        control: false,
        condition: None,
        mask: MaskMode::None,
        ftr,
    };
    let nodes = attention_on_tape(req.weights, &mut tape, z, &fr, None)?;
    let loss_node = if req.guidance.raw_maps {
        nodes.raw_attention
    } else {
        nodes.attention
    };
    Ok((tape, z, loss_node))
}

impl<'a, F: Scalar> Prepared<'a, F> {
    fn mask_mode(&self) -> MaskMode<'a> {
        match (self.toggles.fmc, self.mask) {
            (true, Some(m)) => MaskMode::Fmc(m),
            _ => MaskMode::None,
        }
    }

    fn ftr(&self, cfg: &GuidanceConfig, in_window: bool) -> Option<FtrDirective<F>> {
        (self.toggles.ftr && in_window).then(|| FtrDirective {
            gamma: F::lit(cfg.gamma),
            candidates: (!cfg.ftr_all_tokens).then(|| self.objects.clone()),
        })
    }
}

/// The guidance loss the sampler would see at `state` for a fixed control
/// concept, and its gradient with respect to the latent when `with_grad` is set.
pub fn guidance_objective<F: Scalar>(
    req: &SampleRequest<'_, F>,
    state: &LatentState<F>,
    control_token: usize,
    with_grad: bool,
) -> Result<(RdLoss<F>, Option<Tensor<F>>)> {
    let prep = prepare(req)?;
    let mask = prep
        .mask
        .ok_or_else(|| Error::Validation("guidance loss needs a control mask".into()))?;
    let total = req.schedule.len();
    let ftr = prep.ftr(req.guidance, req.guidance.in_window(state.t, total));
    let (tape, z, loss_node) = run_attention(req, &prep, state, ftr.as_ref(), with_grad)?;
    let stack = extract_attention(&tape, loss_node, 0, &prep.prompt.tokens, state.t)?;
    let r = rdloss(
        &stack,
        mask.attention(),
        control_token,
        &prep.objects,
        &prep.kernel,
    )?;
    if !with_grad {
        return Ok((r, None));
    }
    let maps = rdloss_gradient(&stack, mask.attention(), &r, control_token, &prep.kernel)?;
    let seed = attention_seed(&tape, loss_node, 0, &maps);
    let mut grads = tape.backward_with_seed(loss_node, seed)?;
    let g = grads
        .take(z)
        .unwrap_or_else(|| Tensor::zeros(state.z.shape().to_vec()));
    Ok((r, Some(g)))
}

/// Runs the full reverse process from seeded Gaussian noise.
pub fn sample<F: Scalar>(req: &SampleRequest<'_, F>) -> Result<SampleResult<F>> {
    let prep = prepare(req)?;
    let total = req.schedule.len();
    let size = req.weights.arch.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
    let mut state = LatentState {
        z: gaussian(
            vec![1, req.weights.arch.image_channels, size, size],
            &mut rng,
        ),
        t: total,
    };
    let mut concept = ConceptMatchState::default();
    let mut diagnostics = Vec::with_capacity(total);
    let control = prep.condition.is_some();
    let cfg = req.guidance;

    while state.t > 0 {
        let t = state.t;
        let mut d = StepDiagnostics {
            t,
            in_window: cfg.in_window(t, total),
            ..Default::default()
        };
        let eps = if req.mode == Mode::NoiseMask {
            let with = run_forward(req, &prep, &state, true, MaskMode::None, None, false)?;
            let without = run_forward(req, &prep, &state, false, MaskMode::None, None, false)?;
            noise_mask_combine(
                with.tape.value(with.eps),
                without.tape.value(without.eps),
                prep.mask.unwrap().image(),
            )?
        } else {
            let mask_mode = prep.mask_mode();
            let ftr = prep.ftr(cfg, d.in_window);
            let alpha = if prep.toggles.rdloss && d.in_window {
                cfg.alpha_at(t, req.schedule.alpha_bar(t))?
            } else {
                0.0
            };
            d.alpha = alpha;
            let pass = run_forward(
                req,
                &prep,
                &state,
                control,
                mask_mode,
                ftr.as_ref(),
                alpha > 0.0,
            )?;
            if prep.toggles.rdloss {
                let mask = prep.mask.unwrap();
                let stack =
                    extract_attention(&pass.tape, pass.loss_node, 0, &prep.prompt.tokens, t)?;
                let voting = cfg.collects_votes(t, total);
                let c = match_control_concept(
                    &stack,
                    mask.attention(),
                    t,
                    total,
                    cfg,
                    &prep.objects,
                    &mut concept,
                )?;
                d.control = Some(c);
                d.frozen = !voting;
                if d.in_window && !mask.is_degenerate() {
                    let r = rdloss(&stack, mask.attention(), c, &prep.objects, &prep.kernel)?;
                    d.rdloss = Some(r.per_token.iter().map(|p| to_f64(p.loss)).collect());
                    d.l = Some(to_f64(r.l));
                    d.achieving_token = Some(r.achieving_token());
                    d.margin = Some(to_f64(r.margin()));
                    if alpha > 0.0 {
                        let maps = rdloss_gradient(&stack, mask.attention(), &r, c, &prep.kernel)?;
                        let seed = attention_seed(&pass.tape, pass.loss_node, 0, &maps);
                        let mut grads = pass.tape.backward_with_seed(pass.loss_node, seed)?;
                        let g = grads
                            .take(pass.z)
                            .unwrap_or_else(|| Tensor::zeros(state.z.shape().to_vec()));
                        if !g.is_finite() {
                            return Err(Error::Guidance {
                                step: t,
                                reason: "latent gradient is not finite".into(),
                            });
                        }
                        d.grad_norm = Some(to_f64(g.norm()));
                        let before = state.z.clone();
                        state = update_latent(&state, &g, F::lit(alpha))?;
                        d.update_norm = Some(to_f64(state.z.sub(&before)?.norm()));
                    }
                } else if alpha > 0.0 {
                    return Err(Error::Guidance {
                        step: t,
                        reason: "latent updates need a mask with both region and background".into(),
                    });
                }
            }
            if d.update_norm.is_some() {
                let fresh =
                    run_forward(req, &prep, &state, control, mask_mode, ftr.as_ref(), false)?;
                let stack =
                    extract_attention(&fresh.tape, fresh.loss_node, 0, &prep.prompt.tokens, t)?;
                let mask = prep.mask.unwrap();
                let again = rdloss(
                    &stack,
                    mask.attention(),
                    d.control.unwrap(),
                    &prep.objects,
                    &prep.kernel,
                )?;
                d.l_after = Some(to_f64(again.l));
                fresh.tape.value(fresh.eps).clone()
            } else {
                pass.tape.value(pass.eps).clone()
            }
        };
        state = denoise_step(req.schedule, &state, &eps, &req.step, &mut rng)?;
        diagnostics.push(d);
    }
    Ok(SampleResult {
        image: state.z,
        diagnostics,
        concept,
        prompt: prep.prompt.tokens,
    })
}
