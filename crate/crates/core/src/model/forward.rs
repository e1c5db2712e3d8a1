use crate::error::{Error, Result};
use crate::guidance::{ftr_factors, ControlMask};
use crate::numerics::{fuse_values, Tape, Tensor, Var};
use crate::scalar::Scalar;

use super::attention::AttentionStack;
use super::prompt::TokenPrompt;
use super::vocab::PAD;
use super::weights::{DenoiserWeights, Group};

/// How control residuals are gated before injection.
#[derive(Clone, Copy, Debug)]
pub enum MaskMode<'a> {
    /// Plain fusion everywhere (an all-ones mask).
    None,
    /// Residuals pass only inside the region.
    Fmc(&'a ControlMask),
}

/// Per-patch suppression applied to the attention scores before aggregation.
#[derive(Clone, Debug, PartialEq)]
pub struct FtrDirective<F> {
    pub gamma: F,
    /// Prompt positions competing for the maximum; every position when `None`.
    pub candidates: Option<Vec<usize>>,
}

/// Inputs of one batched forward pass.
#[derive(Clone, Debug)]
pub struct ForwardRequest<'a, F> {
    /// Row of the timestep table for every sample.
    pub time_index: &'a [usize],
    /// Prompt positions (background first) for every sample.
    pub prompts: &'a [Vec<usize>],
    /// Run the control branch.
    pub control: bool,
    /// `[N, 1, H, W]` condition, required when `control` is set.
    pub condition: Option<&'a Tensor<F>>,
    pub mask: MaskMode<'a>,
    pub ftr: Option<&'a FtrDirective<F>>,
}

/// Tape nodes produced by a forward pass.
pub struct ForwardNodes {
    pub eps: Var,
    /// Attention scores straight from the softmax, `[N, patches, max_tokens]`.
    pub raw_attention: Var,
    /// Scores actually used to aggregate values (after suppression, if any).
    pub attention: Var,
    pub valid: Vec<usize>,
    /// Leaf of every parameter that was placed on the tape, by layout position.
    pub params: Vec<Option<Var>>,
}

struct Params<'w, F: Scalar> {
    w: &'w DenoiserWeights<F>,
    vars: Vec<Option<Var>>,
    trainable: Option<Group>,
}

impl<F: Scalar> Params<'_, F> {
    fn get(&mut self, tape: &mut Tape<F>, name: &str) -> Var {
        let i = self
            .w
            .position(name)
            .unwrap_or_else(|| panic!("no parameter {name}"));
        if let Some(v) = self.vars[i] {
            return v;
        }
        let grad = self.trainable == Some(self.w.specs()[i].group);
        let v = tape.leaf(self.w.tensors()[i].clone(), grad);
        self.vars[i] = Some(v);
        v
    }

    fn conv(&mut self, tape: &mut Tape<F>, x: Var, name: &str, stride: usize) -> Result<Var> {
        let w = self.get(tape, &format!("{name}.w"));
        let b = self.get(tape, &format!("{name}.b"));
        let k = tape.value(w).shape()[2];
        tape.conv2d(x, w, Some(b), stride, k / 2)
    }
}

fn mask_bits(mask: MaskMode<'_>, width: usize) -> Result<Vec<bool>> {
    match mask {
        MaskMode::None => Ok(vec![true; width * width]),
        MaskMode::Fmc(m) => Ok(m.at_width(width)?.bits.clone()),
    }
}

/// Elementwise `unet + mask * control` at one feature resolution.
///
/// Positions outside the mask return `unet_out` bit for bit.
pub fn fuse_control<F: Scalar>(
    unet_out: &Tensor<F>,
    control_out: &Tensor<F>,
    mask: &ControlMask,
) -> Result<Tensor<F>> {
    unet_out.ensure_same_shape(control_out, "control fusion")?;
    let s = unet_out.shape();
    if s.len() != 4 {
        return Err(Error::shape(format!(
            "fusion expects [N, C, H, W], got {s:?}"
        )));
    }
    let grid = mask.at_width(s[3])?;
    if grid.height != s[2] {
        return Err(Error::shape("mask grid is not square with the features"));
    }
    Ok(fuse_values(unet_out, control_out, &grid.bits))
}

/// Cross-attention over the prompt at the lowest resolution.
///
/// Returns the block output (same shape as `h`), the raw scores and the
/// scores used for aggregation.
fn attention_block<F: Scalar>(
    tape: &mut Tape<F>,
    p: &mut Params<'_, F>,
    h: Var,
    prompts: &[Vec<usize>],
    ftr: Option<&FtrDirective<F>>,
) -> Result<(Var, Var, Var, Vec<usize>)> {
    let shape = tape.value(h).shape().to_vec();
    let (n, side) = (shape[0], shape[2]);
    let max_len = p.w.arch.max_tokens;
    if prompts.len() != n {
        return Err(Error::shape(format!(
            "{} prompts for a batch of {n}",
            prompts.len()
        )));
    }
    let mut ids = Vec::with_capacity(n * max_len);
    let mut valid = Vec::with_capacity(n);
    for pr in prompts {
        if pr.is_empty() || pr.len() > max_len {
            return Err(Error::shape(format!(
                "prompt of {} positions (1..={max_len} allowed)",
                pr.len()
            )));
        }
        valid.push(pr.len());
        ids.extend_from_slice(pr);
        ids.extend(std::iter::repeat_n(PAD, max_len - pr.len()));
    }
    let table = p.get(tape, "token_embedding");
    let e = tape.gather(table, &ids)?;
    let e_dim = tape.value(e).shape()[1];
    let e = tape.reshape(e, vec![n, max_len, e_dim])?;
    let wq = p.get(tape, "attn.q");
    let wk = p.get(tape, "attn.k");
    let wv = p.get(tape, "attn.v");
    let wo = p.get(tape, "attn.o");
    let d = tape.value(wq).shape()[1];
    let x = tape.to_tokens(h);
    let q = tape.linear(x, wq)?;
    let k = tape.linear(e, wk)?;
    let v = tape.linear(e, wv)?;
    let logits = tape.bmm(q, k, true)?;
    let logits = tape.scale(logits, F::one() / F::from_usize(d).unwrap().sqrt());
    let raw = tape.masked_softmax(logits, &valid)?;
    let used = match ftr {
        None => raw,
        Some(dir) => {
            let patches = side * side;
            let scores = tape.value(raw).data();
            let mut factors = vec![F::one(); scores.len()];
            for (i, &len) in valid.iter().enumerate() {
                for pch in 0..patches {
                    let off = (i * patches + pch) * max_len;
                    let f = ftr_factors(
                        &scores[off..off + len],
                        dir.candidates.as_deref(),
                        dir.gamma,
                    );
                    factors[off..off + len].copy_from_slice(&f);
                }
            }
            tape.mul_const(raw, Tensor::new(vec![n, patches, max_len], factors)?)?
        }
    };
    let o = tape.bmm(used, v, false)?;
    let o = tape.linear(o, wo)?;
    let o = tape.from_tokens(o, side, side)?;
    Ok((o, raw, used, valid))
}

/// Builds the denoiser's forward pass on `tape` from the latent node `z`.
///
/// Parameters of the `trainable` group are placed on the tape as
/// gradient-tracking leaves; the others are constants.
pub fn forward_on_tape<F: Scalar>(
    w: &DenoiserWeights<F>,
    tape: &mut Tape<F>,
    z: Var,
    req: &ForwardRequest<'_, F>,
    trainable: Option<Group>,
) -> Result<ForwardNodes> {
    let (eps, nodes) = build(w, tape, z, req, trainable, true)?;
    let AttentionNodes {
        raw_attention,
        attention,
        valid,
        params,
    } = nodes;
    Ok(ForwardNodes {
        eps: eps.expect("full pass"),
        raw_attention,
        attention,
        valid,
        params,
    })
}

/// Attention nodes of a forward pass.
pub struct AttentionNodes {
    pub raw_attention: Var,
    pub attention: Var,
    pub valid: Vec<usize>,
    pub params: Vec<Option<Var>>,
}

/// Runs the forward pass only as far as the cross-attention scores.
///
/// The scores depend on the base encoder alone, so this is much cheaper than
/// [`forward_on_tape`] and yields identical attention values.
pub fn attention_on_tape<F: Scalar>(
    w: &DenoiserWeights<F>,
    tape: &mut Tape<F>,
    z: Var,
    req: &ForwardRequest<'_, F>,
    trainable: Option<Group>,
) -> Result<AttentionNodes> {
    Ok(build(w, tape, z, req, trainable, false)?.1)
}

fn build<F: Scalar>(
    w: &DenoiserWeights<F>,
    tape: &mut Tape<F>,
    z: Var,
    req: &ForwardRequest<'_, F>,
    trainable: Option<Group>,
    full: bool,
) -> Result<(Option<Var>, AttentionNodes)> {
    let zs = tape.value(z).shape().to_vec();
    let a = &w.arch;
    if zs.len() != 4 || zs[1] != a.image_channels || zs[2] != a.image_size || zs[3] != a.image_size
    {
        return Err(Error::shape(format!(
            "latent {zs:?} does not match a {}-channel {}x{} model",
            a.image_channels, a.image_size, a.image_size
        )));
    }
    let n = zs[0];
    if req.time_index.len() != n {
        return Err(Error::shape("one timestep per sample required"));
    }
    if let Some(&bad) = req.time_index.iter().find(|&&t| t >= a.train_timesteps) {
        return Err(Error::param(format!(
            "timestep row {bad} outside table of {}",
            a.train_timesteps
        )));
    }
    let condition = match (req.control, req.condition) {
        (true, None) => {
            return Err(Error::Usage(
                "control branch enabled without a condition image".into(),
            ))
        }
        (true, Some(c)) => {
            if c.shape() != [n, 1, a.image_size, a.image_size] {
                return Err(Error::shape(format!(
                    "condition {:?} for latent {zs:?}",
                    c.shape()
                )));
            }
            Some(c)
        }
        (false, _) => {
            if matches!(req.mask, MaskMode::Fmc(_)) {
                return Err(Error::Usage(
                    "feature mask given but the control branch is disabled".into(),
                ));
            }
            None
        }
    };
    let mut p = Params {
        w,
        vars: vec![None; w.len()],
        trainable,
    };

    let table = p.get(tape, "time_table");
    let temb = tape.gather(table, req.time_index)?;
    let temb = tape.silu(temb);
    let tproj = |tape: &mut Tape<F>, p: &mut Params<'_, F>, name: &str| -> Result<Var> {
        let pw = p.get(tape, name);
        tape.linear(temb, pw)
    };
    let block = |tape: &mut Tape<F>,
                 p: &mut Params<'_, F>,
                 x: Var,
                 name: &str,
                 stride: usize,
                 t: Option<Var>|
     -> Result<Var> {
        let mut h = p.conv(tape, x, name, stride)?;
        if let Some(t) = t {
            h = tape.add_channel(h, t)?;
        }
        Ok(tape.silu(h))
    };

    let t0 = tproj(tape, &mut p, "time_proj0")?;
    let t1 = tproj(tape, &mut p, "time_proj1")?;
    let t2 = tproj(tape, &mut p, "time_proj2")?;
    let h = block(tape, &mut p, z, "enc0a", 1, Some(t0))?;
    let mut s0 = block(tape, &mut p, h, "enc0b", 1, None)?;
    let h = block(tape, &mut p, s0, "enc1a", 2, Some(t1))?;
    let mut s1 = block(tape, &mut p, h, "enc1b", 1, None)?;
    let h = block(tape, &mut p, s1, "enc2a", 2, Some(t2))?;
    let h2 = block(tape, &mut p, h, "enc2b", 1, None)?;

    let (o, raw, used, valid) = attention_block(tape, &mut p, h2, req.prompts, req.ftr)?;
    if !full {
        return Ok((
            None,
            AttentionNodes {
                raw_attention: raw,
                attention: used,
                valid,
                params: p.vars,
            },
        ));
    }
    let h = tape.add(h2, o)?;
    let mut m = block(tape, &mut p, h, "mid", 1, None)?;

    if let Some(c) = condition {
        let cv = tape.leaf(c.clone(), false);
        let ct0 = tproj(tape, &mut p, "ctl.time_proj0")?;
        let ct1 = tproj(tape, &mut p, "ctl.time_proj1")?;
        let ct2 = tproj(tape, &mut p, "ctl.time_proj2")?;
        let x = tape.concat_channels(z, cv)?;
        let h = block(tape, &mut p, x, "ctl.enc0a", 1, Some(ct0))?;
        let r0 = block(tape, &mut p, h, "ctl.enc0b", 1, None)?;
        let h = block(tape, &mut p, r0, "ctl.enc1a", 2, Some(ct1))?;
        let r1 = block(tape, &mut p, h, "ctl.enc1b", 1, None)?;
        let h = block(tape, &mut p, r1, "ctl.enc2a", 2, Some(ct2))?;
        let r2 = block(tape, &mut p, h, "ctl.enc2b", 1, None)?;
        let r0 = p.conv(tape, r0, "ctl.zero0", 1)?;
        let r1 = p.conv(tape, r1, "ctl.zero1", 1)?;
        let r2 = p.conv(tape, r2, "ctl.zero2", 1)?;
        let size = a.image_size;
        m = tape.fuse_masked(m, r2, &mask_bits(req.mask, size / 4)?)?;
        s1 = tape.fuse_masked(s1, r1, &mask_bits(req.mask, size / 2)?)?;
        s0 = tape.fuse_masked(s0, r0, &mask_bits(req.mask, size)?)?;
    }

    let u = tape.upsample2(m);
    let u = tape.concat_channels(u, s1)?;
    let u = block(tape, &mut p, u, "dec1a", 1, None)?;
    let u = block(tape, &mut p, u, "dec1b", 1, None)?;
    let u = tape.upsample2(u);
    let u = tape.concat_channels(u, s0)?;
    let u = block(tape, &mut p, u, "dec0a", 1, None)?;
    let u = block(tape, &mut p, u, "dec0b", 1, None)?;
    let eps = p.conv(tape, u, "out", 1)?;
    Ok((
        Some(eps),
        AttentionNodes {
            raw_attention: raw,
            attention: used,
            valid,
            params: p.vars,
        },
    ))
}

/// Attention maps of one batch element from an attention node.
pub fn extract_attention<F: Scalar>(
    tape: &Tape<F>,
    node: Var,
    sample: usize,
    tokens: &[usize],
    t: usize,
) -> Result<AttentionStack<F>> {
    let s = tape.value(node).shape();
    let (patches, max_len) = (s[1], s[2]);
    let side = (patches as f64).sqrt() as usize;
    let rows =
        &tape.value(node).data()[sample * patches * max_len..(sample + 1) * patches * max_len];
    AttentionStack::from_patch_rows(t, tokens.to_vec(), side, side, rows, max_len)
}

/// Scatters per-token map gradients into a cotangent for an attention node.
pub fn attention_seed<F: Scalar>(
    tape: &Tape<F>,
    node: Var,
    sample: usize,
    maps: &[Tensor<F>],
) -> Tensor<F> {
    let shape = tape.value(node).shape().to_vec();
    let (patches, max_len) = (shape[1], shape[2]);
    let mut seed = Tensor::zeros(shape);
    let base = sample * patches * max_len;
    for (i, m) in maps.iter().enumerate() {
        for (pch, &g) in m.data().iter().enumerate() {
            seed.data_mut()[base + pch * max_len + i] = g;
        }
    }
    seed
}

/// Single-sample inference: noise prediction and the attention maps used.
#[allow(clippy::too_many_arguments)]
pub fn denoiser_forward<F: Scalar>(
    w: &DenoiserWeights<F>,
    z: &Tensor<F>,
    time_index: usize,
    t: usize,
    prompt: &TokenPrompt<F>,
    condition: Option<&Tensor<F>>,
    control: bool,
    mask: MaskMode<'_>,
    ftr: Option<&FtrDirective<F>>,
) -> Result<(Tensor<F>, AttentionStack<F>)> {
    let mut tape = Tape::new();
    let zl = tape.leaf(z.clone(), false);
    let prompts = [prompt.tokens.clone()];
    let req = ForwardRequest {
        time_index: &[time_index],
        prompts: &prompts,
        control,
        condition,
        mask,
        ftr,
    };
    let nodes = forward_on_tape(w, &mut tape, zl, &req, None)?;
    let stack = extract_attention(&tape, nodes.attention, 0, &prompt.tokens, t)?;
    Ok((tape.value(nodes.eps).clone(), stack))
}

/// The attention block alone, on `[1, C, s, s]` features.
pub fn cross_attention<F: Scalar>(
    w: &DenoiserWeights<F>,
    features: &Tensor<F>,
    prompt: &TokenPrompt<F>,
    ftr: Option<&FtrDirective<F>>,
) -> Result<(Tensor<F>, AttentionStack<F>)> {
    let c2 = w.arch.channels[2];
    let side = w.arch.attn_size();
    if features.shape() != [1, c2, side, side] {
        return Err(Error::shape(format!(
            "attention features {:?}, expected [1, {c2}, {side}, {side}]",
            features.shape()
        )));
    }
    let mut tape = Tape::new();
    let mut p = Params {
        w,
        vars: vec![None; w.len()],
        trainable: None,
    };
    let h = tape.leaf(features.clone(), false);
    let (o, _, used, _) = attention_block(&mut tape, &mut p, h, std::slice::from_ref(&prompt.tokens), ftr)?;
    let stack = extract_attention(&tape, used, 0, &prompt.tokens, 0)?;
    Ok((tape.value(o).clone(), stack))
}
