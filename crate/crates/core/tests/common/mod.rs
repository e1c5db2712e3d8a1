//! Brute-force reference implementations and random instance generators
//! shared by the oracle tests.

#![allow(dead_code, clippy::needless_range_loop)]

use localctl::guidance::{focused_token_response, rdloss, ControlMask, GuidanceConfig};
use localctl::model::AttentionStack;
use localctl::numerics::Tensor;
use localctl::sampler::noise_mask_combine;
use localctl::scenes::BinaryMask;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Values with a spread of magnitudes, signed zeros and exact integers.
pub fn value(rng: &mut impl Rng) -> f64 {
    match rng.random_range(0..10) {
        0 => 0.0,
        1 => -0.0,
        2 => rng.random_range(-4..=4) as f64,
        3 => rng.random_range(-1e6..1e6),
        _ => rng.random_range(-1.0..1.0),
    }
}

pub fn tensor(shape: Vec<usize>, rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| value(rng))
}

/// Random mask: scattered pixels, a rectangle, all on or all off.
pub fn mask(side: usize, rng: &mut impl Rng) -> BinaryMask {
    match rng.random_range(0..8) {
        0 => BinaryMask::empty(side, side),
        1 => BinaryMask::full(side, side),
        2..=4 => {
            let p: f64 = rng.random_range(0.05..0.95);
            BinaryMask::from_fn(side, side, |_, _| rng.random_bool(p))
        }
        _ => {
            let (x0, y0) = (rng.random_range(0..side), rng.random_range(0..side));
            let (x1, y1) = (rng.random_range(x0..side), rng.random_range(y0..side));
            BinaryMask::from_fn(side, side, |x, y| {
                (x0..=x1).contains(&x) && (y0..=y1).contains(&y)
            })
        }
    }
}

/// Mask with both set and unset cells.
pub fn proper_mask(side: usize, rng: &mut impl Rng) -> BinaryMask {
    loop {
        let m = mask(side, rng);
        if !m.is_empty() && !m.is_full() {
            return m;
        }
    }
}

/// Cell `(cx, cy)` of the `factor`-downsampled grid: set iff at least half the block is set.
pub fn block_rule(m: &BinaryMask, factor: usize, cx: usize, cy: usize) -> bool {
    let on = (0..factor * factor)
        .filter(|i| m.get(cx * factor + i % factor, cy * factor + i / factor))
        .count();
    on * 2 >= factor * factor
}

/// `out = unet + M * control`, elementwise, with `M` at the features' resolution.
pub fn fuse_oracle(
    unet: &Tensor<f64>,
    control: &Tensor<f64>,
    image_mask: &BinaryMask,
) -> Tensor<f64> {
    let s = unet.shape();
    let (h, w) = (s[2], s[3]);
    let factor = image_mask.width / w;
    let mut out = unet.clone();
    for (i, o) in out.data_mut().iter_mut().enumerate() {
        let (x, y) = (i % w, (i / w) % h);
        let m = if block_rule(image_mask, factor, x, y) {
            1.0
        } else {
            0.0
        };
        *o += m * control.data()[i];
    }
    out
}

/// `eps = eps_ctrl * M + eps_plain * (1 - M)`, elementwise.
pub fn combine_oracle(ctrl: &Tensor<f64>, plain: &Tensor<f64>, m: &BinaryMask) -> Tensor<f64> {
    let hw = m.width * m.height;
    Tensor::from_fn(ctrl.shape().to_vec(), |i| {
        let mv = if m.bits[i % hw] { 1.0 } else { 0.0 };
        ctrl.data()[i] * mv + plain.data()[i] * (1.0 - mv)
    })
}

/// Zero-padded Gaussian correlation, written as a direct double loop.
pub fn smooth_oracle(map: &Tensor<f64>, size: usize, sigma: f64) -> Vec<Vec<f64>> {
    let (h, w) = map.dims2().unwrap();
    let half = (size / 2) as isize;
    let mut k = vec![vec![0.0; size]; size];
    let mut total = 0.0;
    for (ky, row) in k.iter_mut().enumerate() {
        for (kx, v) in row.iter_mut().enumerate() {
            let (dy, dx) = (ky as isize - half, kx as isize - half);
            *v = (-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp();
            total += *v;
        }
    }
    for row in &mut k {
        for v in row {
            *v /= total;
        }
    }
    let mut out = vec![vec![0.0; w]; h];
    for (y, out_row) in out.iter_mut().enumerate() {
        for (x, o) in out_row.iter_mut().enumerate() {
            for (ky, k_row) in k.iter().enumerate() {
                let sy = y as isize + ky as isize - half;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for (kx, kv) in k_row.iter().enumerate() {
                    let sx = x as isize + kx as isize - half;
                    if sx >= 0 && sx < w as isize {
                        *o += kv * map.at2(sy as usize, sx as usize);
                    }
                }
            }
        }
    }
    out
}

/// Per-token signed peak gaps and their maximum.
pub fn rdloss_oracle(
    attn: &AttentionStack<f64>,
    m: &BinaryMask,
    control: usize,
    candidates: &[usize],
    size: usize,
    sigma: f64,
) -> (Vec<f64>, f64) {
    let mut losses = Vec::new();
    for &i in candidates {
        let s = smooth_oracle(attn.map(i), size, sigma);
        let mut inside = f64::NEG_INFINITY;
        let mut outside = f64::NEG_INFINITY;
        for (y, row) in s.iter().enumerate() {
            for (x, &v) in row.iter().enumerate() {
                let mv = if m.get(x, y) { 1.0 } else { 0.0 };
                inside = inside.max(v * mv);
                outside = outside.max(v * (1.0 - mv));
            }
        }
        let sign = if i == control { -1.0 } else { 1.0 };
        losses.push(sign * (inside - outside));
    }
    let l = losses.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (losses, l)
}

/// Every candidate except the first patch maximum is scaled by `gamma`.
pub fn ftr_oracle(attn: &AttentionStack<f64>, gamma: f64, candidates: &[usize]) -> Vec<Vec<f64>> {
    let mut maps: Vec<Vec<f64>> = attn.maps().iter().map(|m| m.data().to_vec()).collect();
    for p in 0..attn.patches() {
        let mut keep = candidates[0];
        for &i in candidates {
            if attn.map(i).data()[p] > attn.map(keep).data()[p] {
                keep = i;
            }
        }
        for &i in candidates {
            if i != keep {
                maps[i][p] *= gamma;
            }
        }
    }
    maps
}

/// Positive maps of `tokens` tokens on a `side x side` grid, with occasional exact ties.
pub fn attention_stack(tokens: usize, side: usize, rng: &mut impl Rng) -> AttentionStack<f64> {
    let coarse = rng.random_bool(0.3);
    let maps = (0..tokens)
        .map(|_| {
            Tensor::from_fn(vec![side, side], |_| {
                if coarse {
                    rng.random_range(1..=4) as f64 / 4.0
                } else {
                    rng.random_range(1e-4..1.0)
                }
            })
        })
        .collect();
    AttentionStack::new(0, (0..tokens).collect(), maps).unwrap()
}

fn equal(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x == y)
}

/// Compares the four operators with their oracles on `count` instances
/// each; returns a description of the first mismatch.
pub fn check_operator_oracles(count: usize, seed: u64) -> Result<(), String> {
    let mut r = rng(seed);
    for case in 0..count {
        let image_mask = mask(32, &mut r);
        let cm = ControlMask::from_image_mask(image_mask.clone()).unwrap();
        let side = [32, 16, 8][case % 3];
        let shape = vec![r.random_range(1..3), r.random_range(1..4), side, side];
        let (u, c) = (tensor(shape.clone(), &mut r), tensor(shape, &mut r));
        let got = localctl::model::fuse_control(&u, &c, &cm).unwrap();
        if !equal(got.data(), fuse_oracle(&u, &c, &image_mask).data()) {
            return Err(format!("fuse_control mismatch on instance {case}"));
        }

        let m = mask(8, &mut r);
        let shape = vec![1, r.random_range(1..4), 8, 8];
        let (a, b) = (tensor(shape.clone(), &mut r), tensor(shape, &mut r));
        let got = noise_mask_combine(&a, &b, &m).unwrap();
        if !equal(got.data(), combine_oracle(&a, &b, &m).data()) {
            return Err(format!("noise_mask_combine mismatch on instance {case}"));
        }

        let tokens = r.random_range(2..6);
        let attn = attention_stack(tokens, 8, &mut r);
        let candidates: Vec<usize> = (1..tokens).collect();
        let control = candidates[r.random_range(0..candidates.len())];
        let m = proper_mask(8, &mut r);
        let cfg = GuidanceConfig::default();
        let got = rdloss(&attn, &m, control, &candidates, &cfg.kernel().unwrap()).unwrap();
        let (want, l) = rdloss_oracle(
            &attn,
            &m,
            control,
            &candidates,
            cfg.kernel_size,
            cfg.kernel_sigma,
        );
        let got_losses: Vec<f64> = got.per_token.iter().map(|t| t.loss).collect();
        if !equal(&got_losses, &want) || got.l != l {
            return Err(format!(
                "rdloss mismatch on instance {case}: {got_losses:?} vs {want:?}"
            ));
        }

        let gamma = [0.0, 0.1, 0.5, 1.0, r.random_range(0.0..1.0)][case % 5];
        let got = focused_token_response(&attn, gamma, Some(&candidates)).unwrap();
        let want = ftr_oracle(&attn, gamma, &candidates);
        for (i, w) in want.iter().enumerate() {
            if !equal(got.map(i).data(), w) {
                return Err(format!(
                    "focused_token_response mismatch on instance {case}, token {i}"
                ));
            }
        }
    }
    Ok(())
}

/// Freshly initialized weights whose control projections are nonzero, so the
/// control branch actually changes the output.
pub fn active_weights(seed: u64) -> localctl::Weights64 {
    let mut w = localctl::Weights64::init(&localctl::model::ArchConfig::default(), seed).unwrap();
    let mut r = rng(seed ^ 0x5eed);
    for name in localctl::model::ZERO_PROJECTIONS {
        for v in w.get_mut(name).data_mut() {
            *v = r.random_range(-0.2..0.2);
        }
    }
    w
}

/// One gradient comparison at a noised scene latent.
#[derive(Debug)]
pub struct GradPoint {
    pub seed: u64,
    pub t: usize,
    pub margin: f64,
    pub rel_err: f64,
}

/// Compares the reverse-mode latent gradient of the guidance loss with
/// central differences at `points` latents whose maxima are unique by more
/// than `min_margin`. Latents failing the margin test are skipped.
pub fn gradient_points(
    w: &localctl::Weights64,
    points: usize,
    h: f64,
    min_margin: f64,
) -> Vec<GradPoint> {
    use localctl::eval::Scenario;
    use localctl::sampler::{
        add_noise, gaussian, guidance_objective, LatentState, Mode, SampleRequest, ScheduleConfig,
        StepConfig, Toggles,
    };
    let sc = Scenario::circle_and_square();
    let schedule = ScheduleConfig::default().sampling().unwrap();
    let guidance = GuidanceConfig::default();
    let prompt = sc.prompt();
    let req = SampleRequest {
        weights: w,
        schedule: &schedule,
        prompt: &prompt,
        condition: Some(&sc.condition),
        mask: Some(&sc.mask),
        guidance: &guidance,
        mode: Mode::FullMethod,
        toggles: Toggles::ALL,
        step: StepConfig::default(),
        seed: 0,
        allow_untrained: true,
    };
    let clean = sc.target.to_image().to_latent::<f64>();
    let control = 1 + sc.control;
    let mut out = Vec::new();
    let mut seed = 0;
    while out.len() < points {
        assert!(
            seed < 20 * points as u64 + 100,
            "too few latents with unique maxima"
        );
        let mut r = rng(1000 + seed);
        let t = r.random_range(26..=50);
        let eps = gaussian::<f64>(vec![1, 1, 32, 32], &mut r);
        let state = LatentState {
            z: add_noise(&schedule, &clean, t, &eps).unwrap(),
            t,
        };
        seed += 1;
        let (loss, grad) = guidance_objective(&req, &state, control, true).unwrap();
        if loss.margin() <= min_margin {
            continue;
        }
        let fd = localctl::numerics::central_difference(&state.z, h, |z| {
            let probe = LatentState { z: z.clone(), t };
            Ok(guidance_objective(&req, &probe, control, false)?.0.l)
        })
        .unwrap();
        let rel_err = localctl::numerics::relative_error(&grad.unwrap(), &fd, 1e-12);
        out.push(GradPoint {
            seed: seed - 1,
            t,
            margin: loss.margin(),
            rel_err,
        });
    }
    out
}
