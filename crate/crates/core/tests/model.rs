mod common;

use localctl::guidance::ControlMask;
use localctl::model::{
    attention_on_tape, denoiser_forward, embed_prompt, forward_on_tape, token_for, ForwardRequest,
    MaskMode,
};
use localctl::numerics::{Tape, Tensor};
use localctl::scenes::{BinaryMask, ShapeKind};
use rand::Rng;

fn latent(r: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(vec![1, 1, 32, 32], |_| r.random_range(-2.0..2.0))
}

fn condition(r: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(vec![1, 1, 32, 32], |_| {
        if r.random_bool(0.1) {
            1.0
        } else {
            0.0
        }
    })
}

fn words(r: &mut impl Rng) -> Vec<usize> {
    (0..r.random_range(1..4))
        .map(|_| token_for(ShapeKind::ALL[r.random_range(0..6)]))
        .collect()
}

#[test]
fn attention_rows_are_distributions_over_the_prompt() {
    let w = common::active_weights(3);
    let mut r = common::rng(5);
    for case in 0..1000 {
        let prompt = embed_prompt(&w, &words(&mut r)).unwrap();
        let mut tape = Tape::new();
        let z = tape.leaf(latent(&mut r), false);
        let prompts = [prompt.tokens.clone()];
        let req = ForwardRequest {
            time_index: &[r.random_range(0..200)],
            prompts: &prompts,
            control: false,
            condition: None,
            mask: MaskMode::None,
            ftr: None,
        };
        let nodes = forward_on_tape(&w, &mut tape, z, &req, None).unwrap();
        let raw = tape.value(nodes.raw_attention);
        let (patches, max_len) = (raw.shape()[1], raw.shape()[2]);
        for p in 0..patches {
            let row = &raw.data()[p * max_len..(p + 1) * max_len];
            let total: f64 = row[..prompt.len()].iter().sum();
            assert!(
                (total - 1.0).abs() < 1e-12,
                "case {case}, patch {p}: {total}"
            );
            assert!(row[..prompt.len()].iter().all(|&v| v > 0.0));
            assert!(row[prompt.len()..].iter().all(|&v| v == 0.0));
        }
    }
}

#[test]
fn permuting_the_prompt_permutes_the_maps() {
    let w = common::active_weights(4);
    let mut r = common::rng(6);
    for _ in 0..20 {
        let z = latent(&mut r);
        let wa = vec![
            token_for(ShapeKind::Circle),
            token_for(ShapeKind::Square),
            token_for(ShapeKind::Star),
        ];
        let wb = vec![wa[2], wa[0], wa[1]];
        let t = r.random_range(0..200);
        let pa = embed_prompt(&w, &wa).unwrap();
        let pb = embed_prompt(&w, &wb).unwrap();
        let (ea, sa) =
            denoiser_forward(&w, &z, t, 1, &pa, None, false, MaskMode::None, None).unwrap();
        let (eb, sb) =
            denoiser_forward(&w, &z, t, 1, &pb, None, false, MaskMode::None, None).unwrap();
        let close = |a: &Tensor<f64>, b: &Tensor<f64>| {
            a.data()
                .iter()
                .zip(b.data())
                .all(|(x, y)| (x - y).abs() < 1e-12)
        };
        assert!(close(&ea, &eb));
        // Positions: a = [BG, circle, square, star], b = [BG, star, circle, square].
        for (ia, ib) in [(0, 0), (1, 2), (2, 3), (3, 1)] {
            assert!(close(sa.map(ia), sb.map(ib)), "position {ia} vs {ib}");
        }
    }
}

#[test]
fn empty_feature_mask_equals_the_unconditioned_forward() {
    let w = common::active_weights(8);
    let empty = ControlMask::all_zeros(32);
    let mut r = common::rng(9);
    for _ in 0..10 {
        let z = latent(&mut r);
        let c = condition(&mut r);
        let p = embed_prompt(&w, &words(&mut r)).unwrap();
        let t = r.random_range(0..200);
        let (with, sw) = denoiser_forward(
            &w,
            &z,
            t,
            1,
            &p,
            Some(&c),
            true,
            MaskMode::Fmc(&empty),
            None,
        )
        .unwrap();
        let (without, so) =
            denoiser_forward(&w, &z, t, 1, &p, None, false, MaskMode::None, None).unwrap();
        assert!(with.bitwise_eq(&without));
        assert_eq!(sw, so);
        let (full, _) =
            denoiser_forward(&w, &z, t, 1, &p, Some(&c), true, MaskMode::None, None).unwrap();
        assert!(
            !full.bitwise_eq(&without),
            "the control branch should matter with nonzero projections"
        );
    }
}

#[test]
fn zero_projections_make_any_mask_inert() {
    let w = localctl::Weights64::init(&localctl::model::ArchConfig::default(), 2).unwrap();
    assert!(w.control_is_identity());
    let mut r = common::rng(10);
    for _ in 0..10 {
        let z = latent(&mut r);
        let c = condition(&mut r);
        let m = ControlMask::from_image_mask(common::mask(32, &mut r)).unwrap();
        let p = embed_prompt(&w, &words(&mut r)).unwrap();
        let t = r.random_range(0..200);
        let (plain, _) =
            denoiser_forward(&w, &z, t, 1, &p, None, false, MaskMode::None, None).unwrap();
        for mode in [MaskMode::Fmc(&m), MaskMode::None] {
            let (out, _) = denoiser_forward(&w, &z, t, 1, &p, Some(&c), true, mode, None).unwrap();
            assert!(out.bitwise_eq(&plain));
        }
    }
}

#[test]
fn feature_mask_with_a_region_changes_the_output() {
    let w = common::active_weights(12);
    let region = BinaryMask::from_fn(32, 32, |x, y| x < 8 && y < 8);
    let m = ControlMask::from_image_mask(region).unwrap();
    let mut r = common::rng(13);
    let z = latent(&mut r);
    let c = condition(&mut r);
    let p = embed_prompt(&w, &[token_for(ShapeKind::Circle)]).unwrap();
    let (masked, _) =
        denoiser_forward(&w, &z, 50, 1, &p, Some(&c), true, MaskMode::Fmc(&m), None).unwrap();
    let (plain, _) =
        denoiser_forward(&w, &z, 50, 1, &p, None, false, MaskMode::None, None).unwrap();
    assert!(!masked.bitwise_eq(&plain));
}

#[test]
fn attention_only_pass_matches_the_full_pass() {
    let w = common::active_weights(14);
    let mut r = common::rng(15);
    for _ in 0..10 {
        let prompts = [embed_prompt(&w, &words(&mut r)).unwrap().tokens];
        let z = latent(&mut r);
        let c = condition(&mut r);
        let req = ForwardRequest {
            time_index: &[r.random_range(0..200)],
            prompts: &prompts,
            control: true,
            condition: Some(&c),
            mask: MaskMode::None,
            ftr: None,
        };
        let mut full = Tape::new();
        let zf = full.leaf(z.clone(), false);
        let a = forward_on_tape(&w, &mut full, zf, &req, None).unwrap();
        let mut part = Tape::new();
        let zp = part.leaf(z, false);
        let b = attention_on_tape(&w, &mut part, zp, &req, None).unwrap();
        assert!(full
            .value(a.raw_attention)
            .bitwise_eq(part.value(b.raw_attention)));
        assert!(full.value(a.attention).bitwise_eq(part.value(b.attention)));
    }
}
