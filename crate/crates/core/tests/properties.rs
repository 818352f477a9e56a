use chromalink::autograd::{Graph, Tensor};
use chromalink::colorspace::{cielab_to_srgb, grayscale_of, lab_to_rgb, rgb_to_lab, srgb_to_cielab};
use chromalink::correspondence::non_local;
use chromalink::data::{synth_clip, SynthSpec};
use chromalink::flowlab::{decode_flo, encode_flo, occlusion_mask, synth_flow_translate, OcclusionThresholds};
use chromalink::losses::{l1_loss, smooth_loss, temporal_loss, warp_by_flow};
use chromalink::metrics::{colorfulness, warp_error_pairs};
use chromalink::pipeline::split_into_blocks;
use chromalink::{FlowDirection, FlowField, LabFrame, OcclusionMask};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rt(seed: u64, shape: &[usize], amp: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-amp..amp))
}

fn random_flow(seed: u64, h: usize, w: usize, amp: f32) -> FlowField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    FlowField::new(Tensor::from_fn(&[2, h, w], |_| rng.gen_range(-amp..amp)), FlowDirection::Backward).unwrap()
}

fn random_mask(seed: u64, h: usize, w: usize) -> OcclusionMask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    OcclusionMask::from_fn(h, w, |_, _| rng.gen_bool(0.7))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rgb_lab_round_trip_within_one_level(r in 0.0f64..=1.0, g in 0.0f64..=1.0, b in 0.0f64..=1.0) {
        let back = cielab_to_srgb(srgb_to_cielab([r, g, b]));
        for (x, y) in back.iter().zip([r, g, b]) {
            prop_assert!((x - y).abs() < 1.0 / 255.0);
        }
    }

    #[test]
    fn gray_rgb_has_negligible_chroma(v in 0.0f64..=1.0) {
        let lab = rgb_to_lab(&Tensor::full(&[3, 2, 2], v)).unwrap();
        prop_assert!(lab.ab.max_abs() < 0.01);
    }

    #[test]
    fn grayscale_of_is_colorless(seed in any::<u64>()) {
        let f = LabFrame::new(rt(seed, &[6, 5], 1.0), rt(seed ^ 1, &[2, 6, 5], 0.8)).unwrap();
        let g = grayscale_of(&f);
        prop_assert_eq!(g.ab.max_abs(), 0.0);
        prop_assert!(colorfulness(&lab_to_rgb(&g)).unwrap() < 1e-6);
    }

    #[test]
    fn warp_is_convex_and_bounded(seed in any::<u64>(), nb in 1usize..20, ny in 1usize..20, d in 1usize..12, tau in 1e-3f64..2.0) {
        let (fb, fy, yab) = (rt(seed, &[nb, d], 4.0), rt(seed ^ 2, &[ny, d], 4.0), rt(seed ^ 3, &[ny, 2], 1.0));
        let o = non_local(&fb, &fy, &yab, tau).unwrap();
        prop_assert!(o.m.max_abs() <= 1.0 + 1e-6);
        for c in 0..2 {
            let col: Vec<f64> = (0..ny).map(|j| yab.data()[j * 2 + c]).collect();
            let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for i in 0..nb {
                let v = o.w.data()[i * 2 + c];
                prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }
        for (row, s) in o.m.data().chunks(ny).zip(o.s.data()) {
            prop_assert_eq!(row.iter().cloned().fold(f64::NEG_INFINITY, f64::max), *s);
        }
    }

    #[test]
    fn correlation_ignores_feature_scale(seed in any::<u64>(), c in 1e-3f64..1e3) {
        let (fb, fy, yab) = (rt(seed, &[6, 4], 1.0), rt(seed ^ 5, &[5, 4], 1.0), rt(seed ^ 6, &[5, 2], 1.0));
        let a = non_local(&fb, &fy, &yab, 0.01).unwrap();
        let b = non_local(&fb.map(|v| v * c), &fy.map(|v| v * c), &yab, 0.01).unwrap();
        for (x, y) in a.m.data().iter().zip(b.m.data()) {
            prop_assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn losses_are_non_negative(seed in any::<u64>()) {
        let (h, w) = (6, 7);
        let g = Graph::<f64>::new();
        let a = g.constant(rt(seed, &[1, 2, h, w], 1.0));
        let b = g.constant(rt(seed ^ 1, &[1, 2, h, w], 1.0));
        let l = g.constant(rt(seed ^ 2, &[1, 1, h, w], 1.0));
        let prev = g.constant(rt(seed ^ 3, &[2, h, w], 1.0));
        let cur = g.constant(rt(seed ^ 4, &[2, h, w], 1.0));
        let flow = random_flow(seed, h, w, 3.0);
        let mask = random_mask(seed, h, w);
        for v in [
            l1_loss(&g, a, b).unwrap(),
            smooth_loss(&g, a, l, 0.1).unwrap(),
            temporal_loss(&g, prev, cur, &flow, &mask).unwrap(),
        ] {
            prop_assert!(g.scalar_value(v) >= 0.0);
        }
        prop_assert_eq!(g.scalar_value(l1_loss(&g, a, a).unwrap()), 0.0);
    }

    #[test]
    fn temporal_loss_ignores_content_outside_mask(seed in any::<u64>()) {
        let (h, w) = (8, 9);
        let flow = random_flow(seed, h, w, 2.5);
        let mask = random_mask(seed ^ 9, h, w);
        let prev = rt(seed, &[2, h, w], 1.0);
        let cur = rt(seed ^ 1, &[2, h, w], 1.0);
        let noise = rt(seed ^ 2, &[2, h, w], 5.0);
        let mut edited = cur.clone();
        for c in 0..2 {
            for y in 0..h {
                for x in 0..w {
                    if !mask.get(x, y) {
                        edited.data_mut()[(c * h + y) * w + x] += noise.data()[(c * h + y) * w + x];
                    }
                }
            }
        }
        let g = Graph::<f64>::new();
        let p = g.constant(prev);
        let a = g.scalar_value(temporal_loss(&g, p, g.constant(cur), &flow, &mask).unwrap());
        let b = g.scalar_value(temporal_loss(&g, p, g.constant(edited), &flow, &mask).unwrap());
        prop_assert_eq!(a, b);
    }

    #[test]
    fn warp_error_and_temporal_loss_share_a_kernel(seed in any::<u64>()) {
        let (h, w) = (7, 10);
        let flow = random_flow(seed, h, w, 2.0);
        let mask = random_mask(seed ^ 4, h, w);
        prop_assume!(mask.count() > 0);
        let frames = vec![rt(seed, &[3, h, w], 1.0), rt(seed ^ 1, &[3, h, w], 1.0)];
        let we = warp_error_pairs(&frames, std::slice::from_ref(&flow), std::slice::from_ref(&mask)).unwrap()[0];
        let g = Graph::<f64>::new();
        let t = g.scalar_value(
            temporal_loss(&g, g.constant(frames[0].clone()), g.constant(frames[1].clone()), &flow, &mask).unwrap(),
        );
        // Temporal loss averages over every pixel, warp error over masked ones, ×100.
        let rescaled = 100.0 * t * (h * w) as f64 / mask.count() as f64;
        prop_assert!((we - rescaled).abs() <= 1e-9 * we.abs().max(1.0));
    }

    #[test]
    fn blocks_concatenate_back(len in 1usize..40, n in 1usize..8) {
        let frames: Vec<usize> = (0..len).collect();
        let blocks = split_into_blocks(&frames, n).unwrap();
        prop_assert_eq!(blocks.concat(), frames.clone());
        prop_assert_eq!(blocks.len(), len.div_ceil(n));
        for b in &blocks[..blocks.len() - 1] {
            prop_assert_eq!(b.len(), n);
        }
        prop_assert!(!blocks.last().unwrap().is_empty());
    }

    #[test]
    fn flo_round_trip_is_bit_exact(seed in any::<u64>(), h in 1usize..9, w in 1usize..9) {
        let f = random_flow(seed, h, w, 50.0);
        let back = decode_flo(&encode_flo(&f), std::path::Path::new("mem.flo"), FlowDirection::Backward).unwrap();
        prop_assert_eq!(back.uv.data(), f.uv.data());
    }

    #[test]
    fn consistent_translation_is_unoccluded_in_bounds(dx in -3i32..=3, dy in -3i32..=3) {
        let (h, w) = (12, 14);
        let (fwd, bwd) = synth_flow_translate(h, w, dx as f32, dy as f32).unwrap();
        let m = occlusion_mask(&bwd, &fwd, OcclusionThresholds::default()).unwrap();
        for y in 0..h {
            for x in 0..w {
                let (sx, sy) = (x as i32 - dx, y as i32 - dy);
                if sx >= 0 && sy >= 0 && sx < w as i32 && sy < h as i32 {
                    prop_assert!(m.get(x, y), "({x},{y}) masked for shift ({dx},{dy})");
                }
            }
        }
        prop_assert!(m.data.iter().all(|&v| v == 0 || v == 1));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn synthetic_flows_explain_frames(seed in any::<u64>()) {
        let clip = synth_clip(&SynthSpec::new(seed, 4, 24, 32, 3)).unwrap();
        for t in 0..3 {
            let prev = clip.rgb[t].cast::<f64>();
            let next = clip.rgb[t + 1].cast::<f64>();
            let warped = warp_by_flow(&prev, &clip.bwd[t]).unwrap();
            let mask = &clip.masks[t];
            for c in 0..3 {
                for y in 0..24 {
                    for x in 0..32 {
                        if mask.get(x, y) {
                            let i = (c * 24 + y) * 32 + x;
                            prop_assert!((warped.data()[i] - next.data()[i]).abs() < 1e-6);
                        }
                    }
                }
            }
        }
    }
}
