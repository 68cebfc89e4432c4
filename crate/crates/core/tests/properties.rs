mod support;

use proptest::prelude::*;
use rand::Rng;
use steadyvr::flow::{
    estimate_flow, fb_confidence, occlusion_mask, resample_flow, warp, FlowField, OcclusionMask,
};
use steadyvr::latentwarp::{warp_blend, warp_keyframe_chain, LatentGrid};
use steadyvr::metrics::{psnr, ssim, warping_error};
use steadyvr::tokenmerge::{
    anneal_ratio, correspondence_merge_set, cosine_correspondence, cosine_scores,
    hybrid_merge_pass, merge, merge_count, restore_padding, select_top_r, spatial_weight,
    split_src_tar, strip_padding, AnnealParams, MergeMode, ScoreMatrix, TokenMatrix,
};
use steadyvr::toydiff::self_attention;
use steadyvr::{FrameSequence, Grid};
use support::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn warp_is_linear(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut r = rng(seed);
        let (h, w) = (r.random_range(1..8), r.random_range(1..8));
        let g1 = random_grid(&mut r, h, w, 2, -1.0, 1.0);
        let g2 = random_grid(&mut r, h, w, 2, -1.0, 1.0);
        let f = random_flow(&mut r, h, w, 4.0);
        let combo = g1.zip_with(&g2, |x, y| a * x + b * y).unwrap();
        let lhs = warp(&combo, &f).unwrap();
        let rhs = warp(&g1, &f).unwrap().zip_with(&warp(&g2, &f).unwrap(), |x, y| a * x + b * y).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-9);
    }

    #[test]
    fn zero_flow_warp_is_identity(seed in any::<u64>()) {
        let mut r = rng(seed);
        let (h, w) = (r.random_range(1..8), r.random_range(1..8));
        let g = random_grid(&mut r, h, w, 3, -1.0, 1.0);
        prop_assert_eq!(warp(&g, &FlowField::zeros(h, w)).unwrap(), g);
    }

    #[test]
    fn confidence_in_unit_interval(seed in any::<u64>()) {
        let mut r = rng(seed);
        let (h, w) = (r.random_range(1..8), r.random_range(1..8));
        let fwd = random_flow(&mut r, h, w, 3.0);
        let bwd = random_flow(&mut r, h, w, 3.0);
        let c = fb_confidence(&fwd, &bwd).unwrap();
        prop_assert!(c.grid().data().iter().all(|&s| s > 0.0 && s <= 1.0));
        let u = r.random_range(-1.0..=1.0) * (w as f64);
        let there = FlowField::constant(h, w, u, 0.0).unwrap();
        let back = FlowField::constant(h, w, -u, 0.0).unwrap();
        prop_assert!(fb_confidence(&there, &back).unwrap().grid().data().iter().all(|&s| s == 1.0));
    }

    #[test]
    fn mask_grows_with_threshold(seed in any::<u64>(), t1 in 0.01f64..1.0, t2 in 0.01f64..1.0) {
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let mut r = rng(seed);
        let (h, w) = (r.random_range(1..8), r.random_range(1..8));
        let fwd = random_flow(&mut r, h, w, 2.0);
        let bwd = random_flow(&mut r, h, w, 2.0);
        let a = occlusion_mask(&fwd, &bwd, lo).unwrap();
        let b = occlusion_mask(&fwd, &bwd, hi).unwrap();
        prop_assert!(a.is_binary() && b.is_binary());
        prop_assert!(a.grid().data().iter().zip(b.grid().data()).all(|(x, y)| x <= y));
    }

    #[test]
    fn self_flow_is_zero(seed in any::<u64>(), block in prop::sample::select(vec![1usize, 3, 5]), search in 0usize..3) {
        let mut r = rng(seed);
        let (h, w) = (r.random_range(1..8), r.random_range(1..8));
        let g = random_grid(&mut r, h, w, 3, 0.0, 1.0);
        let f = estimate_flow(&g, &g, block, search).unwrap();
        prop_assert!(f.grid().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn same_size_resample_is_identity(seed in any::<u64>()) {
        let mut r = rng(seed);
        let (h, w) = (r.random_range(1..8), r.random_range(1..8));
        let f = random_flow(&mut r, h, w, 3.0);
        prop_assert_eq!(resample_flow(&f, h, w).unwrap(), f);
    }

    #[test]
    fn top_r_grows_with_ratio(seed in any::<u64>(), r1 in 0.0f64..=1.0, r2 in 0.0f64..=1.0) {
        let (lo, hi) = if r1 <= r2 { (r1, r2) } else { (r2, r1) };
        let mut r = rng(seed);
        let chunk = random_chunk(&mut r, 4, 5, 4, false);
        prop_assume!(chunk.batch() >= 2);
        let split = split_src_tar(&chunk).unwrap();
        let corr = cosine_correspondence(&cosine_scores(&split.src, &split.tar).unwrap());
        let a = select_top_r(&corr, lo).unwrap();
        let b = select_top_r(&corr, hi).unwrap();
        prop_assert_eq!(a.len(), merge_count(lo, corr.pairs.len()));
        prop_assert!(a.len() <= b.len());
        prop_assert!(a.pairs.iter().all(|p| b.pairs.contains(p)));
    }

    #[test]
    fn anneal_is_non_increasing(r0 in 0.0f64..=1.0, delta in 0.1f64..4.0, beg in 0usize..30, len in 1usize..30) {
        let p = AnnealParams::new(r0, delta, beg, beg + len).unwrap();
        let mut prev = f64::INFINITY;
        for i in 0..beg + len + 5 {
            let v = anneal_ratio(i, &p);
            prop_assert!((0.0..=r0 + 1e-15).contains(&v));
            prop_assert!(v <= prev + 1e-15);
            prev = v;
        }
    }

    #[test]
    fn hybrid_pass_keeps_shape_and_groups(seed in any::<u64>(), ratio in 0.0f64..=1.0, spatial in any::<bool>()) {
        let mut r = rng(seed);
        let chunk = random_chunk(&mut r, 4, 6, 6, true);
        let radius = spatial.then_some(2.0);
        let mode = MergeMode::Cosine { spatial_radius: radius };
        let mut attn = |m: &TokenMatrix| self_attention(m, 2.0);
        let out = hybrid_merge_pass(&chunk, mode, ratio, &mut attn).unwrap();
        prop_assert_eq!(out.shape(), chunk.shape());
        prop_assert_eq!(out.layout(), chunk.layout());

        let (content, _) = strip_padding(&chunk);
        let (out_content, _) = strip_padding(&out);
        let (hl, wl) = chunk.layout();
        let (hc, wc) = chunk.content();
        if content.batch() < 2 {
            return Ok(());
        }
        let split = split_src_tar(&content).unwrap();
        let set = correspondence_merge_set(&split, mode, ratio).unwrap();
        if set.is_empty() {
            return Ok(());
        }
        for f in 0..chunk.batch() {
            for y in 0..hl {
                for x in 0..wl {
                    if y >= hc || x >= wc {
                        prop_assert_eq!(out.token(f, y * wl + x), chunk.token(f, y * wl + x));
                    }
                }
            }
        }
        let (_, record) = merge(&split, &set).unwrap();
        let a = hc * wc;
        for group in record.groups() {
            let first = out_content.token(group[0] / a, group[0] % a);
            for &slot in &group[1..] {
                prop_assert_eq!(out_content.token(slot / a, slot % a), first);
            }
        }
    }

    #[test]
    fn padding_round_trips(seed in any::<u64>()) {
        let mut r = rng(seed);
        let chunk = random_chunk(&mut r, 4, 7, 5, true);
        let (content, spec) = strip_padding(&chunk);
        prop_assert_eq!(content.layout(), chunk.content());
        prop_assert_eq!(restore_padding(&content, &spec).unwrap(), chunk);
    }

    #[test]
    fn zero_ratio_is_bit_identical(seed in any::<u64>()) {
        let mut r = rng(seed);
        let chunk = random_chunk(&mut r, 4, 8, 16, true);
        let mut ident = |m: &TokenMatrix| m.clone();
        let out = hybrid_merge_pass(&chunk, MergeMode::Cosine { spatial_radius: None }, 0.0, &mut ident).unwrap();
        prop_assert_eq!(out, chunk);
    }

    #[test]
    fn blend_is_convex(seed in any::<u64>()) {
        let mut r = rng(seed);
        let (h, w, c) = (r.random_range(1..7), r.random_range(1..7), r.random_range(1..4));
        let own = random_grid(&mut r, h, w, c, -1.0, 1.0);
        let src = random_grid(&mut r, h, w, c, -1.0, 1.0);
        let flow = random_flow(&mut r, h, w, 2.0);
        let warped = warp(&src, &flow).unwrap();
        let ones = OcclusionMask::filled(h, w, 1.0).unwrap();
        let zeros = OcclusionMask::filled(h, w, 0.0).unwrap();
        prop_assert_eq!(warp_blend(&own, &src, &flow, &ones).unwrap(), own.clone());
        prop_assert!(warp_blend(&own, &src, &flow, &zeros).unwrap().max_abs_diff(&warped) < 1e-12);
        let mask = random_mask(&mut r, h, w);
        let out = warp_blend(&own, &src, &flow, &mask).unwrap();
        for ((o, a), b) in out.data().iter().zip(own.data()).zip(warped.data()) {
            prop_assert!(*o >= a.min(*b) - 1e-12 && *o <= a.max(*b) + 1e-12);
        }
    }

    #[test]
    fn chain_is_idempotent(seed in any::<u64>(), n in 1usize..5) {
        let mut r = rng(seed);
        let (h, w) = (r.random_range(1..6), r.random_range(1..6));
        let keys: Vec<LatentGrid> = (0..n)
            .map(|i| LatentGrid::new(random_grid(&mut r, h, w, 2, -1.0, 1.0), i, 0).unwrap())
            .collect();
        let flows: Vec<_> = (1..n).map(|_| random_flow(&mut r, h, w, 2.0)).collect();
        let masks: Vec<_> = (1..n).map(|_| random_mask(&mut r, h, w)).collect();
        let once = warp_keyframe_chain(&keys, &flows, &masks).unwrap();
        let twice = warp_keyframe_chain(&once, &flows, &masks).unwrap();
        for (a, b) in once.iter().zip(&twice) {
            prop_assert!(a.data.max_abs_diff(&b.data) < 1e-12);
        }
        prop_assert_eq!(&once[0], &keys[0]);
    }

    #[test]
    fn quality_metrics_are_symmetric(seed in any::<u64>()) {
        let mut r = rng(seed);
        let (h, w) = (r.random_range(1..12), r.random_range(1..12));
        let a = random_grid(&mut r, h, w, 3, 0.0, 1.0);
        let b = random_grid(&mut r, h, w, 3, 0.0, 1.0);
        prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        prop_assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
    }

    #[test]
    fn warping_error_grows_with_flicker(seed in any::<u64>(), s1 in 0.0f64..0.2, s2 in 0.0f64..0.2) {
        let (lo, hi) = if s1 <= s2 { (s1, s2) } else { (s2, s1) };
        let mut r = rng(seed);
        let (h, w) = (r.random_range(1..8), r.random_range(1..8));
        let base = random_grid(&mut r, h, w, 3, 0.3, 0.7);
        let pattern: Vec<Grid> = (0..4).map(|_| random_grid(&mut r, h, w, 3, -1.0, 1.0)).collect();
        let video = |s: f64| {
            FrameSequence::new(pattern.iter().map(|p| base.zip_with(p, |x, n| x + s * n).unwrap()).collect()).unwrap()
        };
        let fields = vec![FlowField::zeros(h, w); 3];
        let masks = vec![OcclusionMask::filled(h, w, 0.0).unwrap(); 3];
        let a = warping_error(&video(lo), &fields, Some(&masks)).unwrap();
        let b = warping_error(&video(hi), &fields, Some(&masks)).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!(x <= &(y + 1e-15));
        }
        let still = warping_error(&video(0.0), &fields, Some(&masks)).unwrap();
        prop_assert!(still.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn spatial_weight_only_shrinks(seed in any::<u64>(), radius in 0.5f64..8.0) {
        let mut r = rng(seed);
        let (n, m) = (r.random_range(1..10), r.random_range(1..10));
        let data: Vec<f64> = (0..n * m).map(|_| r.random_range(0.0..1.0)).collect();
        let scores = ScoreMatrix::from_vec(n, m, data).unwrap();
        let pos = |r: &mut rand_chacha::ChaCha8Rng, k| -> Vec<(f64, f64)> {
            (0..k).map(|_| (r.random_range(0..8) as f64, r.random_range(0..8) as f64)).collect()
        };
        let (sp, tp) = (pos(&mut r, n), pos(&mut r, m));
        let weighted = spatial_weight(&scores, &sp, &tp, radius).unwrap();
        for (i, s) in sp.iter().enumerate() {
            for (j, t) in tp.iter().enumerate() {
                prop_assert!(weighted.get(i, j) <= scores.get(i, j));
                let d2 = (s.0 - t.0).powi(2) + (s.1 - t.1).powi(2);
                if d2 < radius {
                    prop_assert_eq!(weighted.get(i, j), scores.get(i, j));
                }
            }
        }
    }
}
