mod support;

use rand::Rng;
use steadyvr::flow::{estimate_flow, fb_confidence, warp};
use steadyvr::latentwarp::warp_blend;
use steadyvr::metrics::{interpolation_error, psnr, warping_error};
use steadyvr::tokenmerge::{
    cosine_correspondence, cosine_scores, flow_correspondence, merge, select_top_r, spatial_weight,
    split_src_tar, TokenFlow,
};
use steadyvr::FrameSequence;
use support::*;

const TOL: f64 = 1e-6;
const CASES: u64 = 60;

#[test]
fn warp_matches_oracle() {
    for seed in 0..CASES {
        let mut r = rng(seed);
        let (h, w, c) = (
            r.random_range(1..9),
            r.random_range(1..9),
            r.random_range(1..4),
        );
        let g = random_grid(&mut r, h, w, c, -1.0, 1.0);
        let f = random_flow(&mut r, h, w, 5.0);
        let got = warp(&g, &f).unwrap();
        assert!(
            max_diff(got.data(), warp_oracle(&g, &f).data()) < TOL,
            "seed {seed}"
        );
    }
}

#[test]
fn fb_confidence_matches_oracle() {
    for seed in 0..CASES {
        let mut r = rng(100 + seed);
        let (h, w) = (r.random_range(1..9), r.random_range(1..9));
        let fwd = random_flow(&mut r, h, w, 3.0);
        let bwd = random_flow(&mut r, h, w, 3.0);
        let got = fb_confidence(&fwd, &bwd).unwrap();
        assert!(
            max_diff(got.grid().data(), &fb_confidence_oracle(&fwd, &bwd)) < TOL,
            "seed {seed}"
        );
    }
}

#[test]
fn cosine_correspondence_matches_oracle() {
    for seed in 0..CASES {
        let mut r = rng(200 + seed);
        let mut chunk = random_chunk(&mut r, 4, 6, 8, false);
        while chunk.batch() < 2 {
            chunk = random_chunk(&mut r, 4, 6, 8, false);
        }
        let split = split_src_tar(&chunk).unwrap();
        let scores = cosine_scores(&split.src, &split.tar).unwrap();
        let expect_scores = cosine_oracle(&rows(&split.src), &rows(&split.tar));
        for (i, row) in expect_scores.iter().enumerate() {
            assert!(max_diff(scores.row(i), row) < TOL);
        }
        let corr = cosine_correspondence(&scores);
        for (p, (j, s)) in corr.pairs.iter().zip(argmax_oracle(&expect_scores)) {
            assert_eq!(p.target, Some(j), "seed {seed}");
            assert!((p.criterion - s).abs() < TOL);
        }

        let radius = r.random_range(0.5..6.0);
        let weighted = spatial_weight(
            &scores,
            &split.src_positions(),
            &split.tar_positions(),
            radius,
        )
        .unwrap();
        let expect = spatial_oracle(
            &expect_scores,
            &split.src_positions(),
            &split.tar_positions(),
            radius,
        );
        for (i, row) in expect.iter().enumerate() {
            assert!(max_diff(weighted.row(i), row) < TOL);
        }
        let corr = cosine_correspondence(&weighted);
        for (p, (j, _)) in corr.pairs.iter().zip(argmax_oracle(&expect)) {
            assert_eq!(p.target, Some(j), "seed {seed}");
        }
    }
}

#[test]
fn flow_correspondence_matches_oracle() {
    for seed in 0..CASES {
        let mut r = rng(300 + seed);
        let mut chunk = random_chunk(&mut r, 4, 7, 4, false);
        while chunk.batch() < 2 {
            chunk = random_chunk(&mut r, 4, 7, 4, false);
        }
        let (h, w) = chunk.layout();
        let raw: Vec<_> = (0..chunk.batch())
            .map(|_| {
                Some((
                    random_flow(&mut r, h, w, 3.0),
                    random_confidence(&mut r, h, w),
                ))
            })
            .collect();
        let flows: Vec<Option<TokenFlow>> = raw
            .iter()
            .map(|p| {
                p.as_ref().map(|(f, c)| TokenFlow {
                    flow: f.clone(),
                    confidence: c.clone(),
                })
            })
            .collect();
        let split = split_src_tar(&chunk).unwrap();
        let got = flow_correspondence(&split, &flows).unwrap();
        let expect = flow_corr_oracle(h, w, &split.src_slots, &raw);
        assert_eq!(got.pairs.len(), expect.len());
        for (p, (t, c)) in got.pairs.iter().zip(expect) {
            assert_eq!(p.target, t, "seed {seed}");
            assert!((p.criterion - c).abs() < TOL);
        }
    }
}

#[test]
fn merge_group_means_match_oracle() {
    for seed in 0..CASES {
        let mut r = rng(400 + seed);
        let mut chunk = random_chunk(&mut r, 4, 6, 6, false);
        while chunk.batch() < 2 {
            chunk = random_chunk(&mut r, 4, 6, 6, false);
        }
        let split = split_src_tar(&chunk).unwrap();
        let corr = cosine_correspondence(&cosine_scores(&split.src, &split.tar).unwrap());
        let ratio = r.random_range(0.0..=1.0);
        let set = select_top_r(&corr, ratio).unwrap();
        let (merged, _) = merge(&split, &set).unwrap();
        let src = rows(&split.src);
        let expect = group_means_oracle(&src, &rows(&split.tar), &set.pairs);
        let a = split.tar.rows();
        assert_eq!(merged.rows(), a + src.len() - set.len());
        for (j, row) in expect.iter().enumerate() {
            assert!(max_diff(merged.row(j), row) < TOL, "seed {seed}");
        }
        let kept: Vec<usize> = (0..src.len())
            .filter(|s| !set.pairs.iter().any(|p| p.0 == *s))
            .collect();
        for (k, s) in kept.iter().enumerate() {
            assert_eq!(merged.row(a + k), &src[*s][..]);
        }
    }
}

#[test]
fn warping_error_matches_oracle() {
    for seed in 0..CASES {
        let mut r = rng(500 + seed);
        let (n, h, w) = (
            r.random_range(2..5),
            r.random_range(1..8),
            r.random_range(1..8),
        );
        let seq = random_seq(&mut r, n, h, w);
        let fields: Vec<_> = (1..n).map(|_| random_flow(&mut r, h, w, 3.0)).collect();
        let masks: Vec<_> = (1..n).map(|_| random_mask(&mut r, h, w)).collect();
        let got = warping_error(&seq, &fields, Some(&masks)).unwrap();
        assert!(
            max_diff(&got, &e_warp_oracle(seq.frames(), &fields, &masks)) < TOL,
            "seed {seed}"
        );
    }
}

#[test]
fn interpolation_error_matches_oracle() {
    for seed in 0..CASES {
        let mut r = rng(600 + seed);
        let (n, h, w) = (
            r.random_range(3..6),
            r.random_range(1..8),
            r.random_range(1..8),
        );
        let seq = random_seq(&mut r, n, h, w);
        let fwd: Vec<_> = (2..n).map(|_| random_flow(&mut r, h, w, 4.0)).collect();
        let bwd: Vec<_> = (2..n).map(|_| random_flow(&mut r, h, w, 4.0)).collect();
        let got = interpolation_error(&seq, &fwd, &bwd).unwrap();
        assert!(
            max_diff(&got, &e_inter_oracle(seq.frames(), &fwd, &bwd)) < TOL,
            "seed {seed}"
        );
    }
}

#[test]
fn estimate_flow_matches_brute_force() {
    for seed in 0..CASES {
        let mut r = rng(700 + seed);
        let (h, w) = (r.random_range(1..8), r.random_range(1..8));
        let block = [1, 3, 5][r.random_range(0..3)];
        let search = r.random_range(0..3);
        // Quantized values make exact cost ties common.
        let src = steadyvr::Grid::from_fn(h, w, 2, |_, _, _| r.random_range(0..3) as f64);
        let dst = steadyvr::Grid::from_fn(h, w, 2, |_, _, _| r.random_range(0..3) as f64);
        let got = estimate_flow(&src, &dst, block, search).unwrap();
        let expect = estimate_flow_oracle(&src, &dst, block, search);
        for (i, (u, v)) in expect.into_iter().enumerate() {
            let (y, x) = (i / w, i % w);
            assert_eq!(
                (got.u(y, x), got.v(y, x)),
                (u as f64, v as f64),
                "seed {seed} at {y},{x}"
            );
        }
    }
}

#[test]
fn warp_blend_matches_oracle() {
    for seed in 0..CASES {
        let mut r = rng(800 + seed);
        let (h, w, c) = (
            r.random_range(1..8),
            r.random_range(1..8),
            r.random_range(1..5),
        );
        let own = random_grid(&mut r, h, w, c, -2.0, 2.0);
        let source = random_grid(&mut r, h, w, c, -2.0, 2.0);
        let flow = random_flow(&mut r, h, w, 3.0);
        let mask = random_mask(&mut r, h, w);
        let got = warp_blend(&own, &source, &flow, &mask).unwrap();
        assert!(max_diff(got.data(), blend_oracle(&own, &source, &flow, &mask).data()) < TOL);
    }
}

#[test]
fn psnr_matches_oracle() {
    for seed in 0..CASES {
        let mut r = rng(900 + seed);
        let (h, w) = (r.random_range(1..8), r.random_range(1..8));
        let seq: FrameSequence = random_seq(&mut r, 2, h, w);
        let (a, b) = (&seq.frames()[0], &seq.frames()[1]);
        assert!((psnr(a, b).unwrap() - psnr_oracle(a, b)).abs() < TOL);
    }
}
