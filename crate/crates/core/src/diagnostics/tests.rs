use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::*;
use crate::synth::{gen_split, SynthSpec};

fn gaussian_set(rng: &mut ChaCha8Rng, n: usize, d: usize, shift: f64) -> ReprSet {
    let v = (0..n)
        .map(|_| (0..d).map(|_| rng.sample::<f64, _>(StandardNormal) + shift).collect())
        .collect();
    ReprSet::new("g", v).unwrap()
}

/// Straight transcription of the unbiased estimator with the bandwidth
/// supplied by the caller.
fn mmd_oracle(x: &[Vec<f64>], y: &[Vec<f64>], sigma: f64) -> f64 {
    let k = |a: &Vec<f64>, b: &Vec<f64>| {
        let d2: f64 = a.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum();
        (-d2 / (2.0 * sigma * sigma)).exp()
    };
    let (m, n) = (x.len(), y.len());
    let mut xx = 0.0;
    for i in 0..m {
        for j in 0..m {
            if i != j {
                xx += k(&x[i], &x[j]);
            }
        }
    }
    let mut yy = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                yy += k(&y[i], &y[j]);
            }
        }
    }
    let mut xy = 0.0;
    for a in x {
        for b in y {
            xy += k(a, b);
        }
    }
    xx / (m * (m - 1)) as f64 + yy / (n * (n - 1)) as f64 - 2.0 * xy / (m * n) as f64
}

#[test]
fn pooling_cases() {
    let c = Tensor::from_fn(&[2, 3, 2], |i| if i % 2 == 0 { 1.5 } else { -2.0 });
    assert_eq!(pool_video_repr(&c).unwrap(), vec![1.5, -2.0]);
    let sym = Tensor::new(&[1, 2, 3], vec![1.0, -2.0, 3.0, -1.0, 2.0, -3.0]).unwrap();
    assert_eq!(pool_video_repr(&sym).unwrap(), vec![0.0; 3]);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let h = Tensor::randn(&[4, 5, 3], 1.0, &mut rng);
    let got = pool_video_repr(&h).unwrap();
    for k in 0..3 {
        let mut s = 0.0;
        for t in 0..4 {
            for n in 0..5 {
                s += h.at(&[t, n, k]);
            }
        }
        assert!((got[k] - s / 20.0).abs() < 1e-14);
    }
    assert!(pool_video_repr(&Tensor::zeros(&[0, 3, 2])).is_err());
    assert!(pool_video_repr(&Tensor::zeros(&[3, 2])).is_err());
}

#[test]
fn mmd_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = gaussian_set(&mut rng, 17, 3, 0.0);
    let y = gaussian_set(&mut rng, 11, 3, 0.4);
    let r = mmd2(&x, &y).unwrap();
    // brute-force median over all pooled pairs
    let all: Vec<&Vec<f64>> = x.vectors.iter().chain(&y.vectors).collect();
    let mut d = Vec::new();
    for i in 0..all.len() {
        for j in 0..i {
            d.push(all[i].iter().zip(all[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt());
        }
    }
    d.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let med = (d[d.len() / 2 - 1] + d[d.len() / 2]) / 2.0;
    assert_eq!(d.len() % 2, 0);
    assert!((r.bandwidth - med).abs() < 1e-12);
    assert!((r.raw - mmd_oracle(&x.vectors, &y.vectors, med)).abs() < 1e-12);
    assert_eq!(r.estimate, r.raw.max(0.0));
    assert_eq!((r.n_x, r.n_y), (17, 11));
}

#[test]
fn biased_self_mmd_is_exactly_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = gaussian_set(&mut rng, 30, 4, 0.0);
    let r = mmd2(&x, &x).unwrap();
    assert_eq!(r.biased, 0.0);
    assert!(r.raw.abs() < 0.1);
}

#[test]
fn identical_points_fall_back_to_unit_bandwidth() {
    let x = ReprSet::new("c", vec![vec![1.0, 2.0]; 4]).unwrap();
    let r = mmd2(&x, &x).unwrap();
    assert!(r.bandwidth_fallback);
    assert_eq!(r.bandwidth, 1.0);
    assert_eq!(r.raw, 0.0);
}

#[test]
fn mmd_rejects_bad_input() {
    let one = ReprSet::new("a", vec![vec![0.0]]).unwrap();
    let two = ReprSet::new("b", vec![vec![0.0], vec![1.0]]).unwrap();
    assert!(mmd2(&one, &two).is_err());
    let wide = ReprSet::new("c", vec![vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
    assert!(mmd2(&two, &wide).is_err());
    assert!(ReprSet::new("d", vec![vec![0.0], vec![0.0, 1.0]]).is_err());
    assert!(ReprSet::new("e", vec![vec![f64::NAN]]).is_err());
}

#[test]
fn mmd_calibration() {
    let mut same = 0.0;
    let mut shifted = 0.0;
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let x = gaussian_set(&mut rng, 200, 8, 0.0);
        let y = gaussian_set(&mut rng, 200, 8, 0.0);
        let z = gaussian_set(&mut rng, 200, 8, 1.0);
        same += mmd2(&x, &y).unwrap().raw;
        shifted += mmd2(&x, &z).unwrap().raw;
    }
    assert!((same / 20.0).abs() <= 0.02, "{}", same / 20.0);
    assert!(shifted / 20.0 >= 0.1, "{}", shifted / 20.0);
}

#[test]
fn simrank_cases() {
    let train = ReprSet::new("t", vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    let test = ReprSet::new(
        "e",
        (0..10).map(|i| vec![(i as f64 * 0.3).cos(), -(i as f64 * 0.3).sin()]).collect(),
    )
    .unwrap();
    let s = simrank_split(&train, &test, 0.2).unwrap();
    assert_eq!((s.top.len(), s.bottom.len()), (2, 2));
    assert!((s.scores[0] - 1.0).abs() < 1e-12);
    assert_eq!(s.top[0], 0);
    for (i, v) in test.vectors.iter().enumerate() {
        let mut best = f64::NEG_INFINITY;
        for r in &train.vectors {
            let dot = v[0] * r[0] + v[1] * r[1];
            let c = dot / ((v[0] * v[0] + v[1] * v[1]).sqrt() * (r[0] * r[0] + r[1] * r[1]).sqrt());
            best = best.max(c);
        }
        assert!((s.scores[i] - best).abs() < 1e-12);
    }
    for &b in &s.bottom {
        for i in 0..10 {
            if !s.bottom.contains(&i) {
                assert!(s.scores[b] <= s.scores[i]);
            }
        }
    }
    assert!(simrank_split(&train, &test, 0.6).is_err());
    assert!(simrank_split(&train, &test, 0.0).is_err());
    let empty = ReprSet::new("x", vec![]).unwrap();
    assert!(simrank_split(&empty, &test, 0.2).is_err());
}

#[test]
fn simrank_ties_are_deterministic_and_disjoint() {
    let train = ReprSet::new("t", vec![vec![1.0]]).unwrap();
    let test = ReprSet::new("e", vec![vec![2.0]; 6]).unwrap();
    let s = simrank_split(&train, &test, 0.5).unwrap();
    assert_eq!(s.top, vec![0, 1, 2]);
    assert_eq!(s.bottom, vec![5, 4, 3]);
}

fn videos(n: usize) -> Vec<VideoSample> {
    let spec = SynthSpec {
        n_tokens: 16,
        n_frames: 8,
        max_window_frames: 4,
        min_window_frames: 2,
        ..SynthSpec::default()
    };
    gen_split(&spec, "p", n, false).unwrap().into_iter().map(|v| v.sample).collect()
}

/// Predicts the frames whose mean feature norm is far from the video median,
/// which is good enough to be sensitive to noise.
fn oracle_model(s: &VideoSample) -> Result<Prediction> {
    let d = s.feature_dim() * s.tokens_per_frame();
    let norms: Vec<f64> = s.frames.data().chunks_exact(d).map(|f| f.iter().map(|v| v * v).sum()).collect();
    let mut sorted = norms.clone();
    sorted.sort_by(f64::total_cmp);
    let med = sorted[sorted.len() / 2];
    let hot: Vec<usize> = (0..norms.len()).filter(|&i| (norms[i] - med).abs() > 0.25 * med).collect();
    Ok(match (hot.first(), hot.last()) {
        (Some(&a), Some(&b)) => Window::new(s.times[a], s.times[b])?.into(),
        _ => Prediction::ParseFailure { reason: "none".into() },
    })
}

#[test]
fn zero_noise_leaves_metric_unchanged() {
    let v = videos(6);
    for mode in [PerturbMode::GtWindow, PerturbMode::RandomWindow] {
        let spec = PerturbSpec { mode, noise_scale: 0.0, seed: 3 };
        let r = perturb_eval(&oracle_model, &v, &spec, 0.7).unwrap();
        assert_eq!(r.clean, r.perturbed);
        assert_eq!(r.relative_drop, 0.0);
    }
}

#[test]
fn perturbation_is_reproducible() {
    let v = videos(6);
    let spec = PerturbSpec { mode: PerturbMode::RandomWindow, noise_scale: 1.0, seed: 9 };
    let a = perturb_eval(&oracle_model, &v, &spec, 0.5).unwrap();
    assert_eq!(a, perturb_eval(&oracle_model, &v, &spec, 0.5).unwrap());
}

#[test]
fn perturbed_frames_follow_the_mode() {
    let v = videos(10);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for s in &v {
        let gt: Vec<usize> = (0..s.n_frames())
            .filter(|&f| s.times[f] >= s.gt_window.start && s.times[f] <= s.gt_window.end)
            .collect();
        let spec = PerturbSpec { mode: PerturbMode::GtWindow, noise_scale: 1.0, seed: 0 };
        let p = perturb_sample(s, &spec, &mut rng).unwrap();
        assert_eq!(p.frames, gt);
        let per_frame = s.tokens_per_frame() * s.feature_dim();
        for f in 0..s.n_frames() {
            let a = &s.frames.data()[f * per_frame..(f + 1) * per_frame];
            let b = &p.sample.frames.data()[f * per_frame..(f + 1) * per_frame];
            assert_eq!(a == b, !gt.contains(&f));
        }
        let spec = PerturbSpec { mode: PerturbMode::RandomWindow, ..spec };
        let p = perturb_sample(s, &spec, &mut rng).unwrap();
        assert_eq!(p.frames.len(), gt.len());
        let (first, last) = (gt[0], *gt.last().unwrap());
        let room = first >= gt.len() || s.n_frames() - 1 - last >= gt.len();
        assert_eq!(p.overlapped, !room);
        if room {
            assert!(p.frames.iter().all(|f| !gt.contains(f)));
        }
        assert!(p.frames.windows(2).all(|w| w[1] == w[0] + 1));
    }
}

#[test]
fn full_coverage_gt_is_whole_video_noise_and_random_falls_back() {
    let mut s = videos(1).remove(0);
    s.gt_window = Window::new(0.0, *s.times.last().unwrap()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let spec = PerturbSpec { mode: PerturbMode::GtWindow, noise_scale: 1.0, seed: 0 };
    let p = perturb_sample(&s, &spec, &mut rng).unwrap();
    assert_eq!(p.frames, (0..s.n_frames()).collect::<Vec<_>>());
    let spec = PerturbSpec { mode: PerturbMode::RandomWindow, ..spec };
    let p = perturb_sample(&s, &spec, &mut rng).unwrap();
    assert!(p.overlapped);
    assert_eq!(p.frames.len(), s.n_frames());
}

#[test]
fn noise_scale_sets_the_std() {
    let s = videos(1).remove(0);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut whole = s.clone();
    whole.gt_window = Window::new(0.0, *s.times.last().unwrap()).unwrap();
    let spec = PerturbSpec { mode: PerturbMode::GtWindow, noise_scale: 2.0, seed: 0 };
    let p = perturb_sample(&whole, &spec, &mut rng).unwrap();
    let d = s.feature_dim();
    let rows = s.frames.numel() / d;
    for k in 0..d {
        let col: Vec<f64> = s.frames.data().iter().skip(k).step_by(d).copied().collect();
        let mean = col.iter().sum::<f64>() / rows as f64;
        let std = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / rows as f64).sqrt();
        let noise: Vec<f64> = p.sample.frames.data().iter().skip(k).step_by(d).zip(&col).map(|(a, b)| a - b).collect();
        let got = (noise.iter().map(|v| v * v).sum::<f64>() / rows as f64).sqrt();
        assert!((got / (2.0 * std) - 1.0).abs() < 0.25, "dim {k}: {got} vs {}", 2.0 * std);
    }
    assert!(PerturbSpec { noise_scale: -1.0, ..spec }.validate().is_err());
}

proptest! {
    #[test]
    fn mmd_symmetric_and_permutation_invariant(seed in 0u64..500, shift in 0.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = gaussian_set(&mut rng, 9, 3, 0.0);
        let y = gaussian_set(&mut rng, 7, 3, shift);
        let a = mmd2(&x, &y).unwrap();
        let b = mmd2(&y, &x).unwrap();
        prop_assert!((a.raw - b.raw).abs() < 1e-12);
        let mut xp = x.clone();
        xp.vectors.reverse();
        xp.vectors.swap(0, 3);
        let c = mmd2(&xp, &y).unwrap();
        prop_assert!((a.raw - c.raw).abs() < 1e-12);
        prop_assert!((a.biased - c.biased).abs() < 1e-12);
    }
}
