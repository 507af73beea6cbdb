//! Diffusion schedule, forward noising and DDIM identities.

mod common;

use proptest::prelude::*;

use common::*;
use fusiondet::cfdp::{
    detector_loss, forward_noise, pad_boxes, sample, time_grid, BBox, DiffusionSchedule, ScheduleKind,
};
use fusiondet::numerics::{Tape, Tensor};
use fusiondet::rng;


fn kinds() -> impl Strategy<Value = ScheduleKind> {
    prop::sample::select(vec![ScheduleKind::Cosine, ScheduleKind::Linear])
}

#[test]
fn forward_noise_moments_at_fixed_step() {
    let w = moment_test(500, 1000, 4, Z_SINGLE);
    assert!(w <= 1.0, "moments off by {w} of the bound");
}

#[test]
fn forward_noise_moments_across_steps() {
    for (t, seed) in [(1usize, 1u64), (50, 2), (250, 3), (500, 4), (999, 5), (1000, 6)] {
        let w = moment_test(t, 1000, seed, Z_SWEEP);
        assert!(w <= 1.0, "t = {t}: moments off by {w} of the bound");
    }
}

#[test]
fn schedules_decrease_and_recover_beta() {
    for kind in [ScheduleKind::Cosine, ScheduleKind::Linear] {
        for steps in [10, 100, 1000] {
            let s = DiffusionSchedule::new(steps, kind).unwrap();
            assert_eq!(s.alpha_bar(0), 1.0);
            for t in 1..=steps {
                assert!(s.alpha_bar(t) < s.alpha_bar(t - 1), "{kind:?} T={steps} t={t}");
                assert!(s.beta(t) > 0.0 && s.beta(t) < 1.0);
                let recovered = 1.0 - s.alpha_bar(t) / s.alpha_bar(t - 1);
                assert!((recovered - s.beta(t)).abs() < 1e-12);
                assert!((s.alpha(t) + s.beta(t) - 1.0).abs() < 1e-15);
            }
            assert!(s.alpha_bar(steps) < s.alpha_bar(1));
        }
    }
}

proptest! {
    #![proptest_config(pt_config(200))]

    #[test]
    fn ddim_with_true_clean_latent_follows_forward_trajectory(seed in any::<u64>(), total in prop::sample::select(vec![10usize, 100, 1000]), frac in 0.0f64..1.0) {
        let steps = 1 + ((total - 1) as f64 * frac) as usize;
        prop_assert!(exact_trajectory_error(seed, total, steps) < 1e-12);
    }

    #[test]
    fn two_half_steps_equal_one_step(seed in any::<u64>(), a in 0usize..1000, b in 0usize..1000, c in 1usize..=1000) {
        let mut v = [a, b, c];
        v.sort_unstable();
        let [end, mid, t] = v;
        prop_assume!(end < mid && mid < t);
        prop_assert!(half_step_error(seed, 1000, t, mid, end) < 1e-12);
    }

    #[test]
    fn zero_noise_is_deterministic_scaling(seed in any::<u64>(), t in 0usize..=1000) {
        let s = schedule(1000);
        let z0 = boxes(seed, 3);
        let z = forward_noise(&z0, t, &Tensor::zeros(&[3, 4]), &s, SCALE).unwrap().latent;
        let expect = scaled(&z0).map(|v| s.alpha_bar(t).sqrt() * v);
        prop_assert!(z.max_abs_diff(&expect) == 0.0);
    }

    #[test]
    fn detector_loss_is_half_mean_square_and_convex(seed in any::<u64>(), n in 1usize..6, lam in 0.0f64..1.0) {
        let mut r = rng::stream(seed);
        let a = uniform(&mut r, &[n, 4], -2.0, 2.0);
        let b = uniform(&mut r, &[n, 4], -2.0, 2.0);
        let target = uniform(&mut r, &[n, 4], -2.0, 2.0);
        let loss = |p: &Tensor| {
            let tape = Tape::new();
            detector_loss(tape.constant(p.clone()), tape.constant(target.clone())).unwrap().item()
        };
        let direct = a.data().iter().zip(target.data()).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / (8 * n) as f64;
        prop_assert!((loss(&a) - direct).abs() < 1e-14);
        let mix = a.zip_map(&b, |x, y| lam * x + (1.0 - lam) * y).unwrap();
        prop_assert!(loss(&mix) <= lam * loss(&a) + (1.0 - lam) * loss(&b) + 1e-12);
    }

    #[test]
    fn time_grid_runs_from_total_to_zero(total in 1usize..2000, frac in 0.0f64..1.0) {
        let steps = 1 + ((total - 1) as f64 * frac) as usize;
        let g = time_grid(total, steps).unwrap();
        prop_assert_eq!(g.len(), steps + 1);
        prop_assert_eq!(g[0], total);
        prop_assert_eq!(*g.last().unwrap(), 0);
        prop_assert!(g.windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn one_step_sampling_returns_the_prediction(seed in any::<u64>(), kind in kinds()) {
        let s = DiffusionSchedule::new(100, kind).unwrap();
        let target = boxes(seed, 3);
        let z = scaled(&target);
        let got = sample(|_: &Tensor, _| Ok(z.clone()), 3, 1, &s, SCALE, seed).unwrap();
        let expect = target.clamped();
        for (g, e) in got.iter().zip(expect.iter()) {
            prop_assert!((g.to_array().iter().zip(e.to_array()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)) < 1e-12);
        }
    }

    #[test]
    fn padding_keeps_truth_and_bounds_jitter(seed in any::<u64>(), n_gt in 0usize..5, n in 1usize..20, jitter in 0.0f64..0.2) {
        let gt = boxes(seed, n_gt);
        let padded = pad_boxes(&gt, n, jitter, &mut rng::stream(seed));
        prop_assert_eq!(padded.len(), n);
        for (i, b) in padded.iter().enumerate() {
            prop_assert!(b.is_valid());
            if n_gt == 0 {
                continue;
            }
            let g: &BBox = &gt.boxes()[i % n_gt];
            if i < n_gt {
                prop_assert_eq!(b, g);
            } else {
                prop_assert!((b.cx - g.cx).abs() <= jitter * g.w + 1e-12);
                prop_assert!((b.cy - g.cy).abs() <= jitter * g.h + 1e-12);
                prop_assert!((b.w / g.w - 1.0).abs() <= jitter + 1e-12);
            }
        }
    }
}
