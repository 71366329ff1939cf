use freecustom::diffusion::{
    ddim_step, ddpm_step, ddpm_step_between, forward_diffuse, linear_schedule, sampling_plan, samplers,
    ScheduleConfig, StepInput,
};
use freecustom::numerics::{gaussian_sample, PrngStream, Tensor};
use proptest::prelude::*;

fn noise(n: usize, seed: u64, stream: u64) -> Tensor {
    gaussian_sample(&[n], PrngStream::new(seed, stream)).0
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn plan_is_strictly_decreasing_and_ends_clean(train in 1usize..2000, steps_frac in 0.0f64..1.0) {
        let steps = 1 + ((train - 1) as f64 * steps_frac) as usize;
        let plan = sampling_plan(train, steps).unwrap();
        prop_assert_eq!(plan.len(), steps);
        prop_assert_eq!(plan[0].0, train);
        prop_assert_eq!(plan.last().unwrap().1, 0);
        for (k, &(t, t_prev)) in plan.iter().enumerate() {
            prop_assert!(t_prev < t);
            prop_assert_eq!(t, train * (steps - k) / steps);
            if k + 1 < steps {
                prop_assert_eq!(t_prev, plan[k + 1].0);
            }
        }
    }

    #[test]
    fn schedule_tables_are_consistent(train in 2usize..1500, b0 in 1e-5f64..1e-2, span in 0.0f64..0.05) {
        let s = linear_schedule(train, b0, b0 + span).unwrap();
        let mut prod = 1.0f64;
        for t in 1..=train {
            prop_assert!(s.beta(t) > 0.0 && s.beta(t) < 1.0);
            prod *= s.alpha(t);
            prop_assert!((s.alpha_bar(t) - prod).abs() <= 1e-12);
            prop_assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            prop_assert!(s.sigma(t) >= 0.0 && s.sigma(t) * s.sigma(t) <= s.beta(t) + 1e-15);
        }
    }

    #[test]
    fn ddim_inverts_forward_with_exact_noise(t in 1usize..=1000, t_prev_frac in 0.0f64..1.0, seed in any::<u64>()) {
        let s = ScheduleConfig::default().build().unwrap();
        let t_prev = (t as f64 * t_prev_frac) as usize;
        let (z0, eps) = (noise(64, seed, 0), noise(64, seed, 1));
        let zt = forward_diffuse(&z0, t, &eps, &s).unwrap();
        let zp = ddim_step(&zt, &eps, t, t_prev, &s).unwrap();
        let want = forward_diffuse(&z0, t_prev.max(1), &eps, &s).unwrap();
        let want = if t_prev == 0 { z0.clone() } else { want };
        prop_assert!(zp.max_abs_diff(&want) < 2e-4);
    }

    #[test]
    fn strided_ddpm_reduces_to_single_step(t in 2usize..=1000, seed in any::<u64>()) {
        let s = ScheduleConfig::default().build().unwrap();
        let (z, e, n) = (noise(32, seed, 0), noise(32, seed, 1), noise(32, seed, 2));
        let a = ddpm_step_between(&z, &e, t, t - 1, &s, &n).unwrap();
        let b = ddpm_step(&z, &e, t, &s, &n).unwrap();
        prop_assert_eq!(a, b);
    }
}

#[test]
fn forward_diffusion_statistics() {
    let s = ScheduleConfig::default().build().unwrap();
    let n = 100_000;
    let z0 = Tensor::full(&[n], 2.0);
    for t in [1, 250, 1000] {
        let zt = forward_diffuse(&z0, t, &noise(n, 3, t as u64), &s).unwrap();
        let mean = zt.data().iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        let var = zt.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n as f64;
        let ab = s.alpha_bar(t);
        assert!((mean - 2.0 * ab.sqrt()).abs() < 0.02, "t={t} mean {mean}");
        assert!((var - (1.0 - ab)).abs() < 0.02, "t={t} var {var}");
    }
}

#[test]
fn samplers_are_deterministic_per_stream() {
    let s = ScheduleConfig::default().build().unwrap();
    let (z, e) = (noise(48, 1, 0), noise(48, 1, 1));
    for name in ["ddim", "ddpm"] {
        let sampler = samplers().create(name).unwrap();
        let step = |stream: u64| {
            sampler
                .step(StepInput {
                    z: &z,
                    eps_hat: &e,
                    t: 500,
                    t_prev: 480,
                    sched: &s,
                    noise: PrngStream::new(9, stream),
                })
                .unwrap()
        };
        assert_eq!(step(0), step(0));
        assert_eq!(step(0) == step(1), name == "ddim");
    }
}

#[test]
fn invalid_plans_are_rejected() {
    assert!(sampling_plan(1000, 0).is_err());
    assert!(sampling_plan(10, 11).is_err());
    let s = ScheduleConfig::default().build().unwrap();
    let z = noise(4, 0, 0);
    assert!(ddim_step(&z, &z, 10, 10, &s).is_err());
    assert!(forward_diffuse(&z, 1001, &z, &s).is_err());
    assert!(forward_diffuse(&z, 5, &noise(5, 0, 0), &s).is_err());
}
