use ckm_core::net::{ArchConfig, ScoreNet};
use ckm_core::observation::{observe_tensor, Observation};
use ckm_core::ops::{ForwardOperator, OperatorSpec};
use ckm_core::posterior::{
    dps_sample, epsilon_schedule, observation_constraint_step, prior_sample, PosteriorConfig,
    EPSILON_FLOOR,
};
use ckm_core::sde::ScheduleSpec;
use ckm_core::{Shape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const SHAPE: Shape = Shape {
    channels: 2,
    height: 8,
    width: 8,
};

fn net(seed: u64) -> ScoreNet {
    let arch = ArchConfig {
        base_width: 4,
        channel_mults: vec![1, 2, 2],
        groups: 2,
        temb_dim: 8,
        channels: 2,
    };
    let mut net = ScoreNet::init(arch, ScheduleSpec::vp(50), seed).unwrap();
    // Zero-initialized heads would make the score vanish; perturb everything.
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    for p in net.params_mut() {
        let z: f32 = StandardNormal.sample(&mut rng);
        *p += 0.05 * z;
    }
    net
}

fn randn(seed: u64) -> Tensor<f64> {
    Tensor::standard_normal(SHAPE, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn box_op() -> ForwardOperator {
    let spec = OperatorSpec::MaskBox {
        top: 2,
        left: 2,
        height: 4,
        width: 3,
    };
    ForwardOperator::new(spec, SHAPE, None).unwrap()
}

fn observation(seed: u64) -> Observation {
    let truth = randn(seed).scale(0.3).to_f32();
    observe_tensor(&truth, box_op(), 0.01, seed).unwrap()
}

fn x0_hat(net: &ScoreNet, x: &Tensor<f64>, i: usize) -> Tensor<f64> {
    let s = net.forward(&x.to_f32(), i).unwrap().to_f64();
    net.schedule().progressive_estimate(x, &s, i).unwrap()
}

fn residual_sq(net: &ScoreNet, obs: &Observation, x: &Tensor<f64>, i: usize) -> f64 {
    let ax = obs
        .operator()
        .apply(&x0_hat(net, x, i).to_f32())
        .unwrap()
        .to_f64();
    let r = obs.y().to_f64().zip_map(&ax, |a, b| a - b).unwrap();
    r.norm().powi(2)
}

#[test]
fn zero_strength_is_a_no_op() {
    let net = net(1);
    let obs = observation(2);
    let (x, xp) = (randn(3), randn(4));
    let (next, r) = observation_constraint_step(&xp, &x, &net, 20, &obs, 0.0, false).unwrap();
    assert_eq!(next, xp);
    assert!(r > 0.0);
}

#[test]
fn zero_residual_skips_the_update() {
    let net = net(1);
    let x = randn(3);
    let i = 20;
    let y = box_op().apply(&x0_hat(&net, &x, i).to_f32()).unwrap();
    let obs = Observation::new(y, box_op(), 0.0).unwrap();
    let xp = randn(4);
    let (next, r) = observation_constraint_step(&xp, &x, &net, i, &obs, 13.0, false).unwrap();
    assert!(r < 1e-6, "{r}");
    assert_eq!(next, xp);
}

#[test]
fn update_follows_the_normalized_residual_gradient() {
    let net = net(5);
    let obs = observation(6);
    let mut worst: f64 = 0.0;
    for (k, &i) in [10usize, 25, 40].iter().enumerate() {
        let x = randn(10 + k as u64);
        let xp = randn(20 + k as u64);
        let zeta = 2.5;
        let (next, r) = observation_constraint_step(&xp, &x, &net, i, &obs, zeta, false).unwrap();
        assert!((r * r - residual_sq(&net, &obs, &x, i)).abs() < 1e-9 * r * r.max(1.0));
        // next − x' = −ζ·g/‖r‖, so g = −(‖r‖/ζ)·(next − x').
        let step = next.zip_map(&xp, |a, b| a - b).unwrap();
        assert!(step.norm() > 0.0);
        let g = step.scale(-r / zeta);
        for probe in 0..4u64 {
            let d = randn(100 + probe).scale(0.1);
            let h = 1e-3;
            let fd = (residual_sq(&net, &obs, &x.add_scaled(&d, h).unwrap(), i)
                - residual_sq(&net, &obs, &x.add_scaled(&d, -h).unwrap(), i))
                / (2.0 * h);
            let an = g.dot(&d).unwrap();
            worst = worst.max((an - fd).abs() / an.abs().max(fd.abs()).max(1e-6));
        }
    }
    assert!(worst < 2e-2, "worst relative error {worst}");
}

#[test]
fn update_is_linear_in_strength_and_invariant_to_residual_scale() {
    let net = net(7);
    let x = randn(8);
    let xp = randn(9);
    let i = 30;
    let obs = observation(10);
    let disp = |o: &Observation, zeta: f64| {
        let (next, _) = observation_constraint_step(&xp, &x, &net, i, o, zeta, false).unwrap();
        next.zip_map(&xp, |a, b| a - b).unwrap()
    };
    let d1 = disp(&obs, 1.0);
    let d3 = disp(&obs, 3.0);
    let diff = d3.add_scaled(&d1, -3.0).unwrap().norm();
    assert!(diff < 1e-9 * d3.norm(), "{diff}");

    // Pushing y further from A(x̂₀) along the current residual keeps the step direction and length.
    let ax = obs.operator().apply(&x0_hat(&net, &x, i).to_f32()).unwrap();
    let y2 = obs.y().zip_map(&ax, |y, a| a + 4.0 * (y - a)).unwrap();
    let far = Observation::new(y2, box_op(), 0.01).unwrap();
    let d_far = disp(&far, 1.0);
    let rel = d_far.add_scaled(&d1, -1.0).unwrap().norm() / d1.norm();
    assert!(rel < 1e-4, "{rel}");
}

#[test]
fn detached_gradient_ignores_the_score_jacobian() {
    let net = net(11);
    let x = randn(12);
    let xp = randn(13);
    let i = 30;
    let obs = observation(14);
    let (next, r) = observation_constraint_step(&xp, &x, &net, i, &obs, 1.0, true).unwrap();
    let ab = net.schedule().alpha_bar(i);
    let x0 = x0_hat(&net, &x, i).to_f32();
    let ax = obs.operator().apply(&x0).unwrap();
    let resid = obs.y().zip_map(&ax, |y, a| y - a).unwrap();
    let g = obs
        .operator()
        .vjp(&x0, &resid)
        .unwrap()
        .to_f64()
        .scale(-2.0 / ab.sqrt());
    let expect = xp.add_scaled(&g, -1.0 / r).unwrap();
    let err = next.zip_map(&expect, |a, b| a - b).unwrap().norm();
    assert!(err < 1e-5 * expect.norm(), "{err}");
    let (attached, _) = observation_constraint_step(&xp, &x, &net, i, &obs, 1.0, false).unwrap();
    assert_ne!(attached, next);
}

#[test]
fn epsilon_targets_the_signal_to_noise_ratio() {
    let s = randn(1);
    let e1 = epsilon_schedule(&s, 0.16, &mut ChaCha8Rng::seed_from_u64(5));
    let e2 = epsilon_schedule(&s.scale(2.0), 0.16, &mut ChaCha8Rng::seed_from_u64(5));
    assert!((e1 / e2 - 4.0).abs() < 1e-12);
    let z: Tensor<f64> = Tensor::standard_normal(SHAPE, &mut ChaCha8Rng::seed_from_u64(5));
    let expect = 2.0 * (0.16 * z.norm() / s.norm()).powi(2);
    assert!((e1 - expect).abs() < 1e-12 * expect);
    let e0 = epsilon_schedule(
        &Tensor::zeros(SHAPE),
        0.16,
        &mut ChaCha8Rng::seed_from_u64(5),
    );
    assert_eq!(e0, EPSILON_FLOOR);
}

#[test]
fn sampling_is_deterministic_and_reports_every_step() {
    let net = net(3);
    let obs = observation(4);
    let cfg = PosteriorConfig {
        zeta: 1.0,
        seed: 9,
        ..PosteriorConfig::default()
    };
    let a = dps_sample(&net, &obs, &cfg).unwrap();
    let b = dps_sample(&net, &obs, &cfg).unwrap();
    assert_eq!(a.x_hat, b.x_hat);
    assert_eq!(a.residual_trace, b.residual_trace);
    assert_eq!(a.residual_trace.len(), 50);
    assert!(a.x_hat.is_finite());
    let c = dps_sample(&net, &obs, &PosteriorConfig { seed: 10, ..cfg }).unwrap();
    assert_ne!(a.x_hat, c.x_hat);
}

#[test]
fn unconstrained_sampler_without_correctors_is_the_prior_sampler() {
    let net = net(3);
    let obs = observation(4);
    let cfg = PosteriorConfig {
        zeta: 0.0,
        correctors: 0,
        seed: 21,
        ..PosteriorConfig::default()
    };
    let post = dps_sample(&net, &obs, &cfg).unwrap();
    let prior = prior_sample(&net, SHAPE, 21).unwrap();
    assert_eq!(post.x_hat, prior);
}

#[test]
fn invalid_configs_are_rejected() {
    let net = net(3);
    let obs = observation(4);
    for cfg in [
        PosteriorConfig {
            zeta: -1.0,
            ..PosteriorConfig::default()
        },
        PosteriorConfig {
            zeta: f64::NAN,
            ..PosteriorConfig::default()
        },
        PosteriorConfig {
            snr_r: 0.0,
            ..PosteriorConfig::default()
        },
    ] {
        assert!(dps_sample(&net, &obs, &cfg).is_err());
    }
    let wrong = ForwardOperator::new(OperatorSpec::Identity, Shape::new(1, 8, 8), None);
    if let Ok(op) = wrong {
        let y = Tensor::zeros(op.output_shape());
        let o = Observation::new(y, op, 0.01).unwrap();
        assert!(dps_sample(&net, &o, &PosteriorConfig::default()).is_err());
    }
}
