use flowave_core::baselines::distill::{distill_loss, distill_step, frame_loss_value};
use flowave_core::baselines::{
    DistillLossConfig, DistillMode, FrameLossConfig, GaussianAr, GaussianArConfig, GaussianIaf,
    IafConfig,
};
use flowave_core::harness::verify::perturb_params;
use flowave_core::optim::AdamState;
use flowave_core::{Graph, Parameterized, SequentialPasses, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn teacher_config() -> GaussianArConfig {
    GaussianArConfig {
        cond_channels: 3,
        n_layers: 4,
        dilation_cycle: 3,
        residual_channels: 6,
        gate_channels: 6,
        skip_channels: 6,
        kernel_size: 2,
        sigma_floor: 1e-5,
    }
}

fn student_config() -> IafConfig {
    IafConfig {
        cond_channels: 3,
        stacks: 2,
        layers_per_stack: 2,
        residual_channels: 6,
        gate_channels: 6,
        skip_channels: 6,
        kernel_size: 2,
    }
}

fn trained_looking_teacher(seed: u64) -> GaussianAr {
    let mut t = GaussianAr::new(teacher_config(), seed).unwrap();
    perturb_params(&mut t, 0.2, seed + 1);
    t
}

#[test]
fn windowed_ancestral_sampling_matches_teacher_forcing() {
    let teacher = trained_looking_teacher(1);
    let t = 40;
    assert!(
        t > teacher.config().receptive_field() + 1,
        "window must actually slide"
    );
    let c = Tensor::randn(&[2, 3, t], &mut ChaCha8Rng::seed_from_u64(2));
    let out = teacher.sample(&c, 9).unwrap();
    assert_eq!(out.evaluations, t);

    // Re-derive every sample from one teacher-forced pass over the output
    // and the same noise stream.
    let noise = Tensor::randn(&[2, 1, t], &mut ChaCha8Rng::seed_from_u64(9));
    let g = Graph::inference();
    let pred = teacher
        .predict(&g, &g.constant(out.signal.clone()), &g.constant(c), false)
        .unwrap();
    let mu = pred.params.mu.value();
    let ls = pred.params.log_sigma.value();
    let worst = (0..2 * t)
        .map(|i| {
            (out.signal.data()[i] - (mu.data()[i] + ls.data()[i].exp() * noise.data()[i])).abs()
        })
        .fold(0.0, f64::max);
    assert!(worst < 1e-10, "{worst}");
}

#[test]
fn teacher_never_sees_the_present_or_future() {
    let teacher = trained_looking_teacher(3);
    let t = 24;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = Tensor::randn(&[1, 1, t], &mut rng);
    let c = Tensor::randn(&[1, 3, t], &mut rng);
    let predict = |x: &Tensor| {
        let g = Graph::inference();
        let p = teacher
            .predict(&g, &g.constant(x.clone()), &g.constant(c.clone()), false)
            .unwrap();
        (
            p.params.mu.value().clone(),
            p.params.log_sigma.value().clone(),
        )
    };
    let (mu, ls) = predict(&x);
    for at in [0, 7, 23] {
        let mut bumped = x.to_vec();
        bumped[at] += 1.0;
        let (mu2, ls2) = predict(&Tensor::new(&[1, 1, t], bumped).unwrap());
        for s in 0..=at {
            assert_eq!(mu.data()[s], mu2.data()[s]);
            assert_eq!(ls.data()[s], ls2.data()[s]);
        }
        if at + 1 < t {
            assert_ne!(mu.data()[at + 1], mu2.data()[at + 1]);
        }
    }
}

#[test]
fn pass_counts_separate_the_two_samplers() {
    let teacher = GaussianAr::new(GaussianArConfig::desk(), 0).unwrap();
    let student = GaussianIaf::new(IafConfig::desk(), 0).unwrap();
    assert_eq!(teacher.sequential_passes(16000), 16000);
    assert_eq!(student.sequential_passes(16000), IafConfig::desk().stacks);
    assert_eq!(
        student.sequential_passes(16000),
        student.sequential_passes(64)
    );
}

#[test]
fn student_copying_the_teacher_law_has_zero_kl() {
    let (mu, log_sigma) = (0.1, -1.3);
    let mut teacher = GaussianAr::new(teacher_config(), 5).unwrap();
    teacher.net.force_constant_output(&[mu, log_sigma]).unwrap();
    let mut student = GaussianIaf::new(student_config(), 6).unwrap();
    // First stack carries the law; the zero-initialized second one is the identity.
    student.stacks[0]
        .force_constant_output(&[mu, log_sigma])
        .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = Tensor::randn(&[1, 1, 32], &mut rng).scale(0.1);
    let c = Tensor::randn(&[1, 3, 32], &mut rng);
    let mut cfg = DistillLossConfig::new(DistillMode::KlOnly);
    cfg.frame = FrameLossConfig {
        n_fft: 16,
        hop: 4,
        floor: 1e-5,
    };
    let (_, stats) = distill_loss(
        &Graph::inference(),
        &student,
        &teacher,
        &x,
        &c,
        &cfg,
        8,
        false,
    )
    .unwrap();
    assert!(stats.kl.abs() < 1e-12, "{}", stats.kl);
    assert!(stats.loss.abs() < 1e-12);
}

#[test]
fn zero_learning_rate_step_changes_nothing() {
    let teacher = trained_looking_teacher(9);
    let mut student = GaussianIaf::new(student_config(), 10).unwrap();
    perturb_params(&mut student, 0.1, 11);
    let before = student.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = Tensor::randn(&[1, 1, 64], &mut rng).scale(0.3);
    let c = Tensor::randn(&[1, 3, 64], &mut rng);
    let mut cfg = DistillLossConfig::new(DistillMode::Both);
    cfg.frame = FrameLossConfig {
        n_fft: 16,
        hop: 4,
        floor: 1e-5,
    };
    let mut adam = AdamState::new(0.0, 0.5, 1000);
    let stats = distill_step(&mut student, &teacher, &x, &c, &cfg, &mut adam, 13).unwrap();
    assert!(stats.loss.is_finite());
    let same = student
        .params()
        .iter()
        .zip(before.params())
        .all(|(a, b)| a.value == b.value);
    assert!(same);
}

#[test]
fn frame_loss_grows_with_distance_from_silence() {
    let cfg = FrameLossConfig {
        n_fft: 64,
        hop: 16,
        floor: 1e-5,
    };
    let t = 512;
    let silence = Tensor::zeros(&[1, 1, t]);
    let sine = |a: f64| Tensor::from_fn(&[1, 1, t], |i| a * (i as f64 * 0.3).sin());
    assert_eq!(frame_loss_value(&silence, &silence, &cfg).unwrap(), 0.0);
    let losses: Vec<f64> = [0.01, 0.1, 0.5, 1.0]
        .iter()
        .map(|&a| frame_loss_value(&sine(a), &silence, &cfg).unwrap())
        .collect();
    assert!(losses[0] > 0.0);
    assert!(losses.windows(2).all(|w| w[1] > w[0]), "{losses:?}");
}
