//! Property tests for invariants that cut across modules.

use nalgebra::Point3;
use proptest::prelude::*;
use rand::SeedableRng;

use pegbench::augment::{augment_sample, AugmentConfig};
use pegbench::collector::Sample;
use pegbench::geometry::{
    transform_to_eef, BoardLayout, CorrectiveAction, CrossSection, Pose6, Socket, TaskMode, TaskSpec,
};
use pegbench::policy::PolicyConfig;
use pegbench::regressor::{default_label_scale, Arch, ModelParams};
use pegbench::seed::{rng_for, SimRng};
use pegbench::sensors::{ImageTensor, WrenchReading};
use pegbench::sim::{compute_wrench, contained_with_tilt, placement, step_towards, RobotState, SimConfig, Simulator};

const PI: f64 = std::f64::consts::PI;

fn pose() -> impl Strategy<Value = Pose6> {
    (
        -0.5f64..0.5,
        -0.5f64..0.5,
        -0.5f64..0.5,
        -PI..PI,
        -1.2f64..1.2,
        -PI..PI,
    )
        .prop_map(|(x, y, z, a, b, c)| Pose6::new(x, y, z, a, b, c))
}

fn socket(mode: TaskMode) -> Socket {
    let task = TaskSpec::from_profile(
        "sq",
        mode,
        CrossSection::square(0.012),
        0.001,
        0.005,
        [[0.8, 0.2, 0.2], [0.05, 0.05, 0.05], [0.7, 0.7, 0.6]],
        0.3,
        0.003,
    )
    .unwrap();
    BoardLayout::single(task).sockets.remove(0)
}

fn mode() -> impl Strategy<Value = TaskMode> {
    prop_oneof![Just(TaskMode::Insertion), Just(TaskMode::Threading)]
}

fn sample(seed: u64) -> Sample {
    let mut rng = rng_for(seed, 0);
    let mut image = ImageTensor::zeros(16, 16, 3);
    for v in &mut image.data {
        *v = rand::Rng::random(&mut rng);
    }
    Sample {
        image,
        wrench: WrenchReading::from_array([1.0, -2.0, 4.0, 0.1, -0.05, 0.0]),
        label: CorrectiveAction::from_array([0.004, -0.002, 0.1, -0.05, 0.02]),
        task_id: "sq".into(),
        trial_index: 0,
        contact_pose: Pose6::IDENTITY,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn frame_transforms_are_rigid(p in pose(), a in prop::array::uniform3(-1.0f64..1.0), b in prop::array::uniform3(-1.0f64..1.0)) {
        let (pa, pb) = (Point3::from(a), Point3::from(b));
        let d0 = (pa - pb).norm();
        let d1 = (transform_to_eef(&pa, &p) - transform_to_eef(&pb, &p)).norm();
        prop_assert!((d0 - d1).abs() < 1e-12);
    }

    #[test]
    fn compose_inverts_relative(a in pose(), b in pose()) {
        let back = a.compose(&a.relative(&b));
        prop_assert!((back.position() - b.position()).norm() < 1e-12);
        prop_assert!(back.rotation().angle_to(&b.rotation()) < 1e-9);
    }

    #[test]
    fn label_applied_to_contact_reaches_goal(c in pose(), g in pose()) {
        let d = CorrectiveAction::between(&c, &g);
        let r = d.apply_to(&c, g.z - c.z);
        let (ra, ga) = (r.to_array(), g.to_array());
        for k in [0, 1, 2] {
            prop_assert!((ra[k] - ga[k]).abs() < 1e-12);
        }
        for k in [3, 4, 5] {
            let e = pegbench::geometry::wrap_angle(ra[k] - ga[k]);
            prop_assert!(e.abs() < 1e-12);
        }
    }

    #[test]
    fn simulation_is_deterministic(seed in any::<u64>(), dx in -0.005f64..0.005, dy in -0.005f64..0.005, m in mode()) {
        let s = socket(m);
        let run = || {
            let mut sim = Simulator::new(SimConfig::default(), SimRng::seed_from_u64(seed));
            let mut state = RobotState::at(Pose6::from_translation(dx, dy, 0.004), Pose6::IDENTITY);
            let target = Pose6::from_translation(dx, dy, -0.006);
            let mut out = Vec::new();
            for _ in 0..60 {
                let t = sim.tick(&state, &target, &s).unwrap();
                state = t.state;
                out.push((state.eef_pose, t.measured));
            }
            out
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn uncontained_tip_never_sinks_past_drive_limit(dx in -0.006f64..0.006, dy in -0.006f64..0.006, th in -0.3f64..0.3, m in mode()) {
        let s = socket(m);
        let cfg = SimConfig::default();
        let mut state = RobotState::at(Pose6::new(dx, dy, 0.003, 0.0, 0.0, th), Pose6::IDENTITY);
        let target = Pose6::new(dx, dy, -0.02, 0.0, 0.0, th);
        for _ in 0..80 {
            state = step_towards(&state, &target, &s, &cfg).unwrap().0;
            let p = placement(&s, &state);
            if !contained_with_tilt(&s.task, &p) {
                prop_assert!(p.tip_z >= -cfg.max_penetration() - 1e-12, "tip {} at {:?}", p.tip_z, p.offset);
            }
        }
    }

    #[test]
    fn holding_still_is_a_fixed_point(dx in -0.006f64..0.006, dy in -0.006f64..0.006, z in -0.001f64..0.002, m in mode()) {
        let s = socket(m);
        let cfg = SimConfig::default();
        let s0 = RobotState::at(Pose6::from_translation(dx, dy, z), Pose6::IDENTITY);
        let (s1, w1) = step_towards(&s0, &s0.eef_pose, &s, &cfg).unwrap();
        let (s2, w2) = step_towards(&s1, &s1.eef_pose, &s, &cfg).unwrap();
        prop_assert_eq!(s2.eef_pose, s1.eef_pose);
        prop_assert_eq!(w2, w1);
    }

    #[test]
    fn x_offset_moment_sign_is_stable(x in 0.0015f64..0.006, pen in 1e-5f64..2e-3, m in mode()) {
        let s = socket(m);
        let cfg = SimConfig::default();
        let state = RobotState::at(Pose6::from_translation(x, 0.0, 0.0), Pose6::IDENTITY);
        let w = compute_wrench(&s, &state, pen, &cfg);
        let w_ref = compute_wrench(&s, &state, 1e-4, &cfg);
        prop_assert!(w.m[0].abs() < 1e-12);
        prop_assert!(w.m[1] != 0.0);
        prop_assert_eq!(w.m[1].signum(), w_ref.m[1].signum());
    }

    #[test]
    fn augmentation_touches_inputs_only(seed in any::<u64>(), aug_seed in any::<u64>()) {
        let s = sample(seed);
        let cfg = AugmentConfig { rng_seed: aug_seed, ..AugmentConfig::default() };
        let a = augment_sample(&s, &cfg, &mut rng_for(aug_seed, 1));
        prop_assert_eq!(a.label, s.label);
        prop_assert_eq!(&a.task_id, &s.task_id);
        prop_assert_eq!(a.image.dims(), s.image.dims());
        prop_assert!(a.image.data.iter().all(|v| (0.0..=1.0).contains(v)));
        // force direction is kept: the output is a non-negative multiple
        let (f0, f1) = (nalgebra::Vector3::from(s.wrench.f), nalgebra::Vector3::from(a.wrench.f));
        let alpha = f1.norm() / f0.norm();
        prop_assert!((f1 - f0 * alpha).norm() < 1e-12);
        let again = augment_sample(&s, &cfg, &mut rng_for(aug_seed, 1));
        prop_assert_eq!(a, again);
    }

    #[test]
    fn label_normalization_round_trips(d in prop::array::uniform5(-0.2f64..0.2)) {
        let p = ModelParams::init(Arch { height: 16, width: 16, channels: 3 }, default_label_scale(), [10.0, 1.0], 0, true);
        let d = CorrectiveAction::from_array(d);
        let n: [f64; 5] = p.normalize_label(&d);
        let back = p.denormalize(&n);
        for (a, b) in back.to_array().iter().zip(d.to_array()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_is_non_negative(seed in any::<u64>(), d in prop::array::uniform5(-0.01f64..0.01)) {
        let p = ModelParams::init(Arch { height: 16, width: 16, channels: 3 }, default_label_scale(), [10.0, 1.0], seed, false);
        let s = sample(seed);
        let (loss, _) = p.loss_and_grad(&[(&s.image, s.wrench, CorrectiveAction::from_array(d))]).unwrap();
        prop_assert!(loss >= 0.0);
    }

    #[test]
    fn compliance_descends_below_desired_force(fz in 0.0f64..20.0) {
        let c = PolicyConfig::default();
        let dz = c.compliance_dz(fz);
        if fz < c.f_desired {
            prop_assert!(dz < 0.0);
        } else if fz > c.f_desired {
            prop_assert!(dz > 0.0);
        }
    }
}

#[test]
fn zero_loss_iff_prediction_matches() {
    let p = ModelParams::init(Arch { height: 16, width: 16, channels: 3 }, default_label_scale(), [10.0, 1.0], 3, true);
    let s = sample(1);
    // zero head predicts exactly zero
    let (l0, _) = p.loss_and_grad(&[(&s.image, s.wrench, CorrectiveAction::ZERO)]).unwrap();
    assert_eq!(l0, 0.0);
    let (l1, _) = p.loss_and_grad(&[(&s.image, s.wrench, s.label)]).unwrap();
    assert!(l1 > 0.0);
}
