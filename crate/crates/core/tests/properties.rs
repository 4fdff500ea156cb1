mod common;

use std::collections::HashSet;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::*;
use tcaff::geometry::gt_alignment;
use tcaff::harness::{Scenario, Simulation};
use tcaff::registration::mno_clipper;
use tcaff::{
    AlignmentMeasurement, ClipperParams, FilterParams, KalmanModel, MnoParams, Mode, Pose2, TcaffFilter,
};

fn pose() -> impl Strategy<Value = Pose2> {
    (-20.0..20.0f64, -20.0..20.0f64, -3.1..3.1f64).prop_map(|(x, y, t)| Pose2::new(x, y, t))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn mno_measurements_are_disjoint_and_ordered(seed in any::<u64>(), n in 3usize..25,
                                                 keep in 0.4..1.0f64, rounds in 1usize..6, t in pose()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mi, mj) = scene_pair(&mut rng, n, 8.0, [0.2, 1.2], keep, 0.1, &t);
        let mparams = MnoParams { n: rounds, min_associations: 2 };
        let z = mno_clipper(&mi, &mj, &ClipperParams::default(), &mparams, 0.0);
        prop_assert!(z.len() <= rounds);
        let mut seen = HashSet::new();
        for m in &z {
            prop_assert!(m.num_associations >= 2);
            prop_assert_eq!(m.num_associations, m.association_ids.len());
            for p in &m.association_ids {
                prop_assert!(seen.insert(*p), "association {:?} reused", p);
                prop_assert!(mi.get(p.0).is_some() && mj.get(p.1).is_some());
            }
        }
        for w in z.windows(2) {
            prop_assert!(w[0].density >= w[1].density);
        }
    }

    #[test]
    fn noise_free_scene_recovers_the_isometry(seed in any::<u64>(), n in 4usize..15, t in pose()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // distinct sizes make every object its own only putative match
        let (mut mi, mut mj) = scene_pair(&mut rng, n, 10.0, [0.5, 0.6], 1.0, 0.0, &t);
        for (k, (a, b)) in mi.objects.iter_mut().zip(mj.objects.iter_mut()).enumerate() {
            a.width = 0.5 + k as f64;
            b.width = a.width;
        }
        let z = mno_clipper(&mi, &mj, &ClipperParams::default(), &MnoParams::default(), 0.0);
        prop_assert!(!z.is_empty());
        let (dt, dth) = z[0].pose.distance_to(&t);
        prop_assert!(dt < 1e-6 && dth < 1e-6, "{} {}", dt, dth);
        prop_assert_eq!(z[0].num_associations, n);
    }

    #[test]
    fn filter_state_stays_well_formed(seed in any::<u64>(), steps in 1usize..40,
                                      window in 2usize..9, truth in pose()) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = FilterParams { window, ..FilterParams::default() };
        let mut f = TcaffFilter::new(KalmanModel::default(), params).unwrap();
        for _ in 0..steps {
            let zs: Vec<AlignmentMeasurement> = (0..rng.random_range(0..4))
                .map(|_| {
                    let p = if rng.random_bool(0.7) {
                        Pose2::new(truth.x + rng.random_range(-0.1..0.1), truth.y + rng.random_range(-0.1..0.1), truth.theta)
                    } else {
                        random_pose(&mut rng, 20.0)
                    };
                    AlignmentMeasurement::from_pose(p)
                })
                .collect();
            f.step(&zs).unwrap();
            match f.mode() {
                Mode::Locked => {
                    prop_assert!(f.main_tree().is_some() && f.exploring_trees().is_empty());
                    let e = f.estimate().unwrap();
                    prop_assert!((e.cov - e.cov.transpose()).abs().max() <= 1e-12);
                    prop_assert!(e.cov.cholesky().is_some());
                    prop_assert!(e.mean[2] > -std::f64::consts::PI && e.mean[2] <= std::f64::consts::PI);
                }
                Mode::Exploring => {
                    prop_assert!(f.main_tree().is_none() && f.estimate().is_none());
                    for t in f.exploring_trees() {
                        prop_assert!(t.span() < window);
                        prop_assert!(t.leaves().len() <= params.max_branches);
                    }
                }
            }
        }
    }
}

#[test]
fn simulated_frames_agree_with_ground_truth() {
    let overrides: Vec<String> = ["sensor.centroid_sigma=0.0", "sensor.wh_sigma=0.0", "sensor.detection_prob=1.0"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for name in ["overlap", "indoor-return"] {
        let s = Scenario::load(name, &overrides).unwrap();
        let mut sim = Simulation::new(&s);
        let mut checked = 0;
        sim.run(|t| {
            let gt = t.gt_alignment(0, 1);
            let (a, b) = (&t.truths[0], &t.truths[1]);
            let k = t.map_tick;
            let direct = gt_alignment(&a.odom_poses[k], &a.world_poses[k], &b.odom_poses[k], &b.world_poses[k]);
            assert_eq!(gt, direct);
            // objects observed this tick by both robots are drift-free relative
            // to the current alignment
            for oj in t.views[1].objects.iter().filter(|o| o.last_seen == t.time) {
                let Some(oi) = t.views[0].get(oj.id).filter(|o| o.last_seen == t.time) else { continue };
                let (x, y) = apply(&gt, oj.centroid.x, oj.centroid.y);
                assert!((x - oi.centroid.x).hypot(y - oi.centroid.y) < 1e-6, "{name} tick {k}");
                checked += 1;
            }
            Ok(())
        })
        .unwrap();
        assert!(checked > 50, "{name}: only {checked} checks");
    }
}
