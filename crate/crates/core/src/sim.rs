//! Synthetic worlds, drifting odometry and object observations.
//!
//! All randomness is drawn from ChaCha generators keyed by
//! `(seed, stream, index...)`, so any tick of any robot can be regenerated
//! on its own, independent of evaluation order.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::geometry::{normalize_angle, Pose2};
use crate::object_map::ObjectLandmark;

const STREAM_WORLD: u64 = 1;
const STREAM_ODOM: u64 = 2;
const STREAM_OBSERVE: u64 = 3;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generator for one `(seed, key...)` cell of the counter space.
pub fn keyed_rng(seed: u64, key: &[u64]) -> ChaCha8Rng {
    let mut h = splitmix64(seed);
    for &k in key {
        h = splitmix64(h ^ k);
    }
    ChaCha8Rng::seed_from_u64(h)
}

fn gaussian(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    if sigma > 0.0 {
        Normal::new(0.0, sigma).expect("finite sigma").sample(rng)
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplicitObject {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    /// Width and depth of the area holding random objects (m).
    pub extent: [f64; 2],
    /// Offset of that area's lower-left corner.
    pub origin: [f64; 2],
    pub n_objects: usize,
    pub wh_range: [f64; 2],
    /// Random objects are kept at least this far apart.
    pub min_separation: f64,
    /// When positive, random objects are placed in generic position: no
    /// two size-compatible object pairs differ in length by less than this.
    pub generic_margin: f64,
    /// Width/height difference treated as size-compatible by that check.
    pub generic_wh_tol: f64,
    pub alias_copies: usize,
    pub alias_size: usize,
    /// Side of the square patch one constellation is drawn in (m).
    pub alias_spread: f64,
    /// Lower-left corner of each constellation copy; random when empty.
    pub alias_anchors: Vec<[f64; 2]>,
    pub objects: Vec<ExplicitObject>,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            extent: [10.0, 10.0],
            origin: [0.0, 0.0],
            n_objects: 20,
            wh_range: [0.2, 1.5],
            min_separation: 0.5,
            generic_margin: 0.0,
            generic_wh_tol: 0.4,
            alias_copies: 0,
            alias_size: 0,
            alias_spread: 3.0,
            alias_anchors: Vec::new(),
            objects: Vec::new(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DriftConfig {
    /// Random-walk translation noise per step (m).
    pub trans_rw_sigma: f64,
    /// Random-walk heading noise per step (rad).
    pub rot_rw_sigma: f64,
    /// Forward translation bias per step (m).
    pub trans_bias: f64,
    /// Heading bias per step (rad).
    pub rot_bias: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SensorConfig {
    pub fov_radius: f64,
    /// Half of the horizontal field of view (rad).
    pub fov_half_angle: f64,
    pub detection_prob: f64,
    pub centroid_sigma: f64,
    pub wh_sigma: f64,
}

impl Default for SensorConfig {
    fn default() -> Self {
        Self {
            fov_radius: 5.0,
            fov_half_angle: 60f64.to_radians(),
            detection_prob: 0.9,
            centroid_sigma: 0.05,
            wh_sigma: 0.03,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobotTruth {
    /// `T^world_robot` per tick.
    pub world_poses: Vec<Pose2>,
    /// `T^odom_robot` per tick; the first entry is the identity.
    pub odom_poses: Vec<Pose2>,
}

fn uniform(rng: &mut ChaCha8Rng, range: [f64; 2]) -> f64 {
    if range[1] > range[0] {
        rng.random_range(range[0]..range[1])
    } else {
        range[0]
    }
}

#[derive(Clone, Copy)]
struct Placed {
    centroid: Vector3<f64>,
    w: f64,
    h: f64,
}

impl Placed {
    fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self {
            centroid: Vector3::new(x, y, h / 2.0),
            w,
            h,
        }
    }

    fn size_compatible(&self, other: &Placed, tol: f64) -> bool {
        (self.w - other.w).abs() <= tol && (self.h - other.h).abs() <= tol
    }
}

/// Placed objects plus every object pair sorted by length, for detecting
/// pairs that pairwise-distance registration could confuse.
#[derive(Default)]
struct Layout {
    objects: Vec<Placed>,
    pairs: Vec<(f64, usize, usize)>,
}

impl Layout {
    fn push(&mut self, o: Placed) {
        let n = self.objects.len();
        for (i, a) in self.objects.iter().enumerate() {
            self.pairs.push(((a.centroid - o.centroid).norm(), i, n));
        }
        self.pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        self.objects.push(o);
    }

    fn separated(&self, o: &Placed, min_sep: f64) -> bool {
        self.objects
            .iter()
            .all(|a| (a.centroid.xy() - o.centroid.xy()).norm() >= min_sep)
    }

    /// True when some pair `(o, a)` matches the length of a disjoint pair
    /// `(b, c)` within `margin` and the sizes line up in either order.
    fn coincides(&self, o: &Placed, margin: f64, tol: f64) -> bool {
        for (ai, a) in self.objects.iter().enumerate() {
            let d = (a.centroid - o.centroid).norm();
            let lo = self.pairs.partition_point(|p| p.0 < d - margin);
            for &(len, b, c) in &self.pairs[lo..] {
                if len > d + margin {
                    break;
                }
                if b == ai || c == ai {
                    continue;
                }
                let (ob, oc) = (&self.objects[b], &self.objects[c]);
                if (o.size_compatible(ob, tol) && a.size_compatible(oc, tol))
                    || (o.size_compatible(oc, tol) && a.size_compatible(ob, tol))
                {
                    return true;
                }
            }
        }
        false
    }
}

const PLACEMENT_TRIES: usize = 200;

/// World-frame objects. Ids run over random clutter first, then the aliased
/// constellation copies, then explicitly listed objects, starting at 0.
///
/// Copies and explicit objects are placed before the clutter, so with
/// `generic_margin > 0` clutter avoids coincidences with them as well.
/// Clutter that cannot be placed within the constraints is dropped.
pub fn generate_world(cfg: &WorldConfig) -> Vec<ObjectLandmark> {
    let mut layout = Layout::default();

    let mut alias_rng = keyed_rng(cfg.seed, &[STREAM_WORLD, 1]);
    if cfg.alias_copies > 0 && cfg.alias_size > 0 {
        let shape: Vec<(f64, f64, f64, f64)> = (0..cfg.alias_size)
            .map(|_| {
                (
                    uniform(&mut alias_rng, [0.0, cfg.alias_spread]),
                    uniform(&mut alias_rng, [0.0, cfg.alias_spread]),
                    uniform(&mut alias_rng, cfg.wh_range),
                    uniform(&mut alias_rng, cfg.wh_range),
                )
            })
            .collect();
        for c in 0..cfg.alias_copies {
            let anchor = match cfg.alias_anchors.get(c) {
                Some(a) => *a,
                None => [
                    cfg.origin[0]
                        + uniform(&mut alias_rng, [0.0, (cfg.extent[0] - cfg.alias_spread).max(0.0)]),
                    cfg.origin[1]
                        + uniform(&mut alias_rng, [0.0, (cfg.extent[1] - cfg.alias_spread).max(0.0)]),
                ],
            };
            for &(dx, dy, w, h) in &shape {
                layout.push(Placed::new(anchor[0] + dx, anchor[1] + dy, w, h));
            }
        }
    }
    for o in &cfg.objects {
        layout.push(Placed::new(o.x, o.y, o.w, o.h));
    }
    let fixed = layout.objects.len();

    let mut rng = keyed_rng(cfg.seed, &[STREAM_WORLD, 0]);
    for _ in 0..cfg.n_objects {
        for _ in 0..PLACEMENT_TRIES {
            let o = Placed::new(
                cfg.origin[0] + uniform(&mut rng, [0.0, cfg.extent[0]]),
                cfg.origin[1] + uniform(&mut rng, [0.0, cfg.extent[1]]),
                uniform(&mut rng, cfg.wh_range),
                uniform(&mut rng, cfg.wh_range),
            );
            if layout.separated(&o, cfg.min_separation)
                && !(cfg.generic_margin > 0.0 && layout.coincides(&o, cfg.generic_margin, cfg.generic_wh_tol))
            {
                layout.push(o);
                break;
            }
        }
    }

    let order = (fixed..layout.objects.len()).chain(0..fixed);
    order
        .enumerate()
        .map(|(id, k)| {
            let o = &layout.objects[k];
            ObjectLandmark::new(id as u64, o.centroid, o.w, o.h, 0.0)
        })
        .collect()
}

/// Integrates the true relative motions, each corrupted by bias and
/// random-walk noise, into a drifting odometry track starting at identity.
pub fn simulate_odometry(truth_world: &[Pose2], drift: &DriftConfig, seed: u64) -> RobotTruth {
    let mut odom = Vec::with_capacity(truth_world.len());
    if let Some(first) = truth_world.first() {
        odom.push(Pose2::identity());
        let mut prev_world = *first;
        let mut current = Pose2::identity();
        for (k, w) in truth_world.iter().enumerate().skip(1) {
            let delta = prev_world.inverse().compose(w);
            let mut rng = keyed_rng(seed, &[STREAM_ODOM, k as u64]);
            let noisy = Pose2::new(
                delta.x + drift.trans_bias + gaussian(&mut rng, drift.trans_rw_sigma),
                delta.y + gaussian(&mut rng, drift.trans_rw_sigma),
                delta.theta + drift.rot_bias + gaussian(&mut rng, drift.rot_rw_sigma),
            );
            current = current.compose(&noisy);
            odom.push(current);
            prev_world = *w;
        }
    }
    RobotTruth {
        world_poses: truth_world.to_vec(),
        odom_poses: odom,
    }
}

/// Objects inside the sensor footprint, detected with `detection_prob`,
/// expressed in the robot's drifting odometry frame with additive noise.
pub fn observe(
    world: &[ObjectLandmark],
    robot_pose_world: &Pose2,
    robot_pose_odom: &Pose2,
    sensor: &SensorConfig,
    now: f64,
    seed: u64,
    tick: u64,
) -> Vec<ObjectLandmark> {
    let world_to_robot = robot_pose_world.inverse();
    let mut out = Vec::new();
    for obj in world {
        let rel = world_to_robot.transform_point(&obj.centroid.xy());
        let range = rel.norm();
        if range > sensor.fov_radius || normalize_angle(rel.y.atan2(rel.x)).abs() > sensor.fov_half_angle {
            continue;
        }
        let mut rng = keyed_rng(seed, &[STREAM_OBSERVE, tick, obj.id]);
        if !rng.random_bool(sensor.detection_prob.clamp(0.0, 1.0)) {
            continue;
        }
        let p = robot_pose_odom.transform_point(&rel);
        let centroid = Vector3::new(
            p.x + gaussian(&mut rng, sensor.centroid_sigma),
            p.y + gaussian(&mut rng, sensor.centroid_sigma),
            obj.centroid.z + gaussian(&mut rng, sensor.centroid_sigma),
        );
        let width = (obj.width + gaussian(&mut rng, sensor.wh_sigma)).max(0.01);
        let height = (obj.height + gaussian(&mut rng, sensor.wh_sigma)).max(0.01);
        out.push(ObjectLandmark::new(obj.id, centroid, width, height, now));
    }
    out
}

/// Timed waypoint `[t_s, x_m, y_m, heading_deg]`.
pub type Waypoint = [f64; 4];

/// Pose at time `t` by linear interpolation between timed waypoints;
/// heading follows the shorter arc. Clamped to the first and last waypoint.
pub fn interpolate_waypoints(waypoints: &[Waypoint], t: f64) -> Pose2 {
    let pose = |w: &Waypoint| Pose2::new(w[1], w[2], w[3].to_radians());
    match waypoints {
        [] => Pose2::identity(),
        [only] => pose(only),
        _ => {
            if t <= waypoints[0][0] {
                return pose(&waypoints[0]);
            }
            for pair in waypoints.windows(2) {
                let (a, b) = (&pair[0], &pair[1]);
                if t <= b[0] {
                    let span = b[0] - a[0];
                    let s = if span > 0.0 { (t - a[0]) / span } else { 1.0 };
                    let (pa, pb) = (pose(a), pose(b));
                    let dth = normalize_angle(pb.theta - pa.theta);
                    return Pose2::new(
                        pa.x + s * (pb.x - pa.x),
                        pa.y + s * (pb.y - pa.y),
                        pa.theta + s * dth,
                    );
                }
            }
            pose(waypoints.last().expect("non-empty"))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::gt_alignment;
    use nalgebra::Vector2;

    #[test]
    fn empty_world() {
        let cfg = WorldConfig {
            n_objects: 0,
            ..WorldConfig::default()
        };
        assert!(generate_world(&cfg).is_empty());
    }

    #[test]
    fn alias_copies_are_pure_translations() {
        let cfg = WorldConfig {
            n_objects: 5,
            alias_copies: 2,
            alias_size: 4,
            seed: 9,
            ..WorldConfig::default()
        };
        let w = generate_world(&cfg);
        assert_eq!(w.len(), 13);
        let (a, b) = (&w[5..9], &w[9..13]);
        let shift = b[0].centroid - a[0].centroid;
        for (x, y) in a.iter().zip(b) {
            assert!((y.centroid - x.centroid - shift).norm() < 1e-12);
            assert_eq!((x.width, x.height), (y.width, y.height));
        }
    }

    #[test]
    fn world_is_deterministic_per_seed() {
        let cfg = WorldConfig {
            seed: 4,
            alias_copies: 2,
            alias_size: 3,
            ..WorldConfig::default()
        };
        assert_eq!(generate_world(&cfg), generate_world(&cfg));
        let other = WorldConfig { seed: 5, ..cfg.clone() };
        assert_ne!(generate_world(&cfg), generate_world(&other));
    }

    #[test]
    fn generic_worlds_have_no_confusable_pairs() {
        let cfg = WorldConfig {
            n_objects: 25,
            wh_range: [0.2, 3.0],
            generic_margin: 0.5,
            alias_copies: 2,
            alias_size: 4,
            seed: 3,
            ..WorldConfig::default()
        };
        let w = generate_world(&cfg);
        assert!(w.len() >= 8 + 15, "only {} objects placed", w.len());
        let alias: Vec<u64> = (w.len() as u64 - 8..w.len() as u64).collect();
        let compat = |a: &ObjectLandmark, b: &ObjectLandmark| {
            (a.width - b.width).abs() <= cfg.generic_wh_tol && (a.height - b.height).abs() <= cfg.generic_wh_tol
        };
        let n = w.len();
        for a in 0..n {
            for b in (a + 1)..n {
                for c in 0..n {
                    for d in (c + 1)..n {
                        let ids = [a, b, c, d];
                        let distinct = (0..4).all(|i| (i + 1..4).all(|j| ids[i] != ids[j]));
                        if !distinct || ids.iter().all(|&i| alias.contains(&(i as u64))) {
                            continue;
                        }
                        let l1 = (w[a].centroid - w[b].centroid).norm();
                        let l2 = (w[c].centroid - w[d].centroid).norm();
                        let sizes = (compat(&w[a], &w[c]) && compat(&w[b], &w[d]))
                            || (compat(&w[a], &w[d]) && compat(&w[b], &w[c]));
                        assert!(!(sizes && (l1 - l2).abs() < cfg.generic_margin), "{a} {b} {c} {d}");
                    }
                }
            }
        }
    }

    fn straight_line(n: usize) -> Vec<Pose2> {
        (0..n).map(|k| Pose2::new(2.0 + 0.05 * k as f64, 1.0, 0.3)).collect()
    }

    #[test]
    fn zero_drift_keeps_alignment_constant() {
        let truth = straight_line(200);
        let other: Vec<Pose2> = (0..200).map(|k| Pose2::new(-1.0, 0.02 * k as f64, 1.2)).collect();
        let a = simulate_odometry(&truth, &DriftConfig::default(), 1);
        let b = simulate_odometry(&other, &DriftConfig::default(), 2);
        let first = gt_alignment(&a.odom_poses[0], &truth[0], &b.odom_poses[0], &other[0]);
        for k in 0..200 {
            let g = gt_alignment(&a.odom_poses[k], &truth[k], &b.odom_poses[k], &other[k]);
            let (dt, dth) = g.distance_to(&first);
            assert!(dt < 1e-9 && dth < 1e-12);
        }
        assert_eq!(a.odom_poses[0], Pose2::identity());
    }

    #[test]
    fn heading_bias_accumulates() {
        let truth = straight_line(1001);
        let drift = DriftConfig {
            rot_bias: 0.001,
            rot_rw_sigma: 0.0005,
            ..DriftConfig::default()
        };
        let odom = simulate_odometry(&truth, &drift, 3);
        // true heading change is zero, so odometry heading is pure drift:
        // 1000 * 0.001 = 1 rad of bias, random-walk spread 0.0005 * sqrt(1000)
        let heading = odom.odom_poses[1000].theta;
        let spread = 0.0005 * 1000f64.sqrt();
        assert!((heading - 1.0).abs() < 4.0 * spread, "{heading}");
    }

    #[test]
    fn odometry_is_deterministic() {
        let truth = straight_line(50);
        let drift = DriftConfig {
            trans_rw_sigma: 0.01,
            rot_rw_sigma: 0.01,
            ..DriftConfig::default()
        };
        assert_eq!(simulate_odometry(&truth, &drift, 8), simulate_odometry(&truth, &drift, 8));
    }

    fn one_object(x: f64, y: f64) -> Vec<ObjectLandmark> {
        vec![ObjectLandmark::new(7, Vector3::new(x, y, 0.4), 0.5, 0.8, 0.0)]
    }

    #[test]
    fn observe_examples() {
        let pose = Pose2::new(1.0, 2.0, 0.5);
        let far = one_object(50.0, 50.0);
        let sensor = SensorConfig::default();
        assert!(observe(&far, &pose, &pose, &sensor, 0.0, 1, 0).is_empty());

        let exact = SensorConfig {
            detection_prob: 1.0,
            centroid_sigma: 0.0,
            wh_sigma: 0.0,
            fov_half_angle: std::f64::consts::PI,
            ..sensor
        };
        let near = one_object(2.0, 3.0);
        // with no drift the odometry frame is the initial world frame
        let start = Pose2::new(0.5, 0.5, 0.2);
        let odom = start.inverse().compose(&pose);
        let seen = observe(&near, &pose, &odom, &exact, 4.0, 1, 0);
        assert_eq!(seen.len(), 1);
        let expected = start.inverse().transform_point(&Vector2::new(2.0, 3.0));
        assert!((seen[0].centroid.xy() - expected).norm() < 1e-12);
        assert_eq!(seen[0].last_seen, 4.0);
        assert_eq!((seen[0].width, seen[0].height), (0.5, 0.8));

        let blind = SensorConfig {
            detection_prob: 0.0,
            ..exact
        };
        assert!(observe(&near, &pose, &pose, &blind, 0.0, 1, 0).is_empty());
    }

    #[test]
    fn waypoint_interpolation() {
        let wps = [[0.0, 0.0, 0.0, 170.0], [10.0, 10.0, 0.0, -170.0]];
        let mid = interpolate_waypoints(&wps, 5.0);
        assert!((mid.x - 5.0).abs() < 1e-12);
        assert!((mid.theta.abs() - std::f64::consts::PI).abs() < 1e-9);
        assert_eq!(interpolate_waypoints(&wps, -1.0), Pose2::new(0.0, 0.0, 170f64.to_radians()));
        assert_eq!(interpolate_waypoints(&wps, 99.0), Pose2::new(10.0, 0.0, -170f64.to_radians()));
    }
}
