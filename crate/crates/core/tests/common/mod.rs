//! Independent oracles and generators shared by the integration suites.
//!
//! Nothing here calls into the solver, registration or filter code under
//! test; the oracles are written from the definitions alone.

#![allow(dead_code)]

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use tcaff::{ObjectLandmark, ObjectMap, Pose2};

pub fn wrap(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w <= -PI {
        w + 2.0 * PI
    } else {
        w
    }
}

/// Applies `T = (x, y, theta)` to a planar point.
pub fn apply(t: &Pose2, x: f64, y: f64) -> (f64, f64) {
    let (s, c) = t.theta.sin_cos();
    (c * x - s * y + t.x, s * x + c * y + t.y)
}

pub fn random_pose(rng: &mut ChaCha8Rng, span: f64) -> Pose2 {
    Pose2::new(
        rng.random_range(-span..span),
        rng.random_range(-span..span),
        rng.random_range(-PI..PI),
    )
}

pub fn map_of(robot: &str, objects: Vec<ObjectLandmark>) -> ObjectMap {
    let mut m = ObjectMap::new(robot);
    for o in objects {
        m.upsert(o);
    }
    m
}

/// Two maps of one random scene: map `i` in the world frame, map `j` in a
/// frame with `T^i_j = t`, each keeping a random subset of the objects.
pub fn scene_pair(
    rng: &mut ChaCha8Rng,
    n: usize,
    extent: f64,
    wh: [f64; 2],
    keep: f64,
    noise: f64,
    t: &Pose2,
) -> (ObjectMap, ObjectMap) {
    let inv = t.inverse();
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for id in 0..n as u64 {
        let (x, y) = (rng.random_range(0.0..extent), rng.random_range(0.0..extent));
        let z = rng.random_range(0.0..1.0);
        let (w, h) = (rng.random_range(wh[0]..wh[1]), rng.random_range(wh[0]..wh[1]));
        if rng.random_bool(keep) {
            let jitter = |rng: &mut ChaCha8Rng| if noise > 0.0 { rng.random_range(-noise..noise) } else { 0.0 };
            a.push(ObjectLandmark::new(
                id,
                Vector3::new(x + jitter(rng), y + jitter(rng), z),
                w,
                h,
                0.0,
            ));
        }
        if rng.random_bool(keep) {
            let (xj, yj) = apply(&inv, x, y);
            b.push(ObjectLandmark::new(id, Vector3::new(xj, yj, z), w, h, 0.0));
        }
    }
    (map_of("i", a), map_of("j", b))
}

/// Densest consistent subset by enumerating every subset of `m` nodes.
/// Ties go to the larger set, then to the lexicographically smallest index
/// list.
pub fn brute_force_densest(affinity: &[Vec<f64>]) -> (f64, Vec<usize>) {
    let m = affinity.len();
    let mut best = (0.0, Vec::new());
    for mask in 1u32..(1 << m) {
        let set: Vec<usize> = (0..m).filter(|&p| mask & (1 << p) != 0).collect();
        if !set.iter().all(|&p| set.iter().all(|&q| affinity[p][q] > 0.0)) {
            continue;
        }
        let total: f64 = set.iter().flat_map(|&p| set.iter().map(move |&q| (p, q))).map(|(p, q)| affinity[p][q]).sum();
        let d = total / set.len() as f64;
        let better = d > best.0 + 1e-12
            || ((d - best.0).abs() <= 1e-12
                && (set.len() > best.1.len() || (set.len() == best.1.len() && set < best.1)));
        if better {
            best = (d, set);
        }
    }
    best
}

/// Plain Kalman filter over `[x, y, theta]` with `H = I`, written with
/// explicit inverses and determinants.
#[derive(Clone, Debug)]
pub struct OracleBelief {
    pub mean: Vector3<f64>,
    pub cov: Matrix3<f64>,
}

pub fn oracle_predict(b: &OracleBelief, q: &Matrix3<f64>) -> OracleBelief {
    OracleBelief {
        mean: b.mean,
        cov: b.cov + q,
    }
}

/// Returns the updated belief and the step cost
/// `0.5 * (r' S^-1 r + ln det S)`.
pub fn oracle_update(b: &OracleBelief, z: &Pose2, r: &Matrix3<f64>) -> (OracleBelief, f64) {
    let s = b.cov + r;
    let s_inv = s.try_inverse().expect("S invertible");
    let mut res = Vector3::new(z.x, z.y, z.theta) - b.mean;
    res[2] = wrap(res[2]);
    let cost = 0.5 * ((res.transpose() * s_inv * res)[(0, 0)] + s.determinant().ln());
    let k = b.cov * s_inv;
    let mut mean = b.mean + k * res;
    mean[2] = wrap(mean[2]);
    let cov = (Matrix3::identity() - k) * b.cov;
    (OracleBelief { mean, cov }, cost)
}

pub fn oracle_no_measurement_cost(p_nm: f64) -> f64 {
    -p_nm.ln() - 1.5 * (2.0 * PI).ln()
}

/// Minimum cumulative cost over every sequence that picks, at each step,
/// either nothing or one of that step's measurements. Returns the cost and
/// the final belief of the minimizing sequence.
pub fn enumerate_sequences(
    root: &OracleBelief,
    steps: &[Vec<Pose2>],
    q: &Matrix3<f64>,
    r: &Matrix3<f64>,
    p_nm: f64,
) -> (f64, OracleBelief) {
    fn go(
        b: &OracleBelief,
        cost: f64,
        k: usize,
        steps: &[Vec<Pose2>],
        q: &Matrix3<f64>,
        r: &Matrix3<f64>,
        nm: f64,
        best: &mut Option<(f64, OracleBelief)>,
    ) {
        if k == steps.len() {
            if best.as_ref().is_none_or(|(c, _)| cost < *c) {
                *best = Some((cost, b.clone()));
            }
            return;
        }
        let pred = oracle_predict(b, q);
        go(&pred, cost + nm, k + 1, steps, q, r, nm, best);
        for z in &steps[k] {
            let (post, c) = oracle_update(&pred, z, r);
            go(&post, cost + c, k + 1, steps, q, r, nm, best);
        }
    }
    let mut best = None;
    go(root, 0.0, 0, steps, q, r, oracle_no_measurement_cost(p_nm), &mut best);
    best.expect("at least the all-empty sequence")
}
