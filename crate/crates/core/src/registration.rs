//! Weighted planar registration and multiple-near-optima association.

use nalgebra::{Matrix2, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clipper::{self, ClipperParams};
use crate::geometry::Pose2;
use crate::object_map::ObjectMap;

/// Ages below this are floored before inversion in [`recency_weight`].
pub const MIN_AGE: f64 = 0.1;

#[derive(Debug, Error, PartialEq)]
pub enum RegistrationError {
    #[error("need at least 2 correspondences, got {0}")]
    TooFewPairs(usize),
    #[error("correspondence weights must be positive and finite")]
    BadWeight,
    #[error("points are coincident, rotation is unobservable")]
    Degenerate,
}

/// One candidate alignment `T^{odom_i}_{odom_j}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentMeasurement {
    pub pose: Pose2,
    pub num_associations: usize,
    /// `(object id in map i, object id in map j)` for every inlier.
    pub association_ids: Vec<(u64, u64)>,
    pub density: f64,
}

impl AlignmentMeasurement {
    /// Bare measurement with no association bookkeeping.
    pub fn from_pose(pose: Pose2) -> Self {
        Self {
            pose,
            num_associations: 0,
            association_ids: Vec::new(),
            density: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MnoParams {
    /// Number of solver repetitions.
    pub n: usize,
    pub min_associations: usize,
}

impl Default for MnoParams {
    fn default() -> Self {
        Self {
            n: 4,
            min_associations: 2,
        }
    }
}

/// `(l_i l_j)^-1` with each age floored at [`MIN_AGE`].
pub fn recency_weight(l_i: f64, l_j: f64) -> f64 {
    1.0 / (l_i.max(MIN_AGE) * l_j.max(MIN_AGE))
}

/// Weighted least-squares rigid fit over the planar components:
/// minimizes `sum w |p_i - (R p_j + t)|^2` and returns `(t, R)` as a pose
/// mapping frame `j` into frame `i`.
pub fn weighted_arun_2d(
    pairs: &[(Vector3<f64>, Vector3<f64>, f64)],
) -> Result<Pose2, RegistrationError> {
    if pairs.len() < 2 {
        return Err(RegistrationError::TooFewPairs(pairs.len()));
    }
    if pairs.iter().any(|&(_, _, w)| !(w.is_finite() && w > 0.0)) {
        return Err(RegistrationError::BadWeight);
    }
    let total: f64 = pairs.iter().map(|&(_, _, w)| w).sum();
    let (mut ci, mut cj) = (Vector2::zeros(), Vector2::zeros());
    for (pi, pj, w) in pairs {
        ci += pi.xy() * *w;
        cj += pj.xy() * *w;
    }
    ci /= total;
    cj /= total;

    // cross-covariance of centered points, H = sum w (p_j - c_j)(p_i - c_i)^T
    let mut h = Matrix2::zeros();
    let (mut spread_i, mut spread_j) = (0.0, 0.0);
    for (pi, pj, w) in pairs {
        let a = pi.xy() - ci;
        let b = pj.xy() - cj;
        h += b * a.transpose() * *w;
        spread_i += w * a.norm_squared();
        spread_j += w * b.norm_squared();
    }
    let scale = total * (1.0 + ci.norm_squared() + cj.norm_squared());
    if spread_i <= 1e-14 * scale || spread_j <= 1e-14 * scale {
        return Err(RegistrationError::Degenerate);
    }

    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let v = v_t.transpose();
    let mut fix = Matrix2::identity();
    if (v * u.transpose()).determinant() < 0.0 {
        fix[(1, 1)] = -1.0;
    }
    let r = v * fix * u.transpose();
    let theta = r[(1, 0)].atan2(r[(0, 0)]);
    let t = ci - r * cj;
    Ok(Pose2::new(t.x, t.y, theta))
}

/// Runs the association solver `mparams.n` times, each time removing the
/// associations selected by the previous solve, and registers every inlier
/// set into an alignment measurement. Maps are expected to be recent views.
///
/// The loop stops at the first solve with fewer than `min_associations`
/// inliers. Measurements come back ordered by decreasing density.
pub fn mno_clipper(
    map_i: &ObjectMap,
    map_j: &ObjectMap,
    cparams: &ClipperParams,
    mparams: &MnoParams,
    now: f64,
) -> Vec<AlignmentMeasurement> {
    if map_i.is_empty() || map_j.is_empty() {
        return Vec::new();
    }
    let assocs = clipper::putative_associations(map_i, map_j, cparams);
    if assocs.is_empty() {
        return Vec::new();
    }
    let mut problem = clipper::build_problem(map_i, map_j, assocs, cparams);
    let min_inliers = mparams.min_associations.max(2);

    let mut out = Vec::new();
    for _ in 0..mparams.n {
        let sol = clipper::solve(&problem, cparams);
        if sol.inliers.len() < min_inliers {
            break;
        }
        let mut pairs = Vec::with_capacity(sol.inliers.len());
        let mut ids = Vec::with_capacity(sol.inliers.len());
        for &k in &sol.inliers {
            let a = problem.associations[k];
            let (oi, oj) = (&map_i.objects[a.idx_i], &map_j.objects[a.idx_j]);
            pairs.push((oi.centroid, oj.centroid, recency_weight(oi.age(now), oj.age(now))));
            ids.push((oi.id, oj.id));
        }
        if let Ok(pose) = weighted_arun_2d(&pairs) {
            out.push(AlignmentMeasurement {
                pose,
                num_associations: ids.len(),
                association_ids: ids,
                density: sol.density,
            });
        }
        problem.zero_block(&sol.inliers);
    }
    out.sort_by(|a, b| b.density.total_cmp(&a.density));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::object_map::ObjectLandmark;
    use std::f64::consts::FRAC_PI_2;

    /// Closed-form planar fit via weighted centroids and atan2 of the
    /// summed cross and dot products.
    fn closed_form(pairs: &[(Vector3<f64>, Vector3<f64>, f64)]) -> Pose2 {
        let total: f64 = pairs.iter().map(|p| p.2).sum();
        let (mut cix, mut ciy, mut cjx, mut cjy) = (0.0, 0.0, 0.0, 0.0);
        for (a, b, w) in pairs {
            cix += w * a.x;
            ciy += w * a.y;
            cjx += w * b.x;
            cjy += w * b.y;
        }
        let (cix, ciy, cjx, cjy) = (cix / total, ciy / total, cjx / total, cjy / total);
        let (mut cross, mut dotp) = (0.0, 0.0);
        for (a, b, w) in pairs {
            let (ax, ay, bx, by) = (a.x - cix, a.y - ciy, b.x - cjx, b.y - cjy);
            cross += w * (bx * ay - by * ax);
            dotp += w * (bx * ax + by * ay);
        }
        let th = cross.atan2(dotp);
        let (s, c) = th.sin_cos();
        Pose2::new(cix - (c * cjx - s * cjy), ciy - (s * cjx + c * cjy), th)
    }

    #[test]
    fn recency_weight_examples() {
        assert_eq!(recency_weight(1.0, 2.0), 0.5);
        assert_eq!(recency_weight(1.0, 1.0), 1.0);
        assert!((recency_weight(0.0, 4.0) - 1.0 / (0.1 * 4.0)).abs() < 1e-12);
        assert!(recency_weight(2.0, 3.0) < recency_weight(1.0, 3.0));
    }

    #[test]
    fn aligned_points_give_identity() {
        let pts = [Vector3::new(0.0, 0.0, 0.0), Vector3::new(1.0, 2.0, 0.5), Vector3::new(-3.0, 1.0, 0.0)];
        let pairs: Vec<_> = pts.iter().map(|p| (*p, *p, 1.0)).collect();
        let (dt, dth) = weighted_arun_2d(&pairs).unwrap().distance_to(&Pose2::identity());
        assert!(dt < 1e-12 && dth < 1e-12);
    }

    #[test]
    fn quarter_turn_is_recovered() {
        let src = [Vector3::new(1.0, 0.0, 0.0), Vector3::new(0.0, 2.0, 0.0), Vector3::new(-1.0, -1.0, 0.0)];
        let pairs: Vec<_> = src
            .iter()
            .map(|p| (Vector3::new(-p.y, p.x, p.z), *p, 1.0))
            .collect();
        let (dt, dth) = weighted_arun_2d(&pairs)
            .unwrap()
            .distance_to(&Pose2::new(0.0, 0.0, FRAC_PI_2));
        assert!(dt < 1e-9 && dth < 1e-9);
    }

    #[test]
    fn heavy_weights_dominate_outlier() {
        let truth = Pose2::new(0.7, -0.2, 0.4);
        let map = |p: Vector3<f64>| {
            let q = truth.transform_point(&p.xy());
            Vector3::new(q.x, q.y, p.z)
        };
        let a = Vector3::new(0.0, 0.0, 0.0);
        let b = Vector3::new(2.0, 1.0, 0.0);
        let out_j = Vector3::new(5.0, -3.0, 0.0);
        let exact = vec![(map(a), a, 1e4), (map(b), b, 1e4)];
        let mut with_outlier = exact.clone();
        with_outlier.push((Vector3::new(-4.0, 6.0, 0.0), out_j, 1.0));

        let reference = closed_form(&exact);
        let got = weighted_arun_2d(&with_outlier).unwrap();
        let (dt, dth) = got.distance_to(&reference);
        assert!(dt < 1e-2 && dth < 1e-2, "{got:?} vs {reference:?}");
        let (dt, dth) = got.distance_to(&closed_form(&with_outlier));
        assert!(dt < 1e-9 && dth < 1e-9);
    }

    #[test]
    fn degenerate_inputs_are_errors() {
        let p = Vector3::new(1.0, 1.0, 0.0);
        assert_eq!(weighted_arun_2d(&[(p, p, 1.0)]), Err(RegistrationError::TooFewPairs(1)));
        assert_eq!(
            weighted_arun_2d(&[(p, p, 1.0), (p, p, 1.0), (p, p, 2.0)]),
            Err(RegistrationError::Degenerate)
        );
        let q = Vector3::new(2.0, 1.0, 0.0);
        assert_eq!(weighted_arun_2d(&[(p, p, 1.0), (q, q, 0.0)]), Err(RegistrationError::BadWeight));
    }

    fn constellation_map(robot: &str, pts: &[(f64, f64)], frame: &Pose2, id_base: u64) -> ObjectMap {
        let mut m = ObjectMap::new(robot);
        for (k, &(x, y)) in pts.iter().enumerate() {
            let q = frame.transform_point(&Vector2::new(x, y));
            let wh = 0.3 + 0.4 * k as f64;
            m.upsert(ObjectLandmark::new(id_base + k as u64, Vector3::new(q.x, q.y, wh / 2.0), wh, wh, 10.0));
        }
        m
    }

    #[test]
    fn single_overlap_gives_one_exact_measurement() {
        let pts = [(0.0, 0.0), (2.0, 0.5), (1.0, 3.0), (-1.5, 2.0)];
        // map j is the world seen through T^j_w; alignment T^i_j = T^i_w (T^j_w)^-1
        let t_jw = Pose2::new(3.0, -1.0, 0.8);
        let mi = constellation_map("i", &pts, &Pose2::identity(), 0);
        let mj = constellation_map("j", &pts, &t_jw, 0);
        let z = mno_clipper(&mi, &mj, &ClipperParams::default(), &MnoParams::default(), 10.0);
        assert_eq!(z.len(), 1);
        let (dt, dth) = z[0].pose.distance_to(&t_jw.inverse());
        assert!(dt < 1e-9 && dth < 1e-9);
        assert_eq!(z[0].num_associations, 4);
    }

    #[test]
    fn empty_map_gives_no_measurement() {
        let mi = constellation_map("i", &[(0.0, 0.0), (1.0, 0.0)], &Pose2::identity(), 0);
        let empty = ObjectMap::new("j");
        assert!(mno_clipper(&mi, &empty, &ClipperParams::default(), &MnoParams::default(), 0.0).is_empty());
        assert!(mno_clipper(&empty, &mi, &ClipperParams::default(), &MnoParams::default(), 0.0).is_empty());
    }
}
