//! Metric cone position from seven image keypoints.
//!
//! The solver chain is planar-aware by construction: the model keypoints
//! all lie in one plane, which makes the classical DLT initialization
//! rank-deficient (see the regression test at the bottom), so the
//! initial pose comes from a similar-triangles depth estimate instead
//! and is refined by damped Gauss-Newton (Levenberg-Marquardt) over the
//! six pose parameters. Robustness comes from exhaustively refining
//! every keypoint subset of a fixed size and keeping the largest
//! consensus set; with seven keypoints that is a deterministic 35-way
//! enumeration, not a sampled RANSAC.

use itertools::Itertools;
use nalgebra::{Matrix3, Matrix6, SMatrix, Vector2, Vector3, Vector6};
use thiserror::Error;

use crate::cone::{camera_facing_pose, ConeGeometry, KeypointFrame, KeypointSet};
use crate::geometry::{CameraModel, Point2, Point3, RigidPose};

/// LM terminates when the proposed step norm drops below this.
pub const LM_STEP_TOL: f64 = 1e-10;
/// ... or when an accepted step decreases the cost by less than this.
pub const LM_COST_TOL: f64 = 1e-12;
/// ... or after this many outer iterations (flagged, not an error).
pub const LM_MAX_ITERS: usize = 100;
/// Initial damping; x10 on a rejected step, x0.1 on an accepted one.
pub const LM_LAMBDA_INIT: f64 = 1e-3;
/// Apparent heights below this many pixels cannot seed a depth estimate.
pub const MIN_APPARENT_HEIGHT_PX: f64 = 2.0;

#[derive(Debug, Error, PartialEq)]
pub enum PnpError {
    #[error("keypoints too degenerate to initialize depth: {0}")]
    DegenerateKeypoints(&'static str),
    #[error("pose places a model point at non-positive camera depth")]
    BehindCamera,
    #[error("no consensus: best inlier count {best} is below the minimum {needed}")]
    NoConsensus { best: usize, needed: usize },
    #[error("need at least {needed} usable correspondences, got {got}")]
    TooFewCorrespondences { needed: usize, got: usize },
}

/// Exhaustive-subset consensus parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RansacConfig {
    /// Size of each refined keypoint subset.
    pub subset_size: usize,
    /// A point is an inlier when its reprojection error is below this (px).
    pub inlier_threshold_px: f64,
    /// Minimum consensus size for an accepted solution.
    pub min_inliers: usize,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self { subset_size: 4, inlier_threshold_px: 2.0, min_inliers: 5 }
    }
}

/// Refined pose plus per-point diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct PnPResult {
    /// Model-to-camera transform.
    pub pose: RigidPose,
    /// Cone base center in the camera frame (the pose translation).
    pub position: Point3,
    /// Mean pixel reprojection error over the points used for the fit.
    pub mean_reproj_error: f64,
    /// Pixel reprojection error of every correspondence under the final
    /// pose; infinite for points behind the camera.
    pub per_point_residuals: Vec<f64>,
    /// Points that participated in the final fit.
    pub inlier_mask: Vec<bool>,
    /// Outer LM iterations spent.
    pub iterations: usize,
    /// False when the iteration cap was hit before the step or cost
    /// criterion; the result is then best-so-far.
    pub converged: bool,
}

// ==== DEPTH INITIALIZATION ====

/// Initial camera-facing pose from the apparent height of the cone.
///
/// Similar triangles give `z0 = fy * height / (base_mid.y - apex.y)`;
/// the base midpoint is back-projected at that depth for the lateral
/// offsets. Keypoints must be in the image frame.
pub fn depth_init(
    cam: &CameraModel,
    kps: &KeypointSet,
    g: &ConeGeometry,
) -> Result<RigidPose, PnpError> {
    assert_eq!(kps.frame, KeypointFrame::Image, "depth_init needs image-frame keypoints");
    let apex = kps.apex();
    let base_mid = kps.base_midpoint();
    let apparent = base_mid.y - apex.y;
    if apparent < MIN_APPARENT_HEIGHT_PX {
        return Err(PnpError::DegenerateKeypoints(
            "apparent height below two pixels (or apex not above base)",
        ));
    }
    let z0 = cam.fy * g.height / apparent;
    let x0 = (base_mid.x - cam.cx) / cam.fx * z0;
    let y0 = (base_mid.y - cam.cy) / cam.fy * z0;
    Ok(camera_facing_pose(Point3::new(x0, y0, z0)))
}

// ==== SUBSET INITIALIZATION ====

/// Minimum pixel span a subset must have on some axis before the
/// extent ratio says anything about depth.
const MIN_INIT_EXTENT_PX: f64 = 0.5;

/// Camera-facing similarity estimate from a point subset: depth from
/// the pixel-to-model extent ratio, lateral offsets from the
/// back-projected pixel centroid. `None` when the subset spans less
/// than [`MIN_INIT_EXTENT_PX`] on both axes.
fn subset_init(
    cam: &CameraModel,
    model_pts: &[Point3],
    image_pts: &[Point2],
    subset: &[usize],
) -> Option<RigidPose> {
    let (mut mx0, mut mx1) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut my0, mut my1) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut px0, mut px1) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut py0, mut py1) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut mcx, mut mcy) = (0.0, 0.0);
    let (mut pcx, mut pcy) = (0.0, 0.0);
    for &i in subset {
        let (m, p) = (model_pts[i], image_pts[i]);
        mx0 = mx0.min(m.x);
        mx1 = mx1.max(m.x);
        my0 = my0.min(m.y);
        my1 = my1.max(m.y);
        px0 = px0.min(p.x);
        px1 = px1.max(p.x);
        py0 = py0.min(p.y);
        py1 = py1.max(p.y);
        mcx += m.x;
        mcy += m.y;
        pcx += p.x;
        pcy += p.y;
    }
    let n = subset.len() as f64;
    let (mcx, mcy, pcx, pcy) = (mcx / n, mcy / n, pcx / n, pcy / n);

    let mut z_sum = 0.0;
    let mut z_cnt = 0.0;
    if mx1 - mx0 > 1e-9 && px1 - px0 > MIN_INIT_EXTENT_PX {
        z_sum += cam.fx * (mx1 - mx0) / (px1 - px0);
        z_cnt += 1.0;
    }
    if my1 - my0 > 1e-9 && py1 - py0 > MIN_INIT_EXTENT_PX {
        z_sum += cam.fy * (my1 - my0) / (py1 - py0);
        z_cnt += 1.0;
    }
    if z_cnt == 0.0 {
        return None;
    }
    let z0 = z_sum / z_cnt;
    // The camera-facing rotation maps model (x, y, 0) to (x, -y, 0), so
    // placing the model centroid on the back-projected centroid ray
    // fixes the translation directly.
    Some(camera_facing_pose(Point3::new(
        (pcx - cam.cx) / cam.fx * z0 - mcx,
        (pcy - cam.cy) / cam.fy * z0 + mcy,
        z0,
    )))
}

// ==== REPROJECTION ====

/// Pixel reprojection error of each correspondence under `pose`.
pub fn reprojection_error(
    cam: &CameraModel,
    pose: &RigidPose,
    model_pts: &[Point3],
    image_pts: &[Point2],
) -> Result<Vec<f64>, PnpError> {
    assert_eq!(model_pts.len(), image_pts.len());
    model_pts
        .iter()
        .zip(image_pts)
        .map(|(&x, &u)| {
            let proj = cam.project(pose.transform(x)).map_err(|_| PnpError::BehindCamera)?;
            Ok(proj.dist(u))
        })
        .collect()
}

/// Like [`reprojection_error`] but yields `f64::INFINITY` for points
/// behind the camera instead of failing; used for inlier scoring.
fn residual_magnitudes(
    cam: &CameraModel,
    pose: &RigidPose,
    model_pts: &[Point3],
    image_pts: &[Point2],
) -> Vec<f64> {
    model_pts
        .iter()
        .zip(image_pts)
        .map(|(&x, &u)| match cam.project(pose.transform(x)) {
            Ok(proj) => proj.dist(u),
            Err(_) => f64::INFINITY,
        })
        .collect()
}

// ==== LEVENBERG-MARQUARDT REFINEMENT ====

/// Sum of squared pixel residuals over the masked points, or `None` if
/// any masked point falls behind the camera.
fn masked_cost(
    cam: &CameraModel,
    pose: &RigidPose,
    model_pts: &[Point3],
    image_pts: &[Point2],
    mask: &[bool],
) -> Option<f64> {
    let mut cost = 0.0;
    for ((&x, &u), &used) in model_pts.iter().zip(image_pts).zip(mask) {
        if !used {
            continue;
        }
        let y = pose.transform(x);
        if y.z <= 0.0 {
            return None;
        }
        let proj = cam.project(y).expect("depth checked above");
        cost += proj.dist_sq(u);
    }
    Some(cost)
}

fn skew(v: Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Refines a pose by minimizing the sum of squared reprojection errors
/// over the masked correspondences.
///
/// The update composes an axis-angle increment onto the rotation
/// (`R <- exp([w]x) R`) and adds the translation increment. Accepted
/// steps never increase the cost; hitting the iteration cap yields
/// `converged = false` with the best pose found so far.
pub fn refine_lm(
    cam: &CameraModel,
    model_pts: &[Point3],
    image_pts: &[Point2],
    init: &RigidPose,
    use_mask: Option<&[bool]>,
) -> Result<PnPResult, PnpError> {
    let n = model_pts.len();
    assert_eq!(image_pts.len(), n);
    let mask: Vec<bool> = match use_mask {
        Some(m) => {
            assert_eq!(m.len(), n);
            m.to_vec()
        }
        None => vec![true; n],
    };
    let used = mask.iter().filter(|&&b| b).count();
    if used < 4 {
        return Err(PnpError::TooFewCorrespondences { needed: 4, got: used });
    }

    let mut pose = *init;
    let mut cost = masked_cost(cam, &pose, model_pts, image_pts, &mask)
        .ok_or(PnpError::BehindCamera)?;
    let mut lambda = LM_LAMBDA_INIT;
    let mut converged = false;
    let mut iterations = 0;

    'outer: for _ in 0..LM_MAX_ITERS {
        iterations += 1;

        // Normal equations over the masked residuals.
        let mut h = Matrix6::<f64>::zeros();
        let mut grad = Vector6::<f64>::zeros();
        for ((&x, &u), &used) in model_pts.iter().zip(image_pts).zip(&mask) {
            if !used {
                continue;
            }
            let y = pose.transform(x).to_vector();
            let (px, py, pz) = (y.x, y.y, y.z);
            let proj = Vector2::new(cam.cx + cam.fx * px / pz, cam.cy + cam.fy * py / pz);
            let r = proj - Vector2::new(u.x, u.y);
            let d_proj = SMatrix::<f64, 2, 3>::new(
                cam.fx / pz, 0.0, -cam.fx * px / (pz * pz),
                0.0, cam.fy / pz, -cam.fy * py / (pz * pz),
            );
            let rotated = y - pose.translation().to_vector();
            let mut jac = SMatrix::<f64, 2, 6>::zeros();
            jac.fixed_view_mut::<2, 3>(0, 0).copy_from(&(d_proj * (-skew(rotated))));
            jac.fixed_view_mut::<2, 3>(0, 3).copy_from(&d_proj);
            h += jac.transpose() * jac;
            grad += jac.transpose() * r;
        }

        loop {
            let damped = h + Matrix6::identity() * lambda;
            let step = match damped.cholesky() {
                Some(chol) => chol.solve(&(-grad)),
                None => match damped.lu().solve(&(-grad)) {
                    Some(s) => s,
                    None => {
                        lambda *= 10.0;
                        if lambda > 1e12 {
                            break 'outer;
                        }
                        continue;
                    }
                },
            };
            if step.norm() < LM_STEP_TOL {
                converged = true;
                break 'outer;
            }
            let omega = Vector3::new(step[0], step[1], step[2]);
            let dt = Vector3::new(step[3], step[4], step[5]);
            let dr = nalgebra::Rotation3::from_scaled_axis(omega).into_inner();
            let candidate = RigidPose::from_parts_unchecked(
                dr * pose.rotation(),
                pose.translation().to_vector() + dt,
            );
            match masked_cost(cam, &candidate, model_pts, image_pts, &mask) {
                Some(new_cost) if new_cost < cost => {
                    debug_assert!(new_cost <= cost, "accepted LM step may not increase cost");
                    let decrease = cost - new_cost;
                    pose = candidate;
                    cost = new_cost;
                    lambda = (lambda * 0.1).max(1e-15);
                    if decrease < LM_COST_TOL {
                        converged = true;
                        break 'outer;
                    }
                    break;
                }
                _ => {
                    lambda *= 10.0;
                    if lambda > 1e12 {
                        // Damping exhausted without an acceptable step.
                        break 'outer;
                    }
                }
            }
        }
    }

    let pose = pose.orthonormalized();
    let residuals = residual_magnitudes(cam, &pose, model_pts, image_pts);
    let mean: f64 = residuals
        .iter()
        .zip(&mask)
        .filter(|(_, &m)| m)
        .map(|(r, _)| r)
        .sum::<f64>()
        / used as f64;
    Ok(PnPResult {
        pose,
        position: pose.translation(),
        mean_reproj_error: mean,
        per_point_residuals: residuals,
        inlier_mask: mask,
        iterations,
        converged,
    })
}

// ==== EXHAUSTIVE-SUBSET CONSENSUS ====

/// Deterministic consensus over every size-`subset_size` keypoint subset.
///
/// Each subset is LM-refined from its own similarity estimate (falling
/// back to `init` when the subset is too small on screen to scale), so
/// a gross outlier only poisons the subsets that contain it and cannot
/// corrupt a shared starting pose. Subsets are scored by how many of
/// all the correspondences reproject within the inlier threshold, and
/// the best consensus set is re-refined from the winning subset's pose
/// to produce the returned solution. Ties on inlier count resolve to
/// the lower mean inlier error, then to the earlier subset in
/// lexicographic order.
pub fn ransac_pnp(
    cam: &CameraModel,
    model_pts: &[Point3],
    image_pts: &[Point2],
    init: &RigidPose,
    cfg: &RansacConfig,
) -> Result<PnPResult, PnpError> {
    let n = model_pts.len();
    assert_eq!(image_pts.len(), n);
    assert!(cfg.subset_size >= 4, "pose needs at least four correspondences");
    if n < cfg.subset_size {
        return Err(PnpError::TooFewCorrespondences { needed: cfg.subset_size, got: n });
    }

    let mut best: Option<(usize, f64, Vec<bool>, RigidPose)> = None;
    for subset in (0..n).combinations(cfg.subset_size) {
        let mut mask = vec![false; n];
        for &i in &subset {
            mask[i] = true;
        }
        let sub_init = subset_init(cam, model_pts, image_pts, &subset).unwrap_or(*init);
        let Ok(fit) = refine_lm(cam, model_pts, image_pts, &sub_init, Some(&mask)) else {
            continue;
        };
        let residuals = &fit.per_point_residuals;
        let inliers: Vec<bool> = residuals.iter().map(|&r| r < cfg.inlier_threshold_px).collect();
        let count = inliers.iter().filter(|&&b| b).count();
        if count == 0 {
            continue;
        }
        let mean_inlier: f64 = residuals
            .iter()
            .zip(&inliers)
            .filter(|(_, &ok)| ok)
            .map(|(r, _)| r)
            .sum::<f64>()
            / count as f64;
        let better = match &best {
            None => true,
            Some((bc, bm, _, _)) => count > *bc || (count == *bc && mean_inlier < *bm),
        };
        if better {
            best = Some((count, mean_inlier, inliers, fit.pose));
        }
    }

    let (count, _, consensus, pose) =
        best.ok_or(PnpError::NoConsensus { best: 0, needed: cfg.min_inliers })?;
    if count < cfg.min_inliers {
        return Err(PnpError::NoConsensus { best: count, needed: cfg.min_inliers });
    }
    refine_lm(cam, model_pts, image_pts, &pose, Some(&consensus))
}
