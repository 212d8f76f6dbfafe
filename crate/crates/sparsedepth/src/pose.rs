//! Metric relative-pose estimation from 3D-2D correspondences.
//!
//! Correspondences are produced by Harris corners matched with normalized
//! cross-correlation, get metric depth attached from the sparse LiDAR
//! image, and feed a PnP solver (DLT initialization + Gauss-Newton on
//! SE(3)) wrapped in RANSAC with a P3P minimal solver. Because the
//! attached depths are metric, the recovered translation is too.

use nalgebra::{DMatrix, Matrix3, Matrix4, Vector3, Vector6};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, ImageBuffer, PixelCoord, PoseSE3};
use crate::lidar::SparseDepthImage;

/// One 3D-2D pair: a target pixel with metric depth and its observed
/// position in the source image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub target: PixelCoord,
    /// Depth of the target pixel in meters, always > 0.
    pub depth: f64,
    pub source: PixelCoord,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CorrespondenceSet {
    pub items: Vec<Correspondence>,
}

impl CorrespondenceSet {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Back-projected target point in the target camera frame.
    pub fn point3d(&self, i: usize, k: &CameraIntrinsics) -> Vector3<f64> {
        let c = &self.items[i];
        Vector3::new(
            c.depth * (c.target.u - k.cx) / k.fx,
            c.depth * (c.target.v - k.cy) / k.fy,
            c.depth,
        )
    }
}

/// Outcome of [`pnp_ransac`].
#[derive(Debug, Clone)]
pub struct PnPResult {
    pub pose: PoseSE3,
    /// Consensus flags, aligned with the input correspondences.
    pub inliers: Vec<bool>,
    /// Mean reprojection error in pixels over the inliers.
    pub mean_reprojection_error: f64,
}

// ---------------------------------------------------------------------------
// Detection and matching
// ---------------------------------------------------------------------------

const HARRIS_K: f64 = 0.04;
const HARRIS_REL_THRESHOLD: f64 = 0.01;
const MAX_KEYPOINTS: usize = 500;
const PATCH_RADIUS: usize = 3;
const SEARCH_RADIUS: i64 = 10;
const NCC_THRESHOLD: f64 = 0.8;

fn grayscale(image: &ImageBuffer) -> Vec<f64> {
    let mut out = Vec::with_capacity(image.height * image.width);
    for v in 0..image.height {
        for u in 0..image.width {
            out.push((image.get(v, u, 0) + image.get(v, u, 1) + image.get(v, u, 2)) / 3.0);
        }
    }
    out
}

/// Harris corners: structure tensor of central-difference gradients with
/// 3x3 box smoothing, response det - k tr^2, relative threshold and 3x3
/// non-maximum suppression, strongest first.
fn harris_corners(gray: &[f64], h: usize, w: usize) -> Vec<(usize, usize)> {
    if h < 3 + 2 * PATCH_RADIUS || w < 3 + 2 * PATCH_RADIUS {
        return vec![];
    }
    let at = |v: usize, u: usize| gray[v * w + u];
    let mut ixx = vec![0.0; h * w];
    let mut iyy = vec![0.0; h * w];
    let mut ixy = vec![0.0; h * w];
    for v in 1..h - 1 {
        for u in 1..w - 1 {
            let gx = (at(v, u + 1) - at(v, u - 1)) / 2.0;
            let gy = (at(v + 1, u) - at(v - 1, u)) / 2.0;
            ixx[v * w + u] = gx * gx;
            iyy[v * w + u] = gy * gy;
            ixy[v * w + u] = gx * gy;
        }
    }
    let mut response = vec![0.0; h * w];
    let mut max_response = 0.0_f64;
    for v in 2..h - 2 {
        for u in 2..w - 2 {
            let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
            for dv in 0..3 {
                for du in 0..3 {
                    let idx = (v + dv - 1) * w + (u + du - 1);
                    sxx += ixx[idx];
                    syy += iyy[idx];
                    sxy += ixy[idx];
                }
            }
            let det = sxx * syy - sxy * sxy;
            let tr = sxx + syy;
            let r = det - HARRIS_K * tr * tr;
            response[v * w + u] = r;
            max_response = max_response.max(r);
        }
    }
    if max_response <= 0.0 {
        return vec![];
    }
    let threshold = HARRIS_REL_THRESHOLD * max_response;
    let margin = PATCH_RADIUS.max(2);
    let mut corners = Vec::new();
    for v in margin..h - margin {
        for u in margin..w - margin {
            let r = response[v * w + u];
            if r < threshold {
                continue;
            }
            let mut is_max = true;
            'nms: for dv in -1i64..=1 {
                for du in -1i64..=1 {
                    if dv == 0 && du == 0 {
                        continue;
                    }
                    let idx = ((v as i64 + dv) * w as i64 + u as i64 + du) as usize;
                    if response[idx] > r {
                        is_max = false;
                        break 'nms;
                    }
                }
            }
            if is_max {
                corners.push((v, u, r));
            }
        }
    }
    corners.sort_by(|a, b| b.2.total_cmp(&a.2));
    corners.truncate(MAX_KEYPOINTS);
    corners.into_iter().map(|(v, u, _)| (v, u)).collect()
}

/// NCC between two equal-size patches; `None` when either is textureless.
fn ncc(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let mu_a = a.iter().sum::<f64>() / n;
    let mu_b = b.iter().sum::<f64>() / n;
    let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        va += (x - mu_a) * (x - mu_a);
        vb += (y - mu_b) * (y - mu_b);
        cov += (x - mu_a) * (y - mu_b);
    }
    if va < 1e-12 || vb < 1e-12 {
        return None;
    }
    Some(cov / (va * vb).sqrt())
}

fn patch(gray: &[f64], w: usize, v: usize, u: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity((2 * PATCH_RADIUS + 1).pow(2));
    for dv in 0..=2 * PATCH_RADIUS {
        for du in 0..=2 * PATCH_RADIUS {
            out.push(gray[(v + dv - PATCH_RADIUS) * w + (u + du - PATCH_RADIUS)]);
        }
    }
    out
}

/// Harris keypoints in the target matched into the source by maximum NCC
/// over a bounded search window. Low-correlation matches are dropped;
/// a textureless image yields an empty list.
pub fn detect_and_match(
    target: &ImageBuffer,
    source: &ImageBuffer,
) -> Result<Vec<(PixelCoord, PixelCoord)>> {
    if !target.same_size(source) {
        return Err(Error::DimensionMismatch("detect_and_match input sizes".into()));
    }
    let (h, w) = (target.height, target.width);
    let gray_t = grayscale(target);
    let gray_s = grayscale(source);
    let corners = harris_corners(&gray_t, h, w);
    let mut matches = Vec::new();
    for (v, u) in corners {
        let p_t = patch(&gray_t, w, v, u);
        let mut best = f64::NEG_INFINITY;
        let mut best_pos = None;
        for dv in -SEARCH_RADIUS..=SEARCH_RADIUS {
            for du in -SEARCH_RADIUS..=SEARCH_RADIUS {
                let vs = v as i64 + dv;
                let us = u as i64 + du;
                if vs < PATCH_RADIUS as i64
                    || us < PATCH_RADIUS as i64
                    || vs >= (h - PATCH_RADIUS) as i64
                    || us >= (w - PATCH_RADIUS) as i64
                {
                    continue;
                }
                let p_s = patch(&gray_s, w, vs as usize, us as usize);
                if let Some(score) = ncc(&p_t, &p_s) {
                    if score > best {
                        best = score;
                        best_pos = Some((vs as usize, us as usize));
                    }
                }
            }
        }
        if let Some((vs, us)) = best_pos {
            if best >= NCC_THRESHOLD {
                matches.push((
                    PixelCoord::new(u as f64, v as f64),
                    PixelCoord::new(us as f64, vs as f64),
                ));
            }
        }
    }
    Ok(matches)
}

/// Keeps matches whose target pixel (nearest integer) carries a LiDAR
/// measurement and attaches that depth.
pub fn attach_depth(
    matches: &[(PixelCoord, PixelCoord)],
    lidar: &SparseDepthImage,
) -> CorrespondenceSet {
    let mut items = Vec::new();
    for &(p_t, p_s) in matches {
        let u = p_t.u.round();
        let v = p_t.v.round();
        if u < 0.0 || v < 0.0 || u >= lidar.width as f64 || v >= lidar.height as f64 {
            continue;
        }
        let depth = lidar.get(v as usize, u as usize);
        if depth > 0.0 {
            items.push(Correspondence { target: p_t, depth, source: p_s });
        }
    }
    CorrespondenceSet { items }
}

// ---------------------------------------------------------------------------
// PnP
// ---------------------------------------------------------------------------

/// Reprojection error in pixels of one correspondence under a pose;
/// infinite when the point lands behind the camera.
fn reprojection_error(
    pose: &PoseSE3,
    point: &Vector3<f64>,
    observed: &PixelCoord,
    k: &CameraIntrinsics,
) -> f64 {
    let y = pose.transform(point);
    if y.z <= 0.0 {
        return f64::INFINITY;
    }
    let u = k.fx * y.x / y.z + k.cx;
    let v = k.fy * y.y / y.z + k.cy;
    ((u - observed.u).powi(2) + (v - observed.v).powi(2)).sqrt()
}

fn mean_error_over(
    pose: &PoseSE3,
    corr: &CorrespondenceSet,
    k: &CameraIntrinsics,
    selected: &[bool],
) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (i, &keep) in selected.iter().enumerate() {
        if keep {
            sum += reprojection_error(pose, &corr.point3d(i, k), &corr.items[i].source, k);
            n += 1;
        }
    }
    if n == 0 {
        f64::INFINITY
    } else {
        sum / n as f64
    }
}

/// DLT initialization on K-normalized observations: the smallest right
/// singular vector of the 2n x 12 system gives [M | p4]; the rotation is
/// the orthogonal polar factor of M.
fn dlt_init(corr: &CorrespondenceSet, k: &CameraIntrinsics) -> Result<PoseSE3> {
    let n = corr.len();
    // Hartley normalization of both point sets; without it the 12-dim
    // system is so badly conditioned that noise wrecks the nullspace.
    let points: Vec<Vector3<f64>> = (0..n).map(|i| corr.point3d(i, k)).collect();
    let obs: Vec<(f64, f64)> = corr
        .items
        .iter()
        .map(|c| ((c.source.u - k.cx) / k.fx, (c.source.v - k.cy) / k.fy))
        .collect();
    let c3 = points.iter().sum::<Vector3<f64>>() / n as f64;
    let s3 = points.iter().map(|p| (p - c3).norm()).sum::<f64>() / n as f64 / 3f64.sqrt();
    let (c2x, c2y) = obs
        .iter()
        .fold((0.0, 0.0), |(ax, ay), &(x, y)| (ax + x / n as f64, ay + y / n as f64));
    let s2 = obs
        .iter()
        .map(|&(x, y)| ((x - c2x).powi(2) + (y - c2y).powi(2)).sqrt())
        .sum::<f64>()
        / n as f64
        / 2f64.sqrt();
    if s3 < 1e-12 || s2 < 1e-12 {
        return Err(Error::PnpNoConvergence("degenerate correspondence configuration".into()));
    }
    let mut a = DMatrix::<f64>::zeros(2 * n, 12);
    for i in 0..n {
        let x = (points[i] - c3) / s3;
        let xn = (obs[i].0 - c2x) / s2;
        let yn = (obs[i].1 - c2y) / s2;
        let hom = [x.x, x.y, x.z, 1.0];
        for j in 0..4 {
            a[(2 * i, j)] = hom[j];
            a[(2 * i, 8 + j)] = -xn * hom[j];
            a[(2 * i + 1, 4 + j)] = hom[j];
            a[(2 * i + 1, 8 + j)] = -yn * hom[j];
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.as_ref().expect("svd requested v_t");
    // Guard against a rank-deficient (degenerate) configuration: the
    // nullspace must be one-dimensional.
    let sv = &svd.singular_values;
    let scale_ref = sv[0];
    if scale_ref <= 0.0 || sv[sv.len() - 2] < 1e-10 * scale_ref {
        return Err(Error::PnpNoConvergence("degenerate correspondence configuration".into()));
    }
    let p = v_t.row(v_t.nrows() - 1);
    let m_norm = Matrix3::new(p[0], p[1], p[2], p[4], p[5], p[6], p[8], p[9], p[10]);
    let p4_norm = Vector3::new(p[3], p[7], p[11]);
    // Undo the normalization: x_hom = T2^-1 P' T3 X_hom.
    let t2_inv = Matrix3::new(s2, 0.0, c2x, 0.0, s2, c2y, 0.0, 0.0, 1.0);
    let mut m = t2_inv * m_norm / s3;
    let mut p4 = t2_inv * (p4_norm - m_norm * (c3 / s3));
    // Fix the projective scale with the third rotation row (unit norm for
    // a true pose) and the sign with cheirality.
    let norm_r3 = m.row(2).norm();
    if norm_r3 < 1e-12 {
        return Err(Error::PnpNoConvergence("DLT produced a singular projection".into()));
    }
    m /= norm_r3;
    p4 /= norm_r3;
    let mut behind = 0usize;
    for i in 0..n {
        let x = corr.point3d(i, k);
        if (m.row(2) * x)[0] + p4.z < 0.0 {
            behind += 1;
        }
    }
    if behind * 2 > n {
        m = -m;
        p4 = -p4;
    }
    let svd_m = m.svd(true, true);
    let u = svd_m.u.expect("3x3 svd");
    let vt = svd_m.v_t.expect("3x3 svd");
    let mut r = u * vt;
    if r.determinant() < 0.0 {
        let mut u_neg = u;
        u_neg.column_mut(2).neg_mut();
        r = u_neg * vt;
    }
    PoseSE3::new(r, p4).map_err(|_| Error::PnpNoConvergence("invalid DLT rotation".into()))
}

/// Gauss-Newton on SE(3) with left-multiplicative updates, minimizing the
/// summed squared reprojection error over the selected correspondences.
fn gauss_newton_refine(
    init: &PoseSE3,
    corr: &CorrespondenceSet,
    k: &CameraIntrinsics,
    selected: &[bool],
) -> Result<PoseSE3> {
    let mut pose = *init;
    for _ in 0..50 {
        let mut jtj = nalgebra::Matrix6::<f64>::zeros();
        let mut jtr = Vector6::<f64>::zeros();
        let mut used = 0usize;
        for (i, &keep) in selected.iter().enumerate() {
            if !keep {
                continue;
            }
            let x = corr.point3d(i, k);
            let y = pose.transform(&x);
            if y.z <= 1e-9 {
                continue;
            }
            used += 1;
            let obs = corr.items[i].source;
            let inv_z = 1.0 / y.z;
            let ru = k.fx * y.x * inv_z + k.cx - obs.u;
            let rv = k.fy * y.y * inv_z + k.cy - obs.v;
            // d pi / d Y, then d Y / d (omega, v) = [-[Y]x | I].
            let dpi = nalgebra::Matrix2x3::new(
                k.fx * inv_z,
                0.0,
                -k.fx * y.x * inv_z * inv_z,
                0.0,
                k.fy * inv_z,
                -k.fy * y.y * inv_z * inv_z,
            );
            // dY/d omega = -[Y]x for the left perturbation Y + omega x Y.
            let neg_skew = Matrix3::new(0.0, y.z, -y.y, -y.z, 0.0, y.x, y.y, -y.x, 0.0);
            let mut jac = nalgebra::Matrix2x6::<f64>::zeros();
            jac.fixed_view_mut::<2, 3>(0, 0).copy_from(&(dpi * neg_skew));
            jac.fixed_view_mut::<2, 3>(0, 3).copy_from(&dpi);
            jtj += jac.transpose() * jac;
            jtr += jac.transpose() * nalgebra::Vector2::new(ru, rv);
        }
        if used < 3 {
            return Err(Error::PnpNoConvergence("too few points in front of the camera".into()));
        }
        let delta = jtj
            .lu()
            .solve(&(-jtr))
            .ok_or_else(|| Error::PnpNoConvergence("singular normal equations".into()))?;
        let omega = Vector3::new(delta[0], delta[1], delta[2]);
        let v = Vector3::new(delta[3], delta[4], delta[5]);
        let update = PoseSE3::exp(omega, Vector3::zeros());
        pose = PoseSE3 {
            rotation: update.rotation * pose.rotation,
            translation: update.rotation * pose.translation + v,
        };
        if delta.norm() < 1e-14 {
            break;
        }
    }
    if !pose.translation.iter().all(|x| x.is_finite()) {
        return Err(Error::PnpNoConvergence("refinement diverged".into()));
    }
    Ok(pose)
}

/// Metric pose from >= 6 correspondences: DLT initialization followed by
/// Gauss-Newton refinement of the summed squared reprojection error.
pub fn solve_pnp(corr: &CorrespondenceSet, k: &CameraIntrinsics) -> Result<PoseSE3> {
    if corr.len() < 6 {
        return Err(Error::PnpNoConvergence(format!(
            "need at least 6 correspondences, got {}",
            corr.len()
        )));
    }
    let all = vec![true; corr.len()];
    let init = dlt_init(corr, k)?;
    gauss_newton_refine(&init, corr, k, &all)
}

// ---------------------------------------------------------------------------
// P3P minimal solver (Grunert's method)
// ---------------------------------------------------------------------------

/// Real roots of a quartic via the eigenvalues of its companion matrix.
fn quartic_roots(a4: f64, a3: f64, a2: f64, a1: f64, a0: f64) -> Vec<f64> {
    if a4.abs() < 1e-14 {
        return vec![];
    }
    let companion = Matrix4::new(
        -a3 / a4, -a2 / a4, -a1 / a4, -a0 / a4, //
        1.0, 0.0, 0.0, 0.0, //
        0.0, 1.0, 0.0, 0.0, //
        0.0, 0.0, 1.0, 0.0,
    );
    companion
        .complex_eigenvalues()
        .iter()
        .filter(|e| e.im.abs() < 1e-8 * (1.0 + e.re.abs()))
        .map(|e| e.re)
        .collect()
}

/// Exact rigid transform mapping three non-collinear points onto three
/// others (Kabsch on the centered triples).
fn rigid_from_three(x: &[Vector3<f64>; 3], y: &[Vector3<f64>; 3]) -> Option<PoseSE3> {
    let cx = (x[0] + x[1] + x[2]) / 3.0;
    let cy = (y[0] + y[1] + y[2]) / 3.0;
    let mut c = Matrix3::zeros();
    for i in 0..3 {
        c += (y[i] - cy) * (x[i] - cx).transpose();
    }
    let svd = c.svd(true, true);
    let u = svd.u?;
    let vt = svd.v_t?;
    let mut d = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = u * d * vt;
    let t = cy - r * cx;
    PoseSE3::new(r, t).ok()
}

/// Grunert's P3P: all poses consistent with three 3D points (in the
/// target camera frame) and their bearing observations in the source
/// camera. Each candidate is verified against the three distance
/// equations before being returned.
fn p3p_grunert(points: &[Vector3<f64>; 3], bearings: &[Vector3<f64>; 3]) -> Vec<PoseSE3> {
    let a = (points[1] - points[2]).norm();
    let b = (points[0] - points[2]).norm();
    let c = (points[0] - points[1]).norm();
    if a < 1e-9 || b < 1e-9 || c < 1e-9 {
        return vec![];
    }
    let cos_alpha = bearings[1].dot(&bearings[2]);
    let cos_beta = bearings[0].dot(&bearings[2]);
    let cos_gamma = bearings[0].dot(&bearings[1]);
    let (a2, b2, c2) = (a * a, b * b, c * c);
    let q = (a2 - c2) / b2;

    let a4 = (q - 1.0).powi(2) - 4.0 * c2 / b2 * cos_alpha * cos_alpha;
    let a3 = 4.0
        * (q * (1.0 - q) * cos_beta - (1.0 - (a2 + c2) / b2) * cos_alpha * cos_gamma
            + 2.0 * c2 / b2 * cos_alpha * cos_alpha * cos_beta);
    let a2c = 2.0
        * (q * q - 1.0
            + 2.0 * q * q * cos_beta * cos_beta
            + 2.0 * (b2 - c2) / b2 * cos_alpha * cos_alpha
            - 4.0 * (a2 + c2) / b2 * cos_alpha * cos_beta * cos_gamma
            + 2.0 * (b2 - a2) / b2 * cos_gamma * cos_gamma);
    let a1 = 4.0
        * (-q * (1.0 + q) * cos_beta + 2.0 * a2 / b2 * cos_gamma * cos_gamma * cos_beta
            - (1.0 - (a2 + c2) / b2) * cos_alpha * cos_gamma);
    let a0 = (1.0 + q).powi(2) - 4.0 * a2 / b2 * cos_gamma * cos_gamma;

    let mut poses = Vec::new();
    for v in quartic_roots(a4, a3, a2c, a1, a0) {
        if v <= 0.0 {
            continue;
        }
        let denom_u = 2.0 * (cos_gamma - v * cos_alpha);
        if denom_u.abs() < 1e-12 {
            continue;
        }
        let u = ((q - 1.0) * v * v - 2.0 * q * cos_beta * v + 1.0 + q) / denom_u;
        if u <= 0.0 {
            continue;
        }
        let s1_sq = b2 / (1.0 + v * v - 2.0 * v * cos_beta);
        if !(s1_sq > 0.0) {
            continue;
        }
        let s1 = s1_sq.sqrt();
        let s2 = u * s1;
        let s3 = v * s1;
        // Verify the original distance equations; roots of a transcribed
        // quartic that fail them are spurious.
        let tol = 1e-6 * b2;
        let e1 = s2 * s2 + s3 * s3 - 2.0 * s2 * s3 * cos_alpha - a2;
        let e2 = s1 * s1 + s3 * s3 - 2.0 * s1 * s3 * cos_beta - b2;
        let e3 = s1 * s1 + s2 * s2 - 2.0 * s1 * s2 * cos_gamma - c2;
        if e1.abs() > tol || e2.abs() > tol || e3.abs() > tol {
            continue;
        }
        let camera_points = [bearings[0] * s1, bearings[1] * s2, bearings[2] * s3];
        if let Some(pose) = rigid_from_three(points, &camera_points) {
            poses.push(pose);
        }
    }
    poses
}

/// RANSAC over minimal samples of four correspondences: P3P on three plus
/// the fourth for disambiguation. Deterministic for a fixed seed.
///
/// Consensus is the largest inlier set under `reproj_threshold` pixels;
/// ties prefer the hypothesis whose all-inlier refit has the lower mean
/// error, then the earlier hypothesis. The returned pose is the refit on
/// the winning consensus (kept only if it does not degrade the error).
pub fn pnp_ransac(
    corr: &CorrespondenceSet,
    k: &CameraIntrinsics,
    iterations: usize,
    reproj_threshold: f64,
    seed: u64,
) -> Result<PnPResult> {
    let n = corr.len();
    if n < 6 {
        return Err(Error::PnpNoConvergence(format!(
            "need at least 6 correspondences, got {n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points: Vec<Vector3<f64>> = (0..n).map(|i| corr.point3d(i, k)).collect();
    let bearings: Vec<Vector3<f64>> = corr
        .items
        .iter()
        .map(|c| {
            Vector3::new((c.source.u - k.cx) / k.fx, (c.source.v - k.cy) / k.fy, 1.0).normalize()
        })
        .collect();

    struct Candidate {
        pose: PoseSE3,
        inliers: Vec<bool>,
        count: usize,
        index: usize,
    }
    let mut best: Vec<Candidate> = Vec::new();
    let mut best_count = 0usize;

    for it in 0..iterations {
        let sample = rand::seq::index::sample(&mut rng, n, 4).into_vec();
        let tri_points = [points[sample[0]], points[sample[1]], points[sample[2]]];
        let tri_bearings = [bearings[sample[0]], bearings[sample[1]], bearings[sample[2]]];
        let candidates = p3p_grunert(&tri_points, &tri_bearings);
        // Disambiguate with the fourth sample point.
        let mut hypothesis: Option<(PoseSE3, f64)> = None;
        for pose in candidates {
            let err = reprojection_error(
                &pose,
                &points[sample[3]],
                &corr.items[sample[3]].source,
                k,
            );
            if hypothesis.as_ref().map_or(true, |&(_, e)| err < e) {
                hypothesis = Some((pose, err));
            }
        }
        let Some((pose, _)) = hypothesis else { continue };
        let inliers: Vec<bool> = (0..n)
            .map(|i| {
                reprojection_error(&pose, &points[i], &corr.items[i].source, k)
                    < reproj_threshold
            })
            .collect();
        let count = inliers.iter().filter(|&&b| b).count();
        if count > best_count {
            best_count = count;
            best = vec![Candidate { pose, inliers, count, index: it }];
        } else if count == best_count && count > 0 {
            best.push(Candidate { pose, inliers, count, index: it });
        }
    }

    if best_count < 6 {
        return Err(Error::PnpNoConvergence(format!(
            "largest consensus has {best_count} inliers, need 6"
        )));
    }

    // Refit each tied winner on its inliers; lowest refit error wins, with
    // the earlier hypothesis breaking remaining ties.
    let mut winner: Option<(PoseSE3, Vec<bool>, f64, usize)> = None;
    for cand in &best {
        if cand.count != best_count {
            continue;
        }
        let hyp_err = mean_error_over(&cand.pose, corr, k, &cand.inliers);
        let refined = gauss_newton_refine(&cand.pose, corr, k, &cand.inliers)
            .map(|p| {
                let e = mean_error_over(&p, corr, k, &cand.inliers);
                if e <= hyp_err {
                    (p, e)
                } else {
                    (cand.pose, hyp_err)
                }
            })
            .unwrap_or((cand.pose, hyp_err));
        let better = match &winner {
            None => true,
            Some((_, _, err, idx)) => {
                refined.1 < *err || (refined.1 == *err && cand.index < *idx)
            }
        };
        if better {
            winner = Some((refined.0, cand.inliers.clone(), refined.1, cand.index));
        }
    }
    let (pose, inliers, mean_reprojection_error, _) =
        winner.expect("non-empty consensus candidates");
    Ok(PnPResult { pose, inliers, mean_reprojection_error })
}

/// Flags translation-magnitude estimates as kept (true) or discarded:
/// an estimate is discarded when it exceeds `c` times the median.
pub fn filter_by_translation_median(magnitudes: &[f64], c: f64) -> Result<Vec<bool>> {
    if magnitudes.is_empty() {
        return Err(Error::EmptyInput("no translation magnitudes".into()));
    }
    let mut sorted = magnitudes.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    let median = if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        (sorted[mid - 1] + sorted[mid]) / 2.0
    };
    Ok(magnitudes.iter().map(|&m| m <= c * median).collect())
}
