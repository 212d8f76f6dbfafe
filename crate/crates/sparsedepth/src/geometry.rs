//! Pinhole camera model, SE(3) poses, point projection and differentiable
//! inverse warping of source images into the target view.
//!
//! The projection follows the classic view-synthesis chain: back-project a
//! target pixel at its estimated depth, transform by the relative pose, and
//! re-project with the intrinsics. Warping samples the source image
//! bilinearly at the projected coordinates so the whole chain is
//! differentiable with respect to the depth map.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

/// Pinhole intrinsics `K` with the image size it applies to.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "focal lengths must be positive, got fx={fx} fy={fy}"
            )));
        }
        if !(0.0 <= cx && cx < width as f64) || !(0.0 <= cy && cy < height as f64) {
            return Err(Error::InvalidArgument(format!(
                "principal point ({cx}, {cy}) outside {width}x{height} image"
            )));
        }
        Ok(Self { fx, fy, cx, cy, width, height })
    }

    /// Intrinsics for the image downscaled by `factor` (a power of two for
    /// pyramid levels). Focal lengths and principal point scale together.
    pub fn scaled(&self, factor: usize) -> Self {
        let f = factor as f64;
        Self {
            fx: self.fx / f,
            fy: self.fy / f,
            cx: self.cx / f,
            cy: self.cy / f,
            width: self.width / factor,
            height: self.height / factor,
        }
    }
}

/// Rigid transform in SE(3): rotation `R` and translation `r` in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseSE3 {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

const ROTATION_TOL: f64 = 1e-9;

impl PoseSE3 {
    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    /// Builds a pose, checking that `rotation` is a proper rotation matrix
    /// (orthonormal with determinant +1 within 1e-9).
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).norm();
        if ortho > ROTATION_TOL * 10.0 {
            return Err(Error::InvalidArgument(format!(
                "rotation is not orthonormal (||R^T R - I|| = {ortho:.3e})"
            )));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidArgument(format!(
                "rotation determinant is {det}, expected +1"
            )));
        }
        Ok(Self { rotation, translation })
    }

    pub fn from_translation(x: f64, y: f64, z: f64) -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::new(x, y, z) }
    }

    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64, translation: Vector3<f64>) -> Self {
        let rotation = nalgebra::Rotation3::from_axis_angle(
            &nalgebra::Unit::new_normalize(axis),
            angle,
        )
        .into_inner();
        Self { rotation, translation }
    }

    /// Exponential map from a twist `[w, v]` (rotation then translation part).
    pub fn exp(omega: Vector3<f64>, v: Vector3<f64>) -> Self {
        let theta = omega.norm();
        let rotation = if theta < 1e-12 {
            Matrix3::identity()
        } else {
            nalgebra::Rotation3::from_axis_angle(
                &nalgebra::Unit::new_normalize(omega),
                theta,
            )
            .into_inner()
        };
        // First-order coupling between rotation and translation is absorbed
        // into v directly; sufficient for Gauss-Newton increments.
        Self { rotation, translation: v }
    }

    pub fn transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &PoseSE3) -> PoseSE3 {
        PoseSE3 {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> PoseSE3 {
        let rt = self.rotation.transpose();
        PoseSE3 { rotation: rt, translation: -(rt * self.translation) }
    }

    /// Divides the translation by `s`, leaving the rotation unchanged.
    pub fn with_translation_scaled(&self, s: f64) -> PoseSE3 {
        PoseSE3 { rotation: self.rotation, translation: self.translation * s }
    }
}

/// Continuous pixel coordinates `(u, v)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelCoord {
    pub u: f64,
    pub v: f64,
}

impl PixelCoord {
    pub fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }
}

/// Dense H x W scalar grid, used for depths and per-pixel loss values.
///
/// For sparse-compatible use (projected LiDAR), a value of 0 means "no
/// measurement".
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl DepthMap {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0.0; height * width] }
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Self {
        Self { height, width, data: vec![value; height * width] }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for v in 0..height {
            for u in 0..width {
                data.push(f(v, u));
            }
        }
        Self { height, width, data }
    }

    #[inline]
    pub fn get(&self, v: usize, u: usize) -> f64 {
        self.data[v * self.width + u]
    }

    #[inline]
    pub fn set(&mut self, v: usize, u: usize, value: f64) {
        self.data[v * self.width + u] = value;
    }

    pub fn same_size(&self, other: &DepthMap) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Number of strictly positive entries.
    pub fn valid_count(&self) -> usize {
        self.data.iter().filter(|&&d| d > 0.0).count()
    }

    /// 2x2 average pooling, halving both dimensions.
    pub fn downsample_avg(&self) -> DepthMap {
        let h = self.height / 2;
        let w = self.width / 2;
        DepthMap::from_fn(h, w, |v, u| {
            (self.get(2 * v, 2 * u)
                + self.get(2 * v, 2 * u + 1)
                + self.get(2 * v + 1, 2 * u)
                + self.get(2 * v + 1, 2 * u + 1))
                / 4.0
        })
    }

    /// 2x2 min pooling over positive entries; blocks with no valid entry
    /// stay 0. Used to carry sparse LiDAR down a pyramid.
    pub fn downsample_min_valid(&self) -> DepthMap {
        let h = self.height / 2;
        let w = self.width / 2;
        DepthMap::from_fn(h, w, |v, u| {
            let mut best = f64::INFINITY;
            for (dv, du) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                let d = self.get(2 * v + dv, 2 * u + du);
                if d > 0.0 && d < best {
                    best = d;
                }
            }
            if best.is_finite() {
                best
            } else {
                0.0
            }
        })
    }
}

/// H x W boolean mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn filled(height: usize, width: usize, value: bool) -> Self {
        Self { height, width, data: vec![value; height * width] }
    }

    #[inline]
    pub fn get(&self, v: usize, u: usize) -> bool {
        self.data[v * self.width + u]
    }

    #[inline]
    pub fn set(&mut self, v: usize, u: usize, value: bool) {
        self.data[v * self.width + u] = value;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

/// H x W x 3 image with intensities in [0, 1], row-major interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl ImageBuffer {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0.0; height * width * 3] }
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize) -> [f64; 3],
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for v in 0..height {
            for u in 0..width {
                data.extend_from_slice(&f(v, u));
            }
        }
        Self { height, width, data }
    }

    #[inline]
    pub fn get(&self, v: usize, u: usize, c: usize) -> f64 {
        self.data[(v * self.width + u) * 3 + c]
    }

    #[inline]
    pub fn set(&mut self, v: usize, u: usize, c: usize, value: f64) {
        self.data[(v * self.width + u) * 3 + c] = value;
    }

    pub fn pixel(&self, v: usize, u: usize) -> [f64; 3] {
        [self.get(v, u, 0), self.get(v, u, 1), self.get(v, u, 2)]
    }

    pub fn same_size(&self, other: &ImageBuffer) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Bilinear sample of channel `c` at continuous coordinates.
    /// Coordinates must lie within `[0, W-1] x [0, H-1]`.
    pub fn sample_bilinear(&self, u: f64, v: f64, c: usize) -> f64 {
        let (s, _, _) = self.sample_bilinear_with_grad(u, v, c);
        s
    }

    /// Bilinear sample and its derivative with respect to `(u, v)`.
    ///
    /// The derivative is the one of the bilinear cell containing the point;
    /// points exactly on the right/bottom border use the last interior cell.
    pub fn sample_bilinear_with_grad(&self, u: f64, v: f64, c: usize) -> (f64, f64, f64) {
        let u0 = (u.floor() as isize).clamp(0, self.width as isize - 2) as usize;
        let v0 = (v.floor() as isize).clamp(0, self.height as isize - 2) as usize;
        let fu = u - u0 as f64;
        let fv = v - v0 as f64;
        let i00 = self.get(v0, u0, c);
        let i01 = self.get(v0, u0 + 1, c);
        let i10 = self.get(v0 + 1, u0, c);
        let i11 = self.get(v0 + 1, u0 + 1, c);
        let top = i00 + fu * (i01 - i00);
        let bottom = i10 + fu * (i11 - i10);
        let value = top + fv * (bottom - top);
        let du = (1.0 - fv) * (i01 - i00) + fv * (i11 - i10);
        let dv = bottom - top;
        (value, du, dv)
    }

    /// 2x2 average pooling per channel.
    pub fn downsample_avg(&self) -> ImageBuffer {
        let h = self.height / 2;
        let w = self.width / 2;
        ImageBuffer::from_fn(h, w, |v, u| {
            let mut out = [0.0; 3];
            for (c, o) in out.iter_mut().enumerate() {
                *o = (self.get(2 * v, 2 * u, c)
                    + self.get(2 * v, 2 * u + 1, c)
                    + self.get(2 * v + 1, 2 * u, c)
                    + self.get(2 * v + 1, 2 * u + 1, c))
                    / 4.0;
            }
            out
        })
    }
}

/// Outcome of projecting a single target pixel into the source view.
#[derive(Debug, Clone, Copy)]
pub struct Projection {
    /// Projected coordinates in the source image.
    pub pixel: PixelCoord,
    /// Depth of the transformed point in the source camera frame.
    pub source_depth: f64,
    /// False when the transformed point lies behind the camera.
    pub valid: bool,
}

/// Projects target pixel `p_t` at `depth` into the source view:
/// back-project with `K^-1`, transform by `pose`, re-project with `K`.
pub fn project_point(
    intrinsics: &CameraIntrinsics,
    pose: &PoseSE3,
    depth: f64,
    p_t: PixelCoord,
) -> Projection {
    debug_assert!(depth > 0.0);
    let ray = Vector3::new(
        (p_t.u - intrinsics.cx) / intrinsics.fx,
        (p_t.v - intrinsics.cy) / intrinsics.fy,
        1.0,
    );
    let transformed = pose.transform(&(ray * depth));
    let z = transformed.z;
    if z <= 0.0 {
        return Projection {
            pixel: PixelCoord::new(f64::NAN, f64::NAN),
            source_depth: z,
            valid: false,
        };
    }
    Projection {
        pixel: PixelCoord::new(
            intrinsics.fx * transformed.x / z + intrinsics.cx,
            intrinsics.fy * transformed.y / z + intrinsics.cy,
        ),
        source_depth: z,
        valid: true,
    }
}

/// Back-projects a dense positive depth map to camera-frame 3D points,
/// row-major over pixels.
pub fn backproject(intrinsics: &CameraIntrinsics, depth: &DepthMap) -> Vec<Vector3<f64>> {
    let mut points = Vec::with_capacity(depth.height * depth.width);
    for v in 0..depth.height {
        for u in 0..depth.width {
            let d = depth.get(v, u);
            points.push(Vector3::new(
                d * (u as f64 - intrinsics.cx) / intrinsics.fx,
                d * (v as f64 - intrinsics.cy) / intrinsics.fy,
                d,
            ));
        }
    }
    points
}

/// Warped source image with per-pixel validity.
#[derive(Debug, Clone)]
pub struct WarpResult {
    pub image: ImageBuffer,
    pub validity: Mask,
}

/// Warp plus the per-pixel, per-channel derivative of the warped intensity
/// with respect to the target depth at the same pixel.
#[derive(Debug, Clone)]
pub struct WarpWithJacobian {
    pub warp: WarpResult,
    /// d(warped channel c at p) / d(D_t at p), stored like an image.
    pub jacobian: ImageBuffer,
}

/// Synthesizes the source image in the target view given the target depth
/// and the target-to-source pose. Pixels projecting outside the source
/// image or behind the camera are masked out and set to 0.
pub fn warp_image(
    source: &ImageBuffer,
    target_depth: &DepthMap,
    pose: &PoseSE3,
    intrinsics: &CameraIntrinsics,
) -> WarpResult {
    warp_image_with_jacobian(source, target_depth, pose, intrinsics).warp
}

/// As [`warp_image`], also returning the analytic derivative of each warped
/// intensity with respect to the depth at its own pixel (chain rule through
/// the projection and the bilinear sampler).
pub fn warp_image_with_jacobian(
    source: &ImageBuffer,
    target_depth: &DepthMap,
    pose: &PoseSE3,
    intrinsics: &CameraIntrinsics,
) -> WarpWithJacobian {
    assert!(
        source.height == target_depth.height && source.width == target_depth.width,
        "source image and target depth must share a resolution"
    );
    let h = target_depth.height;
    let w = target_depth.width;
    let mut image = ImageBuffer::zeros(h, w);
    let mut jacobian = ImageBuffer::zeros(h, w);
    let mut validity = Mask::filled(h, w, false);

    let max_u = (w - 1) as f64;
    let max_v = (h - 1) as f64;
    for v in 0..h {
        for u in 0..w {
            let d = target_depth.get(v, u);
            if !(d > 0.0) {
                continue;
            }
            // Ray direction q = K^-1 p_t; X_s = R (d q) + r.
            let q = Vector3::new(
                (u as f64 - intrinsics.cx) / intrinsics.fx,
                (v as f64 - intrinsics.cy) / intrinsics.fy,
                1.0,
            );
            let rq = pose.rotation * q;
            let p3 = rq * d + pose.translation;
            if p3.z <= 0.0 {
                continue;
            }
            let us = intrinsics.fx * p3.x / p3.z + intrinsics.cx;
            let vs = intrinsics.fy * p3.y / p3.z + intrinsics.cy;
            if !(0.0..=max_u).contains(&us) || !(0.0..=max_v).contains(&vs) {
                continue;
            }
            // d p_s / d d via the quotient rule; rq is d X_s / d d.
            let inv_z2 = 1.0 / (p3.z * p3.z);
            let dus_dd = intrinsics.fx * (rq.x * p3.z - p3.x * rq.z) * inv_z2;
            let dvs_dd = intrinsics.fy * (rq.y * p3.z - p3.y * rq.z) * inv_z2;
            for c in 0..3 {
                let (value, gu, gv) = source.sample_bilinear_with_grad(us, vs, c);
                image.set(v, u, c, value);
                jacobian.set(v, u, c, gu * dus_dd + gv * dvs_dd);
            }
            validity.set(v, u, true);
        }
    }
    WarpWithJacobian { warp: WarpResult { image, validity }, jacobian }
}

/// Projects a LiDAR point cloud (sensor frame) into a sparse depth image.
/// Each point with positive camera-frame depth writes to the
/// nearest-integer pixel; collisions keep the minimum depth.
pub fn project_pointcloud_to_image(
    cloud: &crate::lidar::PointCloud,
    extrinsics: &PoseSE3,
    intrinsics: &CameraIntrinsics,
) -> DepthMap {
    let mut depth = DepthMap::zeros(intrinsics.height, intrinsics.width);
    for p in &cloud.points {
        let cam = extrinsics.transform(&Vector3::new(p.x, p.y, p.z));
        if cam.z <= 0.0 {
            continue;
        }
        let u = (intrinsics.fx * cam.x / cam.z + intrinsics.cx).round();
        let v = (intrinsics.fy * cam.y / cam.z + intrinsics.cy).round();
        if u < 0.0 || v < 0.0 || u >= intrinsics.width as f64 || v >= intrinsics.height as f64 {
            continue;
        }
        let (ui, vi) = (u as usize, v as usize);
        let current = depth.get(vi, ui);
        if current == 0.0 || cam.z < current {
            depth.set(vi, ui, cam.z);
        }
    }
    depth
}
