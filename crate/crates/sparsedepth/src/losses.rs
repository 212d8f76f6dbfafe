//! Self-supervision objectives: SSIM, photometric reconstruction with
//! min-over-sources and auto-masking, the three LiDAR regression variants,
//! edge-aware smoothness, and the IMU magnitude loss.
//!
//! [`total_loss_and_gradient`] assembles the configured objective over a
//! scale pyramid and returns the analytic gradient with respect to the
//! full-resolution depth map. Every backward pass here is hand-derived and
//! checked against central finite differences in the tests.

use crate::error::{Error, Result};
use crate::geometry::{
    warp_image_with_jacobian, CameraIntrinsics, DepthMap, ImageBuffer, Mask, PoseSE3, WarpResult,
};
use crate::lidar::SparseDepthImage;

/// SSIM stabilizers for intensities in [0, 1].
pub const SSIM_C1: f64 = 1e-4;
pub const SSIM_C2: f64 = 9e-4;

/// Which LiDAR self-supervision variant to apply on pixels carrying a
/// measurement.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LidarVariant {
    /// L1 toward the measurement plus the photometric term.
    Naive,
    /// L1 toward the measurement, photometric masked out there.
    Masked,
    /// L1 added only where warping with the measured depth reconstructs
    /// better than warping with the estimate.
    Hinted,
}

impl std::str::FromStr for LidarVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "naive" => Ok(LidarVariant::Naive),
            "masked" => Ok(LidarVariant::Masked),
            "hinted" => Ok(LidarVariant::Hinted),
            other => Err(Error::InvalidArgument(format!("unknown lidar variant `{other}`"))),
        }
    }
}

/// Loss weights and structure.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// SSIM / L1 balance in [0, 1].
    pub alpha: f64,
    pub lambda_smooth: f64,
    pub lambda_lidar: f64,
    pub lidar_variant: LidarVariant,
    /// Number of pyramid levels, 1 (full resolution only) through 4 (1:8).
    pub multiscale_levels: usize,
    /// Reject pixels whose appearance does not vary across frames.
    pub use_automask: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.85,
            lambda_smooth: 1e-3,
            lambda_lidar: 1.0,
            lidar_variant: LidarVariant::Masked,
            multiscale_levels: 4,
            use_automask: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidArgument(format!("alpha {} outside [0,1]", self.alpha)));
        }
        if self.lambda_smooth < 0.0 || self.lambda_lidar < 0.0 {
            return Err(Error::InvalidArgument("loss weights must be non-negative".into()));
        }
        if !(1..=4).contains(&self.multiscale_levels) {
            return Err(Error::InvalidArgument(format!(
                "multiscale_levels {} outside 1..=4",
                self.multiscale_levels
            )));
        }
        Ok(())
    }
}

/// Per-pixel loss values with the pixels they are defined on.
#[derive(Debug, Clone)]
pub struct LossMap {
    pub values: DepthMap,
    pub validity: Mask,
}

impl LossMap {
    /// Mean over valid pixels; 0 when nothing is valid.
    pub fn mean(&self) -> f64 {
        let mut sum = 0.0;
        let mut n = 0usize;
        for (value, &valid) in self.values.data.iter().zip(&self.validity.data) {
            if valid {
                sum += value;
                n += 1;
            }
        }
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }
}

// ---------------------------------------------------------------------------
// SSIM
// ---------------------------------------------------------------------------

/// Per-pixel, per-channel window statistics cached for the backward pass.
struct SsimCache {
    // Indexed (pixel * 3 + channel).
    mu_a: Vec<f64>,
    mu_b: Vec<f64>,
    var_a: Vec<f64>,
    var_b: Vec<f64>,
    cov: Vec<f64>,
    // Window size per pixel (border windows are smaller).
    n: Vec<f64>,
}

/// Subgradient-friendly sign: 0 at 0 (f64::signum gives ±1 there).
fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn window(h: usize, w: usize, v: usize, u: usize) -> (usize, usize, usize, usize) {
    let v0 = v.saturating_sub(1);
    let v1 = (v + 1).min(h - 1);
    let u0 = u.saturating_sub(1);
    let u1 = (u + 1).min(w - 1);
    (v0, v1, u0, u1)
}

/// Per-pixel SSIM between two images with 3x3 border-aware mean filtering.
/// Returns the channel-mean SSIM map (values in [-1, 1]) and the cache.
fn ssim_with_cache(a: &ImageBuffer, b: &ImageBuffer) -> (DepthMap, SsimCache) {
    let (h, w) = (a.height, a.width);
    let len = h * w;
    let mut cache = SsimCache {
        mu_a: vec![0.0; len * 3],
        mu_b: vec![0.0; len * 3],
        var_a: vec![0.0; len * 3],
        var_b: vec![0.0; len * 3],
        cov: vec![0.0; len * 3],
        n: vec![0.0; len],
    };
    let mut out = DepthMap::zeros(h, w);
    for v in 0..h {
        for u in 0..w {
            let (v0, v1, u0, u1) = window(h, w, v, u);
            let n = ((v1 - v0 + 1) * (u1 - u0 + 1)) as f64;
            let p = v * w + u;
            cache.n[p] = n;
            let mut s = 0.0;
            for c in 0..3 {
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for vv in v0..=v1 {
                    for uu in u0..=u1 {
                        let xa = a.get(vv, uu, c);
                        let xb = b.get(vv, uu, c);
                        sa += xa;
                        sb += xb;
                        saa += xa * xa;
                        sbb += xb * xb;
                        sab += xa * xb;
                    }
                }
                let mu_a = sa / n;
                let mu_b = sb / n;
                let var_a = saa / n - mu_a * mu_a;
                let var_b = sbb / n - mu_b * mu_b;
                let cov = sab / n - mu_a * mu_b;
                let idx = p * 3 + c;
                cache.mu_a[idx] = mu_a;
                cache.mu_b[idx] = mu_b;
                cache.var_a[idx] = var_a;
                cache.var_b[idx] = var_b;
                cache.cov[idx] = cov;
                s += (2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2)
                    / ((mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2));
            }
            out.set(v, u, s / 3.0);
        }
    }
    (out, cache)
}

/// Per-pixel SSIM (channel mean) between two equal-size images.
pub fn ssim(a: &ImageBuffer, b: &ImageBuffer) -> Result<DepthMap> {
    if !a.same_size(b) {
        return Err(Error::DimensionMismatch(format!(
            "ssim inputs {}x{} vs {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    Ok(ssim_with_cache(a, b).0)
}

/// d SSIM_c(p) / d b(q, c) for q inside the window of p, from cached stats.
#[allow(clippy::too_many_arguments)]
fn ssim_partial(cache: &SsimCache, p: usize, c: usize, x_q: f64, y_q: f64) -> f64 {
    let idx = p * 3 + c;
    let w = 1.0 / cache.n[p];
    let mu_a = cache.mu_a[idx];
    let mu_b = cache.mu_b[idx];
    let a1 = 2.0 * mu_a * mu_b + SSIM_C1;
    let a2 = 2.0 * cache.cov[idx] + SSIM_C2;
    let b1 = mu_a * mu_a + mu_b * mu_b + SSIM_C1;
    let b2 = cache.var_a[idx] + cache.var_b[idx] + SSIM_C2;
    let s = a1 * a2 / (b1 * b2);
    (2.0 * mu_a * w * a2 + a1 * 2.0 * w * (x_q - mu_a)) / (b1 * b2)
        - s * (2.0 * mu_b * w / b1 + 2.0 * w * (y_q - mu_b) / b2)
}

// ---------------------------------------------------------------------------
// Photometric reconstruction
// ---------------------------------------------------------------------------

/// Per-pixel reconstruction cost of one comparison image against the
/// target: alpha/2 (1 - SSIM) + (1 - alpha) |target - comp|, channel mean.
struct PairCost {
    cost: DepthMap,
    cache: SsimCache,
}

fn pair_cost(target: &ImageBuffer, comp: &ImageBuffer, alpha: f64) -> PairCost {
    let (ssim_map, cache) = ssim_with_cache(target, comp);
    let (h, w) = (target.height, target.width);
    let cost = DepthMap::from_fn(h, w, |v, u| {
        let mut l1 = 0.0;
        for c in 0..3 {
            l1 += (target.get(v, u, c) - comp.get(v, u, c)).abs();
        }
        l1 /= 3.0;
        alpha / 2.0 * (1.0 - ssim_map.get(v, u)) + (1.0 - alpha) * l1
    });
    PairCost { cost, cache }
}

/// Accumulates dL/d comp given upstream per-pixel weights g(p) = dL/dc(p).
/// Pixels with zero weight are skipped.
fn pair_cost_backward(
    target: &ImageBuffer,
    comp: &ImageBuffer,
    alpha: f64,
    cache: &SsimCache,
    g: &DepthMap,
    grad_comp: &mut ImageBuffer,
) {
    let (h, w) = (target.height, target.width);
    for v in 0..h {
        for u in 0..w {
            let gv = g.get(v, u);
            if gv == 0.0 {
                continue;
            }
            let p = v * w + u;
            for c in 0..3 {
                // L1 part, local to the pixel.
                let diff = comp.get(v, u, c) - target.get(v, u, c);
                let l1_grad = (1.0 - alpha) * sign0(diff) / 3.0;
                let cur = grad_comp.get(v, u, c) + gv * l1_grad;
                grad_comp.set(v, u, c, cur);
            }
            // SSIM part spreads over the 3x3 window.
            let (v0, v1, u0, u1) = window(h, w, v, u);
            for vv in v0..=v1 {
                for uu in u0..=u1 {
                    for c in 0..3 {
                        let partial = ssim_partial(
                            cache,
                            p,
                            c,
                            target.get(vv, uu, c),
                            comp.get(vv, uu, c),
                        );
                        let dcost = -alpha / 2.0 * partial / 3.0;
                        let cur = grad_comp.get(vv, uu, c) + gv * dcost;
                        grad_comp.set(vv, uu, c, cur);
                    }
                }
            }
        }
    }
}

/// Min-over-sources photometric loss of Eq.-style view synthesis: per
/// pixel, the smallest reconstruction cost among the warped sources,
/// restricted to each source's validity mask.
pub fn photometric_loss(
    target: &ImageBuffer,
    warped_sources: &[WarpResult],
    alpha: f64,
) -> Result<LossMap> {
    let (map, _, _) = photometric_min(target, warped_sources, alpha)?;
    Ok(map)
}

/// As [`photometric_loss`], also returning the argmin source per pixel and
/// the per-source cost caches for backward passes.
fn photometric_min(
    target: &ImageBuffer,
    warped_sources: &[WarpResult],
    alpha: f64,
) -> Result<(LossMap, Vec<usize>, Vec<PairCost>)> {
    if warped_sources.is_empty() {
        return Err(Error::EmptyInput("photometric loss needs at least one source".into()));
    }
    for wr in warped_sources {
        if !wr.image.same_size(target) {
            return Err(Error::DimensionMismatch("warped source vs target".into()));
        }
    }
    let (h, w) = (target.height, target.width);
    let costs: Vec<PairCost> =
        warped_sources.iter().map(|wr| pair_cost(target, &wr.image, alpha)).collect();
    let mut values = DepthMap::zeros(h, w);
    let mut validity = Mask::filled(h, w, false);
    let mut argmin = vec![usize::MAX; h * w];
    for v in 0..h {
        for u in 0..w {
            let mut best = f64::INFINITY;
            let mut best_s = usize::MAX;
            for (s, (wr, pc)) in warped_sources.iter().zip(&costs).enumerate() {
                if wr.validity.get(v, u) && pc.cost.get(v, u) < best {
                    best = pc.cost.get(v, u);
                    best_s = s;
                }
            }
            if best_s != usize::MAX {
                values.set(v, u, best);
                validity.set(v, u, true);
                argmin[v * w + u] = best_s;
            }
        }
    }
    Ok((LossMap { values, validity }, argmin, costs))
}

/// Stationary-pixel rejection: a pixel is kept iff the best warped
/// reconstruction beats the best unwarped (identity) reconstruction, i.e.
/// its appearance actually varies with the estimated motion.
pub fn automask(
    target: &ImageBuffer,
    raw_sources: &[ImageBuffer],
    warped_sources: &[WarpResult],
) -> Mask {
    assert_eq!(raw_sources.len(), warped_sources.len());
    let (h, w) = (target.height, target.width);
    let alpha = 0.85;
    let warped_costs: Vec<PairCost> =
        warped_sources.iter().map(|wr| pair_cost(target, &wr.image, alpha)).collect();
    let identity_costs: Vec<PairCost> =
        raw_sources.iter().map(|raw| pair_cost(target, raw, alpha)).collect();
    let mut mask = Mask::filled(h, w, false);
    for v in 0..h {
        for u in 0..w {
            let mut warped_best = f64::INFINITY;
            for (wr, pc) in warped_sources.iter().zip(&warped_costs) {
                if wr.validity.get(v, u) {
                    warped_best = warped_best.min(pc.cost.get(v, u));
                }
            }
            let identity_best = identity_costs
                .iter()
                .map(|pc| pc.cost.get(v, u))
                .fold(f64::INFINITY, f64::min);
            mask.set(v, u, warped_best < identity_best);
        }
    }
    mask
}

// ---------------------------------------------------------------------------
// LiDAR self-supervision variants
// ---------------------------------------------------------------------------

/// Per-pixel case analysis of the three LiDAR self-supervision schemes.
/// `photo_h` is required for the hinted variant: the photometric loss of
/// warping with the measured depth in place of the estimate.
pub fn lidar_loss(
    depth: &DepthMap,
    lidar: &SparseDepthImage,
    photo: &LossMap,
    photo_h: Option<&LossMap>,
    variant: LidarVariant,
) -> Result<LossMap> {
    if !depth.same_size(lidar) || !depth.same_size(&photo.values) {
        return Err(Error::DimensionMismatch("lidar loss inputs".into()));
    }
    if variant == LidarVariant::Hinted && photo_h.is_none() {
        return Err(Error::InvalidArgument(
            "hinted variant requires the measurement-warped photometric loss".into(),
        ));
    }
    let (h, w) = (depth.height, depth.width);
    let mut values = DepthMap::zeros(h, w);
    let mut validity = Mask::filled(h, w, false);
    for v in 0..h {
        for u in 0..w {
            let measurement = lidar.get(v, u);
            let photo_valid = photo.validity.get(v, u);
            let photo_value = if photo_valid { photo.values.get(v, u) } else { 0.0 };
            if measurement <= 0.0 {
                // All three variants reduce to the photometric loss.
                if photo_valid {
                    values.set(v, u, photo_value);
                    validity.set(v, u, true);
                }
                continue;
            }
            let l1 = (depth.get(v, u) - measurement).abs();
            let value = match variant {
                LidarVariant::Naive => l1 + photo_value,
                LidarVariant::Masked => l1,
                LidarVariant::Hinted => {
                    let ph = photo_h.unwrap();
                    let hinted_better = ph.validity.get(v, u)
                        && photo_valid
                        && ph.values.get(v, u) < photo_value;
                    if hinted_better {
                        l1 + photo_value
                    } else {
                        photo_value
                    }
                }
            };
            values.set(v, u, value);
            validity.set(v, u, true);
        }
    }
    Ok(LossMap { values, validity })
}

// ---------------------------------------------------------------------------
// Smoothness
// ---------------------------------------------------------------------------

/// Edge-aware smoothness on mean-normalized disparity: mean over interior
/// pixels of |dx nd| e^-|dx I| + |dy nd| e^-|dy I| with forward
/// differences, the image gradient magnitude summed over channels, and the
/// last row and column dropped.
pub fn smoothness_loss(depth: &DepthMap, image: &ImageBuffer) -> f64 {
    smoothness_with_grad(depth, image).0
}

pub(crate) fn smoothness_with_grad(depth: &DepthMap, image: &ImageBuffer) -> (f64, DepthMap) {
    assert!(
        depth.height == image.height && depth.width == image.width,
        "smoothness inputs must share a resolution"
    );
    let (h, w) = (depth.height, depth.width);
    if h < 2 || w < 2 {
        return (0.0, DepthMap::zeros(h, w));
    }
    let n = depth.data.len() as f64;
    let disparity: Vec<f64> = depth.data.iter().map(|&d| 1.0 / d).collect();
    let mean = disparity.iter().sum::<f64>() / n;
    let nd: Vec<f64> = disparity.iter().map(|&x| x / mean).collect();

    let count = ((h - 1) * (w - 1)) as f64;
    let mut total = 0.0;
    // dL/d nd accumulated over both difference terms.
    let mut g_nd = vec![0.0; depth.data.len()];
    for v in 0..h - 1 {
        for u in 0..w - 1 {
            let p = v * w + u;
            let mut ix = 0.0;
            let mut iy = 0.0;
            for c in 0..3 {
                ix += (image.get(v, u + 1, c) - image.get(v, u, c)).abs();
                iy += (image.get(v + 1, u, c) - image.get(v, u, c)).abs();
            }
            let wx = (-ix).exp();
            let wy = (-iy).exp();
            let dx = nd[p + 1] - nd[p];
            let dy = nd[p + w] - nd[p];
            total += dx.abs() * wx + dy.abs() * wy;
            let sx = wx * sign0(dx) / count;
            let sy = wy * sign0(dy) / count;
            g_nd[p + 1] += sx;
            g_nd[p] -= sx;
            g_nd[p + w] += sy;
            g_nd[p] -= sy;
        }
    }
    total /= count;

    // Chain through normalization (nd = disp / mean(disp)) and disparity.
    let coupling = g_nd.iter().zip(&nd).map(|(g, x)| g * x).sum::<f64>() / n;
    let mut grad = DepthMap::zeros(h, w);
    for i in 0..depth.data.len() {
        let d_disp = (g_nd[i] - coupling) / mean;
        grad.data[i] = d_disp * (-1.0 / (depth.data[i] * depth.data[i]));
    }
    (total, grad)
}

/// Magnitude-only pose supervision: | ||r|| - ||r_hat|| |.
pub fn imu_pose_loss(r: &nalgebra::Vector3<f64>, r_hat: &nalgebra::Vector3<f64>) -> f64 {
    (r.norm() - r_hat.norm()).abs()
}

// ---------------------------------------------------------------------------
// Total objective
// ---------------------------------------------------------------------------

/// Everything the objective needs besides the depth estimate.
pub struct SceneInputs<'a> {
    pub target: &'a ImageBuffer,
    pub sources: &'a [ImageBuffer],
    /// Target-to-source poses, aligned with `sources`.
    pub poses: &'a [PoseSE3],
    pub intrinsics: &'a CameraIntrinsics,
    /// Projected LiDAR at full resolution; absent disables the LiDAR term.
    pub lidar: Option<&'a SparseDepthImage>,
}

/// Scalar terms of one evaluation, summed over pyramid levels.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub photometric: f64,
    pub lidar: f64,
    pub smoothness: f64,
}

struct Level {
    target: ImageBuffer,
    sources: Vec<ImageBuffer>,
    intrinsics: CameraIntrinsics,
    lidar: Option<SparseDepthImage>,
}

fn build_levels(inputs: &SceneInputs, levels: usize) -> Vec<Level> {
    let mut out = Vec::with_capacity(levels);
    out.push(Level {
        target: inputs.target.clone(),
        sources: inputs.sources.to_vec(),
        intrinsics: *inputs.intrinsics,
        lidar: inputs.lidar.cloned(),
    });
    for l in 1..levels {
        let prev = &out[l - 1];
        out.push(Level {
            target: prev.target.downsample_avg(),
            sources: prev.sources.iter().map(|s| s.downsample_avg()).collect(),
            intrinsics: prev.intrinsics.scaled(2),
            lidar: prev.lidar.as_ref().map(|h| h.downsample_min_valid()),
        });
    }
    out
}

/// Distributes a gradient on a 2x-downsampled grid back to its parent:
/// average pooling spreads each value uniformly over its 2x2 block.
fn unpool_gradient(g: &DepthMap, parent_h: usize, parent_w: usize) -> DepthMap {
    let mut out = DepthMap::zeros(parent_h, parent_w);
    for v in 0..g.height {
        for u in 0..g.width {
            let share = g.get(v, u) / 4.0;
            for (dv, du) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                out.set(2 * v + dv, 2 * u + du, share);
            }
        }
    }
    out
}

/// Weighted objective over the scale pyramid with its analytic gradient
/// with respect to the full-resolution depth map.
///
/// Per level: the min-over-sources photometric mean (over its own valid
/// support), the LiDAR L1 mean (over its own support) weighted by
/// `lambda_lidar`, and the smoothness term weighted by `lambda_smooth`.
/// Levels are summed with equal weights.
pub fn total_loss_and_gradient(
    depth: &DepthMap,
    inputs: &SceneInputs,
    config: &LossConfig,
) -> Result<(LossBreakdown, DepthMap)> {
    config.validate()?;
    if inputs.sources.is_empty() {
        return Err(Error::EmptyInput("at least one source view required".into()));
    }
    if inputs.sources.len() != inputs.poses.len() {
        return Err(Error::DimensionMismatch("one pose per source required".into()));
    }
    let (h, w) = (depth.height, depth.width);
    if inputs.target.height != h || inputs.target.width != w {
        return Err(Error::DimensionMismatch("target image vs depth".into()));
    }

    let levels = build_levels(inputs, config.multiscale_levels);

    // Depth pyramid by repeated 2x2 average pooling.
    let mut depth_levels = vec![depth.clone()];
    for _ in 1..config.multiscale_levels {
        depth_levels.push(depth_levels.last().unwrap().downsample_avg());
    }

    let mut breakdown = LossBreakdown::default();
    let mut grad_full = DepthMap::zeros(h, w);

    for (level, d_l) in levels.iter().zip(&depth_levels) {
        let (lh, lw) = (d_l.height, d_l.width);
        let mut grad_l = DepthMap::zeros(lh, lw);

        // Warp every source with the analytic depth jacobian.
        let warped: Vec<_> = level
            .sources
            .iter()
            .zip(inputs.poses)
            .map(|(src, pose)| warp_image_with_jacobian(src, d_l, pose, &level.intrinsics))
            .collect();
        let warp_results: Vec<WarpResult> = warped.iter().map(|wj| wj.warp.clone()).collect();
        let (photo, argmin, costs) = photometric_min(&level.target, &warp_results, config.alpha)?;

        let keep = if config.use_automask {
            automask(&level.target, &level.sources, &warp_results)
        } else {
            Mask::filled(lh, lw, true)
        };

        // Hinted comparator: photometric loss of warping with the measured
        // depth substituted at measured pixels. No gradient flows through
        // it; it only selects the branch.
        let photo_h = if config.lidar_variant == LidarVariant::Hinted {
            level.lidar.as_ref().map(|lidar| {
                let mut substituted = d_l.clone();
                for i in 0..substituted.data.len() {
                    if lidar.data[i] > 0.0 {
                        substituted.data[i] = lidar.data[i];
                    }
                }
                let warped_h: Vec<WarpResult> = level
                    .sources
                    .iter()
                    .zip(inputs.poses)
                    .map(|(src, pose)| {
                        warp_image_with_jacobian(src, &substituted, pose, &level.intrinsics).warp
                    })
                    .collect();
                photometric_min(&level.target, &warped_h, config.alpha)
                    .map(|(m, _, _)| m)
                    .expect("dimensions already checked")
            })
        } else {
            None
        };

        // Photometric support and LiDAR support per variant. Depth
        // regression does not depend on reconstruction validity, so the
        // naive and masked L1 terms cover every measured pixel.
        let mut photo_support = Mask::filled(lh, lw, false);
        let mut lidar_support = Mask::filled(lh, lw, false);
        for v in 0..lh {
            for u in 0..lw {
                let measurement = level.lidar.as_ref().map_or(0.0, |l| l.get(v, u));
                let photo_ok = photo.validity.get(v, u) && keep.get(v, u);
                match config.lidar_variant {
                    LidarVariant::Naive => {
                        photo_support.set(v, u, photo_ok);
                        lidar_support.set(v, u, measurement > 0.0);
                    }
                    LidarVariant::Masked => {
                        photo_support.set(v, u, photo_ok && measurement <= 0.0);
                        lidar_support.set(v, u, measurement > 0.0);
                    }
                    LidarVariant::Hinted => {
                        photo_support.set(v, u, photo_ok);
                        if measurement > 0.0 && photo_ok {
                            if let Some(ph) = &photo_h {
                                if ph.validity.get(v, u)
                                    && ph.values.get(v, u) < photo.values.get(v, u)
                                {
                                    lidar_support.set(v, u, true);
                                }
                            }
                        }
                    }
                }
            }
        }

        let n_photo = photo_support.count();
        let n_lidar = lidar_support.count();

        // Photometric scalar and backward.
        if n_photo > 0 {
            let mut photo_sum = 0.0;
            // Upstream weight per pixel and per source.
            let mut g_costs: Vec<DepthMap> =
                (0..level.sources.len()).map(|_| DepthMap::zeros(lh, lw)).collect();
            for v in 0..lh {
                for u in 0..lw {
                    if photo_support.get(v, u) {
                        photo_sum += photo.values.get(v, u);
                        let s = argmin[v * lw + u];
                        g_costs[s].set(v, u, 1.0 / n_photo as f64);
                    }
                }
            }
            breakdown.photometric += photo_sum / n_photo as f64;

            for (s, pc) in costs.iter().enumerate() {
                let mut grad_image = ImageBuffer::zeros(lh, lw);
                pair_cost_backward(
                    &level.target,
                    &warp_results[s].image,
                    config.alpha,
                    &pc.cache,
                    &g_costs[s],
                    &mut grad_image,
                );
                // Chain through the warp: each warped intensity depends
                // only on the depth at its own pixel.
                for v in 0..lh {
                    for u in 0..lw {
                        let mut acc = 0.0;
                        for c in 0..3 {
                            acc += grad_image.get(v, u, c) * warped[s].jacobian.get(v, u, c);
                        }
                        if acc != 0.0 {
                            grad_l.set(v, u, grad_l.get(v, u) + acc);
                        }
                    }
                }
            }
        }

        // LiDAR L1 scalar and backward.
        if n_lidar > 0 {
            let lidar = level.lidar.as_ref().expect("lidar support implies a lidar input");
            let mut l1_sum = 0.0;
            for v in 0..lh {
                for u in 0..lw {
                    if lidar_support.get(v, u) {
                        let diff = d_l.get(v, u) - lidar.get(v, u);
                        l1_sum += diff.abs();
                        let g = config.lambda_lidar * sign0(diff) / n_lidar as f64;
                        grad_l.set(v, u, grad_l.get(v, u) + g);
                    }
                }
            }
            breakdown.lidar += config.lambda_lidar * l1_sum / n_lidar as f64;
        }

        // Smoothness.
        if config.lambda_smooth > 0.0 {
            let (s, g) = smoothness_with_grad(d_l, &level.target);
            breakdown.smoothness += config.lambda_smooth * s;
            for i in 0..grad_l.data.len() {
                grad_l.data[i] += config.lambda_smooth * g.data[i];
            }
        }

        // Chain the level gradient back through the average-pooling stack.
        let mut g = grad_l;
        while g.height < h {
            let (ph, pw) = {
                // Parent sizes follow the forward pooling chain.
                let mut sizes = vec![(h, w)];
                while sizes.last().unwrap().0 / 2 >= g.height && sizes.last().unwrap().0 > g.height
                {
                    let (sh, sw) = *sizes.last().unwrap();
                    sizes.push((sh / 2, sw / 2));
                }
                sizes[sizes.len() - 2]
            };
            g = unpool_gradient(&g, ph, pw);
        }
        for i in 0..grad_full.data.len() {
            grad_full.data[i] += g.data[i];
        }
    }

    breakdown.total = breakdown.photometric + breakdown.lidar + breakdown.smoothness;
    Ok((breakdown, grad_full))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::PoseSE3;
    use crate::synthetic::{render, Scene};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> ImageBuffer {
        ImageBuffer::from_fn(h, w, |_, _| [rng.gen(), rng.gen(), rng.gen()])
    }

    fn smooth_random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> ImageBuffer {
        // Low-frequency content so warps stay in one bilinear regime.
        let a: f64 = rng.gen_range(0.1..0.4);
        let b: f64 = rng.gen_range(0.1..0.4);
        let p0: f64 = rng.gen_range(0.0..6.0);
        let p1: f64 = rng.gen_range(0.0..6.0);
        ImageBuffer::from_fn(h, w, |v, u| {
            let x = u as f64 / w as f64;
            let y = v as f64 / h as f64;
            [
                0.5 + a * (6.0 * x + p0).sin() * (5.0 * y + p1).cos(),
                0.5 + b * (5.0 * x + p1).cos() * (7.0 * y + p0).sin(),
                0.5 + 0.5 * (a + b) * (4.0 * (x + y) + p0).sin(),
            ]
        })
    }

    #[test]
    fn ssim_self_similarity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = random_image(&mut rng, 10, 12);
        let s = ssim(&img, &img).unwrap();
        for &v in &s.data {
            assert_relative_eq!(v, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn ssim_constant_images_closed_form() {
        let a = ImageBuffer::from_fn(6, 6, |_, _| [0.2; 3]);
        let b = ImageBuffer::from_fn(6, 6, |_, _| [0.8; 3]);
        // For constant patches all variances vanish:
        // SSIM = (2 mu_a mu_b + C1) C2 / ((mu_a^2 + mu_b^2 + C1) C2).
        let expected = (2.0 * 0.2 * 0.8 + SSIM_C1) / (0.04 + 0.64 + SSIM_C1);
        let s = ssim(&a, &b).unwrap();
        for &v in &s.data {
            assert_relative_eq!(v, expected, epsilon = 1e-12);
            assert!(v < 1.0);
        }
    }

    #[test]
    fn ssim_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_image(&mut rng, 9, 7);
        let b = random_image(&mut rng, 9, 7);
        let sab = ssim(&a, &b).unwrap();
        let sba = ssim(&b, &a).unwrap();
        for (x, y) in sab.data.iter().zip(&sba.data) {
            assert_relative_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn ssim_dimension_mismatch() {
        let a = ImageBuffer::zeros(4, 4);
        let b = ImageBuffer::zeros(4, 5);
        assert!(ssim(&a, &b).is_err());
    }

    fn full_warp(image: ImageBuffer) -> WarpResult {
        let validity = Mask::filled(image.height, image.width, true);
        WarpResult { image, validity }
    }

    #[test]
    fn photometric_perfect_reconstruction_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let target = random_image(&mut rng, 8, 8);
        let loss = photometric_loss(&target, &[full_warp(target.clone())], 0.85).unwrap();
        for &v in &loss.values.data {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn photometric_min_rule_prefers_perfect_source() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let target = random_image(&mut rng, 8, 8);
        let arbitrary = random_image(&mut rng, 8, 8);
        let loss = photometric_loss(
            &target,
            &[full_warp(arbitrary), full_warp(target.clone())],
            0.85,
        )
        .unwrap();
        for &v in &loss.values.data {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn photometric_pure_l1() {
        let target = ImageBuffer::from_fn(6, 6, |_, _| [0.5; 3]);
        let shifted = ImageBuffer::from_fn(6, 6, |_, _| [0.6; 3]);
        let loss = photometric_loss(&target, &[full_warp(shifted)], 0.0).unwrap();
        for &v in &loss.values.data {
            assert_relative_eq!(v, 0.1, epsilon = 1e-12);
        }
    }

    #[test]
    fn photometric_empty_sources_is_error() {
        let target = ImageBuffer::zeros(4, 4);
        assert!(photometric_loss(&target, &[], 0.85).is_err());
    }

    #[test]
    fn automask_rejects_static_scene() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let frame = random_image(&mut rng, 8, 8);
        let mask = automask(&frame, &[frame.clone()], &[full_warp(frame.clone())]);
        assert_eq!(mask.count(), 0);
    }

    #[test]
    fn automask_keeps_moving_textured_scene() {
        // Genuine camera motion with correct warp: warped loss is near
        // zero while the unwarped frames differ. Camera pitched down at a
        // nearby textured ground so every pixel shows real parallax.
        let scene = Scene {
            ground: Some(crate::synthetic::GroundPlane {
                y: 1.6,
                texture: crate::synthetic::Texture::Noise {
                    seed: 21,
                    scale: 0.7,
                    contrast: 0.6,
                    base: 0.5,
                },
            }),
            background: None,
            boxes: vec![],
            sky_color: [0.6, 0.7, 0.8],
        };
        let k = crate::geometry::CameraIntrinsics::new(90.0, 90.0, 80.0, 24.0, 160, 48).unwrap();
        let pitch_down = nalgebra::Rotation3::from_axis_angle(
            &nalgebra::Vector3::x_axis(),
            -0.5,
        )
        .into_inner();
        let target_pose = PoseSE3 { rotation: pitch_down, translation: nalgebra::Vector3::zeros() };
        let source_pose =
            PoseSE3 { rotation: pitch_down, translation: nalgebra::Vector3::new(0.0, 0.0, 0.4) };
        let (target, depth) = render(&scene, &k, &target_pose, 0);
        let (source, _) = render(&scene, &k, &source_pose, 0);
        let p_t_to_s = source_pose.inverse().compose(&target_pose);
        let warped = crate::geometry::warp_image(&source, &depth, &p_t_to_s, &k);
        let valid = warped.validity.count();
        let mask = automask(&target, &[source], &[warped]);
        assert!(valid > 5000);
        assert!(
            mask.count() as f64 > 0.9 * valid as f64,
            "kept {} of {valid}",
            mask.count()
        );
    }

    #[test]
    fn lidar_variants_reduce_to_photo_without_measurements() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let depth = DepthMap::from_fn(6, 6, |_, _| rng.gen_range(1.0..10.0));
        let lidar = SparseDepthImage::zeros(6, 6);
        let photo = LossMap {
            values: DepthMap::from_fn(6, 6, |_, _| rng.gen_range(0.0..1.0)),
            validity: Mask::filled(6, 6, true),
        };
        let empty_h = LossMap {
            values: DepthMap::zeros(6, 6),
            validity: Mask::filled(6, 6, true),
        };
        for variant in [LidarVariant::Naive, LidarVariant::Masked, LidarVariant::Hinted] {
            let out = lidar_loss(&depth, &lidar, &photo, Some(&empty_h), variant).unwrap();
            assert_eq!(out.values, photo.values);
        }
    }

    #[test]
    fn lidar_masked_hand_case() {
        let mut depth = DepthMap::constant(2, 2, 7.0);
        depth.set(0, 1, 3.0);
        let mut lidar = SparseDepthImage::zeros(2, 2);
        lidar.set(0, 0, 5.0);
        let photo = LossMap {
            values: DepthMap::constant(2, 2, 0.3),
            validity: Mask::filled(2, 2, true),
        };
        let out = lidar_loss(&depth, &lidar, &photo, None, LidarVariant::Masked).unwrap();
        assert_relative_eq!(out.values.get(0, 0), 2.0); // |7 - 5|, photometric excluded
        assert_relative_eq!(out.values.get(0, 1), 0.3);
    }

    #[test]
    fn lidar_hinted_tie_falls_to_photometric() {
        let depth = DepthMap::constant(2, 2, 7.0);
        let mut lidar = SparseDepthImage::zeros(2, 2);
        lidar.set(0, 0, 5.0);
        let photo = LossMap {
            values: DepthMap::constant(2, 2, 0.1),
            validity: Mask::filled(2, 2, true),
        };
        let photo_h = LossMap {
            values: DepthMap::constant(2, 2, 0.2),
            validity: Mask::filled(2, 2, true),
        };
        let out =
            lidar_loss(&depth, &lidar, &photo, Some(&photo_h), LidarVariant::Hinted).unwrap();
        // 0.2 >= 0.1: no LiDAR term, photometric only.
        assert_relative_eq!(out.values.get(0, 0), 0.1);
    }

    #[test]
    fn lidar_hinted_requires_comparator() {
        let depth = DepthMap::constant(2, 2, 7.0);
        let lidar = SparseDepthImage::zeros(2, 2);
        let photo = LossMap {
            values: DepthMap::zeros(2, 2),
            validity: Mask::filled(2, 2, true),
        };
        assert!(lidar_loss(&depth, &lidar, &photo, None, LidarVariant::Hinted).is_err());
    }

    #[test]
    fn lidar_variant_algebra_on_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let h = 20;
        let w = 25;
        let depth = DepthMap::from_fn(h, w, |_, _| rng.gen_range(0.5..50.0));
        let lidar = SparseDepthImage::from_fn(h, w, |_, _| {
            if rng.gen_bool(0.3) {
                rng.gen_range(0.5..50.0)
            } else {
                0.0
            }
        });
        let photo = LossMap {
            values: DepthMap::from_fn(h, w, |_, _| rng.gen_range(0.0..1.0)),
            validity: Mask::filled(h, w, true),
        };
        let photo_h = LossMap {
            values: DepthMap::from_fn(h, w, |_, _| rng.gen_range(0.0..1.0)),
            validity: Mask::filled(h, w, true),
        };
        let naive = lidar_loss(&depth, &lidar, &photo, None, LidarVariant::Naive).unwrap();
        let masked = lidar_loss(&depth, &lidar, &photo, None, LidarVariant::Masked).unwrap();
        let hinted =
            lidar_loss(&depth, &lidar, &photo, Some(&photo_h), LidarVariant::Hinted).unwrap();
        for v in 0..h {
            for u in 0..w {
                if lidar.get(v, u) <= 0.0 {
                    assert_eq!(naive.values.get(v, u), masked.values.get(v, u));
                    assert_eq!(naive.values.get(v, u), hinted.values.get(v, u));
                } else {
                    assert!(naive.values.get(v, u) >= masked.values.get(v, u));
                }
            }
        }
        // Hinted reduces to naive when the comparator always prefers the
        // measurement.
        let always_better = LossMap {
            values: DepthMap::constant(h, w, -1.0),
            validity: Mask::filled(h, w, true),
        };
        let hinted_all =
            lidar_loss(&depth, &lidar, &photo, Some(&always_better), LidarVariant::Hinted)
                .unwrap();
        assert_eq!(hinted_all.values, naive.values);
    }

    #[test]
    fn smoothness_constant_depth_is_zero() {
        let depth = DepthMap::constant(8, 8, 4.0);
        let image = ImageBuffer::from_fn(8, 8, |v, u| [(v as f64) / 8.0, (u as f64) / 8.0, 0.2]);
        assert_relative_eq!(smoothness_loss(&depth, &image), 0.0);
    }

    #[test]
    fn smoothness_edge_aware_weighting() {
        let depth = DepthMap::from_fn(8, 8, |_, u| 1.0 + u as f64);
        let flat = ImageBuffer::from_fn(8, 8, |_, _| [0.5; 3]);
        let contrast = ImageBuffer::from_fn(8, 8, |_, u| if u % 2 == 0 { [0.0; 3] } else { [1.0; 3] });
        assert!(smoothness_loss(&depth, &contrast) < smoothness_loss(&depth, &flat));
    }

    #[test]
    fn smoothness_hand_value() {
        // D = [[1,2],[1,2]] over a constant image. Normalized disparity is
        // [[4/3, 2/3], [4/3, 2/3]]; the single interior pixel contributes
        // |dx| = 2/3 and |dy| = 0 with unit weights.
        let depth = DepthMap { height: 2, width: 2, data: vec![1.0, 2.0, 1.0, 2.0] };
        let image = ImageBuffer::from_fn(2, 2, |_, _| [0.5; 3]);
        assert_relative_eq!(smoothness_loss(&depth, &image), 2.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn imu_loss_cases() {
        use nalgebra::Vector3;
        let r = Vector3::new(1.0, 2.0, 2.0);
        assert_relative_eq!(imu_pose_loss(&r, &r), 0.0);
        assert_relative_eq!(
            imu_pose_loss(&Vector3::new(2.0, 0.0, 0.0), &Vector3::new(0.0, 3.0, 0.0)),
            1.0
        );
        assert_relative_eq!(
            imu_pose_loss(&Vector3::new(1.0, 0.0, 0.0), &Vector3::new(0.0, 1.0, 0.0)),
            0.0
        );
    }

    /// Random scene used by gradient checks: smooth images, small pose,
    /// random depth, optional sparse lidar.
    fn random_instance(
        seed: u64,
        with_lidar: bool,
    ) -> (DepthMap, ImageBuffer, Vec<ImageBuffer>, Vec<PoseSE3>, Option<SparseDepthImage>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = (16, 16);
        let target = smooth_random_image(&mut rng, h, w);
        let sources = vec![
            smooth_random_image(&mut rng, h, w),
            smooth_random_image(&mut rng, h, w),
        ];
        let poses = vec![
            PoseSE3::from_axis_angle(
                nalgebra::Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), 1.0),
                0.005,
                nalgebra::Vector3::new(0.03, -0.01, 0.05),
            ),
            PoseSE3::from_translation(-0.02, 0.015, -0.04),
        ];
        let depth = DepthMap::from_fn(h, w, |_, _| rng.gen_range(4.0..8.0));
        let lidar = with_lidar.then(|| {
            SparseDepthImage::from_fn(h, w, |_, _| {
                if rng.gen_bool(0.25) {
                    rng.gen_range(3.0..9.0)
                } else {
                    0.0
                }
            })
        });
        (depth, target, sources, poses, lidar)
    }

    fn check_gradient(seed: u64, config: &LossConfig) {
        let (depth, target, sources, poses, lidar) = random_instance(seed, true);
        let k = crate::geometry::CameraIntrinsics::new(24.0, 24.0, 7.5, 7.5, 16, 16).unwrap();
        let inputs = SceneInputs {
            target: &target,
            sources: &sources,
            poses: &poses,
            intrinsics: &k,
            lidar: lidar.as_ref(),
        };
        let (breakdown, grad) = total_loss_and_gradient(&depth, &inputs, config).unwrap();
        assert!(breakdown.total.is_finite());
        let step = 1e-5;
        // The loss is piecewise smooth: a finite-difference probe that
        // pushes a projection across a bilinear cell boundary at any
        // pyramid level straddles a kink, so such pixels are skipped.
        let crosses_cell = |v: usize, u: usize| -> bool {
            let mut d_l = depth.clone();
            for l in 0..config.multiscale_levels {
                let k_l = k.scaled(1 << l);
                let (vl, ul) = (v >> l, u >> l);
                let dl = d_l.get(vl, ul);
                let delta = step / 4f64.powi(l as i32);
                for pose in &poses {
                    let pix = crate::geometry::PixelCoord::new(ul as f64, vl as f64);
                    let p0 = crate::geometry::project_point(&k_l, pose, dl - delta, pix);
                    let p1 = crate::geometry::project_point(&k_l, pose, dl + delta, pix);
                    if !p0.valid || !p1.valid {
                        return true;
                    }
                    if p0.pixel.u.floor() != p1.pixel.u.floor()
                        || p0.pixel.v.floor() != p1.pixel.v.floor()
                    {
                        return true;
                    }
                }
                if l + 1 < config.multiscale_levels {
                    d_l = d_l.downsample_avg();
                }
            }
            false
        };
        let mut max_rel = 0.0_f64;
        for v in (0..16).step_by(3) {
            for u in (0..16).step_by(3) {
                if crosses_cell(v, u) {
                    continue;
                }
                let mut dp = depth.clone();
                dp.set(v, u, depth.get(v, u) + step);
                let mut dm = depth.clone();
                dm.set(v, u, depth.get(v, u) - step);
                let (lp, _) = total_loss_and_gradient(&dp, &inputs, config).unwrap();
                let (lm, _) = total_loss_and_gradient(&dm, &inputs, config).unwrap();
                let fd = (lp.total - lm.total) / (2.0 * step);
                let an = grad.get(v, u);
                // The 1e-6 floor keeps cancellation noise on near-zero
                // gradients from dominating the relative error.
                let denom = fd.abs().max(an.abs()).max(1e-6);
                let mut rel = (fd - an).abs() / denom;
                if rel >= 1e-4 {
                    // The objective is piecewise smooth (L1 terms, the
                    // min over sources). Re-probe with a smaller step: if
                    // the finite difference converges to the analytic
                    // value the wide bracket straddled a kink; if it
                    // moves but stays off, the pixel sits on a kink and
                    // carries no classical derivative, so it is skipped.
                    let s2 = step / 8.0;
                    dp.set(v, u, depth.get(v, u) + s2);
                    dm.set(v, u, depth.get(v, u) - s2);
                    let (lp2, _) = total_loss_and_gradient(&dp, &inputs, config).unwrap();
                    let (lm2, _) = total_loss_and_gradient(&dm, &inputs, config).unwrap();
                    let fd2 = (lp2.total - lm2.total) / (2.0 * s2);
                    let denom2 = fd2.abs().max(an.abs()).max(1e-6);
                    rel = (fd2 - an).abs() / denom2;
                    if rel >= 1e-4 && (fd2 - fd).abs() > 0.05 * denom {
                        continue;
                    }
                }
                max_rel = max_rel.max(rel);
            }
        }
        assert!(max_rel < 1e-4, "gradient mismatch {max_rel:.3e} for {config:?}");
    }

    #[test]
    fn gradient_matches_finite_differences_all_variants() {
        for (i, variant) in
            [LidarVariant::Naive, LidarVariant::Masked, LidarVariant::Hinted].iter().enumerate()
        {
            for (j, levels) in [1usize, 2].iter().enumerate() {
                let config = LossConfig {
                    alpha: 0.85,
                    lambda_smooth: 1e-3,
                    lambda_lidar: 0.3,
                    lidar_variant: *variant,
                    multiscale_levels: *levels,
                    use_automask: false,
                };
                check_gradient(40 + (i * 2 + j) as u64, &config);
            }
        }
    }


    #[test]
    fn total_loss_zero_case() {
        // Only smoothness enabled, constant depth: loss and gradient 0.
        let (_, target, sources, poses, _) = random_instance(9, false);
        let depth = DepthMap::constant(16, 16, 5.0);
        let k = crate::geometry::CameraIntrinsics::new(24.0, 24.0, 7.5, 7.5, 16, 16).unwrap();
        let inputs = SceneInputs {
            target: &target,
            sources: &sources,
            poses: &poses,
            intrinsics: &k,
            lidar: None,
        };
        let config = LossConfig {
            alpha: 0.0,
            lambda_smooth: 1.0,
            lambda_lidar: 0.0,
            lidar_variant: LidarVariant::Naive,
            multiscale_levels: 1,
            use_automask: false,
        };
        // Zero out the photometric contribution by making every source
        // identical to the target (perfect reconstruction).
        let identical = vec![target.clone(), target.clone()];
        let identity_poses = vec![PoseSE3::identity(), PoseSE3::identity()];
        let inputs = SceneInputs { sources: &identical, poses: &identity_poses, ..inputs };
        let (breakdown, grad) = total_loss_and_gradient(&depth, &inputs, &config).unwrap();
        assert_relative_eq!(breakdown.smoothness, 0.0);
        assert_relative_eq!(breakdown.total, 0.0, epsilon = 1e-12);
        for &g in &grad.data {
            assert!(g.abs() < 1e-12);
        }
    }

    #[test]
    fn total_loss_small_on_perfect_inputs() {
        let scene = Scene::ground_and_wall(31);
        let k = crate::geometry::CameraIntrinsics::new(90.0, 90.0, 80.0, 24.0, 160, 48).unwrap();
        let ego = PoseSE3::from_translation(0.0, 0.0, 0.7);
        let spec = crate::synthetic::LidarSpec::new(vec![-0.2], 1.0_f64.to_radians());
        let triplet = crate::synthetic::make_triplet(&scene, &k, &ego, &spec);
        let sources: Vec<ImageBuffer> =
            triplet.sources.iter().map(|f| f.image.clone()).collect();
        let inputs = SceneInputs {
            target: &triplet.target.image,
            sources: &sources,
            poses: &triplet.poses_t_to_s,
            intrinsics: &k,
            lidar: None,
        };
        let config = LossConfig {
            lambda_smooth: 0.0,
            lambda_lidar: 0.0,
            use_automask: false,
            multiscale_levels: 1,
            ..LossConfig::default()
        };
        let (good, _) =
            total_loss_and_gradient(&triplet.target.depth, &inputs, &config).unwrap();
        // Resampling blur keeps SSIM slightly below 1 even for a perfect
        // depth, so the loss is small but not zero; it must clearly beat a
        // uniform wrong depth.
        assert!(good.total < 0.1, "loss on perfect inputs: {}", good.total);
        let wrong = DepthMap::constant(
            triplet.target.depth.height,
            triplet.target.depth.width,
            20.0,
        );
        let (bad, _) = total_loss_and_gradient(&wrong, &inputs, &config).unwrap();
        assert!(
            bad.total > 1.5 * good.total,
            "wrong depth not separated: good {} bad {}",
            good.total,
            bad.total
        );
    }

    #[test]
    fn photometric_scale_invariance() {
        // Jointly scaling depth and pose translation leaves the warp, and
        // therefore the photometric loss, unchanged.
        let scene = Scene::ground_and_wall(17);
        let k = crate::geometry::CameraIntrinsics::new(90.0, 90.0, 80.0, 24.0, 160, 48).unwrap();
        let ego = PoseSE3::from_translation(0.02, 0.0, 0.5);
        let spec = crate::synthetic::LidarSpec::new(vec![-0.2], 1.0_f64.to_radians());
        let triplet = crate::synthetic::make_triplet(&scene, &k, &ego, &spec);
        let sources: Vec<ImageBuffer> =
            triplet.sources.iter().map(|f| f.image.clone()).collect();
        let config = LossConfig {
            lambda_smooth: 0.0,
            lambda_lidar: 0.0,
            use_automask: false,
            multiscale_levels: 1,
            ..LossConfig::default()
        };
        let base = {
            let inputs = SceneInputs {
                target: &triplet.target.image,
                sources: &sources,
                poses: &triplet.poses_t_to_s,
                intrinsics: &k,
                lidar: None,
            };
            total_loss_and_gradient(&triplet.target.depth, &inputs, &config).unwrap().0.total
        };
        for s in [0.5, 2.0, 4.0] {
            let scaled_depth = DepthMap {
                height: triplet.target.depth.height,
                width: triplet.target.depth.width,
                data: triplet.target.depth.data.iter().map(|d| d * s).collect(),
            };
            let scaled_poses: Vec<PoseSE3> =
                triplet.poses_t_to_s.iter().map(|p| p.with_translation_scaled(s)).collect();
            let inputs = SceneInputs {
                target: &triplet.target.image,
                sources: &sources,
                poses: &scaled_poses,
                intrinsics: &k,
                lidar: None,
            };
            let scaled =
                total_loss_and_gradient(&scaled_depth, &inputs, &config).unwrap().0.total;
            assert!((scaled - base).abs() < 1e-6, "scale {s}: {scaled} vs {base}");
        }
    }
}
