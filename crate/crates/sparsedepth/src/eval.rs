//! Depth evaluation: the standard error/precision metric set, ground-truth
//! rescaling for scale-ambiguous predictions, and the catastrophic distance
//! rate (CDR) over filtered instance masks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{DepthMap, Mask};
use crate::lidar::dilate_sparse_depth;

/// Default depth cap in meters for [`eigen_metrics`] (the usual KITTI
/// evaluation cap).
pub const DEFAULT_DEPTH_CAP: f64 = 80.0;

/// Predictions are clamped to at least this depth before computing
/// metrics, so log terms stay finite.
const MIN_PRED_DEPTH: f64 = 1e-3;

/// Aggregate depth metrics over the valid ground-truth pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub abs_rel: f64,
    pub sq_rel: f64,
    /// Root mean square error in meters.
    pub rmse: f64,
    pub rmse_log: f64,
    /// Fraction of pixels with max(pred/gt, gt/pred) < 1.25.
    pub delta1: f64,
    /// Same with threshold 1.25^2.
    pub delta2: f64,
    /// Same with threshold 1.25^3.
    pub delta3: f64,
    pub valid_pixels: usize,
}

/// Standard monocular-depth metrics restricted to pixels where the ground
/// truth is positive and at most `cap` meters. Predictions are clamped to
/// `[1e-3, cap]` first.
pub fn eigen_metrics(pred: &DepthMap, gt: &DepthMap, cap: f64) -> Result<EvalReport> {
    if !pred.same_size(gt) {
        return Err(Error::DimensionMismatch("eigen_metrics input sizes".into()));
    }
    let mut n = 0usize;
    let (mut abs_rel, mut sq_rel, mut sq, mut sq_log) = (0.0, 0.0, 0.0, 0.0);
    let (mut d1, mut d2, mut d3) = (0usize, 0usize, 0usize);
    for (p_raw, g) in pred.data.iter().zip(&gt.data) {
        let g = *g;
        if g <= 0.0 || g > cap {
            continue;
        }
        let p = p_raw.clamp(MIN_PRED_DEPTH, cap);
        n += 1;
        abs_rel += (p - g).abs() / g;
        sq_rel += (p - g) * (p - g) / g;
        sq += (p - g) * (p - g);
        let dl = p.ln() - g.ln();
        sq_log += dl * dl;
        let ratio = (p / g).max(g / p);
        if ratio < 1.25 {
            d1 += 1;
        }
        if ratio < 1.25 * 1.25 {
            d2 += 1;
        }
        if ratio < 1.25 * 1.25 * 1.25 {
            d3 += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptyInput("eigen_metrics: no valid ground-truth pixels".into()));
    }
    let nf = n as f64;
    Ok(EvalReport {
        abs_rel: abs_rel / nf,
        sq_rel: sq_rel / nf,
        rmse: (sq / nf).sqrt(),
        rmse_log: (sq_log / nf).sqrt(),
        delta1: d1 as f64 / nf,
        delta2: d2 as f64 / nf,
        delta3: d3 as f64 / nf,
        valid_pixels: n,
    })
}

/// Statistic used by [`rescale_to_gt`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RescaleMode {
    Median,
    Mean,
}

impl std::str::FromStr for RescaleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "median" => Ok(Self::Median),
            "mean" => Ok(Self::Mean),
            other => Err(Error::InvalidArgument(format!(
                "unknown rescale mode '{other}' (expected median or mean)"
            ))),
        }
    }
}

fn median_of(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let mid = values.len() / 2;
    if values.len() % 2 == 1 {
        values[mid]
    } else {
        (values[mid - 1] + values[mid]) / 2.0
    }
}

/// Multiplies the prediction by the ratio of the ground-truth statistic to
/// the prediction statistic over valid ground-truth pixels, aligning the
/// scale of a relative-depth prediction with the ground truth.
pub fn rescale_to_gt(pred: &DepthMap, gt: &DepthMap, mode: RescaleMode) -> Result<DepthMap> {
    if !pred.same_size(gt) {
        return Err(Error::DimensionMismatch("rescale_to_gt input sizes".into()));
    }
    let mut ps = Vec::new();
    let mut gs = Vec::new();
    for (p, g) in pred.data.iter().zip(&gt.data) {
        if *g > 0.0 {
            ps.push(*p);
            gs.push(*g);
        }
    }
    if gs.is_empty() {
        return Err(Error::EmptyInput("rescale_to_gt: no valid ground-truth pixels".into()));
    }
    let (stat_p, stat_g) = match mode {
        RescaleMode::Median => (median_of(&mut ps), median_of(&mut gs)),
        RescaleMode::Mean => (
            ps.iter().sum::<f64>() / ps.len() as f64,
            gs.iter().sum::<f64>() / gs.len() as f64,
        ),
    };
    if stat_p <= 0.0 {
        return Err(Error::InvalidArgument(
            "rescale_to_gt: non-positive prediction statistic".into(),
        ));
    }
    let ratio = stat_g / stat_p;
    let mut out = pred.clone();
    for d in &mut out.data {
        *d *= ratio;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Instance masks and CDR
// ---------------------------------------------------------------------------

/// A single object-instance segmentation mask.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceMask {
    pub id: u32,
    pub mask: Mask,
}

/// Central band half-width as a fraction of image width: masks whose
/// centroid column is farther than this from the image center are dropped.
const CENTRAL_BAND_HALF_FRACTION: f64 = 0.1;
/// Minimum pixel count for a mask to be considered.
const MIN_MASK_PIXELS: usize = 20;
/// Square dilation kernel side used to smooth masks before the contour test.
const MASK_DILATE_KERNEL: usize = 10;
/// Dilation iterations.
const MASK_DILATE_ITERS: usize = 4;
/// Douglas-Peucker tolerance as a fraction of the contour perimeter.
const SIMPLIFY_EPS_FRACTION: f64 = 0.02;
/// Convexity slack: opposite-sign cross products up to this fraction of the
/// dominant cross-product magnitude are tolerated.
const CONVEXITY_SLACK: f64 = 0.05;

/// Survivor counts after each stage of [`filter_instance_masks`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskFilterStages {
    pub input: usize,
    pub after_central_band: usize,
    pub after_min_size: usize,
    pub after_convexity: usize,
}

/// Keeps masks that are centered, large enough, and approximately convex
/// after smoothing. Returns keep flags aligned with the input plus the
/// per-stage survivor counts.
pub fn filter_instance_masks(
    masks: &[InstanceMask],
    image_width: usize,
) -> (Vec<bool>, MaskFilterStages) {
    let mut keep = vec![false; masks.len()];
    let mut stages = MaskFilterStages {
        input: masks.len(),
        after_central_band: 0,
        after_min_size: 0,
        after_convexity: 0,
    };
    let center = image_width as f64 / 2.0;
    let half_band = CENTRAL_BAND_HALF_FRACTION * image_width as f64;
    for (i, m) in masks.iter().enumerate() {
        let count = m.mask.count();
        if count == 0 {
            continue;
        }
        let mut sum_u = 0.0;
        for v in 0..m.mask.height {
            for u in 0..m.mask.width {
                if m.mask.get(v, u) {
                    sum_u += u as f64;
                }
            }
        }
        let centroid_u = sum_u / count as f64;
        if (centroid_u - center).abs() > half_band {
            continue;
        }
        stages.after_central_band += 1;
        if count < MIN_MASK_PIXELS {
            continue;
        }
        stages.after_min_size += 1;
        let smoothed = dilate_mask(&m.mask, MASK_DILATE_KERNEL, MASK_DILATE_ITERS);
        let Some(contour) = trace_contour(&smoothed) else {
            continue;
        };
        let perimeter = polyline_perimeter(&contour);
        let simplified = douglas_peucker_closed(&contour, SIMPLIFY_EPS_FRACTION * perimeter);
        if is_approximately_convex(&simplified, CONVEXITY_SLACK) {
            stages.after_convexity += 1;
            keep[i] = true;
        }
    }
    (keep, stages)
}

/// Square-kernel binary dilation, implemented through the sparse-depth
/// dilation on a 0/1 image.
fn dilate_mask(mask: &Mask, kernel_side: usize, iterations: usize) -> Mask {
    let mut img = DepthMap::zeros(mask.height, mask.width);
    for v in 0..mask.height {
        for u in 0..mask.width {
            if mask.get(v, u) {
                img.set(v, u, 1.0);
            }
        }
    }
    let dilated = dilate_sparse_depth(&img, kernel_side, iterations);
    let mut out = Mask::filled(mask.height, mask.width, false);
    for v in 0..mask.height {
        for u in 0..mask.width {
            if dilated.get(v, u) > 0.0 {
                out.set(v, u, true);
            }
        }
    }
    out
}

/// Moore-neighbor boundary trace of the component containing the first set
/// pixel in scan order; points are (u, v). Returns `None` for an empty mask.
fn trace_contour(mask: &Mask) -> Option<Vec<(f64, f64)>> {
    let (h, w) = (mask.height as i64, mask.width as i64);
    let at = |v: i64, u: i64| v >= 0 && u >= 0 && v < h && u < w && mask.get(v as usize, u as usize);
    let mut start = None;
    'scan: for v in 0..h {
        for u in 0..w {
            if at(v, u) {
                start = Some((v, u));
                break 'scan;
            }
        }
    }
    let (sv, su) = start?;
    // Clockwise Moore neighborhood starting from west.
    const NEIGHBORS: [(i64, i64); 8] =
        [(0, -1), (-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1)];
    let mut contour = vec![(su as f64, sv as f64)];
    let (mut cv, mut cu) = (sv, su);
    // Index into NEIGHBORS of the backtrack direction (where we came from).
    let mut backtrack = 0usize;
    let max_steps = (mask.count() * 8).max(64);
    for _ in 0..max_steps {
        let mut found = None;
        for k in 1..=8 {
            let dir = (backtrack + k) % 8;
            let (dv, du) = NEIGHBORS[dir];
            if at(cv + dv, cu + du) {
                found = Some((dir, cv + dv, cu + du));
                break;
            }
        }
        let Some((dir, nv, nu)) = found else {
            // Isolated pixel: its contour is the single point.
            return Some(contour);
        };
        if nv == sv && nu == su {
            return Some(contour);
        }
        contour.push((nu as f64, nv as f64));
        // New backtrack points from the new pixel toward the previous one.
        backtrack = (dir + 4) % 8;
        (cv, cu) = (nv, nu);
    }
    Some(contour)
}

fn polyline_perimeter(points: &[(f64, f64)]) -> f64 {
    let n = points.len();
    if n < 2 {
        return 0.0;
    }
    (0..n)
        .map(|i| {
            let (x0, y0) = points[i];
            let (x1, y1) = points[(i + 1) % n];
            ((x1 - x0).powi(2) + (y1 - y0).powi(2)).sqrt()
        })
        .sum()
}

fn point_segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (px, py) = p;
    let (ax, ay) = a;
    let (bx, by) = b;
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    if len2 < 1e-12 {
        return ((px - ax).powi(2) + (py - ay).powi(2)).sqrt();
    }
    let t = (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0);
    let (cx, cy) = (ax + t * dx, ay + t * dy);
    ((px - cx).powi(2) + (py - cy).powi(2)).sqrt()
}

fn douglas_peucker_open(points: &[(f64, f64)], eps: f64, out: &mut Vec<(f64, f64)>) {
    if points.len() < 3 {
        out.extend_from_slice(points);
        return;
    }
    let a = points[0];
    let b = points[points.len() - 1];
    let mut worst = 0.0;
    let mut worst_i = 0;
    for (i, &p) in points.iter().enumerate().skip(1).take(points.len() - 2) {
        let d = point_segment_distance(p, a, b);
        if d > worst {
            worst = d;
            worst_i = i;
        }
    }
    if worst <= eps {
        out.push(a);
        out.push(b);
        return;
    }
    let mut left = Vec::new();
    douglas_peucker_open(&points[..=worst_i], eps, &mut left);
    left.pop();
    out.extend_from_slice(&left);
    douglas_peucker_open(&points[worst_i..], eps, out);
}

/// Douglas-Peucker simplification of a closed contour: the polyline is split
/// at its two most distant points and each half simplified independently.
fn douglas_peucker_closed(points: &[(f64, f64)], eps: f64) -> Vec<(f64, f64)> {
    let n = points.len();
    if n < 4 {
        return points.to_vec();
    }
    // Split opposite the start to avoid a degenerate anchor pair.
    let split = n / 2;
    let mut first = Vec::new();
    douglas_peucker_open(&points[..=split], eps, &mut first);
    let mut wrapped: Vec<(f64, f64)> = points[split..].to_vec();
    wrapped.push(points[0]);
    let mut second = Vec::new();
    douglas_peucker_open(&wrapped, eps, &mut second);
    first.pop();
    second.pop();
    first.extend(second);
    first
}

/// A polygon is approximately convex when every turn has the same
/// orientation, allowing opposite-sign cross products up to `slack` times
/// the dominant cross-product magnitude.
fn is_approximately_convex(polygon: &[(f64, f64)], slack: f64) -> bool {
    let n = polygon.len();
    if n < 3 {
        return true;
    }
    let mut crosses = Vec::with_capacity(n);
    for i in 0..n {
        let (x0, y0) = polygon[i];
        let (x1, y1) = polygon[(i + 1) % n];
        let (x2, y2) = polygon[(i + 2) % n];
        crosses.push((x1 - x0) * (y2 - y1) - (y1 - y0) * (x2 - x1));
    }
    let scale = crosses.iter().fold(0.0_f64, |m, c| m.max(c.abs()));
    if scale == 0.0 {
        return true;
    }
    let tol = slack * scale;
    let all_non_negative = crosses.iter().all(|&c| c >= -tol);
    let all_non_positive = crosses.iter().all(|&c| c <= tol);
    all_non_negative || all_non_positive
}

/// Mean signed relative depth error over the mask pixels with valid ground
/// truth; `None` when no such pixel exists (the instance is skipped).
pub fn instance_signed_error(
    pred: &DepthMap,
    gt: &DepthMap,
    mask: &Mask,
) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for v in 0..gt.height {
        for u in 0..gt.width {
            if mask.get(v, u) && gt.get(v, u) > 0.0 {
                sum += (pred.get(v, u) - gt.get(v, u)) / gt.get(v, u);
                n += 1;
            }
        }
    }
    if n == 0 {
        None
    } else {
        Some(sum / n as f64)
    }
}

/// Fraction of instances whose signed error strictly exceeds `tau`.
pub fn cdr(errors: &[f64], tau: f64) -> Result<f64> {
    if errors.is_empty() {
        return Err(Error::EmptyInput("cdr: no instance errors".into()));
    }
    let over = errors.iter().filter(|&&r| r > tau).count();
    Ok(over as f64 / errors.len() as f64)
}

/// Per-instance errors, the CDR curve over a τ grid, and the mask-filter
/// survivor counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CDRReport {
    pub instance_errors: Vec<f64>,
    /// (τ, CDR(τ)) samples.
    pub curve: Vec<(f64, f64)>,
    pub filter_stages: MaskFilterStages,
}

/// Full CDR pipeline: filter the masks, compute each surviving instance's
/// signed error, and evaluate CDR on the τ grid.
pub fn cdr_report(
    pred: &DepthMap,
    gt: &DepthMap,
    masks: &[InstanceMask],
    tau_grid: &[f64],
) -> Result<CDRReport> {
    if !pred.same_size(gt) {
        return Err(Error::DimensionMismatch("cdr_report input sizes".into()));
    }
    let (keep, filter_stages) = filter_instance_masks(masks, gt.width);
    let mut instance_errors = Vec::new();
    for (m, kept) in masks.iter().zip(&keep) {
        if !kept {
            continue;
        }
        if let Some(r) = instance_signed_error(pred, gt, &m.mask) {
            instance_errors.push(r);
        }
    }
    if instance_errors.is_empty() {
        return Err(Error::EmptyInput("cdr_report: no surviving instances".into()));
    }
    let mut curve = Vec::with_capacity(tau_grid.len());
    for &tau in tau_grid {
        curve.push((tau, cdr(&instance_errors, tau)?));
    }
    Ok(CDRReport { instance_errors, curve, filter_stages })
}
