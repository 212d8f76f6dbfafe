//! Beam segmentation of raw point clouds, beam sub-sampling to emulate a
//! few-beam sensor, and the dilated sparse-depth supervision operator.
//!
//! KITTI-style clouds carry no ring index; points are stored in acquisition
//! order, counter-clockwise within each beam, so a completed rotation (the
//! azimuth wrapping from near 2π back toward 0) marks a beam change.

use crate::error::{Error, Result};
use crate::geometry::DepthMap;

/// Sparse depth image: same layout as [`DepthMap`], 0 means no measurement.
pub type SparseDepthImage = DepthMap;

/// One LiDAR return in the sensor frame (x forward, y left, z up).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub intensity: f64,
}

/// Raw point cloud in acquisition order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<Point>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Point cloud with a recovered ring (beam) index per point.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BeamSegmentedCloud {
    pub cloud: PointCloud,
    pub ring: Vec<u32>,
}

impl BeamSegmentedCloud {
    /// Number of distinct rings (max index + 1).
    pub fn ring_count(&self) -> usize {
        self.ring.iter().max().map_or(0, |&m| m as usize + 1)
    }
}

/// Horizontal angle of a return, `atan2(y, x)` in `(-π, π]`.
pub fn azimuth(x: f64, y: f64) -> Result<f64> {
    if x == 0.0 && y == 0.0 {
        return Err(Error::DegeneratePoint);
    }
    let phi = y.atan2(x);
    // atan2 returns -π for (-x, -0.0); fold onto the (-π, π] convention.
    if phi <= -std::f64::consts::PI {
        Ok(std::f64::consts::PI)
    } else {
        Ok(phi)
    }
}

/// Azimuth normalized to `[0, 2π)`, used for wrap detection.
fn azimuth_unsigned(x: f64, y: f64) -> Option<f64> {
    azimuth(x, y).ok().map(|phi| {
        if phi < 0.0 {
            phi + 2.0 * std::f64::consts::PI
        } else {
            phi
        }
    })
}

/// Assigns a ring index to every point by detecting azimuth wrap-arounds.
///
/// A wrap is declared when the unsigned azimuth drops by more than π
/// between consecutive points; each wrap increments the ring index.
/// Degenerate points at the origin inherit the current ring.
pub fn segment_beams(cloud: &PointCloud) -> BeamSegmentedCloud {
    let mut ring = Vec::with_capacity(cloud.points.len());
    let mut current: u32 = 0;
    let mut prev_phi: Option<f64> = None;
    for p in &cloud.points {
        if let Some(phi) = azimuth_unsigned(p.x, p.y) {
            if let Some(prev) = prev_phi {
                if prev - phi > std::f64::consts::PI {
                    current += 1;
                }
            }
            prev_phi = Some(phi);
        }
        ring.push(current);
    }
    BeamSegmentedCloud { cloud: cloud.clone(), ring }
}

/// Keeps the points whose ring index is a multiple of `keep_every`.
/// With 64 rings and `keep_every = 16`, rings {0, 16, 32, 48} survive.
pub fn subsample_beams(segmented: &BeamSegmentedCloud, keep_every: u32) -> PointCloud {
    assert!(keep_every >= 1, "keep_every must be at least 1");
    let points = segmented
        .cloud
        .points
        .iter()
        .zip(&segmented.ring)
        .filter(|(_, &r)| r % keep_every == 0)
        .map(|(p, _)| *p)
        .collect();
    PointCloud { points }
}

/// Morphological dilation of a sparse depth image with a square structuring
/// element of side `kernel_side`. Each iteration marks every pixel within
/// the kernel neighborhood of a valid pixel valid; competing depths resolve
/// to the minimum positive value. `iterations = 0` is the identity.
pub fn dilate_sparse_depth(
    sparse: &SparseDepthImage,
    kernel_side: usize,
    iterations: usize,
) -> SparseDepthImage {
    assert!(kernel_side >= 1, "kernel side must be at least 1");
    // A side-n square element reaches floor(n/2) pixels in each direction
    // (anchor at the center, even kernels biased toward the top-left).
    let reach_lo = kernel_side / 2;
    let reach_hi = (kernel_side - 1) / 2;
    let mut current = sparse.clone();
    for _ in 0..iterations {
        let mut next = current.clone();
        for v in 0..current.height {
            for u in 0..current.width {
                let v0 = v.saturating_sub(reach_lo);
                let v1 = (v + reach_hi).min(current.height - 1);
                let u0 = u.saturating_sub(reach_lo);
                let u1 = (u + reach_hi).min(current.width - 1);
                let mut best = f64::INFINITY;
                for vv in v0..=v1 {
                    for uu in u0..=u1 {
                        let d = current.get(vv, uu);
                        if d > 0.0 && d < best {
                            best = d;
                        }
                    }
                }
                if best.is_finite() {
                    next.set(v, u, best);
                }
            }
        }
        current = next;
    }
    current
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    fn ring_points(n_rings: usize, per_ring: usize) -> PointCloud {
        // Counter-clockwise sweep per ring, starting near azimuth 0.
        let mut points = Vec::new();
        for r in 0..n_rings {
            for i in 0..per_ring {
                let phi = 2.0 * PI * i as f64 / per_ring as f64;
                let radius = 10.0 + r as f64;
                points.push(Point {
                    x: radius * phi.cos(),
                    y: radius * phi.sin(),
                    z: -1.5 + 0.05 * r as f64,
                    intensity: 0.0,
                });
            }
        }
        PointCloud { points }
    }

    #[test]
    fn azimuth_axes() {
        assert_relative_eq!(azimuth(1.0, 0.0).unwrap(), 0.0);
        assert_relative_eq!(azimuth(0.0, 1.0).unwrap(), PI / 2.0);
        assert_relative_eq!(azimuth(-1.0, 0.0).unwrap(), PI);
        assert!(azimuth(0.0, 0.0).is_err());
    }

    #[test]
    fn segment_two_rings() {
        let cloud = ring_points(2, 360);
        let seg = segment_beams(&cloud);
        assert_eq!(seg.ring_count(), 2);
        assert!(seg.ring[..360].iter().all(|&r| r == 0));
        assert!(seg.ring[360..].iter().all(|&r| r == 1));
    }

    #[test]
    fn segment_single_ring_no_wrap() {
        let cloud = ring_points(1, 100);
        let seg = segment_beams(&cloud);
        assert!(seg.ring.iter().all(|&r| r == 0));
    }

    #[test]
    fn segment_64_ring_cloud() {
        let cloud = ring_points(64, 200);
        let seg = segment_beams(&cloud);
        assert_eq!(seg.ring_count(), 64);
    }

    #[test]
    fn segment_empty_cloud() {
        let seg = segment_beams(&PointCloud::default());
        assert!(seg.ring.is_empty());
        assert_eq!(seg.ring_count(), 0);
    }

    #[test]
    fn subsample_keep_all_is_identity() {
        let cloud = ring_points(4, 50);
        let seg = segment_beams(&cloud);
        let out = subsample_beams(&seg, 1);
        assert_eq!(out, cloud);
    }

    #[test]
    fn subsample_64_to_4_rings() {
        let per_ring = 120;
        let cloud = ring_points(64, per_ring);
        let seg = segment_beams(&cloud);
        let out = subsample_beams(&seg, 16);
        assert_eq!(out.len(), 4 * per_ring);
        let rings = segment_beams(&out);
        assert_eq!(rings.ring_count(), 4);
        // Output is a subset of the input.
        for p in &out.points {
            assert!(cloud.points.contains(p));
        }
    }

    #[test]
    fn dilate_identity_and_single_pixel() {
        let mut img = SparseDepthImage::zeros(7, 7);
        img.set(3, 3, 5.0);
        assert_eq!(dilate_sparse_depth(&img, 3, 0), img);

        let out = dilate_sparse_depth(&img, 3, 1);
        for v in 0..7 {
            for u in 0..7 {
                let expected = if (2..=4).contains(&v) && (2..=4).contains(&u) { 5.0 } else { 0.0 };
                assert_relative_eq!(out.get(v, u), expected);
            }
        }
    }

    #[test]
    fn dilate_overlap_takes_minimum() {
        let mut img = SparseDepthImage::zeros(5, 9);
        img.set(2, 2, 4.0);
        img.set(2, 4, 6.0);
        let out = dilate_sparse_depth(&img, 3, 1);
        // Column 3 lies in both dilations; the minimum wins.
        assert_relative_eq!(out.get(2, 3), 4.0);
        assert_relative_eq!(out.get(2, 5), 6.0);
    }

    #[test]
    fn dilate_coverage_grows_with_iterations() {
        let mut img = SparseDepthImage::zeros(11, 11);
        img.set(5, 5, 2.5);
        let mut previous = 0;
        for it in 0..4 {
            let out = dilate_sparse_depth(&img, 3, it);
            let count = out.valid_count();
            assert!(count >= previous);
            previous = count;
            // Existing valid pixels keep a positive value.
            assert!(out.get(5, 5) > 0.0);
        }
    }
}
