//! Direct per-pixel inverse-depth optimization: a sigmoid-bounded depth
//! field driven by the self-supervised objective with adaptive-moment
//! gradient descent. This is the desk-scale stand-in for a trained depth
//! network — the supervision signals act on the field exactly as they
//! would on network output.

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::eval::instance_signed_error;
use crate::geometry::{CameraIntrinsics, DepthMap, Mask, PoseSE3};
use crate::lidar::dilate_sparse_depth;
use crate::losses::{LidarVariant, LossConfig, SceneInputs, total_loss_and_gradient};
use crate::synthetic::{
    render, BoxPrim, LidarSpec, Scene, Texture, make_triplet,
};

/// Smallest decodable depth in meters.
pub const DEPTH_MIN: f64 = 0.1;
/// Largest decodable depth in meters.
pub const DEPTH_MAX: f64 = 100.0;

// Depth decodes as d = 1 / (A·sigmoid(x) + B); the constants pin the open
// range (DEPTH_MIN, DEPTH_MAX).
const SIGMOID_A: f64 = 1.0 / DEPTH_MIN - 1.0 / DEPTH_MAX;
const SIGMOID_B: f64 = 1.0 / DEPTH_MAX;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// H×W grid of unconstrained parameters decoding to bounded depth.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthField {
    pub height: usize,
    pub width: usize,
    pub params: Vec<f64>,
}

impl DepthField {
    /// Field decoding to a constant depth everywhere.
    pub fn constant(height: usize, width: usize, depth: f64) -> Self {
        let x = Self::encode(depth);
        Self { height, width, params: vec![x; height * width] }
    }

    /// Field decoding to the given map (clamped into the representable
    /// open range).
    pub fn from_depth(depth: &DepthMap) -> Self {
        let params = depth.data.iter().map(|&d| Self::encode(d)).collect();
        Self { height: depth.height, width: depth.width, params }
    }

    /// Inverse of the decode mapping, with clamping away from the ends.
    fn encode(depth: f64) -> f64 {
        let d = depth.clamp(DEPTH_MIN * 1.001, DEPTH_MAX * 0.999);
        let s = ((1.0 / d - SIGMOID_B) / SIGMOID_A).clamp(1e-12, 1.0 - 1e-12);
        (s / (1.0 - s)).ln()
    }

    pub fn decode(&self) -> DepthMap {
        DepthMap {
            height: self.height,
            width: self.width,
            data: self.params.iter().map(|&x| 1.0 / (SIGMOID_A * sigmoid(x) + SIGMOID_B)).collect(),
        }
    }

    /// Decoded depth plus the per-parameter derivative d(depth)/d(param).
    pub fn decode_with_grad(&self) -> (DepthMap, Vec<f64>) {
        let mut data = Vec::with_capacity(self.params.len());
        let mut grad = Vec::with_capacity(self.params.len());
        for &x in &self.params {
            let s = sigmoid(x);
            let d = 1.0 / (SIGMOID_A * s + SIGMOID_B);
            data.push(d);
            grad.push(-d * d * SIGMOID_A * s * (1.0 - s));
        }
        (DepthMap { height: self.height, width: self.width, data }, grad)
    }
}

/// Optimization hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizeConfig {
    pub learning_rate: f64,
    /// Total update steps; the learning rate is halved at the midpoint.
    pub steps: usize,
    pub loss: LossConfig,
}

impl Default for OptimizeConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-4, steps: 2000, loss: LossConfig::default() }
    }
}

impl OptimizeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument("learning rate must be > 0".into()));
        }
        self.loss.validate()
    }
}

/// One recorded step of the loss terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRecord {
    pub step: usize,
    pub total: f64,
    pub photometric: f64,
    pub lidar: f64,
    pub smoothness: f64,
}

/// Per-step loss history of one optimization run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossTrace {
    pub records: Vec<TraceRecord>,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Optimizes the depth field against the configured total loss with
/// adaptive first/second moment accumulation. Zero steps returns the
/// decoded initialization unchanged. A non-finite loss aborts with
/// [`Error::Diverged`].
pub fn optimize_depth(
    init: &DepthField,
    inputs: &SceneInputs,
    config: &OptimizeConfig,
) -> Result<(DepthMap, LossTrace)> {
    config.validate()?;
    let mut field = init.clone();
    let n = field.params.len();
    let mut m = vec![0.0; n];
    let mut v = vec![0.0; n];
    let mut trace = LossTrace::default();
    for step in 0..config.steps {
        let (depth, decode_grad) = field.decode_with_grad();
        let (breakdown, grad) = total_loss_and_gradient(&depth, inputs, &config.loss)?;
        if !breakdown.total.is_finite() {
            return Err(Error::Diverged { step, loss: breakdown.total });
        }
        trace.records.push(TraceRecord {
            step,
            total: breakdown.total,
            photometric: breakdown.photometric,
            lidar: breakdown.lidar,
            smoothness: breakdown.smoothness,
        });
        let lr = if step >= config.steps / 2 {
            config.learning_rate / 2.0
        } else {
            config.learning_rate
        };
        let t = (step + 1) as f64;
        let bias1 = 1.0 - ADAM_BETA1.powf(t);
        let bias2 = 1.0 - ADAM_BETA2.powf(t);
        for i in 0..n {
            let g = grad.data[i] * decode_grad[i];
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = m[i] / bias1;
            let v_hat = v[i] / bias2;
            field.params[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok((field.decode(), trace))
}

/// Divides every pose translation by `alpha_pose` and returns the factor
/// by which recovered depth must be multiplied to undo the scaling.
pub fn apply_pose_scaling(poses: &[PoseSE3], alpha_pose: f64) -> Result<(Vec<PoseSE3>, f64)> {
    if !(alpha_pose > 0.0) {
        return Err(Error::InvalidArgument("alpha_pose must be > 0".into()));
    }
    let scaled = poses.iter().map(|p| p.with_translation_scaled(1.0 / alpha_pose)).collect();
    Ok((scaled, alpha_pose))
}

/// Result of [`run_infinite_depth_scenario`]: the same co-moving-box scene
/// optimized with photometric-only and with masked-LiDAR supervision.
#[derive(Debug, Clone)]
pub struct InfiniteDepthOutcome {
    pub depth_photometric: DepthMap,
    pub depth_masked: DepthMap,
    /// Rendered ground-truth depth of the target frame.
    pub gt: DepthMap,
    /// Pixels covered by the co-moving box in the target frame.
    pub box_mask: Mask,
    /// Signed instance error of the photometric-only run on the box.
    pub r_box_photometric: f64,
    /// Same for the masked-LiDAR run.
    pub r_box_masked: f64,
}

/// Settings for the co-moving-box scenario; the defaults keep one run
/// within a few seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub intrinsics: CameraIntrinsics,
    pub learning_rate: f64,
    pub steps: usize,
}

impl ScenarioConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            intrinsics: CameraIntrinsics::new(80.0, 80.0, 48.0, 32.0, 96, 64).unwrap(),
            learning_rate: 0.02,
            steps: 400,
        }
    }
}

/// Builds the scene: textured ground and far wall, plus one textured box
/// ahead of the camera moving with exactly the camera's velocity.
pub fn co_moving_scene(seed: u64, ego_velocity: &Vector3<f64>) -> Scene {
    let mut scene = Scene::ground_and_wall(seed);
    scene.boxes.push(BoxPrim {
        // Ahead of the camera, slightly right of center, resting near the
        // ground so several of the downward LiDAR beams cross it.
        min: Vector3::new(-0.9, -0.4, 7.5),
        size: Vector3::new(1.8, 1.9, 1.5),
        velocity: *ego_velocity,
        texture: Texture::Noise { seed: seed.wrapping_add(7), scale: 0.5, contrast: 0.6, base: 0.5 },
    });
    scene
}

/// Runs the infinite-depth failure scenario: a box co-moving with the
/// camera shows no parallax, so photometric-only optimization places it
/// grossly too deep, while masked LiDAR supervision anchors it.
pub fn run_infinite_depth_scenario(config: &ScenarioConfig) -> Result<InfiniteDepthOutcome> {
    let ego_velocity = Vector3::new(0.0, 0.0, 0.4);
    let scene = co_moving_scene(config.seed, &ego_velocity);
    let ego = PoseSE3::from_translation(ego_velocity.x, ego_velocity.y, ego_velocity.z);
    let spec = LidarSpec::kitti_64();
    let triplet = make_triplet(&scene, &config.intrinsics, &ego, &spec);

    // Box mask: pixels whose rendered depth changes when the box is removed.
    let mut background_only = scene.clone();
    background_only.boxes.clear();
    let (_, depth_no_box) = render(&background_only, &config.intrinsics, &triplet.target.cam_to_world, 0);
    let mut box_mask = Mask::filled(config.intrinsics.height, config.intrinsics.width, false);
    for v in 0..config.intrinsics.height {
        for u in 0..config.intrinsics.width {
            if (triplet.target.depth.get(v, u) - depth_no_box.get(v, u)).abs() > 1e-9 {
                box_mask.set(v, u, true);
            }
        }
    }

    // Dilated sparse supervision widens the reach of the few beams that
    // cross the box.
    let supervision = dilate_sparse_depth(&triplet.lidar_depth, 10, 2);

    let init = DepthField::constant(config.intrinsics.height, config.intrinsics.width, 20.0);
    let photo_inputs = SceneInputs {
        target: &triplet.target.image,
        sources: &triplet.sources.iter().map(|s| s.image.clone()).collect::<Vec<_>>(),
        poses: &triplet.poses_t_to_s,
        intrinsics: &config.intrinsics,
        lidar: None,
    };
    let photo_config = OptimizeConfig {
        learning_rate: config.learning_rate,
        steps: config.steps,
        loss: LossConfig { lambda_lidar: 0.0, ..LossConfig::default() },
    };
    let (depth_photometric, _) = optimize_depth(&init, &photo_inputs, &photo_config)?;

    let masked_inputs = SceneInputs { lidar: Some(&supervision), ..photo_inputs };
    let masked_config = OptimizeConfig {
        learning_rate: config.learning_rate,
        steps: config.steps,
        loss: LossConfig { lidar_variant: LidarVariant::Masked, ..LossConfig::default() },
    };
    let (depth_masked, _) = optimize_depth(&init, &masked_inputs, &masked_config)?;

    let r_box_photometric = instance_signed_error(&depth_photometric, &triplet.target.depth, &box_mask)
        .ok_or_else(|| Error::EmptyInput("box mask has no valid ground truth".into()))?;
    let r_box_masked = instance_signed_error(&depth_masked, &triplet.target.depth, &box_mask)
        .ok_or_else(|| Error::EmptyInput("box mask has no valid ground truth".into()))?;

    Ok(InfiniteDepthOutcome {
        depth_photometric,
        depth_masked,
        gt: triplet.target.depth.clone(),
        box_mask,
        r_box_photometric,
        r_box_masked,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use crate::synthetic::FrameTriplet;

    fn small_intrinsics() -> CameraIntrinsics {
        CameraIntrinsics::new(60.0, 60.0, 40.0, 24.0, 80, 48).unwrap()
    }

    fn ground_triplet(seed: u64, k: &CameraIntrinsics) -> FrameTriplet {
        let scene = Scene::ground_and_wall(seed);
        let ego = PoseSE3::from_translation(0.0, 0.0, 0.4);
        make_triplet(&scene, k, &ego, &LidarSpec::kitti_64())
    }

    #[test]
    fn depth_field_round_trip_and_bounds() {
        for &d in &[0.5, 1.0, 7.3, 20.0, 60.0] {
            let f = DepthField::constant(2, 2, d);
            assert_relative_eq!(f.decode().get(0, 0), d, epsilon = 1e-9);
        }
        // Out-of-range requests clamp into the representable range.
        let low = DepthField::constant(1, 1, 0.001).decode().get(0, 0);
        let high = DepthField::constant(1, 1, 1e6).decode().get(0, 0);
        assert!(low >= DEPTH_MIN && high <= DEPTH_MAX);
    }

    #[test]
    fn decode_gradient_matches_finite_differences() {
        let mut field = DepthField::constant(1, 3, 15.0);
        field.params = vec![-1.2, 0.3, 2.0];
        let (_, grad) = field.decode_with_grad();
        for i in 0..3 {
            let step = 1e-6;
            let mut plus = field.clone();
            plus.params[i] += step;
            let mut minus = field.clone();
            minus.params[i] -= step;
            let fd = (plus.decode().data[i] - minus.decode().data[i]) / (2.0 * step);
            assert_relative_eq!(grad[i], fd, epsilon = 1e-6);
        }
    }

    #[test]
    fn zero_steps_returns_initialization() {
        let k = small_intrinsics();
        let triplet = ground_triplet(1, &k);
        let sources: Vec<_> = triplet.sources.iter().map(|s| s.image.clone()).collect();
        let inputs = SceneInputs {
            target: &triplet.target.image,
            sources: &sources,
            poses: &triplet.poses_t_to_s,
            intrinsics: &k,
            lidar: None,
        };
        let init = DepthField::constant(k.height, k.width, 12.0);
        let config = OptimizeConfig {
            steps: 0,
            loss: LossConfig { lambda_lidar: 0.0, ..LossConfig::default() },
            ..OptimizeConfig::default()
        };
        let (out, trace) = optimize_depth(&init, &inputs, &config).unwrap();
        assert_eq!(out, init.decode());
        assert!(trace.records.is_empty());
    }

    #[test]
    fn pose_scaling_cases() {
        let poses = vec![PoseSE3::from_translation(0.0, 0.0, 5.0)];
        let (same, mult) = apply_pose_scaling(&poses, 1.0).unwrap();
        assert_eq!(same[0], poses[0]);
        assert_relative_eq!(mult, 1.0);

        let (scaled, mult) = apply_pose_scaling(&poses, 10.0).unwrap();
        assert_relative_eq!(scaled[0].translation.z, 0.5, epsilon = 1e-12);
        assert_relative_eq!(mult, 10.0);

        // Scaling then un-scaling recovers the original exactly.
        let (back, _) = apply_pose_scaling(&scaled, 1.0 / 10.0).unwrap();
        assert_relative_eq!(back[0].translation.z, 5.0, epsilon = 1e-12);

        assert!(apply_pose_scaling(&poses, 0.0).is_err());
    }

    #[test]
    fn masked_supervision_converges_to_lidar_scale() {
        let k = small_intrinsics();
        let triplet = ground_triplet(2, &k);
        let sources: Vec<_> = triplet.sources.iter().map(|s| s.image.clone()).collect();
        let inputs = SceneInputs {
            target: &triplet.target.image,
            sources: &sources,
            poses: &triplet.poses_t_to_s,
            intrinsics: &k,
            lidar: Some(&triplet.lidar_depth),
        };
        let init = DepthField::constant(k.height, k.width, 20.0);
        let config = OptimizeConfig {
            learning_rate: 0.01,
            steps: 600,
            // Single scale: the coarse pyramid levels pool LiDAR with a
            // min-valid rule, which biases coarse supervision low and
            // shifts the converged scale by a few percent.
            loss: LossConfig {
                lidar_variant: LidarVariant::Masked,
                multiscale_levels: 1,
                ..LossConfig::default()
            },
        };
        let (out, _) = optimize_depth(&init, &inputs, &config).unwrap();

        // Median ratio of recovered depth to the measurement on LiDAR
        // pixels converges to 1.
        let mut ratios = Vec::new();
        for (o, h) in out.data.iter().zip(&triplet.lidar_depth.data) {
            if *h > 0.0 {
                ratios.push(o / h);
            }
        }
        ratios.sort_by(f64::total_cmp);
        let median = ratios[ratios.len() / 2];
        assert!(
            (median - 1.0).abs() <= 0.02,
            "median LiDAR ratio {median} outside 1 +/- 0.02"
        );
    }

    #[test]
    fn trace_non_increasing_over_windows() {
        // Checked during descent with a gentle rate; once converged onto
        // the L1 plateau the adaptive updates jitter around the kink by
        // more than 5% of the tiny residual.
        let k = small_intrinsics();
        let triplet = ground_triplet(2, &k);
        let sources: Vec<_> = triplet.sources.iter().map(|s| s.image.clone()).collect();
        let inputs = SceneInputs {
            target: &triplet.target.image,
            sources: &sources,
            poses: &triplet.poses_t_to_s,
            intrinsics: &k,
            lidar: Some(&triplet.lidar_depth),
        };
        let init = DepthField::constant(k.height, k.width, 20.0);
        let config = OptimizeConfig {
            learning_rate: 1e-3,
            steps: 300,
            loss: LossConfig { lidar_variant: LidarVariant::Masked, ..LossConfig::default() },
        };
        let (_, trace) = optimize_depth(&init, &inputs, &config).unwrap();
        let totals: Vec<f64> = trace.records.iter().map(|r| r.total).collect();
        for w in totals.windows(51) {
            assert!(
                w[50] <= w[0] * 1.05,
                "loss rose over a 50-step window: {} -> {}",
                w[0],
                w[50]
            );
        }
    }

    #[test]
    fn photometric_loss_invariant_under_joint_scaling() {
        // The photometric-only loss is invariant under joint scaling of the
        // optimized depth and the pose translations — the argmin family of
        // the scale-ambiguous objective. The invariance is exact at any
        // state, so it is asserted on the optimizer's final state; two
        // independently run pre-scaled optimizations agree only loosely
        // because the adaptive-moment trajectory in the bounded parameter
        // space is not scale-equivariant.
        let k = small_intrinsics();
        let triplet = ground_triplet(3, &k);
        let sources: Vec<_> = triplet.sources.iter().map(|s| s.image.clone()).collect();
        let config = OptimizeConfig {
            learning_rate: 0.02,
            steps: 300,
            loss: LossConfig { lambda_lidar: 0.0, ..LossConfig::default() },
        };
        let run = |scale: f64| -> (DepthMap, f64) {
            let poses: Vec<PoseSE3> = triplet
                .poses_t_to_s
                .iter()
                .map(|p| p.with_translation_scaled(scale))
                .collect();
            let inputs = SceneInputs {
                target: &triplet.target.image,
                sources: &sources,
                poses: &poses,
                intrinsics: &k,
                lidar: None,
            };
            let init = DepthField::constant(k.height, k.width, 10.0 * scale);
            let (out, trace) = optimize_depth(&init, &inputs, &config).unwrap();
            (out, trace.records.last().unwrap().total)
        };
        let (final_depth, base) = run(1.0);

        // Exact form: evaluate the loss at the jointly scaled final state.
        let eval_at = |scale: f64| -> f64 {
            let mut depth = final_depth.clone();
            for d in &mut depth.data {
                *d *= scale;
            }
            let poses: Vec<PoseSE3> = triplet
                .poses_t_to_s
                .iter()
                .map(|p| p.with_translation_scaled(scale))
                .collect();
            let inputs = SceneInputs {
                target: &triplet.target.image,
                sources: &sources,
                poses: &poses,
                intrinsics: &k,
                lidar: None,
            };
            total_loss_and_gradient(&depth, &inputs, &config.loss).unwrap().0.total
        };
        for &s in &[0.5, 2.0, 4.0] {
            let scaled = eval_at(s);
            assert!(
                (scaled - base).abs() < 1e-4,
                "joint scaling by {s} changed the loss: {base} vs {scaled}"
            );
        }

        // Loose form: an independently pre-scaled run lands near the same
        // loss value.
        let (_, doubled) = run(2.0);
        assert!(
            (doubled - base).abs() < 0.05 * base,
            "pre-scaled run diverged in loss: {base} vs {doubled}"
        );
    }

    #[test]
    fn multiscale_extends_lidar_gradient_support() {
        let k = small_intrinsics();
        let triplet = ground_triplet(4, &k);
        let sources: Vec<_> = triplet.sources.iter().map(|s| s.image.clone()).collect();
        let inputs = SceneInputs {
            target: &triplet.target.image,
            sources: &sources,
            poses: &triplet.poses_t_to_s,
            intrinsics: &k,
            lidar: Some(&triplet.lidar_depth),
        };
        let depth = DepthMap::constant(k.height, k.width, 15.0);
        // Isolate the LiDAR term by differencing gradients computed with
        // and without it.
        let lidar_grad_support = |levels: usize| -> usize {
            let with = total_loss_and_gradient(
                &depth,
                &inputs,
                &LossConfig { multiscale_levels: levels, ..LossConfig::default() },
            )
            .unwrap()
            .1;
            let without = total_loss_and_gradient(
                &depth,
                &inputs,
                &LossConfig {
                    multiscale_levels: levels,
                    lambda_lidar: 0.0,
                    ..LossConfig::default()
                },
            )
            .unwrap()
            .1;
            with.data
                .iter()
                .zip(&without.data)
                .filter(|(a, b)| (**a - **b).abs() > 1e-15)
                .count()
        };
        let single = lidar_grad_support(1);
        let multi = lidar_grad_support(4);
        assert!(
            multi > single,
            "multiscale should supervise more parameters: {multi} vs {single}"
        );
    }

    #[test]
    fn infinite_depth_scenario_reproduces_failure_and_fix() {
        let outcome = run_infinite_depth_scenario(&ScenarioConfig::new(0)).unwrap();
        assert!(
            outcome.r_box_photometric > 0.5,
            "photometric-only box error {} should be catastrophic",
            outcome.r_box_photometric
        );
        assert!(
            outcome.r_box_masked < 0.1,
            "masked-LiDAR box error {} should be anchored",
            outcome.r_box_masked
        );
        assert!(outcome.box_mask.count() > 50);
    }
}
