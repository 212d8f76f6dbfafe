//! Deterministic ray-cast renderer and LiDAR simulator.
//!
//! Scenes are built from a textured ground plane, axis-aligned textured
//! boxes, and an optional far background wall. Every render yields the
//! exact per-pixel depth along with the image, so generated frames serve
//! as ground truth for warping, loss, and optimizer tests.
//!
//! World axes coincide with the camera axes at identity pose: x right,
//! y down, z forward. The ground plane lives at constant world y (below
//! the camera, y positive downward), the background wall at constant
//! world z.

use nalgebra::Vector3;

use crate::geometry::{CameraIntrinsics, DepthMap, ImageBuffer, PoseSE3};
use crate::lidar::{Point, PointCloud};

/// Procedural surface texture, a deterministic function of 2D surface
/// coordinates in meters.
#[derive(Debug, Clone, PartialEq)]
pub enum Texture {
    /// Flat color.
    Uniform([f64; 3]),
    /// Checkerboard with the given square size in meters.
    Checker { size: f64, bright: [f64; 3], dark: [f64; 3] },
    /// Smooth multi-octave value noise around `base` intensity.
    /// `scale` is the wavelength of the coarsest octave in meters.
    Noise { seed: u64, scale: f64, contrast: f64, base: f64 },
}

impl Texture {
    /// Default high-frequency noise texture; flat textures make the
    /// photometric losses uninformative.
    pub fn default_noise(seed: u64) -> Self {
        Texture::Noise { seed, scale: 2.0, contrast: 0.5, base: 0.5 }
    }

    pub fn sample(&self, a: f64, b: f64) -> [f64; 3] {
        match *self {
            Texture::Uniform(c) => c,
            Texture::Checker { size, bright, dark } => {
                let ia = (a / size).floor() as i64;
                let ib = (b / size).floor() as i64;
                if (ia + ib).rem_euclid(2) == 0 {
                    bright
                } else {
                    dark
                }
            }
            Texture::Noise { seed, scale, contrast, base } => {
                let mut out = [0.0; 3];
                for (c, o) in out.iter_mut().enumerate() {
                    let n = fractal_noise(a / scale, b / scale, seed.wrapping_add(c as u64 * 7919));
                    *o = (base + contrast * (n - 0.5)).clamp(0.0, 1.0);
                }
                out
            }
        }
    }
}

fn hash2(ix: i64, iy: i64, seed: u64) -> f64 {
    let mut h = seed
        ^ (ix as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
        ^ (iy as u64).wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
    h ^= h >> 33;
    h = h.wrapping_mul(0xff51_afd7_ed55_8ccd);
    h ^= h >> 33;
    h = h.wrapping_mul(0xc4ce_b9fe_1a85_ec53);
    h ^= h >> 33;
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Single octave of value noise: lattice hash with smoothstep-weighted
/// bilinear interpolation, C1-continuous.
fn value_noise(x: f64, y: f64, seed: u64) -> f64 {
    let ix = x.floor();
    let iy = y.floor();
    let fx = smoothstep(x - ix);
    let fy = smoothstep(y - iy);
    let (ix, iy) = (ix as i64, iy as i64);
    let n00 = hash2(ix, iy, seed);
    let n01 = hash2(ix + 1, iy, seed);
    let n10 = hash2(ix, iy + 1, seed);
    let n11 = hash2(ix + 1, iy + 1, seed);
    let top = n00 + fx * (n01 - n00);
    let bottom = n10 + fx * (n11 - n10);
    top + fy * (bottom - top)
}

fn fractal_noise(x: f64, y: f64, seed: u64) -> f64 {
    let mut sum = 0.0;
    let mut amplitude = 1.0;
    let mut frequency = 1.0;
    let mut norm = 0.0;
    for octave in 0..3 {
        sum += amplitude * value_noise(x * frequency, y * frequency, seed.wrapping_add(octave));
        norm += amplitude;
        amplitude *= 0.5;
        frequency *= 3.0;
    }
    sum / norm
}

/// Axis-aligned textured box, optionally moving at a constant velocity in
/// meters per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxPrim {
    pub min: Vector3<f64>,
    pub size: Vector3<f64>,
    pub velocity: Vector3<f64>,
    pub texture: Texture,
}

impl BoxPrim {
    fn min_at(&self, frame: i64) -> Vector3<f64> {
        self.min + self.velocity * frame as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundPlane {
    /// World y of the plane; positive = below the identity camera.
    pub y: f64,
    pub texture: Texture,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackgroundWall {
    /// World z of the infinite fronto-parallel wall.
    pub z: f64,
    pub texture: Texture,
}

/// Scene description. Rays that hit nothing receive [`Scene::MISS_DEPTH`]
/// and the sky color in renders, and produce no LiDAR return.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub ground: Option<GroundPlane>,
    pub background: Option<BackgroundWall>,
    pub boxes: Vec<BoxPrim>,
    pub sky_color: [f64; 3],
}

impl Scene {
    pub const MISS_DEPTH: f64 = 200.0;

    pub fn empty() -> Self {
        Scene { ground: None, background: None, boxes: vec![], sky_color: [0.6, 0.7, 0.8] }
    }

    /// Textured ground 1.6 m below the camera plus a far wall; the common
    /// base for desk-scale experiments.
    pub fn ground_and_wall(seed: u64) -> Self {
        Scene {
            ground: Some(GroundPlane { y: 1.6, texture: Texture::default_noise(seed) }),
            background: Some(BackgroundWall {
                z: 40.0,
                texture: Texture::default_noise(seed.wrapping_add(101)),
            }),
            boxes: vec![],
            sky_color: [0.6, 0.7, 0.8],
        }
    }

    /// Closest intersection of a ray with the scene at the given frame.
    /// `t` is the parameter along `dir` (range for a unit direction).
    /// Returns `(t, color)`.
    pub fn intersect(
        &self,
        origin: &Vector3<f64>,
        dir: &Vector3<f64>,
        frame: i64,
    ) -> Option<(f64, [f64; 3])> {
        let mut best: Option<(f64, [f64; 3])> = None;
        let mut consider = |t: f64, color: [f64; 3]| {
            if t > 1e-9 && best.map_or(true, |(bt, _)| t < bt) {
                best = Some((t, color));
            }
        };
        if let Some(ground) = &self.ground {
            if dir.y.abs() > 1e-12 {
                let t = (ground.y - origin.y) / dir.y;
                if t > 1e-9 {
                    let hit = origin + dir * t;
                    consider(t, ground.texture.sample(hit.x, hit.z));
                }
            }
        }
        if let Some(wall) = &self.background {
            if dir.z.abs() > 1e-12 {
                let t = (wall.z - origin.z) / dir.z;
                if t > 1e-9 {
                    let hit = origin + dir * t;
                    consider(t, wall.texture.sample(hit.x, hit.y));
                }
            }
        }
        for b in &self.boxes {
            let bmin = b.min_at(frame);
            let bmax = bmin + b.size;
            if let Some((t, axis)) = ray_aabb(origin, dir, &bmin, &bmax) {
                let hit = origin + dir * t;
                let local = hit - bmin;
                // Texture coordinates: the two axes orthogonal to the hit face.
                let (a, bb) = match axis {
                    0 => (local.y, local.z),
                    1 => (local.x, local.z),
                    _ => (local.x, local.y),
                };
                consider(t, b.texture.sample(a, bb));
            }
        }
        best
    }
}

/// Slab-method ray/AABB intersection; returns the entry parameter and the
/// index of the axis whose slab was entered last (the hit face normal).
fn ray_aabb(
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
    bmin: &Vector3<f64>,
    bmax: &Vector3<f64>,
) -> Option<(f64, usize)> {
    let mut t_enter = f64::NEG_INFINITY;
    let mut t_exit = f64::INFINITY;
    let mut axis = 0;
    for i in 0..3 {
        let d = dir[i];
        if d.abs() < 1e-12 {
            if origin[i] < bmin[i] || origin[i] > bmax[i] {
                return None;
            }
            continue;
        }
        let mut t0 = (bmin[i] - origin[i]) / d;
        let mut t1 = (bmax[i] - origin[i]) / d;
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
        }
        if t0 > t_enter {
            t_enter = t0;
            axis = i;
        }
        t_exit = t_exit.min(t1);
        if t_enter > t_exit {
            return None;
        }
    }
    if t_enter > 1e-9 {
        Some((t_enter, axis))
    } else {
        None
    }
}

/// Renders the scene from a camera given by its camera-to-world pose.
/// Depth is the camera-frame z of the nearest hit, Lambertian shading only.
pub fn render(
    scene: &Scene,
    intrinsics: &CameraIntrinsics,
    cam_to_world: &PoseSE3,
    frame: i64,
) -> (ImageBuffer, DepthMap) {
    let h = intrinsics.height;
    let w = intrinsics.width;
    let mut image = ImageBuffer::zeros(h, w);
    let mut depth = DepthMap::zeros(h, w);
    let origin = cam_to_world.translation;
    for v in 0..h {
        for u in 0..w {
            // Camera ray with unit z so the parameter equals z-depth.
            let dir_cam = Vector3::new(
                (u as f64 - intrinsics.cx) / intrinsics.fx,
                (v as f64 - intrinsics.cy) / intrinsics.fy,
                1.0,
            );
            let dir = cam_to_world.rotation * dir_cam;
            match scene.intersect(&origin, &dir, frame) {
                Some((t, color)) => {
                    depth.set(v, u, t);
                    for c in 0..3 {
                        image.set(v, u, c, color[c]);
                    }
                }
                None => {
                    depth.set(v, u, Scene::MISS_DEPTH);
                    for c in 0..3 {
                        image.set(v, u, c, scene.sky_color[c]);
                    }
                }
            }
        }
    }
    (image, depth)
}

/// Rotation mapping LiDAR sensor axes (x forward, y left, z up) into
/// camera axes (x right, y down, z forward).
pub fn sensor_to_camera() -> PoseSE3 {
    let rotation = nalgebra::Matrix3::new(
        0.0, -1.0, 0.0, //
        0.0, 0.0, -1.0, //
        1.0, 0.0, 0.0,
    );
    PoseSE3 { rotation, translation: Vector3::zeros() }
}

/// Specification of the simulated laser scanner.
#[derive(Debug, Clone, PartialEq)]
pub struct LidarSpec {
    /// Beam elevations in radians, listed top to bottom (ring order).
    pub elevations: Vec<f64>,
    /// Azimuth increment in radians of the counter-clockwise sweep.
    pub azimuth_step: f64,
}

impl LidarSpec {
    pub fn new(elevations: Vec<f64>, azimuth_step: f64) -> Self {
        assert!(!elevations.is_empty(), "at least one elevation required");
        assert!(azimuth_step > 0.0);
        Self { elevations, azimuth_step }
    }

    /// 64 evenly spaced beams from +2 to -24.8 degrees, the classic
    /// roof-mounted sensor layout.
    pub fn kitti_64() -> Self {
        let top = 2.0_f64.to_radians();
        let bottom = (-24.8_f64).to_radians();
        let elevations =
            (0..64).map(|i| top + (bottom - top) * i as f64 / 63.0).collect();
        Self::new(elevations, (0.4_f64).to_radians())
    }
}

/// Casts one full counter-clockwise rotation per elevation, beam-major, so
/// that beam segmentation recovers the rings exactly. Points are reported
/// in the sensor frame. Rays that hit nothing yield no return.
pub fn simulate_lidar(
    scene: &Scene,
    sensor_to_world: &PoseSE3,
    spec: &LidarSpec,
    frame: i64,
) -> PointCloud {
    let steps = (2.0 * std::f64::consts::PI / spec.azimuth_step).round() as usize;
    let mut points = Vec::new();
    for &elevation in &spec.elevations {
        for i in 0..steps {
            let az = i as f64 * spec.azimuth_step;
            // Sensor frame: x forward, y left, z up (so up is -y in world).
            let dir_sensor =
                Vector3::new(elevation.cos() * az.cos(), elevation.cos() * az.sin(), elevation.sin());
            let dir_world = sensor_to_world.rotation * dir_sensor;
            if let Some((t, _)) = scene.intersect(&sensor_to_world.translation, &dir_world, frame) {
                let p = dir_sensor * t;
                points.push(Point { x: p.x, y: p.y, z: p.z, intensity: 1.0 });
            }
        }
    }
    PointCloud { points }
}

/// One rendered frame with its exact depth and camera pose.
#[derive(Debug, Clone)]
pub struct Frame {
    pub image: ImageBuffer,
    pub depth: DepthMap,
    pub cam_to_world: PoseSE3,
}

/// Target frame t with source frames t-1 and t+1, ground-truth relative
/// poses, and the simulated sparse LiDAR projected into the target view.
#[derive(Debug, Clone)]
pub struct FrameTriplet {
    pub target: Frame,
    pub sources: Vec<Frame>,
    /// Target-to-source poses, aligned with `sources`.
    pub poses_t_to_s: Vec<PoseSE3>,
    /// Raw simulated cloud at frame t (sensor frame, ring-ordered).
    pub cloud: PointCloud,
    /// Cloud projected into the target image plane.
    pub lidar_depth: DepthMap,
}

/// Renders frames t-1, t, t+1 under the given per-frame ego motion
/// (camera-to-world displacement per frame), advancing box positions by
/// their velocities, and simulates the LiDAR at frame t.
pub fn make_triplet(
    scene: &Scene,
    intrinsics: &CameraIntrinsics,
    ego_motion_per_frame: &PoseSE3,
    lidar_spec: &LidarSpec,
) -> FrameTriplet {
    let base = PoseSE3::identity();
    let pose_at = |f: i64| -> PoseSE3 {
        match f {
            -1 => base.compose(&ego_motion_per_frame.inverse()),
            0 => base,
            1 => base.compose(ego_motion_per_frame),
            _ => unreachable!(),
        }
    };

    let make_frame = |f: i64| -> Frame {
        let cam_to_world = pose_at(f);
        let (image, depth) = render(scene, intrinsics, &cam_to_world, f);
        Frame { image, depth, cam_to_world }
    };

    let target = make_frame(0);
    let sources = vec![make_frame(-1), make_frame(1)];
    let poses_t_to_s = sources
        .iter()
        .map(|s| s.cam_to_world.inverse().compose(&target.cam_to_world))
        .collect();

    let t_cs = sensor_to_camera();
    let sensor_to_world = target.cam_to_world.compose(&t_cs);
    let cloud = simulate_lidar(scene, &sensor_to_world, lidar_spec, 0);
    let lidar_depth = crate::geometry::project_pointcloud_to_image(&cloud, &t_cs, intrinsics);

    FrameTriplet { target, sources, poses_t_to_s, cloud, lidar_depth }
}
