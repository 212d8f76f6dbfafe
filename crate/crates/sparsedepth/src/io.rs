//! File formats: velodyne-style binary clouds, 16-bit depth PNGs, color
//! image PNGs, plain-text intrinsics and poses, loss-trace CSV, and a
//! strict key=value run configuration.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, DepthMap, ImageBuffer, PoseSE3};
use crate::lidar::{Point, PointCloud};
use crate::optimizer::LossTrace;

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format { path: path.display().to_string(), reason: reason.into() }
}

// ---------------------------------------------------------------------------
// Velodyne binary clouds
// ---------------------------------------------------------------------------

/// Reads little-endian (x, y, z, intensity) float quadruples in file order.
pub fn read_velodyne_bin(path: &Path) -> Result<PointCloud> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() % 16 != 0 {
        return Err(format_err(
            path,
            format!("size {} is not a multiple of 16 bytes", bytes.len()),
        ));
    }
    let mut points = Vec::with_capacity(bytes.len() / 16);
    for (i, chunk) in bytes.chunks_exact(16).enumerate() {
        let f = |k: usize| f32::from_le_bytes(chunk[4 * k..4 * k + 4].try_into().unwrap());
        let (x, y, z, intensity) = (f(0), f(1), f(2), f(3));
        if !(x.is_finite() && y.is_finite() && z.is_finite() && intensity.is_finite()) {
            return Err(format_err(
                path,
                format!("non-finite value in point {i} at byte offset {}", 16 * i),
            ));
        }
        points.push(Point {
            x: x as f64,
            y: y as f64,
            z: z as f64,
            intensity: intensity as f64,
        });
    }
    Ok(PointCloud { points })
}

/// Writes the cloud in the same quadruple layout (f32 little-endian).
pub fn write_velodyne_bin(path: &Path, cloud: &PointCloud) -> Result<()> {
    let mut bytes = Vec::with_capacity(cloud.points.len() * 16);
    for p in &cloud.points {
        for value in [p.x, p.y, p.z, p.intensity] {
            bytes.extend_from_slice(&(value as f32).to_le_bytes());
        }
    }
    std::fs::File::create(path)?.write_all(&bytes)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Depth PNG (16-bit, value = depth * 256, 0 = invalid)
// ---------------------------------------------------------------------------

const DEPTH_PNG_SCALE: f64 = 256.0;

/// Writes a depth map as 16-bit grayscale PNG, stored value
/// round(depth × 256); zero marks an invalid pixel.
pub fn write_depth_png16(path: &Path, depth: &DepthMap) -> Result<()> {
    let mut raw = Vec::with_capacity(depth.data.len() * 2);
    for &d in &depth.data {
        if d < 0.0 || d >= 256.0 {
            return Err(format_err(
                path,
                format!("depth {d} outside the representable range [0, 256)"),
            ));
        }
        let stored = (d * DEPTH_PNG_SCALE).round() as u16;
        raw.extend_from_slice(&stored.to_be_bytes());
    }
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    let mut encoder = png::Encoder::new(file, depth.width as u32, depth.height as u32);
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(png::BitDepth::Sixteen);
    let mut writer = encoder
        .write_header()
        .map_err(|e| format_err(path, e.to_string()))?;
    writer
        .write_image_data(&raw)
        .map_err(|e| format_err(path, e.to_string()))?;
    Ok(())
}

/// Inverse of [`write_depth_png16`] on the stored (quantized) values.
pub fn read_depth_png16(path: &Path) -> Result<DepthMap> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let decoder = png::Decoder::new(file);
    let mut reader = decoder
        .read_info()
        .map_err(|e| format_err(path, e.to_string()))?;
    let info = reader.info();
    if info.bit_depth != png::BitDepth::Sixteen || info.color_type != png::ColorType::Grayscale {
        return Err(format_err(
            path,
            format!(
                "expected 16-bit grayscale PNG, found {:?} {:?}",
                info.bit_depth, info.color_type
            ),
        ));
    }
    let (width, height) = (info.width as usize, info.height as usize);
    let mut buf = vec![0u8; reader.output_buffer_size()];
    let frame = reader
        .next_frame(&mut buf)
        .map_err(|e| format_err(path, e.to_string()))?;
    let raw = &buf[..frame.buffer_size()];
    let mut depth = DepthMap::zeros(height, width);
    for (i, chunk) in raw.chunks_exact(2).enumerate() {
        let stored = u16::from_be_bytes([chunk[0], chunk[1]]);
        depth.data[i] = stored as f64 / DEPTH_PNG_SCALE;
    }
    Ok(depth)
}

// ---------------------------------------------------------------------------
// Color image PNG (8-bit RGB)
// ---------------------------------------------------------------------------

/// Writes a [0, 1] RGB image as 8-bit PNG.
pub fn write_image_png(path: &Path, image: &ImageBuffer) -> Result<()> {
    let raw: Vec<u8> = image
        .data
        .iter()
        .map(|&c| (c.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    let mut encoder = png::Encoder::new(file, image.width as u32, image.height as u32);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder
        .write_header()
        .map_err(|e| format_err(path, e.to_string()))?;
    writer
        .write_image_data(&raw)
        .map_err(|e| format_err(path, e.to_string()))?;
    Ok(())
}

/// Reads an 8-bit RGB PNG into a [0, 1] image.
pub fn read_image_png(path: &Path) -> Result<ImageBuffer> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let decoder = png::Decoder::new(file);
    let mut reader = decoder
        .read_info()
        .map_err(|e| format_err(path, e.to_string()))?;
    let info = reader.info();
    if info.bit_depth != png::BitDepth::Eight || info.color_type != png::ColorType::Rgb {
        return Err(format_err(
            path,
            format!(
                "expected 8-bit RGB PNG, found {:?} {:?}",
                info.bit_depth, info.color_type
            ),
        ));
    }
    let (width, height) = (info.width as usize, info.height as usize);
    let mut buf = vec![0u8; reader.output_buffer_size()];
    let frame = reader
        .next_frame(&mut buf)
        .map_err(|e| format_err(path, e.to_string()))?;
    let raw = &buf[..frame.buffer_size()];
    let mut image = ImageBuffer::zeros(height, width);
    for (dst, &src) in image.data.iter_mut().zip(raw) {
        *dst = src as f64 / 255.0;
    }
    Ok(image)
}

/// Reads a grayscale PNG id map (8- or 16-bit): each distinct nonzero
/// value becomes one instance mask.
pub fn read_instance_masks_png(path: &Path) -> Result<Vec<crate::eval::InstanceMask>> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let decoder = png::Decoder::new(file);
    let mut reader = decoder
        .read_info()
        .map_err(|e| format_err(path, e.to_string()))?;
    let info = reader.info();
    if info.color_type != png::ColorType::Grayscale {
        return Err(format_err(
            path,
            format!("expected grayscale id map, found {:?}", info.color_type),
        ));
    }
    let sixteen = match info.bit_depth {
        png::BitDepth::Eight => false,
        png::BitDepth::Sixteen => true,
        other => {
            return Err(format_err(path, format!("unsupported bit depth {other:?}")));
        }
    };
    let (width, height) = (info.width as usize, info.height as usize);
    let mut buf = vec![0u8; reader.output_buffer_size()];
    let frame = reader
        .next_frame(&mut buf)
        .map_err(|e| format_err(path, e.to_string()))?;
    let raw = &buf[..frame.buffer_size()];
    let id_at = |i: usize| -> u32 {
        if sixteen {
            u16::from_be_bytes([raw[2 * i], raw[2 * i + 1]]) as u32
        } else {
            raw[i] as u32
        }
    };
    let mut by_id: BTreeMap<u32, crate::geometry::Mask> = BTreeMap::new();
    for v in 0..height {
        for u in 0..width {
            let id = id_at(v * width + u);
            if id == 0 {
                continue;
            }
            by_id
                .entry(id)
                .or_insert_with(|| crate::geometry::Mask::filled(height, width, false))
                .set(v, u, true);
        }
    }
    Ok(by_id
        .into_iter()
        .map(|(id, mask)| crate::eval::InstanceMask { id, mask })
        .collect())
}

// ---------------------------------------------------------------------------
// Text formats
// ---------------------------------------------------------------------------

/// One line: `fx fy cx cy width height`. Numbers round-trip exactly
/// (shortest exact float representation).
pub fn write_intrinsics(path: &Path, k: &CameraIntrinsics) -> Result<()> {
    let line = format!("{} {} {} {} {} {}\n", k.fx, k.fy, k.cx, k.cy, k.width, k.height);
    std::fs::write(path, line)?;
    Ok(())
}

pub fn read_intrinsics(path: &Path) -> Result<CameraIntrinsics> {
    let text = std::fs::read_to_string(path)?;
    let fields: Vec<&str> = text.split_whitespace().collect();
    if fields.len() != 6 {
        return Err(format_err(
            path,
            format!("expected 6 fields (fx fy cx cy width height), found {}", fields.len()),
        ));
    }
    let num = |i: usize| -> Result<f64> {
        fields[i]
            .parse::<f64>()
            .map_err(|_| format_err(path, format!("field {} '{}' is not a number", i + 1, fields[i])))
    };
    let dim = |i: usize| -> Result<usize> {
        fields[i]
            .parse::<usize>()
            .map_err(|_| format_err(path, format!("field {} '{}' is not a positive integer", i + 1, fields[i])))
    };
    CameraIntrinsics::new(num(0)?, num(1)?, num(2)?, num(3)?, dim(4)?, dim(5)?)
}

/// Three lines of four numbers each: the rows of [R | t].
pub fn write_pose_text(path: &Path, pose: &PoseSE3) -> Result<()> {
    let mut out = String::new();
    for r in 0..3 {
        out.push_str(&format!(
            "{} {} {} {}\n",
            pose.rotation[(r, 0)],
            pose.rotation[(r, 1)],
            pose.rotation[(r, 2)],
            pose.translation[r]
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_pose_text(path: &Path) -> Result<PoseSE3> {
    let text = std::fs::read_to_string(path)?;
    let fields: Vec<&str> = text.split_whitespace().collect();
    if fields.len() != 12 {
        return Err(format_err(
            path,
            format!("expected 12 fields (3 rows of R | t), found {}", fields.len()),
        ));
    }
    let mut values = [0.0f64; 12];
    for (i, f) in fields.iter().enumerate() {
        values[i] = f
            .parse()
            .map_err(|_| format_err(path, format!("field {} '{}' is not a number", i + 1, f)))?;
    }
    let rotation = Matrix3::new(
        values[0], values[1], values[2], //
        values[4], values[5], values[6], //
        values[8], values[9], values[10],
    );
    let translation = Vector3::new(values[3], values[7], values[11]);
    Ok(PoseSE3 { rotation, translation })
}

/// CSV with header `step,total,photometric,lidar,smoothness`.
pub fn write_trace_csv(path: &Path, trace: &LossTrace) -> Result<()> {
    let mut out = String::from("step,total,photometric,lidar,smoothness\n");
    for r in &trace.records {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.step, r.total, r.photometric, r.lidar, r.smoothness
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Serializes any report type as pretty JSON.
pub fn write_json_report<T: serde::Serialize>(path: &Path, report: &T) -> Result<()> {
    let json = serde_json::to_string_pretty(report)
        .map_err(|e| format_err(path, e.to_string()))?;
    std::fs::write(path, json + "\n")?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

/// Strict `key = value` configuration: blank lines and `#` comments are
/// skipped; keys outside the allowed set are rejected.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    map: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn parse(path: &Path, text: &str, allowed_keys: &[&str]) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (line_no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(format_err(
                    path,
                    format!("line {}: expected 'key = value'", line_no + 1),
                ));
            };
            let key = key.trim();
            let value = value.trim();
            if !allowed_keys.contains(&key) {
                return Err(format_err(path, format!("line {}: unknown key '{key}'", line_no + 1)));
            }
            if map.insert(key.to_string(), value.to_string()).is_some() {
                return Err(format_err(path, format!("line {}: duplicate key '{key}'", line_no + 1)));
            }
        }
        Ok(Self { map })
    }

    pub fn load(path: &Path, allowed_keys: &[&str]) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(path, &text, allowed_keys)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(String::as_str)
    }

    pub fn get_parsed<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.map.get(key) {
            None => Ok(None),
            Some(raw) => raw.parse::<T>().map(Some).map_err(|_| {
                Error::InvalidArgument(format!("config key '{key}': cannot parse '{raw}'"))
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn velodyne_single_point_and_empty() {
        let dir = tmp();
        let path = dir.path().join("cloud.bin");
        let mut bytes = Vec::new();
        for v in [1.0f32, 2.0, 3.0, 0.5] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(&path, &bytes).unwrap();
        let cloud = read_velodyne_bin(&path).unwrap();
        assert_eq!(cloud.len(), 1);
        assert_relative_eq!(cloud.points[0].x, 1.0);
        assert_relative_eq!(cloud.points[0].intensity, 0.5);

        std::fs::write(&path, b"").unwrap();
        assert!(read_velodyne_bin(&path).unwrap().is_empty());
    }

    #[test]
    fn velodyne_rejects_bad_sizes_and_values() {
        let dir = tmp();
        let path = dir.path().join("bad.bin");
        std::fs::write(&path, vec![0u8; 17]).unwrap();
        match read_velodyne_bin(&path) {
            Err(Error::Format { reason, .. }) => assert!(reason.contains("17")),
            other => panic!("expected format error, got {other:?}"),
        }

        let mut bytes = Vec::new();
        for v in [1.0f32, f32::NAN, 3.0, 0.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(&path, &bytes).unwrap();
        match read_velodyne_bin(&path) {
            Err(Error::Format { reason, .. }) => assert!(reason.contains("offset 0")),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn velodyne_round_trip() {
        let dir = tmp();
        let path = dir.path().join("cloud.bin");
        let cloud = PointCloud {
            points: vec![
                Point { x: 1.5, y: -2.25, z: 0.125, intensity: 0.75 },
                Point { x: -10.0, y: 4.0, z: -1.0, intensity: 0.0 },
            ],
        };
        write_velodyne_bin(&path, &cloud).unwrap();
        assert_eq!(read_velodyne_bin(&path).unwrap(), cloud);
    }

    #[test]
    fn depth_png_round_trip_and_sentinel() {
        let dir = tmp();
        let path = dir.path().join("depth.png");
        let mut depth = DepthMap::zeros(3, 4);
        depth.set(0, 0, 1.0); // stores 256
        depth.set(1, 2, 12.34375); // exactly representable at 1/256
        depth.set(2, 3, 255.99);
        write_depth_png16(&path, &depth).unwrap();
        let back = read_depth_png16(&path).unwrap();
        assert_relative_eq!(back.get(0, 0), 1.0);
        assert_relative_eq!(back.get(1, 2), 12.34375);
        // Quantized to the nearest 1/256.
        assert!((back.get(2, 3) - 255.99).abs() <= 0.5 / 256.0);
        // Invalid stays invalid.
        assert_relative_eq!(back.get(0, 1), 0.0);

        // A second write∘read is exact on the quantized values.
        write_depth_png16(&path, &back).unwrap();
        assert_eq!(read_depth_png16(&path).unwrap(), back);
    }

    #[test]
    fn depth_png_rejects_out_of_range() {
        let dir = tmp();
        let path = dir.path().join("depth.png");
        let depth = DepthMap::constant(2, 2, 256.0);
        assert!(matches!(write_depth_png16(&path, &depth), Err(Error::Format { .. })));
    }

    #[test]
    fn depth_png_rejects_wrong_format() {
        let dir = tmp();
        let path = dir.path().join("color.png");
        let image = ImageBuffer::from_fn(2, 2, |v, u| [v as f64 / 2.0, u as f64 / 2.0, 0.5]);
        write_image_png(&path, &image).unwrap();
        match read_depth_png16(&path) {
            Err(Error::Format { reason, .. }) => assert!(reason.contains("16-bit")),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn image_png_round_trip() {
        let dir = tmp();
        let path = dir.path().join("image.png");
        let image = ImageBuffer::from_fn(4, 5, |v, u| {
            [(v as f64) / 4.0, (u as f64) / 5.0, ((v + u) % 2) as f64]
        });
        write_image_png(&path, &image).unwrap();
        let back = read_image_png(&path).unwrap();
        for (a, b) in image.data.iter().zip(&back.data) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
        // Quantized image round-trips exactly.
        write_image_png(&path, &back).unwrap();
        assert_eq!(read_image_png(&path).unwrap(), back);
    }

    #[test]
    fn intrinsics_round_trip_exact() {
        let dir = tmp();
        let path = dir.path().join("k.txt");
        let k = CameraIntrinsics::new(721.5377, 721.5377, 609.5593, 172.854, 1242, 375).unwrap();
        write_intrinsics(&path, &k).unwrap();
        let back = read_intrinsics(&path).unwrap();
        assert_eq!(back.fx, k.fx);
        assert_eq!(back.fy, k.fy);
        assert_eq!(back.cx, k.cx);
        assert_eq!(back.cy, k.cy);
        assert_eq!(back.width, k.width);
        assert_eq!(back.height, k.height);
    }

    #[test]
    fn intrinsics_rejects_malformed() {
        let dir = tmp();
        let path = dir.path().join("k.txt");
        std::fs::write(&path, "1 2 3\n").unwrap();
        assert!(matches!(read_intrinsics(&path), Err(Error::Format { .. })));
        std::fs::write(&path, "a b c d e f\n").unwrap();
        assert!(matches!(read_intrinsics(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn pose_text_round_trip_exact() {
        let dir = tmp();
        let path = dir.path().join("pose.txt");
        let pose = PoseSE3::from_axis_angle(
            Vector3::new(0.1, -0.7, 0.2),
            0.31,
            Vector3::new(1.5, -0.25, 3.75),
        );
        write_pose_text(&path, &pose).unwrap();
        let back = read_pose_text(&path).unwrap();
        assert_eq!(back.rotation, pose.rotation);
        assert_eq!(back.translation, pose.translation);
    }

    #[test]
    fn trace_csv_layout() {
        use crate::optimizer::TraceRecord;
        let dir = tmp();
        let path = dir.path().join("trace.csv");
        let trace = LossTrace {
            records: vec![
                TraceRecord { step: 0, total: 1.5, photometric: 1.0, lidar: 0.4, smoothness: 0.1 },
                TraceRecord { step: 1, total: 1.25, photometric: 0.9, lidar: 0.3, smoothness: 0.05 },
            ],
        };
        write_trace_csv(&path, &trace).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "step,total,photometric,lidar,smoothness");
        assert_eq!(lines[1], "0,1.5,1,0.4,0.1");
        assert_eq!(lines.len(), 3);
    }

    #[test]
    fn run_config_rejects_unknown_and_duplicate_keys() {
        let path = Path::new("test.conf");
        let allowed = ["seed", "steps"];
        let ok = RunConfig::parse(path, "# comment\nseed = 7\n\nsteps=100\n", &allowed).unwrap();
        assert_eq!(ok.get("seed"), Some("7"));
        assert_eq!(ok.get_parsed::<usize>("steps").unwrap(), Some(100));
        assert_eq!(ok.get("missing"), None);

        assert!(matches!(
            RunConfig::parse(path, "sed = 7\n", &allowed),
            Err(Error::Format { .. })
        ));
        assert!(matches!(
            RunConfig::parse(path, "seed = 1\nseed = 2\n", &allowed),
            Err(Error::Format { .. })
        ));
        assert!(matches!(
            RunConfig::parse(path, "just a line\n", &allowed),
            Err(Error::Format { .. })
        ));
    }
}
