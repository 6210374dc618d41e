//! Synthetic trajectory benchmark: poses sampled along a smooth closed
//! figure-eight with heading-aligned yaw and small roll/pitch wobble, paired
//! with procedural images whose gradients and landmark blobs are keyed to the
//! pose so it is visually recoverable. Fully reproducible per seed.

use std::path::{Path, PathBuf};

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{wrap_angle, EulerAngles, Translation};
use crate::util::crc32;

use super::{write_pose_file, DataError, PoseRecord};

/// Geometry and rendering parameters of the synthetic world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldParams {
    /// Half-extent of the figure-eight long axis, meters.
    pub extent_x: f64,
    /// Half-extent of the short axis, meters.
    pub extent_y: f64,
    /// Vertical bob amplitude, meters.
    pub height_amp: f64,
    /// Roll/pitch wobble amplitude, radians.
    pub tilt_amp: f64,
    /// Number of colored landmark blobs.
    pub landmark_count: usize,
    /// Rendered image side, pixels.
    pub image_hw: u32,
    /// Bound on the translation step between consecutive samples, meters;
    /// recorded for downstream checks.
    pub max_speed: f64,
}

impl Default for WorldParams {
    fn default() -> Self {
        Self {
            extent_x: 12.0,
            extent_y: 6.0,
            height_amp: 0.4,
            tilt_amp: 0.04,
            landmark_count: 12,
            image_hw: 260,
            max_speed: 1.5,
        }
    }
}

/// A generated dataset on disk: `poses.txt`, `images/`, and a manifest with
/// the seed and per-file checksums.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub records: Vec<PoseRecord>,
    pub root: PathBuf,
    pub manifest_path: PathBuf,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    seed: u64,
    n: usize,
    world: WorldParams,
    files: Vec<FileChecksum>,
}

#[derive(Debug, Serialize, Deserialize)]
struct FileChecksum {
    path: String,
    crc32: String,
}

struct Landmark {
    x: f64,
    y: f64,
    color: [f64; 3],
    size: f64,
}

fn figure_eight_pose(t: f64, w: &WorldParams, phases: &[f64; 3]) -> (Translation, EulerAngles) {
    let x = w.extent_x * t.sin();
    let y = w.extent_y * t.sin() * t.cos();
    let z = w.height_amp * (2.0 * t + phases[0]).sin();
    // Heading from the path tangent.
    let dx = w.extent_x * t.cos();
    let dy = w.extent_y * (2.0 * t).cos();
    let yaw = dy.atan2(dx);
    let roll = w.tilt_amp * (3.0 * t + phases[1]).sin();
    let pitch = w.tilt_amp * (2.0 * t + phases[2]).sin();
    (
        Translation::new(x, y, z),
        EulerAngles::new(roll, pitch, wrap_angle(yaw)).canonicalized(),
    )
}

fn clamp01(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

fn render_image(
    translation: &Translation,
    rotation: &EulerAngles,
    w: &WorldParams,
    landmarks: &[Landmark],
) -> RgbImage {
    let hw = w.image_hw as usize;
    let u = clamp01((translation.x + w.extent_x) / (2.0 * w.extent_x));
    let v = clamp01((translation.y + w.extent_y) / (2.0 * w.extent_y));
    let zr = if w.height_amp > 0.0 { translation.z / w.height_amp } else { 0.0 };
    let (sin_yaw, cos_yaw) = rotation.yaw.sin_cos();

    let mut pixels = vec![0.0f64; 3 * hw * hw];
    let denom = (hw - 1).max(1) as f64;
    for py in 0..hw {
        let fy = py as f64 / denom - 0.5;
        for px in 0..hw {
            let fx = px as f64 / denom - 0.5;
            let base = (py * hw + px) * 3;
            pixels[base] = 0.15 + 0.6 * u + 0.15 * fx * cos_yaw;
            pixels[base + 1] = 0.15 + 0.6 * v + 0.15 * fy * sin_yaw;
            pixels[base + 2] = 0.45
                + 0.18 * sin_yaw * fx
                + 0.18 * cos_yaw * fy
                + 0.12 * zr
                + 1.5 * (rotation.roll + rotation.pitch);
        }
    }

    // Landmark blobs on a heading-relative panorama: bearing maps to the
    // horizontal position, distance to blob size and vertical drop.
    let fov = 1.8f64;
    let world_scale = 0.5 * (w.extent_x + w.extent_y);
    for lm in landmarks {
        let dx = lm.x - translation.x;
        let dy = lm.y - translation.y;
        let dist = (dx * dx + dy * dy).sqrt().max(0.5);
        let bearing = wrap_angle(dy.atan2(dx) - rotation.yaw);
        if bearing.abs() > fov {
            continue;
        }
        let cx = (0.5 + 0.5 * bearing / fov) * (hw - 1) as f64;
        let cy = (0.35 + 0.4 * (dist / (dist + world_scale))) * (hw - 1) as f64;
        let sigma = (lm.size * 14.0 / (0.3 + dist / world_scale)).clamp(2.0, 26.0);
        let gain = 0.8 / (1.0 + 0.6 * dist / world_scale);
        let r = (3.0 * sigma).ceil() as i64;
        let (icx, icy) = (cx.round() as i64, cy.round() as i64);
        for py in (icy - r).max(0)..=(icy + r).min(hw as i64 - 1) {
            for px in (icx - r).max(0)..=(icx + r).min(hw as i64 - 1) {
                let d2 = (px as f64 - cx).powi(2) + (py as f64 - cy).powi(2);
                let wgt = gain * (-d2 / (2.0 * sigma * sigma)).exp();
                let base = (py as usize * hw + px as usize) * 3;
                for c in 0..3 {
                    pixels[base + c] += wgt * lm.color[c];
                }
            }
        }
    }

    let mut img = RgbImage::new(w.image_hw, w.image_hw);
    for (i, px) in img.pixels_mut().enumerate() {
        for c in 0..3 {
            px.0[c] = (clamp01(pixels[i * 3 + c]) * 255.0).round() as u8;
        }
    }
    img
}

fn file_crc(path: &Path) -> Result<u32, DataError> {
    let bytes = std::fs::read(path)
        .map_err(|e| DataError::Io { path: path.to_path_buf(), source: e })?;
    Ok(crc32(&bytes))
}

/// Generates `n` records plus images under `root` and writes
/// `poses.txt`, `images/img_NNNNNN.png`, and `manifest.json`.
///
/// Requires `n >= 8`. Identical seed and parameters produce bitwise
/// identical files.
pub fn generate_synthetic(
    root: &Path,
    seed: u64,
    n: usize,
    world: &WorldParams,
) -> Result<SyntheticDataset, DataError> {
    if n < 8 {
        return Err(DataError::TooFewRecords { got: n, min: 8 });
    }
    let images_dir = root.join("images");
    std::fs::create_dir_all(&images_dir)
        .map_err(|e| DataError::Io { path: images_dir.clone(), source: e })?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phases = [
        rng.gen_range(0.0..std::f64::consts::TAU),
        rng.gen_range(0.0..std::f64::consts::TAU),
        rng.gen_range(0.0..std::f64::consts::TAU),
    ];
    let landmarks: Vec<Landmark> = (0..world.landmark_count)
        .map(|_| Landmark {
            x: rng.gen_range(-1.3 * world.extent_x..1.3 * world.extent_x),
            y: rng.gen_range(-1.3 * world.extent_y..1.3 * world.extent_y),
            color: [
                rng.gen_range(0.25..1.0),
                rng.gen_range(0.25..1.0),
                rng.gen_range(0.25..1.0),
            ],
            size: rng.gen_range(0.6..1.4),
        })
        .collect();

    let mut records = Vec::with_capacity(n);
    let mut files = Vec::with_capacity(n + 1);
    for k in 0..n {
        let t = std::f64::consts::TAU * k as f64 / n as f64;
        let (translation, rotation) = figure_eight_pose(t, world, &phases);
        let image_ref = format!("images/img_{k:06}.png");
        let img = render_image(&translation, &rotation, world, &landmarks);
        let img_path = root.join(&image_ref);
        img.save(&img_path)
            .map_err(|e| DataError::Io {
                path: img_path.clone(),
                source: std::io::Error::other(e),
            })?;
        files.push(FileChecksum { path: image_ref.clone(), crc32: format!("{:08x}", file_crc(&img_path)?) });
        records.push(PoseRecord { image_ref, translation, rotation });
    }

    let poses_path = root.join("poses.txt");
    write_pose_file(&poses_path, &records)?;
    files.insert(
        0,
        FileChecksum { path: "poses.txt".into(), crc32: format!("{:08x}", file_crc(&poses_path)?) },
    );

    let manifest = Manifest { seed, n, world: world.clone(), files };
    let manifest_path = root.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest)
        .expect("manifest serialization cannot fail");
    std::fs::write(&manifest_path, json)
        .map_err(|e| DataError::Io { path: manifest_path.clone(), source: e })?;

    Ok(SyntheticDataset { records, root: root.to_path_buf(), manifest_path })
}
