//! Dataset handling: pose-file ingestion, preprocessing, normalization
//! statistics, deterministic splitting, and the synthetic trajectory
//! benchmark generator.

pub mod image_prep;
pub mod stats;
pub mod synthetic;

use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::geometry::{
    quaternion_to_euler, EulerAngles, EulerConvention, GeometryError, Quaternion, Translation,
};

pub use image_prep::{
    bilinear_resize, center_crop, compute_image_stats, open_image, pool_to_square,
    preprocess_image, standardize, to_canonical, CanonicalImage, ImageSample, ImageStats, CROP_HW,
    RESIZE_HW,
};
pub use stats::{compute_normalization, denormalize_pose, normalize_pose, NormalizationStats, PoseTarget};
pub use synthetic::{generate_synthetic, SyntheticDataset, WorldParams};

/// One dataset row: an image reference plus its 6-DoF ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseRecord {
    pub image_ref: String,
    pub translation: Translation,
    pub rotation: EulerAngles,
}

#[derive(Debug)]
pub enum DataError {
    Io { path: PathBuf, source: std::io::Error },
    Parse { path: PathBuf, line: usize, reason: String },
    TooFewRecords { got: usize, min: usize },
    EmptyDataset,
    UnsupportedImage { reason: String },
    Geometry(GeometryError),
}

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataError::Io { path, source } => write!(f, "{}: {source}", path.display()),
            DataError::Parse { path, line, reason } => {
                write!(f, "{}:{line}: {reason}", path.display())
            }
            DataError::TooFewRecords { got, min } => {
                write!(f, "too few records: got {got}, need at least {min}")
            }
            DataError::EmptyDataset => write!(f, "dataset is empty"),
            DataError::UnsupportedImage { reason } => write!(f, "unsupported image: {reason}"),
            DataError::Geometry(e) => e.fmt(f),
        }
    }
}

impl std::error::Error for DataError {}

impl From<GeometryError> for DataError {
    fn from(e: GeometryError) -> Self {
        DataError::Geometry(e)
    }
}

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io { path: path.to_path_buf(), source }
}

fn parse_err(path: &Path, line: usize, reason: impl Into<String>) -> DataError {
    DataError::Parse { path: path.to_path_buf(), line, reason: reason.into() }
}

/// External layouts the import adapter maps onto the canonical format.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoseFileLayout {
    /// `image_ref tx ty tz roll pitch yaw`, whitespace-separated, radians.
    Canonical,
    /// `image_ref,tx,ty,tz,roll,pitch,yaw` comma-separated.
    CsvXyzRpy,
    /// `image_ref,tx,ty,tz,qw,qx,qy,qz`; the quaternion is decomposed under
    /// the intrinsic-ZYX convention.
    CsvXyzQuat,
}

fn record_from_fields(
    path: &Path,
    line_no: usize,
    image_ref: &str,
    nums: &[f64],
    layout: PoseFileLayout,
) -> Result<PoseRecord, DataError> {
    if nums.iter().any(|v| !v.is_finite()) {
        return Err(parse_err(path, line_no, "non-finite value"));
    }
    let translation = Translation::new(nums[0], nums[1], nums[2]);
    let rotation = match layout {
        PoseFileLayout::Canonical | PoseFileLayout::CsvXyzRpy => {
            EulerAngles::new(nums[3], nums[4], nums[5])
        }
        PoseFileLayout::CsvXyzQuat => {
            let q = Quaternion::new(nums[3], nums[4], nums[5], nums[6]);
            if q.norm() < 1e-9 {
                return Err(parse_err(path, line_no, "zero quaternion"));
            }
            quaternion_to_euler(&q.normalized(), EulerConvention::IntrinsicZyx).angles
        }
    };
    Ok(PoseRecord { image_ref: image_ref.to_string(), translation, rotation: rotation.canonicalized() })
}

/// Parses a pose file under the given layout. Blank lines and lines starting
/// with `#` are skipped; parse failures report the 1-based line number.
pub fn import_pose_file(path: &Path, layout: PoseFileLayout) -> Result<Vec<PoseRecord>, DataError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut records = Vec::new();
    let expected = match layout {
        PoseFileLayout::Canonical | PoseFileLayout::CsvXyzRpy => 7,
        PoseFileLayout::CsvXyzQuat => 8,
    };
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = match layout {
            PoseFileLayout::Canonical => line.split_whitespace().collect(),
            _ => line.split(',').map(str::trim).collect(),
        };
        if fields.len() != expected {
            return Err(parse_err(
                path,
                line_no,
                format!("expected {expected} fields, got {}", fields.len()),
            ));
        }
        let mut nums = Vec::with_capacity(expected - 1);
        for f in &fields[1..] {
            let v: f64 = f
                .parse()
                .map_err(|_| parse_err(path, line_no, format!("invalid number `{f}`")))?;
            nums.push(v);
        }
        records.push(record_from_fields(path, line_no, fields[0], &nums, layout)?);
    }
    Ok(records)
}

/// Parses the canonical pose file format.
pub fn load_pose_file(path: &Path) -> Result<Vec<PoseRecord>, DataError> {
    import_pose_file(path, PoseFileLayout::Canonical)
}

/// Writes records in the canonical format with 9-decimal fixed precision.
pub fn write_pose_file(path: &Path, records: &[PoseRecord]) -> Result<(), DataError> {
    let mut out = String::new();
    for r in records {
        out.push_str(&format!(
            "{} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9}\n",
            r.image_ref,
            r.translation.x,
            r.translation.y,
            r.translation.z,
            r.rotation.roll,
            r.rotation.pitch,
            r.rotation.yaw
        ));
    }
    std::fs::write(path, out).map_err(|e| io_err(path, e))
}

/// Disjoint train/test membership produced by a seeded shuffle.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: Vec<PoseRecord>,
    pub test: Vec<PoseRecord>,
    pub seed: u64,
}

/// Seeded shuffle followed by a 3:1 partition (train count is `3n/4`,
/// integer division). Requires at least 4 records.
pub fn split_dataset(records: &[PoseRecord], seed: u64) -> Result<DatasetSplit, DataError> {
    let n = records.len();
    if n < 4 {
        return Err(DataError::TooFewRecords { got: n, min: 4 });
    }
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    indices.shuffle(&mut rng);
    let n_train = 3 * n / 4;
    let train = indices[..n_train].iter().map(|&i| records[i].clone()).collect();
    let test = indices[n_train..].iter().map(|&i| records[i].clone()).collect();
    Ok(DatasetSplit { train, test, seed })
}
