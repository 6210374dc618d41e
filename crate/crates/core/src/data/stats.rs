//! Translation normalization statistics and pose target construction.

use crate::geometry::{
    euler_to_quaternion, GeometryError, Pose, Quaternion, RotationConvention, Translation,
};

use super::{DataError, PoseRecord};

/// Per-axis translation statistics of the training split. The standard
/// deviation uses the population (1/n) convention.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizationStats {
    pub min: [f64; 3],
    pub max: [f64; 3],
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl NormalizationStats {
    /// Axes whose spread is zero; those pass through unscaled.
    pub fn degenerate_axes(&self) -> [bool; 3] {
        [self.std[0] == 0.0, self.std[1] == 0.0, self.std[2] == 0.0]
    }

    /// Divisors actually applied: the std, or 1 for a degenerate axis.
    pub fn effective_std(&self) -> [f64; 3] {
        let mut s = self.std;
        for v in s.iter_mut() {
            if *v == 0.0 {
                *v = 1.0;
            }
        }
        s
    }
}

/// Two-pass min/max/mean/std over the training records.
pub fn compute_normalization(records: &[PoseRecord]) -> Result<NormalizationStats, DataError> {
    if records.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    let n = records.len() as f64;
    let mut min = [f64::INFINITY; 3];
    let mut max = [f64::NEG_INFINITY; 3];
    let mut sum = [0.0f64; 3];
    for r in records {
        let t = r.translation.as_array();
        for a in 0..3 {
            min[a] = min[a].min(t[a]);
            max[a] = max[a].max(t[a]);
            sum[a] += t[a];
        }
    }
    let mean = [sum[0] / n, sum[1] / n, sum[2] / n];
    let mut var = [0.0f64; 3];
    for r in records {
        let t = r.translation.as_array();
        for a in 0..3 {
            let d = t[a] - mean[a];
            var[a] += d * d;
        }
    }
    let std = [(var[0] / n).sqrt(), (var[1] / n).sqrt(), (var[2] / n).sqrt()];
    Ok(NormalizationStats { min, max, mean, std })
}

/// Normalized-space regression target: z-scored translation plus the unit
/// quaternion of the ground-truth rotation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseTarget {
    pub translation: [f64; 3],
    pub quaternion: Quaternion,
}

impl PoseTarget {
    pub fn to_vector(&self) -> [f64; 7] {
        let q = self.quaternion.as_array();
        [
            self.translation[0],
            self.translation[1],
            self.translation[2],
            q[0],
            q[1],
            q[2],
            q[3],
        ]
    }
}

/// Builds the training target: translation mapped to `(t - mean) / std`
/// (degenerate axes pass through unscaled), rotation converted to a unit
/// quaternion under the selected route.
pub fn normalize_pose(
    record: &PoseRecord,
    stats: &NormalizationStats,
    convention: RotationConvention,
) -> Result<PoseTarget, GeometryError> {
    let q = euler_to_quaternion(record.rotation, convention)?;
    let t = record.translation.as_array();
    let std = stats.effective_std();
    let translation = [
        (t[0] - stats.mean[0]) / std[0],
        (t[1] - stats.mean[1]) / std[1],
        (t[2] - stats.mean[2]) / std[2],
    ];
    Ok(PoseTarget { translation, quaternion: q.normalized() })
}

/// Inverse of [`normalize_pose`] on the translation block; the quaternion is
/// renormalized and carried through.
pub fn denormalize_pose(target: &PoseTarget, stats: &NormalizationStats) -> Pose {
    let std = stats.effective_std();
    let t = Translation::new(
        target.translation[0] * std[0] + stats.mean[0],
        target.translation[1] * std[1] + stats.mean[1],
        target.translation[2] * std[2] + stats.mean[2],
    );
    Pose::new(t, target.quaternion.normalized())
}
