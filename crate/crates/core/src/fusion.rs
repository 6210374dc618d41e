//! Model fusion: early fusion sews two backbones' top dense layers together
//! (elementwise add or multiply, written back into both models, retrained),
//! late fusion amalgamates predicted pose scores (average or elementwise
//! multiply), and the hybrid builders compose the two stages.
//!
//! Late fusion operates on the raw predicted score vectors in normalized
//! target space; averaging commutes with the affine denormalization, and the
//! multiplicative variant follows the literal elementwise protocol.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::geometry::{sign_align, Pose, Quaternion, Translation};
use crate::nn::{
    train, Dense, Lineage, Mode, NnError, PoseNetModel, TensorBatch, TrainConfig, TrainError,
    TrainReport, TrainSet,
};
use crate::util::worker_count;

/// Elementwise combination rule. `Add`/`Multiply` apply to early fusion,
/// `Average`/`Multiply` to late fusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionOp {
    Add,
    Multiply,
    Average,
}

impl FusionOp {
    pub fn name(&self) -> &'static str {
        match self {
            FusionOp::Add => "add",
            FusionOp::Multiply => "multiply",
            FusionOp::Average => "average",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "add" => Some(FusionOp::Add),
            "multiply" => Some(FusionOp::Multiply),
            "average" => Some(FusionOp::Average),
            _ => None,
        }
    }
}

/// Pipeline stage a fusion applies to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionStage {
    Early,
    Late,
    Hybrid,
}

/// Fusion request as written in the experiment config: which stage, which
/// operator, and the member model files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionSpec {
    pub stage: FusionStage,
    pub op: FusionOp,
    pub members: Vec<String>,
}

impl FusionSpec {
    pub fn validate(&self) -> Result<(), FusionError> {
        match self.stage {
            FusionStage::Early => {
                if self.members.len() != 2 {
                    return Err(FusionError::BadSpec {
                        reason: format!(
                            "early fusion requires exactly 2 members, got {}",
                            self.members.len()
                        ),
                    });
                }
                if self.op == FusionOp::Average {
                    return Err(FusionError::UnsupportedOp { op: self.op, stage: self.stage });
                }
            }
            FusionStage::Late => {
                if self.members.len() < 2 {
                    return Err(FusionError::EmptyEnsemble);
                }
                if self.op == FusionOp::Add {
                    return Err(FusionError::UnsupportedOp { op: self.op, stage: self.stage });
                }
            }
            FusionStage::Hybrid => {
                if self.members.len() != 4 {
                    return Err(FusionError::BadSpec {
                        reason: format!(
                            "full hybrid fusion requires exactly 4 early-fusion members, got {}",
                            self.members.len()
                        ),
                    });
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug)]
pub enum FusionError {
    ShapeMismatch { expected: String, got: String },
    UnsupportedOp { op: FusionOp, stage: FusionStage },
    EmptyEnsemble,
    /// The fused quaternion block collapsed below norm 1e-9.
    DegenerateQuaternion { norm: f64 },
    LineageMismatch { expected: &'static str, got: String },
    BadSpec { reason: String },
    Nn(NnError),
}

impl fmt::Display for FusionError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FusionError::ShapeMismatch { expected, got } => {
                write!(f, "fusion shape mismatch: expected {expected}, got {got}")
            }
            FusionError::UnsupportedOp { op, stage } => {
                write!(f, "operator `{}` is not valid for {stage:?} fusion", op.name())
            }
            FusionError::EmptyEnsemble => write!(f, "late fusion requires at least 2 members"),
            FusionError::DegenerateQuaternion { norm } => {
                write!(f, "fused quaternion norm {norm:e} below 1e-9")
            }
            FusionError::LineageMismatch { expected, got } => {
                write!(f, "lineage mismatch: expected {expected} members, got {got}")
            }
            FusionError::BadSpec { reason } => write!(f, "invalid fusion spec: {reason}"),
            FusionError::Nn(e) => e.fmt(f),
        }
    }
}

impl std::error::Error for FusionError {}

impl From<NnError> for FusionError {
    fn from(e: NnError) -> Self {
        FusionError::Nn(e)
    }
}

/// One fused prediction: the fused pose, the contributing per-model poses in
/// member order, and the operator used.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedPrediction {
    pub pose: Pose,
    pub members: Vec<Pose>,
    pub op: FusionOp,
}

/// Elementwise fusion of two dense layers of identical shape: `W_a + W_b`
/// for `Add`, `W_a .* W_b` for `Multiply`; biases fused the same way.
pub fn early_fuse_weights(a: &Dense, b: &Dense, op: FusionOp) -> Result<Dense, FusionError> {
    if !a.same_shape(b) {
        return Err(FusionError::ShapeMismatch {
            expected: format!("({}, {})", a.out_features, a.in_features),
            got: format!("({}, {})", b.out_features, b.in_features),
        });
    }
    let combine: fn(f64, f64) -> f64 = match op {
        FusionOp::Add => |x, y| x + y,
        FusionOp::Multiply => |x, y| x * y,
        FusionOp::Average => {
            return Err(FusionError::UnsupportedOp { op, stage: FusionStage::Early })
        }
    };
    Ok(Dense {
        weight: a.weight.iter().zip(b.weight.iter()).map(|(&x, &y)| combine(x, y)).collect(),
        bias: a.bias.iter().zip(b.bias.iter()).map(|(&x, &y)| combine(x, y)).collect(),
        in_features: a.in_features,
        out_features: a.out_features,
    })
}

/// Writes the fused layer into both models' top dense layers, leaving every
/// other parameter untouched, and tags the copies with their fusion lineage.
pub fn sew_into_models(
    model_a: &PoseNetModel,
    model_b: &PoseNetModel,
    fused: &Dense,
    op: FusionOp,
) -> Result<(PoseNetModel, PoseNetModel), FusionError> {
    let lineage = match op {
        FusionOp::Add => Lineage::AddSewn,
        FusionOp::Multiply => Lineage::MultiplySewn,
        FusionOp::Average => {
            return Err(FusionError::UnsupportedOp { op, stage: FusionStage::Early })
        }
    };
    for m in [model_a, model_b] {
        if !m.backbone.top_dense.same_shape(fused) {
            return Err(FusionError::ShapeMismatch {
                expected: format!(
                    "({}, {})",
                    m.backbone.top_dense.out_features, m.backbone.top_dense.in_features
                ),
                got: format!("({}, {})", fused.out_features, fused.in_features),
            });
        }
    }
    let mut a = model_a.clone();
    let mut b = model_b.clone();
    a.backbone.top_dense = fused.clone();
    b.backbone.top_dense = fused.clone();
    a.lineage = lineage;
    b.lineage = lineage;
    Ok((a, b))
}

/// Retrains a sewn model on the training set; the fusion lineage tag is kept.
pub fn retrain_after_sewing(
    model: &mut PoseNetModel,
    data: &TrainSet,
    cfg: &TrainConfig,
) -> Result<TrainReport, TrainError> {
    let lineage = model.lineage;
    let report = train(model, data, cfg)?;
    model.lineage = lineage;
    Ok(report)
}

/// Options for the multiplicative translation fusion; the literal elementwise
/// product is the default, the signed geometric mean is a documented
/// alternative kept behind this flag.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LateFusionOptions {
    pub multiply_uses_geometric_mean: bool,
}

/// Fuses at least two unit-quaternion poses.
///
/// `Average`: arithmetic-mean translation; quaternions sign-aligned to the
/// first member, averaged, renormalized (chordal mean).
/// `Multiply`: elementwise-product translation (or signed geometric mean when
/// flagged); quaternion block sign-aligned, multiplied elementwise,
/// renormalized.
pub fn late_fuse_poses_with(
    poses: &[Pose],
    op: FusionOp,
    opts: LateFusionOptions,
) -> Result<Pose, FusionError> {
    if poses.len() < 2 {
        return Err(FusionError::EmptyEnsemble);
    }
    let n = poses.len() as f64;
    let reference = poses[0].quaternion;
    let aligned: Vec<Quaternion> =
        poses.iter().map(|p| sign_align(&reference, &p.quaternion)).collect();

    let (translation, quaternion) = match op {
        FusionOp::Average => {
            let mut t = [0.0f64; 3];
            let mut q = [0.0f64; 4];
            for (p, a) in poses.iter().zip(aligned.iter()) {
                let ta = p.translation.as_array();
                let qa = a.as_array();
                for i in 0..3 {
                    t[i] += ta[i];
                }
                for i in 0..4 {
                    q[i] += qa[i];
                }
            }
            for v in t.iter_mut() {
                *v /= n;
            }
            for v in q.iter_mut() {
                *v /= n;
            }
            (t, q)
        }
        FusionOp::Multiply => {
            let mut t = [1.0f64; 3];
            let mut q = [1.0f64; 4];
            for (p, a) in poses.iter().zip(aligned.iter()) {
                let ta = p.translation.as_array();
                let qa = a.as_array();
                for i in 0..3 {
                    t[i] *= ta[i];
                }
                for i in 0..4 {
                    q[i] *= qa[i];
                }
            }
            if opts.multiply_uses_geometric_mean {
                for v in t.iter_mut() {
                    *v = v.signum() * v.abs().powf(1.0 / n);
                }
            }
            (t, q)
        }
        FusionOp::Add => {
            return Err(FusionError::UnsupportedOp { op, stage: FusionStage::Late })
        }
    };

    let q = Quaternion::new(quaternion[0], quaternion[1], quaternion[2], quaternion[3]);
    let norm = q.norm();
    if norm < 1e-9 {
        return Err(FusionError::DegenerateQuaternion { norm });
    }
    Ok(Pose::new(Translation::from_array(translation), q.normalized()))
}

/// [`late_fuse_poses_with`] under default options.
pub fn late_fuse_poses(poses: &[Pose], op: FusionOp) -> Result<Pose, FusionError> {
    late_fuse_poses_with(poses, op, LateFusionOptions::default())
}

/// Eval-mode predictions of several models over one batch, fanned out to
/// worker threads (capped by `POSEFUSE_THREADS`) with an ordered reduction.
pub fn ensemble_predict(
    models: &[&PoseNetModel],
    inputs: &TensorBatch,
) -> Result<Vec<TensorBatch>, NnError> {
    let workers = worker_count().min(models.len()).max(1);
    if workers == 1 || models.len() == 1 {
        return models.iter().map(|m| m.forward(inputs, Mode::Eval, None)).collect();
    }
    let mut slots: Vec<Option<Result<TensorBatch, NnError>>> = Vec::new();
    slots.resize_with(models.len(), || None);
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for chunk_start in (0..models.len()).step_by(workers) {
            // Spawn up to `workers` at a time; member order is restored below.
            let end = (chunk_start + workers).min(models.len());
            for (idx, model) in models[chunk_start..end].iter().enumerate() {
                let handle = scope.spawn(move || model.forward(inputs, Mode::Eval, None));
                handles.push((chunk_start + idx, handle));
            }
        }
        for (idx, handle) in handles {
            slots[idx] = Some(handle.join().expect("prediction worker panicked"));
        }
    });
    slots.into_iter().map(|s| s.expect("every slot filled")).collect()
}

fn poses_of_row(outputs: &[TensorBatch], sample: usize) -> Vec<Pose> {
    outputs.iter().map(|o| Pose::from_vector(o.sample(sample))).collect()
}

/// Late-fuses the per-sample predictions of `models` over a batch.
pub fn fuse_predictions(
    models: &[&PoseNetModel],
    inputs: &TensorBatch,
    op: FusionOp,
) -> Result<Vec<FusedPrediction>, FusionError> {
    if models.len() < 2 {
        return Err(FusionError::EmptyEnsemble);
    }
    let outputs = ensemble_predict(models, inputs)?;
    let n = inputs.batch_size();
    let mut fused = Vec::with_capacity(n);
    for s in 0..n {
        let members = poses_of_row(&outputs, s);
        let pose = late_fuse_poses(&members, op)?;
        fused.push(FusedPrediction { pose, members, op });
    }
    Ok(fused)
}

fn lineage_names(models: &[&PoseNetModel]) -> String {
    models.iter().map(|m| m.lineage.name()).collect::<Vec<_>>().join(", ")
}

fn require_lineage(
    models: &[&PoseNetModel],
    expected: Lineage,
    label: &'static str,
) -> Result<(), FusionError> {
    if models.iter().any(|m| m.lineage != expected) {
        return Err(FusionError::LineageMismatch { expected: label, got: lineage_names(models) });
    }
    Ok(())
}

/// Late fusion over independently trained unimodal models (average scores).
/// The protocol uses five members; any ensemble of at least two is accepted,
/// with membership made explicit by the caller.
pub fn build_lf(
    models: &[&PoseNetModel],
    inputs: &TensorBatch,
) -> Result<Vec<FusedPrediction>, FusionError> {
    if models.len() < 2 {
        return Err(FusionError::EmptyEnsemble);
    }
    require_lineage(models, Lineage::Unimodal, "unimodal")?;
    fuse_predictions(models, inputs, FusionOp::Average)
}

/// Average hybrid learner: average fusion of the two additively sewn models.
pub fn build_ahl(
    aef_a: &PoseNetModel,
    aef_b: &PoseNetModel,
    inputs: &TensorBatch,
) -> Result<Vec<FusedPrediction>, FusionError> {
    require_lineage(&[aef_a, aef_b], Lineage::AddSewn, "add-sewn")?;
    fuse_predictions(&[aef_a, aef_b], inputs, FusionOp::Average)
}

/// Multiplicative hybrid learner: multiplicative fusion of the two
/// multiplicatively sewn models.
pub fn build_mhl(
    mef_a: &PoseNetModel,
    mef_b: &PoseNetModel,
    inputs: &TensorBatch,
) -> Result<Vec<FusedPrediction>, FusionError> {
    require_lineage(&[mef_a, mef_b], Lineage::MultiplySewn, "multiply-sewn")?;
    fuse_predictions(&[mef_a, mef_b], inputs, FusionOp::Multiply)
}

/// Which full-fusion protocol [`build_hlff`] runs. The default averages the
/// four early-fusion models' raw predictions; the alternative averages the
/// AHL and MHL outputs instead and is kept only for comparison.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum HlffVariant {
    #[default]
    FourModelAverage,
    PairOfHybrids,
}

/// Full hybrid fusion over the four early-fusion models.
pub fn build_hlff(
    aef_a: &PoseNetModel,
    aef_b: &PoseNetModel,
    mef_a: &PoseNetModel,
    mef_b: &PoseNetModel,
    inputs: &TensorBatch,
    variant: HlffVariant,
) -> Result<Vec<FusedPrediction>, FusionError> {
    require_lineage(&[aef_a, aef_b], Lineage::AddSewn, "add-sewn")?;
    require_lineage(&[mef_a, mef_b], Lineage::MultiplySewn, "multiply-sewn")?;
    match variant {
        HlffVariant::FourModelAverage => {
            fuse_predictions(&[aef_a, aef_b, mef_a, mef_b], inputs, FusionOp::Average)
        }
        HlffVariant::PairOfHybrids => {
            let ahl = build_ahl(aef_a, aef_b, inputs)?;
            let mhl = build_mhl(mef_a, mef_b, inputs)?;
            ahl.into_iter()
                .zip(mhl)
                .map(|(a, m)| {
                    let members = vec![a.pose, m.pose];
                    let pose = late_fuse_poses(&members, FusionOp::Average)?;
                    Ok(FusedPrediction { pose, members, op: FusionOp::Average })
                })
                .collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::translation_error_m;
    use crate::nn::BackboneId;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dense_from(values: &[f64], in_f: usize, out_f: usize) -> Dense {
        Dense {
            weight: values.to_vec(),
            bias: vec![0.5; out_f],
            in_features: in_f,
            out_features: out_f,
        }
    }

    fn pose(t: [f64; 3], q: [f64; 4]) -> Pose {
        Pose::new(Translation::from_array(t), Quaternion::from_array(q).normalized())
    }

    #[test]
    fn add_with_zero_is_identity() {
        let a = dense_from(&[1.0, -2.0, 3.0, 4.0], 2, 2);
        let mut b = dense_from(&[0.0; 4], 2, 2);
        b.bias = vec![0.0; 2];
        let fused = early_fuse_weights(&a, &b, FusionOp::Add).unwrap();
        assert_eq!(fused.weight, a.weight);
        assert_eq!(fused.bias, a.bias);
    }

    #[test]
    fn multiply_with_ones_is_identity() {
        let a = dense_from(&[1.0, -2.0, 3.0, 4.0], 2, 2);
        let mut b = dense_from(&[1.0; 4], 2, 2);
        b.bias = vec![1.0; 2];
        let fused = early_fuse_weights(&a, &b, FusionOp::Multiply).unwrap();
        assert_eq!(fused.weight, a.weight);
        assert_eq!(fused.bias, a.bias);
    }

    #[test]
    fn fusion_matches_scalar_loop_oracle_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w_a: Vec<f64> = (0..16).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let w_b: Vec<f64> = (0..16).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let a = dense_from(&w_a, 4, 4);
        let b = dense_from(&w_b, 4, 4);
        for op in [FusionOp::Add, FusionOp::Multiply] {
            let fused = early_fuse_weights(&a, &b, op).unwrap();
            for i in 0..16 {
                let expect = match op {
                    FusionOp::Add => w_a[i] + w_b[i],
                    FusionOp::Multiply => w_a[i] * w_b[i],
                    FusionOp::Average => unreachable!(),
                };
                assert_eq!(fused.weight[i].to_bits(), expect.to_bits());
            }
        }
    }

    #[test]
    fn fusion_is_commutative_and_nearly_associative() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mk = |rng: &mut ChaCha8Rng| {
            let w: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();
            dense_from(&w, 3, 3)
        };
        let (a, b, c) = (mk(&mut rng), mk(&mut rng), mk(&mut rng));
        for op in [FusionOp::Add, FusionOp::Multiply] {
            let ab = early_fuse_weights(&a, &b, op).unwrap();
            let ba = early_fuse_weights(&b, &a, op).unwrap();
            assert_eq!(ab.weight, ba.weight); // exact commutativity
            let ab_c = early_fuse_weights(&ab, &c, op).unwrap();
            let bc = early_fuse_weights(&b, &c, op).unwrap();
            let a_bc = early_fuse_weights(&a, &bc, op).unwrap();
            for (x, y) in ab_c.weight.iter().zip(a_bc.weight.iter()) {
                assert_abs_diff_eq!(x, y, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let a = dense_from(&[0.0; 4], 2, 2);
        let b = dense_from(&[0.0; 6], 3, 2);
        assert!(matches!(
            early_fuse_weights(&a, &b, FusionOp::Add),
            Err(FusionError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn average_is_invalid_for_early_fusion() {
        let a = dense_from(&[0.0; 4], 2, 2);
        assert!(matches!(
            early_fuse_weights(&a, &a, FusionOp::Average),
            Err(FusionError::UnsupportedOp { .. })
        ));
    }

    #[test]
    fn sewing_replaces_only_the_top_dense() {
        let a = PoseNetModel::init(BackboneId::A, 3, 16, 1);
        let b = PoseNetModel::init(BackboneId::B, 3, 16, 2);
        let fused =
            early_fuse_weights(&a.backbone.top_dense, &b.backbone.top_dense, FusionOp::Add)
                .unwrap();
        let (a2, b2) = sew_into_models(&a, &b, &fused, FusionOp::Add).unwrap();

        assert_eq!(a2.backbone.top_dense, fused);
        assert_eq!(b2.backbone.top_dense, fused);
        assert_eq!(a2.lineage, Lineage::AddSewn);
        assert_eq!(b2.lineage, Lineage::AddSewn);
        // Sewn copies share bitwise-identical top layers.
        assert_eq!(a2.backbone.top_dense.weight, b2.backbone.top_dense.weight);

        // Every other tensor is untouched, bitwise.
        for (name, (before, after)) in a
            .param_order()
            .iter()
            .zip(a.param_slices().iter().zip(a2.param_slices().iter()))
        {
            if name.starts_with("backbone.top_dense") {
                continue;
            }
            assert!(
                before.iter().zip(after.iter()).all(|(x, y)| x.to_bits() == y.to_bits()),
                "{name} changed during sewing"
            );
        }
    }

    #[test]
    fn sew_then_refuse_doubles_add_fusion() {
        let a = PoseNetModel::init(BackboneId::A, 3, 16, 3);
        let b = PoseNetModel::init(BackboneId::B, 3, 16, 4);
        let fused =
            early_fuse_weights(&a.backbone.top_dense, &b.backbone.top_dense, FusionOp::Add)
                .unwrap();
        let (a2, b2) = sew_into_models(&a, &b, &fused, FusionOp::Add).unwrap();
        let refused =
            early_fuse_weights(&a2.backbone.top_dense, &b2.backbone.top_dense, FusionOp::Add)
                .unwrap();
        for (&twice, &once) in refused.weight.iter().zip(fused.weight.iter()) {
            assert_abs_diff_eq!(twice, 2.0 * once, epsilon = 0.0);
        }
    }

    #[test]
    fn average_of_identical_poses_is_identity() {
        let p = pose([1.0, 2.0, 3.0], [0.1, 0.7, -0.2, 0.3]);
        let fused = late_fuse_poses(&[p, p], FusionOp::Average).unwrap();
        assert_abs_diff_eq!(fused.translation.x, 1.0, epsilon = 1e-15);
        assert!(fused.quaternion.dot(&p.quaternion).abs() > 1.0 - 1e-12);
    }

    #[test]
    fn average_translations() {
        let a = pose([1.0, 2.0, 3.0], [1.0, 0.0, 0.0, 0.0]);
        let b = pose([3.0, 2.0, 1.0], [1.0, 0.0, 0.0, 0.0]);
        let fused = late_fuse_poses(&[a, b], FusionOp::Average).unwrap();
        assert_eq!(fused.translation.as_array(), [2.0, 2.0, 2.0]);
    }

    #[test]
    fn sign_alignment_prevents_cancellation() {
        let q = Quaternion::new(0.3, -0.5, 0.4, 0.2).normalized();
        let a = Pose::new(Translation::new(0.0, 0.0, 0.0), q);
        let b = Pose::new(Translation::new(0.0, 0.0, 0.0), q.negated());
        let fused = late_fuse_poses(&[a, b], FusionOp::Average).unwrap();
        assert!(fused.quaternion.dot(&q).abs() > 1.0 - 1e-12);
    }

    #[test]
    fn fewer_than_two_poses_is_empty_ensemble() {
        let p = pose([0.0; 3], [1.0, 0.0, 0.0, 0.0]);
        assert!(matches!(
            late_fuse_poses(&[p], FusionOp::Average),
            Err(FusionError::EmptyEnsemble)
        ));
    }

    #[test]
    fn multiply_squares_identical_translations() {
        let p = pose([2.0, -3.0, 0.5], [0.5, 0.5, 0.5, 0.5]);
        let fused = late_fuse_poses(&[p, p], FusionOp::Multiply).unwrap();
        assert_eq!(fused.translation.as_array(), [4.0, 9.0, 0.25]);
    }

    #[test]
    fn multiplicative_elementwise_identity_member() {
        // All-ones translation plus the uniform unit quaternion is the
        // projective identity of elementwise multiplication: the other
        // member's pose survives renormalization exactly.
        let a = pose([2.5, -1.0, 4.0], [0.4, -0.6, 0.4, 0.56]);
        let identity = pose([1.0, 1.0, 1.0], [0.5, 0.5, 0.5, 0.5]);
        let fused = late_fuse_poses(&[a, identity], FusionOp::Multiply).unwrap();
        assert_eq!(fused.translation.as_array(), a.translation.as_array());
        assert!(fused.quaternion.dot(&a.quaternion) > 1.0 - 1e-12);
    }

    #[test]
    fn orthogonal_component_patterns_collapse() {
        // Elementwise product of disjoint-support quaternions is the zero
        // vector, which must surface as DegenerateQuaternion.
        let a = pose([1.0, 1.0, 1.0], [1.0, 0.0, 0.0, 0.0]);
        let b = pose([1.0, 1.0, 1.0], [0.0, 1.0, 0.0, 0.0]);
        assert!(matches!(
            late_fuse_poses(&[a, b], FusionOp::Multiply),
            Err(FusionError::DegenerateQuaternion { .. })
        ));
    }

    #[test]
    fn geometric_mean_flag_changes_translation_rule() {
        let a = pose([4.0, 9.0, -16.0], [0.5, 0.5, 0.5, 0.5]);
        let b = pose([1.0, 1.0, -1.0], [0.5, 0.5, 0.5, 0.5]);
        let opts = LateFusionOptions { multiply_uses_geometric_mean: true };
        let fused = late_fuse_poses_with(&[a, b], FusionOp::Multiply, opts).unwrap();
        assert_abs_diff_eq!(fused.translation.x, 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(fused.translation.y, 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(fused.translation.z, 4.0, epsilon = 1e-12); // sign of product
    }

    #[test]
    fn jensen_translation_bound_on_random_ensembles() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10_000 {
            let k = rng.gen_range(2..6);
            let members: Vec<Pose> = (0..k)
                .map(|_| {
                    pose(
                        [
                            rng.gen_range(-5.0..5.0),
                            rng.gen_range(-5.0..5.0),
                            rng.gen_range(-5.0..5.0),
                        ],
                        [
                            rng.gen_range(-1.0..1.0),
                            rng.gen_range(-1.0..1.0),
                            rng.gen_range(-1.0..1.0),
                            rng.gen_range(-1.0f64..1.0).max(0.05),
                        ],
                    )
                })
                .collect();
            let gt = Translation::new(
                rng.gen_range(-5.0..5.0),
                rng.gen_range(-5.0..5.0),
                rng.gen_range(-5.0..5.0),
            );
            let fused = late_fuse_poses(&members, FusionOp::Average).unwrap();
            let fused_err = translation_error_m(&fused.translation, &gt);
            let mean_err: f64 = members
                .iter()
                .map(|m| translation_error_m(&m.translation, &gt))
                .sum::<f64>()
                / members.len() as f64;
            assert!(
                fused_err <= mean_err + 1e-12,
                "Jensen violated: {fused_err} > {mean_err}"
            );
        }
    }

    fn trained_pair() -> (PoseNetModel, PoseNetModel) {
        (PoseNetModel::init(BackboneId::A, 3, 16, 7), PoseNetModel::init(BackboneId::B, 3, 16, 8))
    }

    fn small_batch(n: usize) -> TensorBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data = (0..n * 3 * 16 * 16).map(|_| rng.gen_range(0.0..1.0)).collect();
        TensorBatch::new(vec![n, 3, 16, 16], data).unwrap()
    }

    #[test]
    fn hybrid_builders_enforce_lineage() {
        let (a, b) = trained_pair();
        let batch = small_batch(2);
        // Unimodal members are rejected by AHL/MHL.
        assert!(matches!(
            build_ahl(&a, &b, &batch),
            Err(FusionError::LineageMismatch { .. })
        ));
        let fused_add =
            early_fuse_weights(&a.backbone.top_dense, &b.backbone.top_dense, FusionOp::Add)
                .unwrap();
        let (aef_a, aef_b) = sew_into_models(&a, &b, &fused_add, FusionOp::Add).unwrap();
        let fused_mul =
            early_fuse_weights(&a.backbone.top_dense, &b.backbone.top_dense, FusionOp::Multiply)
                .unwrap();
        let (mef_a, mef_b) = sew_into_models(&a, &b, &fused_mul, FusionOp::Multiply).unwrap();

        assert!(build_ahl(&aef_a, &aef_b, &batch).is_ok());
        assert!(matches!(
            build_ahl(&aef_a, &mef_b, &batch),
            Err(FusionError::LineageMismatch { .. })
        ));
        assert!(build_mhl(&mef_a, &mef_b, &batch).is_ok());
        assert!(build_hlff(&aef_a, &aef_b, &mef_a, &mef_b, &batch, HlffVariant::default()).is_ok());
        assert!(matches!(
            build_hlff(&aef_a, &aef_b, &mef_a, &b, &batch, HlffVariant::default()),
            Err(FusionError::LineageMismatch { .. })
        ));
        // LF takes unimodal members only.
        assert!(build_lf(&[&a, &b], &batch).is_ok());
        assert!(matches!(
            build_lf(&[&a, &aef_b], &batch),
            Err(FusionError::LineageMismatch { .. })
        ));
        assert!(matches!(build_lf(&[&a], &batch), Err(FusionError::EmptyEnsemble)));
    }

    #[test]
    fn identical_members_fuse_to_member_prediction() {
        let (a, b) = trained_pair();
        let batch = small_batch(3);
        let fused_add =
            early_fuse_weights(&a.backbone.top_dense, &b.backbone.top_dense, FusionOp::Add)
                .unwrap();
        let (aef_a, _) = sew_into_models(&a, &b, &fused_add, FusionOp::Add).unwrap();
        let preds = build_ahl(&aef_a, &aef_a, &batch).unwrap();
        let solo = aef_a.forward(&batch, Mode::Eval, None).unwrap();
        for (s, p) in preds.iter().enumerate() {
            let row = solo.sample(s);
            for (got, want) in p.pose.to_vector().iter().zip(row.iter()) {
                assert_abs_diff_eq!(got, want, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn late_fusion_is_permutation_invariant_on_clustered_ensembles() {
        // Sign alignment uses the first member as reference, which is only
        // well-posed when members agree to within a hemisphere; that is the
        // operating regime of trained ensembles, and there the fused rotation
        // is independent of member order.
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for op in [FusionOp::Average, FusionOp::Multiply] {
            for _ in 0..500 {
                let base = Quaternion::new(
                    rng.gen_range(0.2..1.0),
                    rng.gen_range(-0.5..0.5),
                    rng.gen_range(-0.5..0.5),
                    rng.gen_range(-0.5..0.5),
                )
                .normalized();
                let members: Vec<Pose> = (0..4)
                    .map(|_| {
                        let jitter = Quaternion::new(
                            base.w + rng.gen_range(-0.1..0.1),
                            base.x + rng.gen_range(-0.1..0.1),
                            base.y + rng.gen_range(-0.1..0.1),
                            base.z + rng.gen_range(-0.1..0.1),
                        )
                        .normalized();
                        // Random representative sign; alignment must undo it.
                        let q = if rng.gen::<bool>() { jitter } else { jitter.negated() };
                        Pose::new(
                            Translation::new(
                                rng.gen_range(0.5..2.0),
                                rng.gen_range(0.5..2.0),
                                rng.gen_range(0.5..2.0),
                            ),
                            q,
                        )
                    })
                    .collect();
                let mut shuffled = members.clone();
                shuffled.reverse();
                shuffled.swap(0, 1);
                let f1 = late_fuse_poses(&members, op).unwrap();
                let f2 = late_fuse_poses(&shuffled, op).unwrap();
                for (u, v) in f1
                    .translation
                    .as_array()
                    .iter()
                    .zip(f2.translation.as_array().iter())
                {
                    assert_abs_diff_eq!(u, v, epsilon = 1e-12);
                }
                assert!(f1.quaternion.dot(&f2.quaternion).abs() > 1.0 - 1e-12);
            }
        }
    }

    #[test]
    fn hlff_translation_is_permutation_invariant() {
        let (a, b) = trained_pair();
        let batch = small_batch(2);
        let fa = early_fuse_weights(&a.backbone.top_dense, &b.backbone.top_dense, FusionOp::Add)
            .unwrap();
        let (aef_a, aef_b) = sew_into_models(&a, &b, &fa, FusionOp::Add).unwrap();
        let fm =
            early_fuse_weights(&a.backbone.top_dense, &b.backbone.top_dense, FusionOp::Multiply)
                .unwrap();
        let (mef_a, mef_b) = sew_into_models(&a, &b, &fm, FusionOp::Multiply).unwrap();

        let p1 = build_hlff(&aef_a, &aef_b, &mef_a, &mef_b, &batch, HlffVariant::default()).unwrap();
        let p2 = build_hlff(&aef_b, &aef_a, &mef_b, &mef_a, &batch, HlffVariant::default()).unwrap();
        for (x, y) in p1.iter().zip(p2.iter()) {
            let (t1, t2) = (x.pose.translation.as_array(), y.pose.translation.as_array());
            for (u, v) in t1.iter().zip(t2.iter()) {
                assert_abs_diff_eq!(u, v, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn fusion_does_not_mutate_members() {
        let (a, b) = trained_pair();
        let batch = small_batch(2);
        let a_before = a.clone();
        let b_before = b.clone();
        let _ = build_lf(&[&a, &b], &batch).unwrap();
        assert_eq!(a, a_before);
        assert_eq!(b, b_before);
    }

    #[test]
    fn worker_cap_env_var_is_respected() {
        // Results are identical regardless of the worker cap.
        let (a, b) = trained_pair();
        let batch = small_batch(4);
        let base = fuse_predictions(&[&a, &b], &batch, FusionOp::Average).unwrap();
        std::env::set_var("POSEFUSE_THREADS", "2");
        let threaded = fuse_predictions(&[&a, &b], &batch, FusionOp::Average).unwrap();
        std::env::remove_var("POSEFUSE_THREADS");
        assert_eq!(base.len(), threaded.len());
        for (x, y) in base.iter().zip(threaded.iter()) {
            assert_eq!(x.pose.to_vector(), y.pose.to_vector());
        }
    }

    #[test]
    fn spec_validation_rules() {
        let spec = |stage, op, n: usize| FusionSpec {
            stage,
            op,
            members: (0..n).map(|i| format!("m{i}.pfm")).collect(),
        };
        assert!(spec(FusionStage::Early, FusionOp::Add, 2).validate().is_ok());
        assert!(spec(FusionStage::Early, FusionOp::Add, 3).validate().is_err());
        assert!(spec(FusionStage::Early, FusionOp::Average, 2).validate().is_err());
        assert!(spec(FusionStage::Late, FusionOp::Average, 5).validate().is_ok());
        assert!(spec(FusionStage::Late, FusionOp::Add, 5).validate().is_err());
        assert!(spec(FusionStage::Late, FusionOp::Average, 1).validate().is_err());
        assert!(spec(FusionStage::Hybrid, FusionOp::Average, 4).validate().is_ok());
        assert!(spec(FusionStage::Hybrid, FusionOp::Average, 2).validate().is_err());
    }
}
