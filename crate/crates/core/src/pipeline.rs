//! Experiment driver: dataset preparation, the staged training/fusion/
//! evaluation pipeline, run manifests, and the experiment config file.

use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{
    compute_image_stats, compute_normalization, denormalize_pose, generate_synthetic,
    load_pose_file, normalize_pose, open_image, pool_to_square, split_dataset, standardize,
    to_canonical, CanonicalImage, DataError, DatasetSplit, ImageStats, NormalizationStats,
    PoseRecord, WorldParams,
};
use crate::eval::{
    improvement_table, measure_mapst, pose_error_stats, render_improvement, render_report,
    EvalError, MetricsReport, ReportFormat,
};
use crate::fusion::{
    build_ahl, build_hlff, build_lf, build_mhl, early_fuse_weights, retrain_after_sewing,
    sew_into_models, FusedPrediction, FusionError, FusionOp, HlffVariant,
};
use crate::geometry::{
    EulerConvention, GeometryError, Pose, RotationConvention,
};
use crate::nn::{
    save_model, train, BackboneId, Mode, ModelIoError, ModelNorm, NnError, PoseNetModel,
    TensorBatch, TrainConfig, TrainError, TrainSet,
};
use crate::util::{crc32, derive_seed};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug)]
pub enum PipelineError {
    Data(DataError),
    Train { stage: String, source: TrainError },
    Fusion { stage: String, source: FusionError },
    Eval { stage: String, source: EvalError },
    Nn { stage: String, source: NnError },
    ModelIo(ModelIoError),
    Geometry(GeometryError),
    Io { path: PathBuf, source: std::io::Error },
    Config { reason: String },
}

impl fmt::Display for PipelineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PipelineError::Data(e) => e.fmt(f),
            PipelineError::Train { stage, source } => write!(f, "stage {stage}: {source}"),
            PipelineError::Fusion { stage, source } => write!(f, "stage {stage}: {source}"),
            PipelineError::Eval { stage, source } => write!(f, "stage {stage}: {source}"),
            PipelineError::Nn { stage, source } => write!(f, "stage {stage}: {source}"),
            PipelineError::ModelIo(e) => e.fmt(f),
            PipelineError::Geometry(e) => e.fmt(f),
            PipelineError::Io { path, source } => write!(f, "{}: {source}", path.display()),
            PipelineError::Config { reason } => write!(f, "config: {reason}"),
        }
    }
}

impl std::error::Error for PipelineError {}

impl From<DataError> for PipelineError {
    fn from(e: DataError) -> Self {
        PipelineError::Data(e)
    }
}

impl From<ModelIoError> for PipelineError {
    fn from(e: ModelIoError) -> Self {
        PipelineError::ModelIo(e)
    }
}

impl From<GeometryError> for PipelineError {
    fn from(e: GeometryError) -> Self {
        PipelineError::Geometry(e)
    }
}

impl PipelineError {
    /// Process exit code: 2 for usage/validation problems, 3 for numerical
    /// failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Train { source: TrainError::Diverged { .. }, .. } => 3,
            PipelineError::Train { source: TrainError::Nn(NnError::NaNGradient), .. } => 3,
            PipelineError::Nn { source: NnError::NaNGradient, .. } => 3,
            PipelineError::Fusion { source: FusionError::DegenerateQuaternion { .. }, .. } => 3,
            _ => 2,
        }
    }
}

/// Euler-to-quaternion route selector as written in config files.
pub fn parse_convention(s: &str) -> Option<RotationConvention> {
    match s.to_ascii_lowercase().as_str() {
        "zyx" => Some(RotationConvention::Standard(EulerConvention::IntrinsicZyx)),
        "xyz" => Some(RotationConvention::Standard(EulerConvention::IntrinsicXyz)),
        "legacy" => Some(RotationConvention::Legacy),
        _ => None,
    }
}

pub fn convention_name(c: RotationConvention) -> &'static str {
    match c {
        RotationConvention::Standard(EulerConvention::IntrinsicZyx) => "zyx",
        RotationConvention::Standard(EulerConvention::IntrinsicXyz) => "xyz",
        RotationConvention::Legacy => "legacy",
    }
}

/// Tensors and statistics derived from one dataset split, ready for training
/// and evaluation. Normalization uses the training split only.
pub struct PreparedData {
    pub split: DatasetSplit,
    pub pose_stats: NormalizationStats,
    pub image_stats: ImageStats,
    pub train: TrainSet,
    pub test: TrainSet,
    pub test_gt: Vec<Pose>,
    pub convention: RotationConvention,
    pub input_hw: usize,
}

impl PreparedData {
    pub fn model_norm(&self) -> ModelNorm {
        ModelNorm {
            pose_mean: self.pose_stats.mean,
            pose_std: self.pose_stats.std,
            pose_min: self.pose_stats.min,
            pose_max: self.pose_stats.max,
            image_mean: self.image_stats.mean.clone(),
            image_std: self.image_stats.std.clone(),
        }
    }

    /// Denormalizes raw `(n, 7)` network outputs into world-space poses.
    pub fn poses_from_outputs(&self, outputs: &TensorBatch) -> Vec<Pose> {
        (0..outputs.batch_size())
            .map(|s| {
                let row = outputs.sample(s);
                let target = crate::data::PoseTarget {
                    translation: [row[0], row[1], row[2]],
                    quaternion: crate::geometry::Quaternion::new(row[3], row[4], row[5], row[6]),
                };
                denormalize_pose(&target, &self.pose_stats)
            })
            .collect()
    }

    pub fn poses_from_fused(&self, fused: &[FusedPrediction]) -> Vec<Pose> {
        fused
            .iter()
            .map(|f| {
                let v = f.pose.to_vector();
                let target = crate::data::PoseTarget {
                    translation: [v[0], v[1], v[2]],
                    quaternion: f.pose.quaternion,
                };
                denormalize_pose(&target, &self.pose_stats)
            })
            .collect()
    }
}

fn canonical_images(
    root: &Path,
    records: &[PoseRecord],
) -> Result<Vec<CanonicalImage>, DataError> {
    records
        .iter()
        .map(|r| to_canonical(&open_image(root, &r.image_ref)?))
        .collect()
}

fn tensors_for(
    canon: &[CanonicalImage],
    records: &[PoseRecord],
    image_stats: &ImageStats,
    pose_stats: &NormalizationStats,
    convention: RotationConvention,
    input_hw: usize,
) -> Result<TrainSet, PipelineError> {
    let n = records.len();
    let channels = canon.first().map(|c| c.channels).unwrap_or(3);
    let mut inputs = Vec::with_capacity(n * channels * input_hw * input_hw);
    let mut targets = Vec::with_capacity(n * 7);
    for (img, rec) in canon.iter().zip(records.iter()) {
        let sample = standardize(img, image_stats);
        inputs.extend_from_slice(&pool_to_square(&sample, input_hw));
        let t = normalize_pose(rec, pose_stats, convention)?;
        targets.extend_from_slice(&t.to_vector());
    }
    let inputs = TensorBatch::new(vec![n, channels, input_hw, input_hw], inputs)
        .map_err(|e| PipelineError::Config { reason: e.to_string() })?;
    let targets = TensorBatch::new(vec![n, 7], targets)
        .map_err(|e| PipelineError::Config { reason: e.to_string() })?;
    TrainSet::new(inputs, targets).map_err(|e| PipelineError::Config { reason: e.to_string() })
}

/// Splits the records 3:1, computes training-split statistics, and builds the
/// train/test tensors at the network input resolution.
pub fn prepare_data(
    root: &Path,
    records: &[PoseRecord],
    split_seed: u64,
    convention: RotationConvention,
    input_hw: usize,
) -> Result<PreparedData, PipelineError> {
    let split = split_dataset(records, split_seed)?;
    let train_canon = canonical_images(root, &split.train)?;
    let image_stats = compute_image_stats(train_canon.iter())?;
    let pose_stats = compute_normalization(&split.train)?;
    let train = tensors_for(&train_canon, &split.train, &image_stats, &pose_stats, convention, input_hw)?;
    drop(train_canon);
    let test_canon = canonical_images(root, &split.test)?;
    let test = tensors_for(&test_canon, &split.test, &image_stats, &pose_stats, convention, input_hw)?;
    let test_gt = split
        .test
        .iter()
        .map(|r| {
            let t = normalize_pose(r, &pose_stats, convention)?;
            Ok(denormalize_pose(&t, &pose_stats))
        })
        .collect::<Result<Vec<_>, GeometryError>>()?;
    Ok(PreparedData {
        split,
        pose_stats,
        image_stats,
        train,
        test,
        test_gt,
        convention,
        input_hw,
    })
}

/// Dataset source: an existing directory or a synthetic generation request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum DatasetConfig {
    Synthetic {
        n: usize,
        #[serde(default)]
        world: WorldParams,
    },
    Path {
        path: PathBuf,
    },
}

/// Training section of the experiment config; defaults follow the reference
/// protocol (learning rate 0.01, batch 34, dropout 0.5) at desk-scale epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub dropout_rate: f64,
    pub loss_norm: String,
    pub rotation_convention: String,
    pub input_size: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            epochs: 200,
            learning_rate: 0.01,
            batch_size: 34,
            dropout_rate: 0.5,
            loss_norm: "l1".into(),
            rotation_convention: "zyx".into(),
            input_size: 16,
        }
    }
}

/// Report section: baseline key and whether to measure timing (disable it for
/// bitwise-reproducible outputs).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReportSection {
    pub baseline: String,
    pub measure_timing: bool,
    pub timing_reps: usize,
}

impl Default for ReportSection {
    fn default() -> Self {
        Self { baseline: "uni-a".into(), measure_timing: true, timing_reps: 3 }
    }
}

/// Late-fusion membership: backbone per member; seeds derive from the member
/// index so members are independently trained.
fn default_lf_members() -> Vec<String> {
    vec!["a".into(), "b".into(), "a".into(), "b".into(), "a".into()]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionSection {
    pub lf_members: Vec<String>,
    pub hlff_variant: String,
}

impl Default for FusionSection {
    fn default() -> Self {
        Self { lf_members: default_lf_members(), hlff_variant: "four-model-average".into() }
    }
}

/// The full experiment configuration (TOML on disk).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub fusion: FusionSection,
    #[serde(default)]
    pub report: ReportSection,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        toml::from_str(text).map_err(|e| PipelineError::Config { reason: e.to_string() })
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Io { path: path.to_path_buf(), source: e })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialization cannot fail")
    }

    pub fn train_config(&self, seed: u64) -> Result<TrainConfig, PipelineError> {
        let loss_norm = crate::nn::LossNorm::parse(&self.train.loss_norm)
            .ok_or_else(|| PipelineError::Config {
                reason: format!("unknown loss norm `{}`", self.train.loss_norm),
            })?;
        Ok(TrainConfig {
            learning_rate: self.train.learning_rate,
            batch_size: self.train.batch_size,
            dropout_rate: self.train.dropout_rate,
            epochs: self.train.epochs,
            seed,
            loss_norm,
        })
    }

    pub fn convention(&self) -> Result<RotationConvention, PipelineError> {
        parse_convention(&self.train.rotation_convention).ok_or_else(|| PipelineError::Config {
            reason: format!("unknown rotation convention `{}`", self.train.rotation_convention),
        })
    }

    pub fn hlff_variant(&self) -> Result<HlffVariant, PipelineError> {
        match self.fusion.hlff_variant.as_str() {
            "four-model-average" => Ok(HlffVariant::FourModelAverage),
            "pair-of-hybrids" => Ok(HlffVariant::PairOfHybrids),
            other => Err(PipelineError::Config { reason: format!("unknown hlff variant `{other}`") }),
        }
    }
}

/// One pipeline stage record: timing, the split it consumed, and the files it
/// wrote with their checksums.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub seconds: f64,
    pub reads: Vec<String>,
    pub outputs: Vec<FileRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: String,
    pub crc32: String,
}

/// Reproducibility record of one run: tool version, the config snapshot,
/// per-stage reads/outputs/checksums, and timings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub seed: u64,
    pub config_toml: String,
    pub stages: Vec<StageRecord>,
}

impl RunManifest {
    /// Training stages must never consume the test split.
    pub fn audit_split_isolation(&self) -> Result<(), String> {
        for stage in &self.stages {
            if stage.name.starts_with("train") && stage.reads.iter().any(|r| r == "split:test") {
                return Err(format!("stage `{}` read the test split", stage.name));
            }
        }
        Ok(())
    }
}

pub struct StageTimer<'a> {
    manifest: &'a mut RunManifest,
    name: String,
    reads: Vec<String>,
    start: Instant,
    outputs: Vec<FileRecord>,
}

impl RunManifest {
    pub fn new(seed: u64, config_toml: String) -> Self {
        Self { tool_version: TOOL_VERSION.into(), seed, config_toml, stages: Vec::new() }
    }

    pub fn stage(&mut self, name: &str, reads: &[&str]) -> StageTimer<'_> {
        StageTimer {
            manifest: self,
            name: name.to_string(),
            reads: reads.iter().map(|s| s.to_string()).collect(),
            start: Instant::now(),
            outputs: Vec::new(),
        }
    }
}

impl StageTimer<'_> {
    pub fn record_output(&mut self, root: &Path, path: &Path) -> Result<(), PipelineError> {
        let bytes = std::fs::read(path)
            .map_err(|e| PipelineError::Io { path: path.to_path_buf(), source: e })?;
        let rel = path.strip_prefix(root).unwrap_or(path);
        self.outputs.push(FileRecord {
            path: rel.to_string_lossy().into_owned(),
            crc32: format!("{:08x}", crc32(&bytes)),
        });
        Ok(())
    }

    pub fn finish(self) {
        let seconds = self.start.elapsed().as_secs_f64();
        self.manifest.stages.push(StageRecord {
            name: self.name,
            seconds,
            reads: self.reads,
            outputs: self.outputs,
        });
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), PipelineError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)
            .map_err(|e| PipelineError::Io { path: parent.to_path_buf(), source: e })?;
    }
    std::fs::write(path, text)
        .map_err(|e| PipelineError::Io { path: path.to_path_buf(), source: e })
}

/// Loss-history CSV: `epoch,loss` rows.
pub fn history_csv(history: &[f64]) -> String {
    let mut out = String::from("epoch,loss\n");
    for (i, l) in history.iter().enumerate() {
        out.push_str(&format!("{i},{l:.9}\n"));
    }
    out
}

/// Everything the full pipeline produced, kept in memory for tests.
pub struct PipelineOutcome {
    pub reports: Vec<MetricsReport>,
    pub manifest: RunManifest,
    pub output_dir: PathBuf,
}

/// Runs the full staged experiment: dataset, unimodal training, late fusion,
/// early fusion with retraining, hybrid fusion, evaluation, and reports.
pub fn run_pipeline(config: &ExperimentConfig) -> Result<PipelineOutcome, PipelineError> {
    let out_dir = &config.output_dir;
    std::fs::create_dir_all(out_dir)
        .map_err(|e| PipelineError::Io { path: out_dir.clone(), source: e })?;
    let convention = config.convention()?;
    let variant = config.hlff_variant()?;
    let mut manifest = RunManifest::new(config.seed, config.to_toml());

    // Stage: dataset.
    let mut stage = manifest.stage("dataset", &[]);
    let (data_root, records) = match &config.dataset {
        DatasetConfig::Synthetic { n, world } => {
            let root = out_dir.join("dataset");
            let ds = generate_synthetic(&root, derive_seed(config.seed, "dataset"), *n, world)?;
            stage.record_output(out_dir, &ds.manifest_path)?;
            stage.record_output(out_dir, &root.join("poses.txt"))?;
            (root, ds.records)
        }
        DatasetConfig::Path { path } => {
            let poses = path.join("poses.txt");
            if !poses.exists() {
                return Err(PipelineError::Config {
                    reason: format!("dataset not found: {}", poses.display()),
                });
            }
            (path.clone(), load_pose_file(&poses)?)
        }
    };
    stage.finish();

    // Stage: preprocessing (stats from the training split only).
    let stage = manifest.stage("preprocess", &["split:train", "split:test"]);
    let data = prepare_data(
        &data_root,
        &records,
        derive_seed(config.seed, "split"),
        convention,
        config.train.input_size,
    )?;
    stage.finish();

    let models_dir = out_dir.join("models");
    std::fs::create_dir_all(&models_dir)
        .map_err(|e| PipelineError::Io { path: models_dir.clone(), source: e })?;

    let train_one = |manifest: &mut RunManifest,
                     label: &str,
                     id: BackboneId,
                     seed_label: &str|
     -> Result<(PoseNetModel, PathBuf), PipelineError> {
        let mut stage = manifest.stage(&format!("train.{label}"), &["split:train"]);
        let seed = derive_seed(config.seed, seed_label);
        let mut model = PoseNetModel::init(id, 3, config.train.input_size, seed);
        model.norm = Some(data.model_norm());
        let cfg = config.train_config(seed)?;
        let report = train(&mut model, &data.train, &cfg)
            .map_err(|e| PipelineError::Train { stage: format!("train.{label}"), source: e })?;
        let model_path = models_dir.join(format!("{label}.pfm"));
        save_model(&model, &model_path)?;
        let hist_path = models_dir.join(format!("{label}.history.csv"));
        write_text(&hist_path, &history_csv(&report.loss_history))?;
        stage.record_output(out_dir, &model_path)?;
        stage.record_output(out_dir, &hist_path)?;
        stage.finish();
        Ok((model, model_path))
    };

    // Stage: unimodal models.
    let (uni_a, uni_a_path) = train_one(&mut manifest, "uni-a", BackboneId::A, "train.uni-a")?;
    let (uni_b, uni_b_path) = train_one(&mut manifest, "uni-b", BackboneId::B, "train.uni-b")?;

    // Stage: extra late-fusion members beyond the two unimodals.
    let mut lf_models: Vec<PoseNetModel> = Vec::new();
    let mut lf_paths: Vec<PathBuf> = Vec::new();
    for (i, member) in config.fusion.lf_members.iter().enumerate() {
        let id = BackboneId::parse(member).ok_or_else(|| PipelineError::Config {
            reason: format!("lf member {i}: unknown backbone `{member}`"),
        })?;
        if i == 0 && id == BackboneId::A {
            lf_models.push(uni_a.clone());
            lf_paths.push(uni_a_path.clone());
            continue;
        }
        if i == 1 && id == BackboneId::B {
            lf_models.push(uni_b.clone());
            lf_paths.push(uni_b_path.clone());
            continue;
        }
        let label = format!("lf-{i}-{}", id.name().to_ascii_lowercase());
        let (m, p) = train_one(&mut manifest, &label, id, &format!("train.{label}"))?;
        lf_models.push(m);
        lf_paths.push(p);
    }

    // Stage: early fusion (weight sewing) and retraining.
    let sewn = |manifest: &mut RunManifest,
                    op: FusionOp,
                    tag: &str|
     -> Result<(PoseNetModel, PoseNetModel), PipelineError> {
        let stage = manifest.stage(&format!("fuse-early.{tag}"), &[]);
        let fused = early_fuse_weights(&uni_a.backbone.top_dense, &uni_b.backbone.top_dense, op)
            .map_err(|e| PipelineError::Fusion { stage: format!("fuse-early.{tag}"), source: e })?;
        let (sewn_a, sewn_b) = sew_into_models(&uni_a, &uni_b, &fused, op)
            .map_err(|e| PipelineError::Fusion { stage: format!("fuse-early.{tag}"), source: e })?;
        stage.finish();

        let retrain = |manifest: &mut RunManifest,
                           mut model: PoseNetModel,
                           label: String|
         -> Result<(PoseNetModel, PathBuf), PipelineError> {
            let mut stage = manifest.stage(&format!("train.{label}"), &["split:train"]);
            let seed = derive_seed(config.seed, &format!("train.{label}"));
            let cfg = config.train_config(seed)?;
            let report = retrain_after_sewing(&mut model, &data.train, &cfg)
                .map_err(|e| PipelineError::Train { stage: format!("train.{label}"), source: e })?;
            let path = models_dir.join(format!("{label}.pfm"));
            save_model(&model, &path)?;
            let hist = models_dir.join(format!("{label}.history.csv"));
            write_text(&hist, &history_csv(&report.loss_history))?;
            stage.record_output(out_dir, &path)?;
            stage.record_output(out_dir, &hist)?;
            stage.finish();
            Ok((model, path))
        };
        let (ra, _) = retrain(manifest, sewn_a, format!("{tag}-a"))?;
        let (rb, _) = retrain(manifest, sewn_b, format!("{tag}-b"))?;
        Ok((ra, rb))
    };
    let (aef_a, aef_b) = sewn(&mut manifest, FusionOp::Add, "aef")?;
    let (mef_a, mef_b) = sewn(&mut manifest, FusionOp::Multiply, "mef")?;

    // Stage: evaluation of every model class on the test split.
    let mut stage = manifest.stage("evaluate", &["split:test"]);
    let fusion_stage = |e: FusionError| PipelineError::Fusion { stage: "evaluate".into(), source: e };
    let nn_stage = |e: NnError| PipelineError::Nn { stage: "evaluate".into(), source: e };

    let mut reports: Vec<MetricsReport> = Vec::new();
    let mut predictions: Vec<(String, Vec<Pose>)> = Vec::new();
    let mut keys: Vec<&'static str> = Vec::new();

    let eval_model = |model: &PoseNetModel| -> Result<Vec<Pose>, PipelineError> {
        let out = model.forward(&data.test.inputs, Mode::Eval, None).map_err(nn_stage)?;
        Ok(data.poses_from_outputs(&out))
    };

    let lf_refs: Vec<&PoseNetModel> = lf_models.iter().collect();
    let classes: Vec<(&'static str, String, Vec<Pose>)> = vec![
        ("uni-a", "M1 - UniA".into(), eval_model(&uni_a)?),
        ("uni-b", "M2 - UniB".into(), eval_model(&uni_b)?),
        (
            "lf",
            format!("M3 - LF({})", lf_models.len()),
            data.poses_from_fused(&build_lf(&lf_refs, &data.test.inputs).map_err(fusion_stage)?),
        ),
        ("aef-a", "M4 - AEF-A".into(), eval_model(&aef_a)?),
        ("aef-b", "M5 - AEF-B".into(), eval_model(&aef_b)?),
        ("mef-a", "M6 - MEF-A".into(), eval_model(&mef_a)?),
        ("mef-b", "M7 - MEF-B".into(), eval_model(&mef_b)?),
        (
            "ahl",
            "M8 - AHL".into(),
            data.poses_from_fused(&build_ahl(&aef_a, &aef_b, &data.test.inputs).map_err(fusion_stage)?),
        ),
        (
            "mhl",
            "M9 - MHL".into(),
            data.poses_from_fused(&build_mhl(&mef_a, &mef_b, &data.test.inputs).map_err(fusion_stage)?),
        ),
        (
            "hlff",
            "M10 - HLFF".into(),
            data.poses_from_fused(
                &build_hlff(&aef_a, &aef_b, &mef_a, &mef_b, &data.test.inputs, variant)
                    .map_err(fusion_stage)?,
            ),
        ),
    ];

    struct FusedTimer<'a> {
        key: &'static str,
        models: Vec<&'a PoseNetModel>,
        variant: HlffVariant,
    }
    impl crate::eval::BatchPredictor for FusedTimer<'_> {
        fn predict_batch(&self, inputs: &TensorBatch) -> Result<TensorBatch, NnError> {
            let fused = match self.key {
                "lf" => build_lf(&self.models, inputs),
                "ahl" => build_ahl(self.models[0], self.models[1], inputs),
                "mhl" => build_mhl(self.models[0], self.models[1], inputs),
                "hlff" => build_hlff(
                    self.models[0],
                    self.models[1],
                    self.models[2],
                    self.models[3],
                    inputs,
                    self.variant,
                ),
                _ => unreachable!(),
            };
            match fused {
                Ok(rows) => {
                    let mut data = Vec::with_capacity(rows.len() * 7);
                    for r in &rows {
                        data.extend_from_slice(&r.pose.to_vector());
                    }
                    Ok(TensorBatch::new(vec![rows.len(), 7], data).expect("rows are 7-wide"))
                }
                // Timing only; fusion failures surface in the main path.
                Err(_) => Ok(TensorBatch::zeros(vec![inputs.batch_size(), 7])),
            }
        }
    }

    for (key, display, poses) in classes {
        let stats = pose_error_stats(&poses, &data.test_gt)
            .map_err(|e| PipelineError::Eval { stage: "evaluate".into(), source: e })?;
        let mapst = if config.report.measure_timing {
            let measured = match key {
                "uni-a" => measure_mapst(&uni_a, &data.test.inputs, config.report.timing_reps),
                "uni-b" => measure_mapst(&uni_b, &data.test.inputs, config.report.timing_reps),
                "aef-a" => measure_mapst(&aef_a, &data.test.inputs, config.report.timing_reps),
                "aef-b" => measure_mapst(&aef_b, &data.test.inputs, config.report.timing_reps),
                "mef-a" => measure_mapst(&mef_a, &data.test.inputs, config.report.timing_reps),
                "mef-b" => measure_mapst(&mef_b, &data.test.inputs, config.report.timing_reps),
                "lf" => measure_mapst(
                    &FusedTimer { key: "lf", models: lf_refs.clone(), variant },
                    &data.test.inputs,
                    config.report.timing_reps,
                ),
                "ahl" => measure_mapst(
                    &FusedTimer { key: "ahl", models: vec![&aef_a, &aef_b], variant },
                    &data.test.inputs,
                    config.report.timing_reps,
                ),
                "mhl" => measure_mapst(
                    &FusedTimer { key: "mhl", models: vec![&mef_a, &mef_b], variant },
                    &data.test.inputs,
                    config.report.timing_reps,
                ),
                "hlff" => measure_mapst(
                    &FusedTimer { key: "hlff", models: vec![&aef_a, &aef_b, &mef_a, &mef_b], variant },
                    &data.test.inputs,
                    config.report.timing_reps,
                ),
                _ => unreachable!(),
            };
            Some(measured.map_err(|e| PipelineError::Eval { stage: "evaluate".into(), source: e })?)
        } else {
            None
        };
        reports.push(MetricsReport::from_stats(display, &stats, mapst));
        predictions.push((key.to_string(), poses));
        keys.push(key);
    }

    // Predictions CSVs and trajectory plots.
    let preds_dir = out_dir.join("predictions");
    for (key, poses) in &predictions {
        let mut csv = String::from("image_ref,tx,ty,tz,qw,qx,qy,qz\n");
        for (rec, p) in data.split.test.iter().zip(poses.iter()) {
            let v = p.to_vector();
            csv.push_str(&format!(
                "{},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9}\n",
                rec.image_ref, v[0], v[1], v[2], v[3], v[4], v[5], v[6]
            ));
        }
        let path = preds_dir.join(format!("{key}.csv"));
        write_text(&path, &csv)?;
        stage.record_output(out_dir, &path)?;

        let svg = crate::plot::trajectory_svg(&data.test_gt, poses);
        let svg_path = out_dir.join("plots").join(format!("{key}.svg"));
        write_text(&svg_path, &svg)?;
        stage.record_output(out_dir, &svg_path)?;
    }
    stage.finish();

    // Stage: reports.
    let mut stage = manifest.stage("report", &[]);
    let report_csv = render_report(&reports, ReportFormat::Csv);
    let report_md = render_report(&reports, ReportFormat::Markdown);
    write_text(&out_dir.join("report.csv"), &report_csv)?;
    write_text(&out_dir.join("report.md"), &report_md)?;
    stage.record_output(out_dir, &out_dir.join("report.csv"))?;
    stage.record_output(out_dir, &out_dir.join("report.md"))?;

    let baseline_row = keys
        .iter()
        .position(|k| *k == config.report.baseline)
        .ok_or_else(|| PipelineError::Config {
            reason: format!(
                "unknown baseline `{}`; valid keys: {}",
                config.report.baseline,
                keys.join(", ")
            ),
        })?;
    let others: Vec<&MetricsReport> =
        reports.iter().enumerate().filter(|(i, _)| *i != baseline_row).map(|(_, r)| r).collect();
    let improvement = improvement_table(&reports[baseline_row], &others)
        .map_err(|e| PipelineError::Eval { stage: "report".into(), source: e })?;
    write_text(
        &out_dir.join("improvement.csv"),
        &render_improvement(&improvement, ReportFormat::Csv),
    )?;
    write_text(
        &out_dir.join("improvement.md"),
        &render_improvement(&improvement, ReportFormat::Markdown),
    )?;
    stage.record_output(out_dir, &out_dir.join("improvement.csv"))?;
    stage.record_output(out_dir, &out_dir.join("improvement.md"))?;
    stage.finish();

    manifest
        .audit_split_isolation()
        .map_err(|reason| PipelineError::Config { reason })?;
    let manifest_json =
        serde_json::to_string_pretty(&manifest).expect("manifest serialization cannot fail");
    write_text(&out_dir.join("run_manifest.json"), &manifest_json)?;

    Ok(PipelineOutcome { reports, manifest, output_dir: out_dir.clone() })
}
