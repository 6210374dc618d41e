//! Seed-deterministic Adam training of the pose regressor on the stable
//! uncertainty-weighted loss.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::adam::{adam_step, AdamConfig, AdamState};
use super::layers::dropout_mask;
use super::loss::{loss_stable_grad, LossNorm};
use super::model::{NnError, PoseNetModel};
use super::tensor::{ShapeMismatch, TensorBatch};

/// Training hyperparameters. Defaults: learning rate 0.01, batch size 34,
/// dropout 0.5, Adam.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub dropout_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub loss_norm: LossNorm,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            batch_size: 34,
            dropout_rate: 0.5,
            epochs: 200,
            seed: 0,
            loss_norm: LossNorm::L1,
        }
    }
}

/// Preprocessed training tensors: network inputs and `(n, 7)` pose targets.
#[derive(Debug, Clone)]
pub struct TrainSet {
    pub inputs: TensorBatch,
    pub targets: TensorBatch,
}

impl TrainSet {
    pub fn new(inputs: TensorBatch, targets: TensorBatch) -> Result<Self, ShapeMismatch> {
        if targets.shape().len() != 2
            || targets.shape()[1] != 7
            || targets.shape()[0] != inputs.shape()[0]
        {
            return Err(ShapeMismatch {
                expected: format!("targets ({}, 7)", inputs.shape()[0]),
                got: format!("{:?}", targets.shape()),
            });
        }
        Ok(Self { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.batch_size()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug)]
pub enum TrainError {
    EmptyDataset,
    /// The loss became non-finite.
    Diverged { epoch: usize },
    Nn(NnError),
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::EmptyDataset => write!(f, "training dataset is empty"),
            TrainError::Diverged { epoch } => {
                write!(f, "training diverged: non-finite loss at epoch {epoch}")
            }
            TrainError::Nn(e) => e.fmt(f),
        }
    }
}

impl std::error::Error for TrainError {}

impl From<NnError> for TrainError {
    fn from(e: NnError) -> Self {
        TrainError::Nn(e)
    }
}

impl From<ShapeMismatch> for TrainError {
    fn from(e: ShapeMismatch) -> Self {
        TrainError::Nn(NnError::Shape(e))
    }
}

/// Per-epoch mean training loss.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub loss_history: Vec<f64>,
}

/// Trains the model in place. Deterministic for a fixed seed: shuffling and
/// dropout masks come from one seeded stream, and all reductions are ordered.
pub fn train(
    model: &mut PoseNetModel,
    data: &TrainSet,
    cfg: &TrainConfig,
) -> Result<TrainReport, TrainError> {
    let n = data.len();
    if n == 0 {
        return Err(TrainError::EmptyDataset);
    }
    assert!(cfg.batch_size > 0, "batch size must be positive");
    model.head.dropout_rate = cfg.dropout_rate;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(&model.param_sizes());
    let adam_cfg = AdamConfig::with_lr(cfg.learning_rate);
    let mut indices: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        indices.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in indices.chunks(cfg.batch_size) {
            let xb = data.inputs.gather(chunk);
            let yb = data.targets.gather(chunk);
            let masks = dropout_mask(
                cfg.dropout_rate,
                chunk.len() * model.backbone.feature_dim,
                &mut rng,
            );
            let trace = model.forward_trace(&xb, Some(masks))?;
            let (loss, grad_pred, gs_x, gs_q) =
                loss_stable_grad(trace.output(), &yb, model.s_x, model.s_q, cfg.loss_norm)?;
            if !loss.is_finite() {
                return Err(TrainError::Diverged { epoch });
            }
            let mut grads = model.backward(&trace, &grad_pred)?;
            let k = grads.tensors.len();
            grads.tensors[k - 2][0] = gs_x;
            grads.tensors[k - 1][0] = gs_q;
            let grad_slices: Vec<&[f64]> =
                grads.tensors.iter().map(|t| t.as_slice()).collect();
            adam_step(&mut model.param_slices_mut(), &grad_slices, &mut adam, &adam_cfg);
            epoch_loss += loss * chunk.len() as f64;
        }
        history.push(epoch_loss / n as f64);
    }

    Ok(TrainReport { loss_history: history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::model::BackboneId;
    use rand::Rng;

    fn toy_set(n: usize, seed: u64) -> TrainSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hw = 16;
        let mut inputs = Vec::with_capacity(n * 3 * hw * hw);
        let mut targets = Vec::with_capacity(n * 7);
        for _ in 0..n {
            let level: f64 = rng.gen_range(0.0..1.0);
            for _ in 0..3 * hw * hw {
                inputs.push(level + rng.gen_range(-0.05..0.05));
            }
            targets.extend_from_slice(&[level, -level, 0.5, 1.0, 0.0, 0.0, 0.0]);
        }
        TrainSet::new(
            TensorBatch::new(vec![n, 3, hw, hw], inputs).unwrap(),
            TensorBatch::new(vec![n, 7], targets).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let mut model = PoseNetModel::init(BackboneId::A, 3, 16, 0);
        let empty = TrainSet::new(
            TensorBatch::zeros(vec![0, 3, 16, 16]),
            TensorBatch::zeros(vec![0, 7]),
        )
        .unwrap();
        assert!(matches!(
            train(&mut model, &empty, &TrainConfig::default()),
            Err(TrainError::EmptyDataset)
        ));
    }

    #[test]
    fn zero_epochs_leaves_model_unchanged() {
        let mut model = PoseNetModel::init(BackboneId::A, 3, 16, 1);
        let before = model.clone();
        let cfg = TrainConfig { epochs: 0, ..TrainConfig::default() };
        let report = train(&mut model, &toy_set(8, 3), &cfg).unwrap();
        assert!(report.loss_history.is_empty());
        assert_eq!(model, before);
    }

    #[test]
    fn same_seed_trains_to_identical_weights() {
        let cfg = TrainConfig { epochs: 3, batch_size: 4, ..TrainConfig::default() };
        let data = toy_set(12, 5);
        let mut m1 = PoseNetModel::init(BackboneId::A, 3, 16, 2);
        let mut m2 = PoseNetModel::init(BackboneId::A, 3, 16, 2);
        let r1 = train(&mut m1, &data, &cfg).unwrap();
        let r2 = train(&mut m2, &data, &cfg).unwrap();
        assert_eq!(r1.loss_history, r2.loss_history);
        for (a, b) in m1.param_slices().iter().zip(m2.param_slices().iter()) {
            assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn loss_decreases_on_learnable_toy_data() {
        let mut model = PoseNetModel::init(BackboneId::A, 3, 16, 3);
        let cfg = TrainConfig {
            epochs: 40,
            batch_size: 8,
            dropout_rate: 0.1,
            ..TrainConfig::default()
        };
        let report = train(&mut model, &toy_set(32, 7), &cfg).unwrap();
        assert_eq!(report.loss_history.len(), 40);
        let first = report.loss_history[0];
        let last = *report.loss_history.last().unwrap();
        assert!(last < first, "loss did not improve: {first} -> {last}");
    }
}
