//! The pose-regression network: a convolutional feature extractor with a top
//! dense layer (the early-fusion target), and a dropout/pooling/dense
//! regressor head emitting the 7-coordinate pose, plus the learnable
//! log-variance loss weights.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{
    apply_dropout, avg_pool_1d, avg_pool_1d_backward, dropout_mask, global_avg_pool,
    global_avg_pool_backward, Conv2d, Dense,
};
use super::tensor::{ShapeMismatch, TensorBatch};

/// Which stand-in feature extractor a model uses.
///
/// `A` is a three-block stack (8/16/32 channels), `B` a four-block stack
/// (8/16/24/32). Both end in a fixed global-average adapter pool and a top
/// dense layer of identical shape so early fusion is well defined.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackboneId {
    A,
    B,
}

impl BackboneId {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_uppercase().as_str() {
            "A" => Some(BackboneId::A),
            "B" => Some(BackboneId::B),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            BackboneId::A => "A",
            BackboneId::B => "B",
        }
    }

    fn channel_plan(&self) -> &'static [usize] {
        match self {
            BackboneId::A => &[8, 16, 32],
            BackboneId::B => &[8, 16, 24, 32],
        }
    }
}

/// How a model's top dense layer was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Lineage {
    Unimodal,
    AddSewn,
    MultiplySewn,
}

impl Lineage {
    pub fn tag(&self) -> u8 {
        match self {
            Lineage::Unimodal => 0,
            Lineage::AddSewn => 1,
            Lineage::MultiplySewn => 2,
        }
    }

    pub fn from_tag(t: u8) -> Option<Self> {
        match t {
            0 => Some(Lineage::Unimodal),
            1 => Some(Lineage::AddSewn),
            2 => Some(Lineage::MultiplySewn),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Lineage::Unimodal => "unimodal",
            Lineage::AddSewn => "add-sewn",
            Lineage::MultiplySewn => "multiply-sewn",
        }
    }
}

/// Normalization constants captured at training time so a model file is
/// self-contained at inference.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelNorm {
    pub pose_mean: [f64; 3],
    pub pose_std: [f64; 3],
    pub pose_min: [f64; 3],
    pub pose_max: [f64; 3],
    pub image_mean: Vec<f64>,
    pub image_std: Vec<f64>,
}

/// Feature extractor: strided 3x3 convolution blocks, a global-average
/// adapter pool, and the top dense layer targeted by weight sewing.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub id: BackboneId,
    pub convs: Vec<Conv2d>,
    pub top_dense: Dense,
    pub in_channels: usize,
    pub input_hw: usize,
    pub feature_dim: usize,
}

impl Backbone {
    pub fn init(id: BackboneId, in_channels: usize, input_hw: usize, rng: &mut ChaCha8Rng) -> Self {
        let feature_dim = 64;
        let mut convs = Vec::new();
        let mut prev = in_channels;
        for &ch in id.channel_plan() {
            convs.push(Conv2d::init(prev, ch, 3, 2, 1, rng));
            prev = ch;
        }
        let flat = prev; // global average pool leaves one value per channel
        Self {
            id,
            convs,
            top_dense: Dense::init(flat, feature_dim, rng),
            in_channels,
            input_hw,
            feature_dim,
        }
    }

    /// Side lengths of every conv output, given the configured input.
    fn spatial_plan(&self) -> Vec<usize> {
        let mut hw = self.input_hw;
        self.convs
            .iter()
            .map(|c| {
                hw = c.out_hw(hw);
                hw
            })
            .collect()
    }
}

/// Dropout -> average pooling -> dense head mapping features to the 7-vector.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressorHead {
    pub dropout_rate: f64,
    pub pool_window: usize,
    pub output_dense: Dense,
}

impl RegressorHead {
    pub fn init(feature_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let pool_window = 2;
        assert_eq!(feature_dim % pool_window, 0);
        Self {
            dropout_rate: 0.5,
            pool_window,
            output_dense: Dense::init(feature_dim / pool_window, 7, rng),
        }
    }
}

/// Forward/backward errors of the network.
#[derive(Debug)]
pub enum NnError {
    Shape(ShapeMismatch),
    /// A gradient turned non-finite; the step must be aborted.
    NaNGradient,
}

impl fmt::Display for NnError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NnError::Shape(s) => s.fmt(f),
            NnError::NaNGradient => write!(f, "non-finite gradient; aborting step"),
        }
    }
}

impl std::error::Error for NnError {}

impl From<ShapeMismatch> for NnError {
    fn from(s: ShapeMismatch) -> Self {
        NnError::Shape(s)
    }
}

/// Whether dropout is active and quaternions stay raw (train) or dropout is
/// off and the quaternion block is renormalized (eval).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Activations retained for the backward pass.
pub struct ForwardTrace {
    input: TensorBatch,
    conv_outs: Vec<Vec<f64>>, // post-ReLU, per conv, batch-major
    pooled: Vec<f64>,         // (n, flat)
    top_out: Vec<f64>,        // (n, feature_dim) post-ReLU
    head_pooled: Vec<f64>,    // (n, feature_dim / window)
    masks: Option<Vec<f64>>,  // (n, feature_dim) of 0/1
    output: TensorBatch,      // (n, 7) raw
}

impl ForwardTrace {
    pub fn output(&self) -> &TensorBatch {
        &self.output
    }
}

/// Parameter gradients in [`PoseNetModel::param_order`] order.
pub struct Gradients {
    pub tensors: Vec<Vec<f64>>,
}

/// The full pose-regression model with learnable loss weights.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseNetModel {
    pub backbone: Backbone,
    pub head: RegressorHead,
    pub s_x: f64,
    pub s_q: f64,
    pub lineage: Lineage,
    pub norm: Option<ModelNorm>,
}

impl PoseNetModel {
    /// Seeded He-uniform initialization; `s_x = 0`, `s_q = -3`.
    pub fn init(id: BackboneId, in_channels: usize, input_hw: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = Backbone::init(id, in_channels, input_hw, &mut rng);
        let head = RegressorHead::init(backbone.feature_dim, &mut rng);
        Self { backbone, head, s_x: 0.0, s_q: -3.0, lineage: Lineage::Unimodal, norm: None }
    }

    /// Names of the parameter tensors, aligned with [`Self::param_slices`].
    pub fn param_order(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..self.backbone.convs.len() {
            names.push(format!("backbone.conv{i}.weight"));
            names.push(format!("backbone.conv{i}.bias"));
        }
        names.push("backbone.top_dense.weight".into());
        names.push("backbone.top_dense.bias".into());
        names.push("head.output_dense.weight".into());
        names.push("head.output_dense.bias".into());
        names.push("loss.s_x".into());
        names.push("loss.s_q".into());
        names
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for c in &self.backbone.convs {
            out.push(&c.weight);
            out.push(&c.bias);
        }
        out.push(&self.backbone.top_dense.weight);
        out.push(&self.backbone.top_dense.bias);
        out.push(&self.head.output_dense.weight);
        out.push(&self.head.output_dense.bias);
        out.push(std::slice::from_ref(&self.s_x));
        out.push(std::slice::from_ref(&self.s_q));
        out
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for c in &mut self.backbone.convs {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
        }
        out.push(&mut self.backbone.top_dense.weight);
        out.push(&mut self.backbone.top_dense.bias);
        out.push(&mut self.head.output_dense.weight);
        out.push(&mut self.head.output_dense.bias);
        out.push(std::slice::from_mut(&mut self.s_x));
        out.push(std::slice::from_mut(&mut self.s_q));
        out
    }

    pub fn param_sizes(&self) -> Vec<usize> {
        self.param_slices().iter().map(|s| s.len()).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.param_sizes().iter().sum()
    }

    fn check_input(&self, batch: &TensorBatch) -> Result<(), ShapeMismatch> {
        let b = &self.backbone;
        let want = [batch.shape().first().copied().unwrap_or(0), b.in_channels, b.input_hw, b.input_hw];
        if batch.shape().len() != 4 || batch.shape()[1..] != want[1..] {
            return Err(ShapeMismatch {
                expected: format!("(n, {}, {}, {})", b.in_channels, b.input_hw, b.input_hw),
                got: format!("{:?}", batch.shape()),
            });
        }
        Ok(())
    }

    /// Forward pass keeping the activation trace for [`Self::backward`].
    ///
    /// `masks` carries per-sample dropout masks (`n * feature_dim` zeros and
    /// ones); `None` runs the deterministic eval path with dropout off.
    pub fn forward_trace(
        &self,
        batch: &TensorBatch,
        masks: Option<Vec<f64>>,
    ) -> Result<ForwardTrace, NnError> {
        self.check_input(batch)?;
        let n = batch.batch_size();
        let b = &self.backbone;
        let plan = b.spatial_plan();
        let feature_dim = b.feature_dim;
        let flat = b.convs.last().map(|c| c.out_ch).unwrap_or(b.in_channels);
        if let Some(m) = &masks {
            if m.len() != n * feature_dim {
                return Err(NnError::Shape(ShapeMismatch {
                    expected: format!("{} mask values", n * feature_dim),
                    got: format!("{}", m.len()),
                }));
            }
        }

        let mut conv_outs: Vec<Vec<f64>> = Vec::with_capacity(b.convs.len());
        for (ci, conv) in b.convs.iter().enumerate() {
            let hw = plan[ci];
            conv_outs.push(vec![0.0; n * conv.out_ch * hw * hw]);
        }
        let mut pooled = vec![0.0; n * flat];
        let mut top_out = vec![0.0; n * feature_dim];
        let head_in = feature_dim / self.head.pool_window;
        let mut head_pooled = vec![0.0; n * head_in];
        let mut output = TensorBatch::zeros(vec![n, 7]);

        for s in 0..n {
            for (ci, conv) in b.convs.iter().enumerate() {
                let hw = plan[ci];
                let len = conv.out_ch * hw * hw;
                if ci == 0 {
                    let out = &mut conv_outs[0][s * len..(s + 1) * len];
                    conv.forward_relu(batch.sample(s), b.input_hw, out);
                } else {
                    let (prev, rest) = conv_outs.split_at_mut(ci);
                    let in_hw = plan[ci - 1];
                    let in_len = b.convs[ci - 1].out_ch * in_hw * in_hw;
                    conv.forward_relu(
                        &prev[ci - 1][s * in_len..(s + 1) * in_len],
                        in_hw,
                        &mut rest[0][s * len..(s + 1) * len],
                    );
                }
            }
            let last_hw = *plan.last().unwrap();
            let last_len = flat * last_hw * last_hw;
            let last = &conv_outs.last().unwrap()[s * last_len..(s + 1) * last_len];
            global_avg_pool(last, flat, last_hw, &mut pooled[s * flat..(s + 1) * flat]);
            let top = &mut top_out[s * feature_dim..(s + 1) * feature_dim];
            b.top_dense.forward(&pooled[s * flat..(s + 1) * flat], top);
            for v in top.iter_mut() {
                *v = v.max(0.0);
            }
        }

        let mut dropped = top_out.clone();
        if let Some(m) = &masks {
            for s in 0..n {
                apply_dropout(
                    &mut dropped[s * feature_dim..(s + 1) * feature_dim],
                    &m[s * feature_dim..(s + 1) * feature_dim],
                    self.head.dropout_rate,
                );
            }
        }
        for s in 0..n {
            avg_pool_1d(
                &dropped[s * feature_dim..(s + 1) * feature_dim],
                self.head.pool_window,
                &mut head_pooled[s * head_in..(s + 1) * head_in],
            );
            self.head
                .output_dense
                .forward(&head_pooled[s * head_in..(s + 1) * head_in], output.sample_mut(s));
        }

        Ok(ForwardTrace {
            input: batch.clone(),
            conv_outs,
            pooled,
            top_out,
            head_pooled,
            masks,
            output,
        })
    }

    /// Predicted poses, `(n, 7)`. Train mode draws fresh dropout masks from
    /// `rng`; eval mode is deterministic and renormalizes the quaternion block.
    pub fn forward(
        &self,
        batch: &TensorBatch,
        mode: Mode,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<TensorBatch, NnError> {
        let masks = match mode {
            Mode::Train => {
                let rng = rng.expect("train-mode forward requires an RNG for dropout");
                Some(dropout_mask(
                    self.head.dropout_rate,
                    batch.batch_size() * self.backbone.feature_dim,
                    rng,
                ))
            }
            Mode::Eval => None,
        };
        let trace = self.forward_trace(batch, masks)?;
        let mut out = trace.output;
        if mode == Mode::Eval {
            for s in 0..out.batch_size() {
                let row = out.sample_mut(s);
                let norm: f64 = row[3..7].iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > 1e-12 {
                    for v in row[3..7].iter_mut() {
                        *v /= norm;
                    }
                }
            }
        }
        Ok(out)
    }

    /// Backpropagates `grad_output` (d loss / d raw output, `(n, 7)`) through
    /// the trace; the returned tensors align with [`Self::param_order`], with
    /// zeros for `s_x`/`s_q` (their gradients come from the loss itself).
    pub fn backward(
        &self,
        trace: &ForwardTrace,
        grad_output: &TensorBatch,
    ) -> Result<Gradients, NnError> {
        if grad_output.shape() != trace.output.shape() {
            return Err(NnError::Shape(ShapeMismatch {
                expected: format!("{:?}", trace.output.shape()),
                got: format!("{:?}", grad_output.shape()),
            }));
        }
        let n = trace.output.batch_size();
        let b = &self.backbone;
        let plan = b.spatial_plan();
        let feature_dim = b.feature_dim;
        let flat = b.convs.last().map(|c| c.out_ch).unwrap_or(b.in_channels);
        let head_in = feature_dim / self.head.pool_window;

        let mut grads: Vec<Vec<f64>> =
            self.param_sizes().iter().map(|&s| vec![0.0; s]).collect();
        let n_convs = b.convs.len();
        let top_w_idx = 2 * n_convs;
        let head_w_idx = top_w_idx + 2;

        let mut g_head_pooled = vec![0.0; head_in];
        let mut g_dropped = vec![0.0; feature_dim];
        let mut g_pooled = vec![0.0; flat];

        for s in 0..n {
            // head dense
            {
                let (left, right) = grads.split_at_mut(head_w_idx + 1);
                self.head.output_dense.backward(
                    &trace.head_pooled[s * head_in..(s + 1) * head_in],
                    grad_output.sample(s),
                    &mut g_head_pooled,
                    &mut left[head_w_idx],
                    &mut right[0],
                );
            }
            // head pooling
            avg_pool_1d_backward(&g_head_pooled, self.head.pool_window, &mut g_dropped);
            // dropout
            if let Some(m) = &trace.masks {
                let scale = 1.0 / (1.0 - self.head.dropout_rate);
                for (g, mv) in g_dropped
                    .iter_mut()
                    .zip(m[s * feature_dim..(s + 1) * feature_dim].iter())
                {
                    *g *= mv * scale;
                }
            }
            // ReLU on top dense output
            for (g, &o) in g_dropped
                .iter_mut()
                .zip(trace.top_out[s * feature_dim..(s + 1) * feature_dim].iter())
            {
                if o <= 0.0 {
                    *g = 0.0;
                }
            }
            // top dense
            {
                let (left, right) = grads.split_at_mut(top_w_idx + 1);
                b.top_dense.backward(
                    &trace.pooled[s * flat..(s + 1) * flat],
                    &g_dropped,
                    &mut g_pooled,
                    &mut left[top_w_idx],
                    &mut right[0],
                );
            }
            // adapter pool
            let last_hw = *plan.last().unwrap();
            let mut g_spatial = vec![0.0; flat * last_hw * last_hw];
            global_avg_pool_backward(&g_pooled, flat, last_hw, &mut g_spatial);
            // conv stack, last to first
            let mut g_out = g_spatial;
            for ci in (0..n_convs).rev() {
                let conv = &b.convs[ci];
                let in_hw = if ci == 0 { b.input_hw } else { plan[ci - 1] };
                let x: &[f64] = if ci == 0 {
                    trace.input.sample(s)
                } else {
                    let hw = plan[ci - 1];
                    let len = b.convs[ci - 1].out_ch * hw * hw;
                    &trace.conv_outs[ci - 1][s * len..(s + 1) * len]
                };
                let hw = plan[ci];
                let len = conv.out_ch * hw * hw;
                let post = &trace.conv_outs[ci][s * len..(s + 1) * len];
                let mut g_in = vec![0.0; conv.in_ch * in_hw * in_hw];
                let (gw, gb) = {
                    let (left, right) = grads.split_at_mut(2 * ci + 1);
                    (&mut left[2 * ci], &mut right[0])
                };
                // split_at_mut above hands out the pair (weight, bias) for conv ci
                conv.backward_relu(x, post, &g_out, in_hw, &mut g_in, gw, gb);
                g_out = g_in;
            }
        }

        if grads.iter().any(|t| t.iter().any(|v| !v.is_finite())) {
            return Err(NnError::NaNGradient);
        }
        Ok(Gradients { tensors: grads })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn zero_input(n: usize, model: &PoseNetModel) -> TensorBatch {
        let hw = model.backbone.input_hw;
        TensorBatch::zeros(vec![n, model.backbone.in_channels, hw, hw])
    }

    #[test]
    fn output_shape_is_n_by_7() {
        let model = PoseNetModel::init(BackboneId::A, 3, 16, 1);
        let batch = zero_input(5, &model);
        let out = model.forward(&batch, Mode::Eval, None).unwrap();
        assert_eq!(out.shape(), &[5, 7]);
    }

    #[test]
    fn zero_weight_model_outputs_bias() {
        let mut model = PoseNetModel::init(BackboneId::A, 3, 16, 2);
        for slice in model.param_slices_mut() {
            slice.fill(0.0);
        }
        model.head.output_dense.bias = vec![1.0, 2.0, 3.0, 0.0, 3.0, 0.0, 4.0];
        let batch = zero_input(2, &model);

        let trace = model.forward_trace(&batch, None).unwrap();
        assert_eq!(trace.output().sample(0), &[1.0, 2.0, 3.0, 0.0, 3.0, 0.0, 4.0]);

        // Eval renormalizes the quaternion block to unit length.
        let out = model.forward(&batch, Mode::Eval, None).unwrap();
        let row = out.sample(1);
        assert_eq!(&row[0..3], &[1.0, 2.0, 3.0]);
        assert_abs_diff_eq!(row[3], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(row[4], 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(row[6], 0.8, epsilon = 1e-15);
    }

    #[test]
    fn eval_is_batch_size_invariant() {
        let model = PoseNetModel::init(BackboneId::B, 3, 16, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let hw = model.backbone.input_hw;
        let data: Vec<f64> =
            (0..3 * 3 * hw * hw).map(|_| rand::Rng::gen_range(&mut rng, 0.0..1.0)).collect();
        let batch = TensorBatch::new(vec![3, 3, hw, hw], data).unwrap();
        let single = batch.gather(&[1]);
        let full = model.forward(&batch, Mode::Eval, None).unwrap();
        let one = model.forward(&single, Mode::Eval, None).unwrap();
        for (a, b) in full.sample(1).iter().zip(one.sample(0).iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-9);
        }
    }

    #[test]
    fn wrong_input_shape_is_rejected() {
        let model = PoseNetModel::init(BackboneId::A, 3, 16, 4);
        let bad = TensorBatch::zeros(vec![1, 3, 8, 8]);
        assert!(matches!(
            model.forward(&bad, Mode::Eval, None),
            Err(NnError::Shape(_))
        ));
    }

    #[test]
    fn constant_loss_gives_zero_parameter_gradients() {
        let model = PoseNetModel::init(BackboneId::A, 3, 16, 5);
        let batch = zero_input(2, &model);
        let trace = model.forward_trace(&batch, None).unwrap();
        let zero_grad = TensorBatch::zeros(vec![2, 7]);
        let grads = model.backward(&trace, &zero_grad).unwrap();
        assert!(grads.tensors.iter().all(|t| t.iter().all(|&g| g == 0.0)));
    }

    #[test]
    fn backbones_share_top_dense_shape() {
        let a = PoseNetModel::init(BackboneId::A, 3, 16, 6);
        let b = PoseNetModel::init(BackboneId::B, 3, 16, 7);
        assert!(a.backbone.top_dense.same_shape(&b.backbone.top_dense));
        assert_eq!(a.backbone.feature_dim, 64);
        assert_eq!(b.backbone.feature_dim, 64);
    }

    #[test]
    fn dense_layer_closed_form_gradient() {
        // Linear layer y = Wx + b with squared loss L = sum((y - t)^2)/2:
        // dL/dW = (y - t) x^T, dL/db = (y - t).
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let d = Dense::init(4, 3, &mut rng);
        let x: Vec<f64> = (0..4).map(|i| 0.3 * i as f64 - 0.5).collect();
        let t = [0.2, -0.1, 0.4];
        let mut y = [0.0; 3];
        d.forward(&x, &mut y);
        let grad_out: Vec<f64> = y.iter().zip(t.iter()).map(|(a, b)| a - b).collect();
        let mut gi = vec![0.0; 4];
        let mut gw = vec![0.0; 12];
        let mut gb = vec![0.0; 3];
        d.backward(&x, &grad_out, &mut gi, &mut gw, &mut gb);
        for o in 0..3 {
            assert_abs_diff_eq!(gb[o], grad_out[o], epsilon = 1e-12);
            for i in 0..4 {
                assert_abs_diff_eq!(gw[o * 4 + i], grad_out[o] * x[i], epsilon = 1e-12);
            }
        }
    }
}
