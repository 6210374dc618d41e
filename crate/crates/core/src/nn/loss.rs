//! Pose regression losses: fixed-weight combination, homoscedastic
//! uncertainty weighting, and its stable log-variance form.
//!
//! A batch loss splits each 7-vector into the 3-dim translation block and the
//! 4-dim quaternion block, takes the residual norm per block per sample, and
//! averages over the batch, giving the pair `(L_x, L_q)` the three objective
//! forms combine.

use std::fmt;

use super::tensor::{ShapeMismatch, TensorBatch};

/// Residual norm applied per block; the default is L1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossNorm {
    #[default]
    L1,
    L2,
}

impl LossNorm {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l1" => Some(LossNorm::L1),
            "l2" => Some(LossNorm::L2),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LossNorm::L1 => "l1",
            LossNorm::L2 => "l2",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LossError {
    NonPositiveSigma { sigma_x: f64, sigma_q: f64 },
    Shape(ShapeMismatch),
}

impl fmt::Display for LossError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossError::NonPositiveSigma { sigma_x, sigma_q } => {
                write!(f, "sigma values must be positive, got ({sigma_x}, {sigma_q})")
            }
            LossError::Shape(s) => s.fmt(f),
        }
    }
}

impl std::error::Error for LossError {}

impl From<ShapeMismatch> for LossError {
    fn from(s: ShapeMismatch) -> Self {
        LossError::Shape(s)
    }
}

fn check_pose_batches(pred: &TensorBatch, gt: &TensorBatch) -> Result<usize, ShapeMismatch> {
    let ok = pred.shape().len() == 2
        && pred.shape()[1] == 7
        && gt.shape() == pred.shape();
    if !ok {
        return Err(ShapeMismatch {
            expected: "matching (n, 7) batches".into(),
            got: format!("{:?} vs {:?}", pred.shape(), gt.shape()),
        });
    }
    Ok(pred.batch_size())
}

fn block_norm(res: &[f64], norm: LossNorm) -> f64 {
    match norm {
        LossNorm::L1 => res.iter().map(|r| r.abs()).sum(),
        LossNorm::L2 => res.iter().map(|r| r * r).sum::<f64>().sqrt(),
    }
}

/// Batch-mean residual norms `(L_x, L_q)` over the translation and quaternion
/// blocks of `(n, 7)` pose batches.
pub fn block_losses(
    pred: &TensorBatch,
    gt: &TensorBatch,
    norm: LossNorm,
) -> Result<(f64, f64), ShapeMismatch> {
    let n = check_pose_batches(pred, gt)?;
    let mut lx = 0.0;
    let mut lq = 0.0;
    for i in 0..n {
        let p = pred.sample(i);
        let g = gt.sample(i);
        let rt: Vec<f64> = (0..3).map(|j| p[j] - g[j]).collect();
        let rq: Vec<f64> = (3..7).map(|j| p[j] - g[j]).collect();
        lx += block_norm(&rt, norm);
        lq += block_norm(&rq, norm);
    }
    Ok((lx / n as f64, lq / n as f64))
}

/// Fixed-weight objective `L_x + beta * L_q`.
///
/// `beta` balances the two blocks and must be positive; it is only used by the
/// comparison path, training uses [`loss_stable`].
pub fn loss_beta(
    pred: &TensorBatch,
    gt: &TensorBatch,
    beta: f64,
    norm: LossNorm,
) -> Result<f64, ShapeMismatch> {
    debug_assert!(beta > 0.0, "beta must be positive");
    let (lx, lq) = block_losses(pred, gt, norm)?;
    Ok(lx + beta * lq)
}

/// Homoscedastic-uncertainty objective
/// `L_x/sigma_x^2 + log sigma_x^2 + L_q/sigma_q^2 + log sigma_q^2`.
pub fn loss_homoscedastic(
    pred: &TensorBatch,
    gt: &TensorBatch,
    sigma_x: f64,
    sigma_q: f64,
    norm: LossNorm,
) -> Result<f64, LossError> {
    if sigma_x <= 0.0 || sigma_q <= 0.0 {
        return Err(LossError::NonPositiveSigma { sigma_x, sigma_q });
    }
    let (lx, lq) = block_losses(pred, gt, norm)?;
    let vx = sigma_x * sigma_x;
    let vq = sigma_q * sigma_q;
    Ok(lx / vx + vx.ln() + lq / vq + vq.ln())
}

/// Stable log-variance form `L_x*exp(-s_x) + s_x + L_q*exp(-s_q) + s_q`,
/// identical to [`loss_homoscedastic`] under `s = log sigma^2`.
pub fn loss_stable(
    pred: &TensorBatch,
    gt: &TensorBatch,
    s_x: f64,
    s_q: f64,
    norm: LossNorm,
) -> Result<f64, ShapeMismatch> {
    let (lx, lq) = block_losses(pred, gt, norm)?;
    Ok(lx * (-s_x).exp() + s_x + lq * (-s_q).exp() + s_q)
}

/// Value and gradients of [`loss_stable`]: the gradient with respect to the
/// predictions plus the scalar gradients for `s_x` and `s_q`.
pub fn loss_stable_grad(
    pred: &TensorBatch,
    gt: &TensorBatch,
    s_x: f64,
    s_q: f64,
    norm: LossNorm,
) -> Result<(f64, TensorBatch, f64, f64), ShapeMismatch> {
    let n = check_pose_batches(pred, gt)?;
    let wx = (-s_x).exp();
    let wq = (-s_q).exp();
    let inv_n = 1.0 / n as f64;
    let mut grad = TensorBatch::zeros(pred.shape().to_vec());
    let mut lx = 0.0;
    let mut lq = 0.0;
    for i in 0..n {
        let p = pred.sample(i);
        let g = gt.sample(i);
        let res: Vec<f64> = p.iter().zip(g.iter()).map(|(a, b)| a - b).collect();
        let gr = grad.sample_mut(i);
        match norm {
            LossNorm::L1 => {
                for j in 0..3 {
                    lx += res[j].abs() * inv_n;
                    gr[j] = res[j].signum() * inv_n * wx;
                    if res[j] == 0.0 {
                        gr[j] = 0.0;
                    }
                }
                for j in 3..7 {
                    lq += res[j].abs() * inv_n;
                    gr[j] = res[j].signum() * inv_n * wq;
                    if res[j] == 0.0 {
                        gr[j] = 0.0;
                    }
                }
            }
            LossNorm::L2 => {
                let nt = block_norm(&res[0..3], LossNorm::L2);
                let nq = block_norm(&res[3..7], LossNorm::L2);
                lx += nt * inv_n;
                lq += nq * inv_n;
                for j in 0..3 {
                    gr[j] = if nt > 0.0 { res[j] / nt * inv_n * wx } else { 0.0 };
                }
                for j in 3..7 {
                    gr[j] = if nq > 0.0 { res[j] / nq * inv_n * wq } else { 0.0 };
                }
            }
        }
    }
    let value = lx * wx + s_x + lq * wq + s_q;
    let gs_x = -lx * wx + 1.0;
    let gs_q = -lq * wq + 1.0;
    Ok((value, grad, gs_x, gs_q))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn batch(rows: &[[f64; 7]]) -> TensorBatch {
        TensorBatch::new(vec![rows.len(), 7], rows.concat()).unwrap()
    }

    fn random_batch(rng: &mut ChaCha8Rng, n: usize) -> TensorBatch {
        let data: Vec<f64> = (0..n * 7).map(|_| rng.gen_range(-2.0..2.0)).collect();
        TensorBatch::new(vec![n, 7], data).unwrap()
    }

    #[test]
    fn zero_at_equal_predictions() {
        let b = batch(&[[1.0, 2.0, 3.0, 0.5, 0.5, 0.5, 0.5]]);
        assert_eq!(loss_beta(&b, &b, 500.0, LossNorm::L1).unwrap(), 0.0);
        assert_eq!(loss_stable(&b, &b, 0.0, 0.0, LossNorm::L1).unwrap(), 0.0);
        assert_eq!(
            loss_homoscedastic(&b, &b, 1.0, 1.0, LossNorm::L1).unwrap(),
            0.0
        );
    }

    #[test]
    fn beta_weighting_direct_substitution() {
        // Single sample with L_x = 2 and L_q = 3 gives 2 + 500*3 = 1502.
        let gt = batch(&[[0.0; 7]]);
        let pred = batch(&[[2.0, 0.0, 0.0, 3.0, 0.0, 0.0, 0.0]]);
        assert_eq!(loss_beta(&pred, &gt, 500.0, LossNorm::L1).unwrap(), 1502.0);
    }

    #[test]
    fn beta_matches_per_sample_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pred = random_batch(&mut rng, 17);
        let gt = random_batch(&mut rng, 17);
        let mut expect = 0.0;
        for i in 0..17 {
            let p = pred.sample(i);
            let g = gt.sample(i);
            let lx: f64 = (0..3).map(|j| (p[j] - g[j]).abs()).sum();
            let lq: f64 = (3..7).map(|j| (p[j] - g[j]).abs()).sum();
            expect += lx + 500.0 * lq;
        }
        expect /= 17.0;
        let got = loss_beta(&pred, &gt, 500.0, LossNorm::L1).unwrap();
        assert_abs_diff_eq!(got, expect, epsilon = 1e-9);
    }

    #[test]
    fn unit_sigma_reduces_to_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pred = random_batch(&mut rng, 9);
        let gt = random_batch(&mut rng, 9);
        let (lx, lq) = block_losses(&pred, &gt, LossNorm::L1).unwrap();
        let loss = loss_homoscedastic(&pred, &gt, 1.0, 1.0, LossNorm::L1).unwrap();
        assert_abs_diff_eq!(loss, lx + lq, epsilon = 1e-12);
    }

    #[test]
    fn non_positive_sigma_is_rejected() {
        let b = batch(&[[0.0; 7]]);
        assert!(matches!(
            loss_homoscedastic(&b, &b, 0.0, 1.0, LossNorm::L1),
            Err(LossError::NonPositiveSigma { .. })
        ));
        assert!(matches!(
            loss_homoscedastic(&b, &b, 1.0, -2.0, LossNorm::L1),
            Err(LossError::NonPositiveSigma { .. })
        ));
    }

    #[test]
    fn stable_form_substitution_cases() {
        let gt = batch(&[[0.0; 7]]);
        // Zero residuals: value is s_x + s_q.
        assert_abs_diff_eq!(
            loss_stable(&gt, &gt, 0.0, -3.0, LossNorm::L1).unwrap(),
            -3.0,
            epsilon = 1e-15
        );
        // s_x = s_q = 0 reduces to L_x + L_q.
        let pred = batch(&[[1.0, 1.0, 0.0, 2.0, 0.0, 0.0, 0.0]]);
        assert_abs_diff_eq!(
            loss_stable(&pred, &gt, 0.0, 0.0, LossNorm::L1).unwrap(),
            4.0,
            epsilon = 1e-15
        );
    }

    #[test]
    fn stable_equals_homoscedastic_under_log_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for norm in [LossNorm::L1, LossNorm::L2] {
            for _ in 0..1000 {
                let pred = random_batch(&mut rng, 5);
                let gt = random_batch(&mut rng, 5);
                let sigma_x: f64 = rng.gen_range(0.05..4.0);
                let sigma_q: f64 = rng.gen_range(0.05..4.0);
                let s_x = (sigma_x * sigma_x).ln();
                let s_q = (sigma_q * sigma_q).ln();
                let a = loss_stable(&pred, &gt, s_x, s_q, norm).unwrap();
                let b = loss_homoscedastic(&pred, &gt, sigma_x, sigma_q, norm).unwrap();
                assert_abs_diff_eq!(a, b, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn losses_nonnegative_for_nonnegative_s() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let pred = random_batch(&mut rng, 3);
            let gt = random_batch(&mut rng, 3);
            let s_x = rng.gen_range(0.0..2.0);
            let s_q = rng.gen_range(0.0..2.0);
            assert!(loss_stable(&pred, &gt, s_x, s_q, LossNorm::L1).unwrap() >= 0.0);
        }
    }

    #[test]
    fn grad_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for norm in [LossNorm::L1, LossNorm::L2] {
            let mut pred = random_batch(&mut rng, 4);
            let gt = random_batch(&mut rng, 4);
            let (_, grad, gs_x, gs_q) = loss_stable_grad(&pred, &gt, 0.3, -1.2, norm).unwrap();
            let h = 1e-6;
            for idx in 0..pred.data().len() {
                let orig = pred.data()[idx];
                pred.data_mut()[idx] = orig + h;
                let up = loss_stable(&pred, &gt, 0.3, -1.2, norm).unwrap();
                pred.data_mut()[idx] = orig - h;
                let dn = loss_stable(&pred, &gt, 0.3, -1.2, norm).unwrap();
                pred.data_mut()[idx] = orig;
                let fd = (up - dn) / (2.0 * h);
                assert_abs_diff_eq!(grad.data()[idx], fd, epsilon = 1e-6);
            }
            let up = loss_stable(&pred, &gt, 0.3 + h, -1.2, norm).unwrap();
            let dn = loss_stable(&pred, &gt, 0.3 - h, -1.2, norm).unwrap();
            assert_abs_diff_eq!(gs_x, (up - dn) / (2.0 * h), epsilon = 1e-6);
            let up = loss_stable(&pred, &gt, 0.3, -1.2 + h, norm).unwrap();
            let dn = loss_stable(&pred, &gt, 0.3, -1.2 - h, norm).unwrap();
            assert_abs_diff_eq!(gs_q, (up - dn) / (2.0 * h), epsilon = 1e-6);
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let a = TensorBatch::new(vec![2, 7], vec![0.0; 14]).unwrap();
        let b = TensorBatch::new(vec![3, 7], vec![0.0; 21]).unwrap();
        assert!(block_losses(&a, &b, LossNorm::L1).is_err());
    }
}
