//! Network building blocks: convolution, dense, pooling, and dropout.
//!
//! Layers operate on flat per-sample slices; the model drives batch iteration
//! and owns the activation traces needed for the backward pass.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn he_uniform(rng: &mut ChaCha8Rng, fan_in: usize, n: usize) -> Vec<f64> {
    let limit = (6.0 / fan_in as f64).sqrt();
    (0..n).map(|_| rng.gen_range(-limit..limit)).collect()
}

/// Fully connected layer; weights are `(out_features, in_features)` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub in_features: usize,
    pub out_features: usize,
}

impl Dense {
    pub fn init(in_features: usize, out_features: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            weight: he_uniform(rng, in_features, in_features * out_features),
            bias: vec![0.0; out_features],
            in_features,
            out_features,
        }
    }

    pub fn same_shape(&self, other: &Dense) -> bool {
        self.in_features == other.in_features && self.out_features == other.out_features
    }

    pub fn forward(&self, x: &[f64], out: &mut [f64]) {
        for (o, out_v) in out.iter_mut().enumerate() {
            let row = &self.weight[o * self.in_features..(o + 1) * self.in_features];
            let mut acc = self.bias[o];
            for (w, xv) in row.iter().zip(x.iter()) {
                acc += w * xv;
            }
            *out_v = acc;
        }
    }

    /// Accumulates parameter and input gradients for one sample.
    pub fn backward(
        &self,
        x: &[f64],
        grad_out: &[f64],
        grad_in: &mut [f64],
        grad_w: &mut [f64],
        grad_b: &mut [f64],
    ) {
        grad_in.fill(0.0);
        for (o, &g) in grad_out.iter().enumerate() {
            grad_b[o] += g;
            let row = &self.weight[o * self.in_features..(o + 1) * self.in_features];
            let grow = &mut grad_w[o * self.in_features..(o + 1) * self.in_features];
            for i in 0..self.in_features {
                grow[i] += g * x[i];
                grad_in[i] += g * row[i];
            }
        }
    }
}

/// 2-D convolution with square kernel, zero padding, and ReLU fused on top.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub weight: Vec<f64>, // (out_ch, in_ch, k, k)
    pub bias: Vec<f64>,   // (out_ch)
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn init(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        Self {
            weight: he_uniform(rng, fan_in, out_ch * fan_in),
            bias: vec![0.0; out_ch],
            in_ch,
            out_ch,
            kernel,
            stride,
            padding,
        }
    }

    pub fn out_hw(&self, in_hw: usize) -> usize {
        (in_hw + 2 * self.padding - self.kernel) / self.stride + 1
    }

    /// Convolution followed by ReLU for one sample.
    /// `x` is `(in_ch, in_hw, in_hw)`, `out` is `(out_ch, out_hw, out_hw)`.
    pub fn forward_relu(&self, x: &[f64], in_hw: usize, out: &mut [f64]) {
        let out_hw = self.out_hw(in_hw);
        let k = self.kernel;
        for oc in 0..self.out_ch {
            let woc = &self.weight[oc * self.in_ch * k * k..(oc + 1) * self.in_ch * k * k];
            for oy in 0..out_hw {
                for ox in 0..out_hw {
                    let mut acc = self.bias[oc];
                    for ic in 0..self.in_ch {
                        let xc = &x[ic * in_hw * in_hw..(ic + 1) * in_hw * in_hw];
                        let wic = &woc[ic * k * k..(ic + 1) * k * k];
                        for ky in 0..k {
                            let iy = (oy * self.stride + ky).wrapping_sub(self.padding);
                            if iy >= in_hw {
                                continue;
                            }
                            let xrow = &xc[iy * in_hw..(iy + 1) * in_hw];
                            let wrow = &wic[ky * k..(ky + 1) * k];
                            for (kx, &w) in wrow.iter().enumerate() {
                                let ix = (ox * self.stride + kx).wrapping_sub(self.padding);
                                if ix < in_hw {
                                    acc += w * xrow[ix];
                                }
                            }
                        }
                    }
                    out[(oc * out_hw + oy) * out_hw + ox] = acc.max(0.0);
                }
            }
        }
    }

    /// Backward through ReLU and convolution for one sample.
    /// `post` is the forward output (post-ReLU), used as the ReLU mask.
    #[allow(clippy::too_many_arguments)]
    pub fn backward_relu(
        &self,
        x: &[f64],
        post: &[f64],
        grad_out: &[f64],
        in_hw: usize,
        grad_in: &mut [f64],
        grad_w: &mut [f64],
        grad_b: &mut [f64],
    ) {
        let out_hw = self.out_hw(in_hw);
        let k = self.kernel;
        grad_in.fill(0.0);
        for oc in 0..self.out_ch {
            let woc = &self.weight[oc * self.in_ch * k * k..(oc + 1) * self.in_ch * k * k];
            let gwoc = &mut grad_w[oc * self.in_ch * k * k..(oc + 1) * self.in_ch * k * k];
            for oy in 0..out_hw {
                for ox in 0..out_hw {
                    let idx = (oc * out_hw + oy) * out_hw + ox;
                    if post[idx] <= 0.0 {
                        continue;
                    }
                    let g = grad_out[idx];
                    grad_b[oc] += g;
                    for ic in 0..self.in_ch {
                        let base_x = ic * in_hw * in_hw;
                        let base_w = ic * k * k;
                        for ky in 0..k {
                            let iy = (oy * self.stride + ky).wrapping_sub(self.padding);
                            if iy >= in_hw {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * self.stride + kx).wrapping_sub(self.padding);
                                if ix >= in_hw {
                                    continue;
                                }
                                let xi = base_x + iy * in_hw + ix;
                                let wi = base_w + ky * k + kx;
                                gwoc[wi] += g * x[xi];
                                grad_in[xi] += g * woc[wi];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Spatial mean per channel: `(c, hw, hw)` down to `(c)`.
pub fn global_avg_pool(x: &[f64], channels: usize, hw: usize, out: &mut [f64]) {
    let area = hw * hw;
    for c in 0..channels {
        let s: f64 = x[c * area..(c + 1) * area].iter().sum();
        out[c] = s / area as f64;
    }
}

pub fn global_avg_pool_backward(
    grad_out: &[f64],
    channels: usize,
    hw: usize,
    grad_in: &mut [f64],
) {
    let area = hw * hw;
    for c in 0..channels {
        let g = grad_out[c] / area as f64;
        grad_in[c * area..(c + 1) * area].fill(g);
    }
}

/// Non-overlapping 1-D average pooling over a feature vector.
pub fn avg_pool_1d(x: &[f64], window: usize, out: &mut [f64]) {
    for (j, out_v) in out.iter_mut().enumerate() {
        let s: f64 = x[j * window..(j + 1) * window].iter().sum();
        *out_v = s / window as f64;
    }
}

pub fn avg_pool_1d_backward(grad_out: &[f64], window: usize, grad_in: &mut [f64]) {
    for (j, &g) in grad_out.iter().enumerate() {
        let gv = g / window as f64;
        grad_in[j * window..(j + 1) * window].fill(gv);
    }
}

/// Samples an inverted-dropout mask of zeros and ones with keep rate `1 - rate`.
pub fn dropout_mask(rate: f64, len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..len).map(|_| if rng.gen::<f64>() < rate { 0.0 } else { 1.0 }).collect()
}

/// Applies a dropout mask with inverted scaling so eval needs no rescale.
pub fn apply_dropout(x: &mut [f64], mask: &[f64], rate: f64) {
    let scale = 1.0 / (1.0 - rate);
    for (v, m) in x.iter_mut().zip(mask.iter()) {
        *v *= m * scale;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;

    #[test]
    fn dense_forward_matches_manual() {
        let d = Dense {
            weight: vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
            bias: vec![0.5, -0.5],
            in_features: 3,
            out_features: 2,
        };
        let mut out = [0.0; 2];
        d.forward(&[1.0, 1.0, 1.0], &mut out);
        assert_eq!(out, [6.5, 14.5]);
    }

    #[test]
    fn conv_identity_kernel_passthrough() {
        // 1x1 kernel, stride 1, single channel, unit weight: conv is ReLU(x).
        let c = Conv2d {
            weight: vec![1.0],
            bias: vec![0.0],
            in_ch: 1,
            out_ch: 1,
            kernel: 1,
            stride: 1,
            padding: 0,
        };
        let x = [1.0, -2.0, 3.0, -4.0];
        let mut out = [0.0; 4];
        c.forward_relu(&x, 2, &mut out);
        assert_eq!(out, [1.0, 0.0, 3.0, 0.0]);
    }

    #[test]
    fn conv_shapes_follow_stride_and_padding() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = Conv2d::init(3, 8, 3, 2, 1, &mut rng);
        assert_eq!(c.out_hw(16), 8);
        assert_eq!(c.out_hw(8), 4);
        assert_eq!(c.out_hw(2), 1);
    }

    #[test]
    fn pools_average_and_spread() {
        let x = [1.0, 3.0, 5.0, 7.0, 2.0, 2.0, 2.0, 2.0];
        let mut out = [0.0; 2];
        global_avg_pool(&x, 2, 2, &mut out);
        assert_eq!(out, [4.0, 2.0]);
        let mut gi = [0.0; 8];
        global_avg_pool_backward(&[4.0, 8.0], 2, 2, &mut gi);
        assert_eq!(gi, [1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0]);

        let mut p = [0.0; 2];
        avg_pool_1d(&[1.0, 2.0, 3.0, 5.0], 2, &mut p);
        assert_eq!(p, [1.5, 4.0]);
    }

    #[test]
    fn dropout_rate_within_three_sigma() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let trials = 10_000;
        let mask = dropout_mask(0.5, trials, &mut rng);
        let zeros = mask.iter().filter(|&&m| m == 0.0).count() as f64;
        let sigma = (trials as f64 * 0.25).sqrt();
        assert!((zeros - trials as f64 * 0.5).abs() < 3.0 * sigma);
    }

    #[test]
    fn he_init_is_seed_deterministic_and_bounded() {
        let a = Dense::init(32, 64, &mut ChaCha8Rng::seed_from_u64(5));
        let b = Dense::init(32, 64, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a.weight, b.weight);
        let limit = (6.0f64 / 32.0).sqrt();
        assert!(a.weight.iter().all(|w| w.abs() < limit));
        assert!(a.bias.iter().all(|&b| b == 0.0));
        let mean: f64 = a.weight.iter().sum::<f64>() / a.weight.len() as f64;
        assert_abs_diff_eq!(mean, 0.0, epsilon = 0.02);
    }
}
