//! Per-channel batch normalisation over `(n, h, w)`.

use super::pointwise::sum_f64;
use crate::par;
use crate::tensor::Tensor;

pub const BN_EPS: f32 = 1e-5;

/// State saved by a training-mode forward for the backward pass.
#[derive(Clone, Debug)]
pub struct BnSaved {
    /// Normalised input, same shape as `x`.
    pub xhat: Tensor,
    /// `1 / sqrt(var + eps)` per channel.
    pub inv_std: Vec<f32>,
}

/// Batch statistics observed by a training-mode forward.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f32>,
    /// Unbiased variance (`n / (n - 1)` correction), as used for running
    /// statistics.
    pub var: Vec<f32>,
}

/// Training-mode forward: normalises with batch statistics.
pub fn batch_norm_train(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> (Tensor, BnSaved, BatchStats) {
    let (n, c, h, w) = x.dims4();
    let count = (n * h * w) as f64;
    let plane = h * w;
    let xd = x.data();
    let stats: Vec<(f64, f64)> = par::map_range(c, |ch| {
        let planes = || (0..n).map(move |s| &xd[(s * c + ch) * plane..(s * c + ch + 1) * plane]);
        let mean = planes().map(sum_f64).sum::<f64>() / count;
        let mut lanes = [0.0f64; 8];
        for p in planes() {
            for c in p.chunks(8) {
                for (l, &v) in lanes.iter_mut().zip(c) {
                    *l += (v as f64 - mean) * (v as f64 - mean);
                }
            }
        }
        (mean, lanes.iter().sum::<f64>() / count)
    });
    let inv_std: Vec<f32> = stats
        .iter()
        .map(|&(_, var)| (1.0 / (var + BN_EPS as f64).sqrt()) as f32)
        .collect();
    let mut xhat = Tensor::zeros(x.shape());
    let mut y = Tensor::zeros(x.shape());
    let (g, b) = (gamma.data(), beta.data());
    {
        let xh = xhat.data_mut();
        let yd = y.data_mut();
        for (i, ((xhp, yp), xp)) in xh
            .chunks_mut(plane)
            .zip(yd.chunks_mut(plane))
            .zip(xd.chunks(plane))
            .enumerate()
        {
            let ch = i % c;
            let mean = stats[ch].0 as f32;
            for ((o, yo), &v) in xhp.iter_mut().zip(yp.iter_mut()).zip(xp) {
                *o = (v - mean) * inv_std[ch];
                *yo = *o * g[ch] + b[ch];
            }
        }
    }
    let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
    let batch = BatchStats {
        mean: stats.iter().map(|s| s.0 as f32).collect(),
        var: stats.iter().map(|s| (s.1 * unbias) as f32).collect(),
    };
    (y, BnSaved { xhat, inv_std }, batch)
}

/// Gradients of the training-mode forward: `(dx, dgamma, dbeta)`.
pub fn batch_norm_train_backward(dy: &Tensor, gamma: &Tensor, saved: &BnSaved) -> (Tensor, Tensor, Tensor) {
    let (n, c, h, w) = dy.dims4();
    let plane = h * w;
    let count = (n * plane) as f64;
    let dyd = dy.data();
    let xh = saved.xhat.data();
    let sums: Vec<(f64, f64)> = par::map_range(c, |ch| {
        let mut s_dy = 0.0f64;
        let mut lanes = [0.0f64; 8];
        for s in 0..n {
            let o = (s * c + ch) * plane;
            s_dy += sum_f64(&dyd[o..o + plane]);
            for (d, x) in dyd[o..o + plane].chunks(8).zip(xh[o..o + plane].chunks(8)) {
                for ((l, &a), &b) in lanes.iter_mut().zip(d).zip(x) {
                    *l += a as f64 * b as f64;
                }
            }
        }
        (s_dy, lanes.iter().sum::<f64>())
    });
    let mut dx = Tensor::zeros(dy.shape());
    for (i, ((dxp, dyp), xp)) in dx
        .data_mut()
        .chunks_mut(plane)
        .zip(dyd.chunks(plane))
        .zip(xh.chunks(plane))
        .enumerate()
    {
        let ch = i % c;
        let k = gamma.data()[ch] * saved.inv_std[ch] / count as f32;
        let mean_dy = sums[ch].0 as f32;
        let mean_dyx = sums[ch].1 as f32;
        for ((o, &d), &x) in dxp.iter_mut().zip(dyp).zip(xp) {
            *o = k * (count as f32 * d - mean_dy - x * mean_dyx);
        }
    }
    let dgamma = Tensor::from_vec(&[c], sums.iter().map(|s| s.1 as f32).collect());
    let dbeta = Tensor::from_vec(&[c], sums.iter().map(|s| s.0 as f32).collect());
    (dx, dgamma, dbeta)
}

/// Inference-mode forward with running statistics; returns `(y, xhat)`.
pub fn batch_norm_eval(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &Tensor,
    running_var: &Tensor,
) -> (Tensor, Tensor) {
    let (_, c, h, w) = x.dims4();
    let plane = h * w;
    let inv: Vec<f32> = running_var
        .data()
        .iter()
        .map(|&v| 1.0 / (v + BN_EPS).sqrt())
        .collect();
    let mut xhat = Tensor::zeros(x.shape());
    let mut y = Tensor::zeros(x.shape());
    let yd = y.data_mut();
    for (i, ((xhp, yp), xp)) in xhat
        .data_mut()
        .chunks_mut(plane)
        .zip(yd.chunks_mut(plane))
        .zip(x.data().chunks(plane))
        .enumerate()
    {
        let ch = i % c;
        let (m, g, b) = (running_mean.data()[ch], gamma.data()[ch], beta.data()[ch]);
        for ((o, yo), &v) in xhp.iter_mut().zip(yp.iter_mut()).zip(xp) {
            *o = (v - m) * inv[ch];
            *yo = *o * g + b;
        }
    }
    (y, xhat)
}

/// Gradients of the inference-mode forward: `(dx, dgamma, dbeta)`.
pub fn batch_norm_eval_backward(
    dy: &Tensor,
    xhat: &Tensor,
    gamma: &Tensor,
    running_var: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (_, c, h, w) = dy.dims4();
    let plane = h * w;
    let mut dgamma = vec![0.0f64; c];
    let mut dbeta = vec![0.0f64; c];
    let mut dx = Tensor::zeros(dy.shape());
    for (i, ((dxp, dyp), xp)) in dx
        .data_mut()
        .chunks_mut(plane)
        .zip(dy.data().chunks(plane))
        .zip(xhat.data().chunks(plane))
        .enumerate()
    {
        let ch = i % c;
        let scale = gamma.data()[ch] / (running_var.data()[ch] + BN_EPS).sqrt();
        for ((o, &d), &x) in dxp.iter_mut().zip(dyp).zip(xp) {
            *o = d * scale;
            dgamma[ch] += d as f64 * x as f64;
            dbeta[ch] += d as f64;
        }
    }
    (
        dx,
        Tensor::from_vec(&[c], dgamma.into_iter().map(|v| v as f32).collect()),
        Tensor::from_vec(&[c], dbeta.into_iter().map(|v| v as f32).collect()),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn train_forward_normalises_each_channel() {
        let x = Tensor::from_vec(&[2, 2, 1, 2], vec![1.0, 3.0, 10.0, 10.0, 5.0, 7.0, 10.0, 10.0]);
        let g = Tensor::full(&[2], 1.0);
        let b = Tensor::zeros(&[2]);
        let (y, _, stats) = batch_norm_train(&x, &g, &b);
        assert!((stats.mean[0] - 4.0).abs() < 1e-6);
        // Biased variance 5, unbiased 20/3.
        assert!((stats.var[0] - 20.0 / 3.0).abs() < 1e-5);
        let ch0: Vec<f32> = vec![y.data()[0], y.data()[1], y.data()[4], y.data()[5]];
        let mean: f32 = ch0.iter().sum::<f32>() / 4.0;
        assert!(mean.abs() < 1e-6);
        // Constant channel normalises to zero.
        assert!(y.data()[2].abs() < 1e-6 && y.data()[7].abs() < 1e-6);
    }

    #[test]
    fn zero_input_yields_beta() {
        let x = Tensor::zeros(&[1, 3, 2, 2]);
        let g = Tensor::full(&[3], 2.0);
        let b = Tensor::from_vec(&[3], vec![0.5, -1.0, 0.0]);
        let (y, _, _) = batch_norm_train(&x, &g, &b);
        assert_eq!(&y.data()[..4], &[0.5; 4]);
        assert_eq!(&y.data()[4..8], &[-1.0; 4]);
    }
}
