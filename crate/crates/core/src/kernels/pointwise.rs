//! Element-wise helpers and the broadcasting product.

use crate::tensor::Tensor;

pub fn sigmoid(v: f32) -> f32 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + exp(v))` without overflow.
pub fn softplus(v: f64) -> f64 {
    v.max(0.0) + (-v.abs()).exp().ln_1p()
}

/// Whether `small` broadcasts against `big` under the rank-4 rule "each
/// dim equal or 1".
pub fn broadcastable(big: &[usize], small: &[usize]) -> bool {
    big.len() == small.len() && big.iter().zip(small).all(|(&b, &s)| s == b || s == 1)
}

/// Index into `small` for every element of `big` (row-major).
fn broadcast_index(big: &[usize], small: &[usize]) -> impl Fn(usize) -> usize {
    let rank = big.len();
    let mut small_strides = vec![0usize; rank];
    let mut acc = 1;
    for d in (0..rank).rev() {
        small_strides[d] = if small[d] == 1 { 0 } else { acc };
        acc *= small[d];
    }
    let big = big.to_vec();
    move |mut flat| {
        let mut idx = 0;
        for d in (0..rank).rev() {
            let i = flat % big[d];
            flat /= big[d];
            idx += i * small_strides[d];
        }
        idx
    }
}

/// Sum in f64 over eight independent lanes (lets the loop pipeline).
pub fn sum_f64(xs: &[f32]) -> f64 {
    let mut lanes = [0.0f64; 8];
    let chunks = xs.chunks_exact(8);
    let tail = chunks.remainder();
    for c in chunks {
        for (l, &v) in lanes.iter_mut().zip(c) {
            *l += v as f64;
        }
    }
    lanes.iter().sum::<f64>() + tail.iter().map(|&v| v as f64).sum::<f64>()
}

/// How a broadcast operand lines up with the full shape.
enum Layout {
    /// `[n, c, 1, 1]` against `[n, c, h, w]`.
    PerPlane { plane: usize },
    /// `[n, 1, h, w]` against `[n, c, h, w]`.
    PerPixel { c: usize, plane: usize },
    General,
}

fn layout(big: &[usize], small: &[usize]) -> Layout {
    if let ([n, c, h, w], [sn, sc, sh, sw]) = (big, small) {
        if (sn, sc, *sh, *sw) == (n, c, 1, 1) {
            return Layout::PerPlane { plane: h * w };
        }
        if (sn, *sc, sh, sw) == (n, 1, h, w) {
            return Layout::PerPixel { c: *c, plane: h * w };
        }
    }
    Layout::General
}

/// `a * b` where `b` broadcasts against `a` (or the reverse).
pub fn mul_broadcast(a: &Tensor, b: &Tensor) -> Tensor {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
        return Tensor::from_vec(a.shape(), data);
    }
    let (big, small) = if broadcastable(a.shape(), b.shape()) { (a, b) } else { (b, a) };
    assert!(
        broadcastable(big.shape(), small.shape()),
        "cannot broadcast {:?} with {:?}",
        a.shape(),
        b.shape()
    );
    let sd = small.data();
    let mut out = Vec::with_capacity(big.len());
    match layout(big.shape(), small.shape()) {
        Layout::PerPlane { plane } => {
            for (p, &g) in big.data().chunks(plane).zip(sd) {
                out.extend(p.iter().map(|v| v * g));
            }
        }
        Layout::PerPixel { c, plane } => {
            for (i, p) in big.data().chunks(plane).enumerate() {
                let gate = &sd[(i / c) * plane..(i / c + 1) * plane];
                out.extend(p.iter().zip(gate).map(|(v, g)| v * g));
            }
        }
        Layout::General => {
            let idx = broadcast_index(big.shape(), small.shape());
            out.extend(big.data().iter().enumerate().map(|(i, &v)| v * sd[idx(i)]));
        }
    }
    Tensor::from_vec(big.shape(), out)
}

/// Sums a full-shape gradient down to a broadcast operand's shape.
pub fn reduce_to(grad: &Tensor, shape: &[usize]) -> Tensor {
    if grad.shape() == shape {
        return grad.clone();
    }
    let gd = grad.data();
    let data: Vec<f32> = match layout(grad.shape(), shape) {
        Layout::PerPlane { plane } => gd.chunks(plane).map(|p| sum_f64(p) as f32).collect(),
        Layout::PerPixel { c, plane } => {
            let mut acc = vec![0.0f64; plane];
            let mut out = Vec::with_capacity(shape.iter().product());
            for sample in gd.chunks(c * plane) {
                acc.fill(0.0);
                for p in sample.chunks(plane) {
                    acc.iter_mut().zip(p).for_each(|(a, &v)| *a += v as f64);
                }
                out.extend(acc.iter().map(|&v| v as f32));
            }
            out
        }
        Layout::General => {
            let idx = broadcast_index(grad.shape(), shape);
            let mut acc = vec![0.0f64; shape.iter().product()];
            for (i, &g) in gd.iter().enumerate() {
                acc[idx(i)] += g as f64;
            }
            acc.into_iter().map(|v| v as f32).collect()
        }
    };
    Tensor::from_vec(shape, data)
}

/// Expands `small` to `big_shape` by repetition.
pub fn expand(small: &Tensor, big_shape: &[usize]) -> Tensor {
    if small.shape() == big_shape {
        return small.clone();
    }
    let idx = broadcast_index(big_shape, small.shape());
    let n: usize = big_shape.iter().product();
    let sd = small.data();
    Tensor::from_vec(big_shape, (0..n).map(|i| sd[idx(i)]).collect())
}

/// Concatenates rank-4 tensors along the channel axis.
pub fn concat_channels(parts: &[&Tensor]) -> Tensor {
    let (n, _, h, w) = parts[0].dims4();
    let plane = h * w;
    let c_total: usize = parts.iter().map(|p| p.shape()[1]).sum();
    let mut out = Vec::with_capacity(n * c_total * plane);
    for s in 0..n {
        for p in parts {
            let (pn, pc, ph, pw) = p.dims4();
            assert_eq!((pn, ph, pw), (n, h, w), "concat: mismatched shapes");
            out.extend_from_slice(&p.data()[s * pc * plane..(s + 1) * pc * plane]);
        }
    }
    Tensor::from_vec(&[n, c_total, h, w], out)
}

/// Splits a channel-concatenated gradient back into per-part tensors.
pub fn split_channels(grad: &Tensor, channels: &[usize]) -> Vec<Tensor> {
    let (n, c_total, h, w) = grad.dims4();
    let plane = h * w;
    let mut outs: Vec<Vec<f32>> = channels.iter().map(|c| Vec::with_capacity(n * c * plane)).collect();
    let gd = grad.data();
    for s in 0..n {
        let mut off = s * c_total * plane;
        for (o, &c) in outs.iter_mut().zip(channels) {
            o.extend_from_slice(&gd[off..off + c * plane]);
            off += c * plane;
        }
    }
    outs.into_iter()
        .zip(channels)
        .map(|(d, &c)| Tensor::from_vec(&[n, c, h, w], d))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-100.0) > 0.0 || sigmoid(-100.0) == 0.0);
        assert!(sigmoid(100.0) <= 1.0);
        assert!(softplus(-800.0).is_finite() && softplus(800.0) == 800.0);
    }

    #[test]
    fn channel_gate_broadcasts_and_reduces() {
        let x = Tensor::from_vec(&[1, 2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let g = Tensor::from_vec(&[1, 2, 1, 1], vec![10.0, 100.0]);
        assert_eq!(mul_broadcast(&x, &g).data(), &[10.0, 20.0, 300.0, 400.0]);
        assert_eq!(mul_broadcast(&g, &x).data(), &[10.0, 20.0, 300.0, 400.0]);
        assert_eq!(reduce_to(&x, &[1, 2, 1, 1]).data(), &[3.0, 7.0]);
        let s = Tensor::from_vec(&[1, 1, 1, 2], vec![1.0, -1.0]);
        assert_eq!(mul_broadcast(&x, &s).data(), &[1.0, -2.0, 3.0, -4.0]);
        assert_eq!(reduce_to(&x, &[1, 1, 1, 2]).data(), &[4.0, 6.0]);
    }

    #[test]
    fn concat_then_split_round_trips() {
        let a = Tensor::from_vec(&[2, 1, 1, 1], vec![1.0, 2.0]);
        let b = Tensor::from_vec(&[2, 2, 1, 1], vec![3.0, 4.0, 5.0, 6.0]);
        let c = concat_channels(&[&a, &b]);
        assert_eq!(c.data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let parts = split_channels(&c, &[1, 2]);
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }
}
