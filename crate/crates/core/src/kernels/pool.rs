//! Max reductions: 2x2 pooling, global spatial max, and max over channels.
//! Each forward returns the flat index of the selected input element so the
//! backward pass can route gradients; ties pick the first index.

use crate::tensor::Tensor;

/// 2x2 max-pool with stride 2. Odd trailing rows/cols are dropped.
pub fn max_pool2(x: &Tensor) -> (Tensor, Vec<u32>) {
    let (n, c, h, w) = x.dims4();
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[n, c, ho, wo]);
    let mut arg = vec![0u32; n * c * ho * wo];
    let xd = x.data();
    let od = out.data_mut();
    for p in 0..n * c {
        for r in 0..ho {
            for col in 0..wo {
                let base = p * h * w;
                let mut best = base + 2 * r * w + 2 * col;
                for (dr, dc) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * r + dr) * w + 2 * col + dc;
                    if xd[i] > xd[best] {
                        best = i;
                    }
                }
                let o = (p * ho + r) * wo + col;
                od[o] = xd[best];
                arg[o] = best as u32;
            }
        }
    }
    (out, arg)
}

/// Max over the spatial dims: `[n, c, h, w] -> [n, c, 1, 1]`.
pub fn global_max_pool(x: &Tensor) -> (Tensor, Vec<u32>) {
    let (n, c, h, w) = x.dims4();
    let plane = h * w;
    let mut out = Tensor::zeros(&[n, c, 1, 1]);
    let mut arg = vec![0u32; n * c];
    for (p, chunk) in x.data().chunks(plane).enumerate() {
        let mut best = 0;
        for (i, &v) in chunk.iter().enumerate() {
            if v > chunk[best] {
                best = i;
            }
        }
        out.data_mut()[p] = chunk[best];
        arg[p] = (p * plane + best) as u32;
    }
    (out, arg)
}

/// Max over channels: `[n, c, h, w] -> [n, 1, h, w]`.
pub fn channel_max(x: &Tensor) -> (Tensor, Vec<u32>) {
    let (n, c, h, w) = x.dims4();
    let plane = h * w;
    let mut out = Tensor::zeros(&[n, 1, h, w]);
    let mut arg = vec![0u32; n * plane];
    let xd = x.data();
    for s in 0..n {
        for i in 0..plane {
            let mut best = s * c * plane + i;
            for ch in 1..c {
                let j = (s * c + ch) * plane + i;
                if xd[j] > xd[best] {
                    best = j;
                }
            }
            out.data_mut()[s * plane + i] = xd[best];
            arg[s * plane + i] = best as u32;
        }
    }
    (out, arg)
}

/// Routes `dy` back to the recorded argmax positions.
pub fn scatter_argmax(dy: &Tensor, arg: &[u32], input_shape: &[usize]) -> Tensor {
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (&g, &i) in dy.data().iter().zip(arg) {
        d[i as usize] += g;
    }
    dx
}
