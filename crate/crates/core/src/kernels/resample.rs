//! Bilinear up-sampling by an integer factor with half-pixel centres
//! (`align_corners = false`), matching the common framework convention.

use crate::tensor::Tensor;

/// Source taps `(i0, i1, w1)` for each output index along one axis.
fn taps(input: usize, factor: usize) -> Vec<(usize, usize, f32)> {
    let out = input * factor;
    (0..out)
        .map(|o| {
            let src = ((o as f32 + 0.5) / factor as f32 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f32)
        })
        .collect()
}

pub fn upsample_bilinear(x: &Tensor, factor: usize) -> Tensor {
    let (n, c, h, w) = x.dims4();
    if factor == 1 {
        return x.clone();
    }
    let (ho, wo) = (h * factor, w * factor);
    let th = taps(h, factor);
    let tw = taps(w, factor);
    let mut out = Tensor::zeros(&[n, c, ho, wo]);
    for (src, dst) in x.data().chunks(h * w).zip(out.data_mut().chunks_mut(ho * wo)) {
        for (r, &(r0, r1, lr)) in th.iter().enumerate() {
            let row0 = &src[r0 * w..(r0 + 1) * w];
            let row1 = &src[r1 * w..(r1 + 1) * w];
            let d = &mut dst[r * wo..(r + 1) * wo];
            for (col, &(c0, c1, lc)) in tw.iter().enumerate() {
                let top = row0[c0] * (1.0 - lc) + row0[c1] * lc;
                let bot = row1[c0] * (1.0 - lc) + row1[c1] * lc;
                d[col] = top * (1.0 - lr) + bot * lr;
            }
        }
    }
    out
}

/// Adjoint of [`upsample_bilinear`].
pub fn upsample_bilinear_backward(dy: &Tensor, factor: usize) -> Tensor {
    let (n, c, ho, wo) = dy.dims4();
    if factor == 1 {
        return dy.clone();
    }
    let (h, w) = (ho / factor, wo / factor);
    let th = taps(h, factor);
    let tw = taps(w, factor);
    let mut dx = Tensor::zeros(&[n, c, h, w]);
    for (g, dst) in dy.data().chunks(ho * wo).zip(dx.data_mut().chunks_mut(h * w)) {
        for (r, &(r0, r1, lr)) in th.iter().enumerate() {
            let grow = &g[r * wo..(r + 1) * wo];
            for (col, &(c0, c1, lc)) in tw.iter().enumerate() {
                let v = grow[col];
                dst[r0 * w + c0] += v * (1.0 - lr) * (1.0 - lc);
                dst[r0 * w + c1] += v * (1.0 - lr) * lc;
                dst[r1 * w + c0] += v * lr * (1.0 - lc);
                dst[r1 * w + c1] += v * lr * lc;
            }
        }
    }
    dx
}
