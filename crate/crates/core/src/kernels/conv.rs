//! Stride-1 2-D convolution with zero padding and dilation.
//!
//! Implemented as im2col followed by sgemm. Output rows are processed in
//! chunks so the column buffer stays bounded regardless of image size.

use std::cell::Cell;

use crate::par;
use crate::tensor::Tensor;

thread_local! {
    static SCRATCH: Cell<Vec<f32>> = const { Cell::new(Vec::new()) };
}

/// Runs `f` on a per-thread buffer of `len` floats with unspecified
/// contents, reused across calls.
fn with_scratch<R>(len: usize, f: impl FnOnce(&mut [f32]) -> R) -> R {
    let mut buf = SCRATCH.with(Cell::take);
    if buf.len() < len {
        buf.resize(len, 0.0);
    }
    let out = f(&mut buf[..len]);
    SCRATCH.with(|s| s.set(buf));
    out
}

/// Geometry of one convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: (usize, usize),
    pub padding: (usize, usize),
    pub dilation: (usize, usize),
}

/// Upper bound on column-buffer floats per chunk (16 MiB).
const COL_BUDGET: usize = 1 << 22;

impl ConvSpec {
    /// Square kernel with "same" padding.
    pub fn same(k: usize) -> Self {
        Self::dilated(k, 1)
    }

    /// Square dilated kernel with "same" padding.
    pub fn dilated(k: usize, d: usize) -> Self {
        ConvSpec {
            kernel: (k, k),
            padding: (d * (k - 1) / 2, d * (k - 1) / 2),
            dilation: (d, d),
        }
    }

    /// Rectangular `kh x kw` kernel with "same" padding.
    pub fn rect(kh: usize, kw: usize) -> Self {
        ConvSpec {
            kernel: (kh, kw),
            padding: ((kh - 1) / 2, (kw - 1) / 2),
            dilation: (1, 1),
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let eh = self.dilation.0 * (self.kernel.0 - 1);
        let ew = self.dilation.1 * (self.kernel.1 - 1);
        ((h + 2 * self.padding.0).saturating_sub(eh), (w + 2 * self.padding.1).saturating_sub(ew))
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == (1, 1) && self.padding == (0, 0)
    }
}

struct Geometry {
    cin: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    spec: ConvSpec,
}

impl Geometry {
    fn k(&self) -> usize {
        self.cin * self.spec.kernel.0 * self.spec.kernel.1
    }

    fn rows_per_chunk(&self) -> usize {
        (COL_BUDGET / (self.k() * self.wo).max(1)).clamp(1, self.ho.max(1))
    }

    /// Fills `cols` (`[k, (r1 - r0) * wo]`) from one input sample.
    fn im2col(&self, x: &[f32], r0: usize, r1: usize, cols: &mut [f32]) {
        let (kh, kw) = self.spec.kernel;
        let (ph, pw) = self.spec.padding;
        let (dh, dw) = self.spec.dilation;
        let span = (r1 - r0) * self.wo;
        let mut row = 0;
        for ci in 0..self.cin {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..kh {
                for kj in 0..kw {
                    let dst = &mut cols[row * span..(row + 1) * span];
                    let off_w = (kj * dw) as isize - pw as isize;
                    let (c_lo, c_hi) = valid_range(off_w, self.w, self.wo);
                    for (ri, r) in (r0..r1).enumerate() {
                        let d = &mut dst[ri * self.wo..(ri + 1) * self.wo];
                        let ih = r as isize + (ki * dh) as isize - ph as isize;
                        if ih < 0 || ih >= self.h as isize || c_lo >= c_hi {
                            d.fill(0.0);
                            continue;
                        }
                        let src = &plane[ih as usize * self.w..(ih as usize + 1) * self.w];
                        d[..c_lo].fill(0.0);
                        let s0 = (c_lo as isize + off_w) as usize;
                        d[c_lo..c_hi].copy_from_slice(&src[s0..s0 + (c_hi - c_lo)]);
                        d[c_hi..].fill(0.0);
                    }
                    row += 1;
                }
            }
        }
    }

    /// Scatter-adds `cols` back into an input-shaped gradient.
    fn col2im(&self, cols: &[f32], r0: usize, r1: usize, dx: &mut [f32]) {
        let (kh, kw) = self.spec.kernel;
        let (ph, pw) = self.spec.padding;
        let (dh, dw) = self.spec.dilation;
        let span = (r1 - r0) * self.wo;
        let mut row = 0;
        for ci in 0..self.cin {
            let plane = &mut dx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..kh {
                for kj in 0..kw {
                    let src = &cols[row * span..(row + 1) * span];
                    let off_w = (kj * dw) as isize - pw as isize;
                    let (c_lo, c_hi) = valid_range(off_w, self.w, self.wo);
                    for (ri, r) in (r0..r1).enumerate() {
                        let ih = r as isize + (ki * dh) as isize - ph as isize;
                        if ih < 0 || ih >= self.h as isize || c_lo >= c_hi {
                            continue;
                        }
                        let s = &src[ri * self.wo + c_lo..ri * self.wo + c_hi];
                        let d0 = ih as usize * self.w + (c_lo as isize + off_w) as usize;
                        for (d, v) in plane[d0..d0 + s.len()].iter_mut().zip(s) {
                            *d += v;
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Output columns `c` for which `c + off` indexes inside `0..w`.
fn valid_range(off: isize, w: usize, wo: usize) -> (usize, usize) {
    let lo = (-off).max(0) as usize;
    let hi = ((w as isize - off).max(0) as usize).min(wo);
    (lo.min(wo), hi)
}

/// `c[m x n] = alpha * a[m x k] . b[k x n] + beta * c` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: (&[f32], isize, isize),
    b: (&[f32], isize, isize),
    beta: f32,
    c: (&mut [f32], isize, isize),
) {
    if m == 0 || n == 0 {
        return;
    }
    // Safety: callers pass slices that cover every strided access for the
    // stated dimensions.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.0.as_ptr(),
            a.1,
            a.2,
            b.0.as_ptr(),
            b.1,
            b.2,
            beta,
            c.0.as_mut_ptr(),
            c.1,
            c.2,
        );
    }
}

fn geometry(x: &Tensor, weight: &Tensor, spec: ConvSpec) -> Geometry {
    let (_, cin, h, w) = x.dims4();
    let ws = weight.shape();
    assert_eq!(ws.len(), 4, "conv weight must be rank 4");
    assert_eq!(ws[1], cin, "conv weight expects {} input channels, got {cin}", ws[1]);
    assert_eq!((ws[2], ws[3]), spec.kernel, "conv weight kernel disagrees with spec");
    let (ho, wo) = spec.output_hw(h, w);
    Geometry { cin, h, w, ho, wo, spec }
}

/// Forward convolution. `weight` is `[cout, cin, kh, kw]`.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, spec: ConvSpec) -> Tensor {
    let g = geometry(x, weight, spec);
    let n = x.shape()[0];
    let cout = weight.shape()[0];
    let k = g.k();
    let plane_out = g.ho * g.wo;
    let mut out = Tensor::zeros(&[n, cout, g.ho, g.wo]);
    let xd = x.data();
    let wd = weight.data();
    par::for_each_chunk_mut(out.data_mut(), cout * plane_out, |s, y| {
        let xs = &xd[s * g.cin * g.h * g.w..(s + 1) * g.cin * g.h * g.w];
        if g.spec.is_pointwise() {
            gemm(
                cout,
                k,
                plane_out,
                (wd, k as isize, 1),
                (xs, plane_out as isize, 1),
                0.0,
                (y, plane_out as isize, 1),
            );
        } else {
            let rows = g.rows_per_chunk();
            with_scratch(k * rows * g.wo, |cols| {
                let mut r0 = 0;
                while r0 < g.ho {
                    let r1 = (r0 + rows).min(g.ho);
                    let span = (r1 - r0) * g.wo;
                    g.im2col(xs, r0, r1, &mut cols[..k * span]);
                    gemm(
                        cout,
                        k,
                        span,
                        (wd, k as isize, 1),
                        (cols, span as isize, 1),
                        0.0,
                        (&mut y[r0 * g.wo..], plane_out as isize, 1),
                    );
                    r0 = r1;
                }
            });
        }
        if let Some(b) = bias {
            for (co, plane) in y.chunks_mut(plane_out).enumerate() {
                let bv = b.data()[co];
                plane.iter_mut().for_each(|v| *v += bv);
            }
        }
    });
    out
}

/// Gradients of a convolution. Returns `(dx, dweight, dbias)`; `dx` and
/// `dbias` are only computed when requested.
pub fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    dy: &Tensor,
    spec: ConvSpec,
    need_dx: bool,
    need_db: bool,
) -> (Option<Tensor>, Tensor, Option<Tensor>) {
    let g = geometry(x, weight, spec);
    let n = x.shape()[0];
    let cout = weight.shape()[0];
    let k = g.k();
    let plane_in = g.cin * g.h * g.w;
    let plane_out = g.ho * g.wo;
    let xd = x.data();
    let wd = weight.data();
    let dyd = dy.data();
    assert_eq!(dy.shape(), &[n, cout, g.ho, g.wo]);

    // Per-sample weight-gradient partials, summed afterwards in sample order.
    // The input gradient is written straight into its sample's slice.
    let sample = |s: usize, dx: Option<&mut [f32]>| -> SamplePartial {
        let xs = &xd[s * plane_in..(s + 1) * plane_in];
        let dys = &dyd[s * cout * plane_out..(s + 1) * cout * plane_out];
        let mut dw = vec![0.0f32; cout * k];
        if g.spec.is_pointwise() {
            gemm(
                cout,
                plane_out,
                k,
                (dys, plane_out as isize, 1),
                (xs, 1, plane_out as isize),
                0.0,
                (&mut dw, k as isize, 1),
            );
            if let Some(dx) = dx {
                gemm(
                    k,
                    cout,
                    plane_out,
                    (wd, 1, k as isize),
                    (dys, plane_out as isize, 1),
                    0.0,
                    (dx, plane_out as isize, 1),
                );
            }
        } else {
            let rows = g.rows_per_chunk();
            with_scratch(k * rows * g.wo, |cols| {
                let mut dx = dx;
                let mut r0 = 0;
                while r0 < g.ho {
                    let r1 = (r0 + rows).min(g.ho);
                    let span = (r1 - r0) * g.wo;
                    let cols = &mut cols[..k * span];
                    g.im2col(xs, r0, r1, cols);
                    gemm(
                        cout,
                        span,
                        k,
                        (&dys[r0 * g.wo..], plane_out as isize, 1),
                        (cols, 1, span as isize),
                        1.0,
                        (&mut dw, k as isize, 1),
                    );
                    if let Some(dx) = dx.as_deref_mut() {
                        gemm(
                            k,
                            cout,
                            span,
                            (wd, 1, k as isize),
                            (&dys[r0 * g.wo..], plane_out as isize, 1),
                            0.0,
                            (cols, span as isize, 1),
                        );
                        g.col2im(cols, r0, r1, dx);
                    }
                    r0 = r1;
                }
            });
        }
        let db = need_db.then(|| {
            dys.chunks(plane_out)
                .map(|p| p.iter().map(|&v| v as f64).sum::<f64>())
                .collect()
        });
        SamplePartial { dw, db }
    };
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let partials: Vec<SamplePartial> = match dx.as_mut() {
        Some(dx) => par::map_chunks_mut(dx.data_mut(), plane_in, |s, chunk| sample(s, Some(chunk))),
        None => par::map_range(n, |s| sample(s, None)),
    };

    let mut dw = vec![0.0f32; cout * k];
    let mut db = need_db.then(|| vec![0.0f64; cout]);
    for p in partials {
        dw.iter_mut().zip(&p.dw).for_each(|(a, b)| *a += b);
        if let (Some(acc), Some(part)) = (db.as_mut(), p.db) {
            acc.iter_mut().zip(part).for_each(|(a, b)| *a += b);
        }
    }
    (
        dx,
        Tensor::from_vec(weight.shape(), dw),
        db.map(|d| Tensor::from_vec(&[cout], d.into_iter().map(|v| v as f32).collect())),
    )
}

struct SamplePartial {
    dw: Vec<f32>,
    db: Option<Vec<f64>>,
}
