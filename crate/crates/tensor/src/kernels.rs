//! Slice-level forward and backward kernels behind the graph ops.
//!
//! All reductions run in a fixed order so results are bitwise reproducible.

/// Geometry of a 2-D convolution over one NCHW batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn pixels(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col(g: &ConvGeom, x: &[f64], cols: &mut [f64]) {
    let p = g.pixels();
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(g: &ConvGeom, cols: &[f64], dx: &mut [f64]) {
    let p = g.pixels();
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            plane[iy as usize * g.w + ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `c (m×n) = alpha·a (m×k, strides rsa/csa) · b (k×n, strides rsb/csb) + beta·c`, row-major c.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], rsa: usize, csa: usize, b: &[f64], rsb: usize, csb: usize, beta: f64, c: &mut [f64]) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the caller sizes every slice for the stated extents and strides;
    // `c` does not alias `a` or `b` because it is borrowed mutably.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn conv2d_forward(g: &ConvGeom, x: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let (k, p) = (g.patch(), g.pixels());
    let mut out = vec![0.0; g.n * g.cout * p];
    let mut cols = vec![0.0; k * p];
    for img in 0..g.n {
        let xi = &x[img * g.cin * g.h * g.w..(img + 1) * g.cin * g.h * g.w];
        im2col(g, xi, &mut cols);
        let oi = &mut out[img * g.cout * p..(img + 1) * g.cout * p];
        for (co, row) in oi.chunks_exact_mut(p).enumerate() {
            row.fill(bias[co]);
        }
        gemm(g.cout, k, p, weight, k, 1, &cols, p, 1, 1.0, oi);
    }
    out
}

/// Returns `(d_input, d_weight, d_bias)`; each is computed only when requested.
pub fn conv2d_backward(
    g: &ConvGeom,
    x: &[f64],
    weight: &[f64],
    upstream: &[f64],
    want: [bool; 3],
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>) {
    let (k, p) = (g.patch(), g.pixels());
    let mut dx = want[0].then(|| vec![0.0; x.len()]);
    let mut dw = want[1].then(|| vec![0.0; weight.len()]);
    let db = want[2].then(|| {
        let mut db = vec![0.0; g.cout];
        for img in 0..g.n {
            for (co, acc) in db.iter_mut().enumerate() {
                let off = (img * g.cout + co) * p;
                *acc += upstream[off..off + p].iter().sum::<f64>();
            }
        }
        db
    });
    let mut cols = vec![0.0; k * p];
    for img in 0..g.n {
        let up = &upstream[img * g.cout * p..(img + 1) * g.cout * p];
        if let Some(dw) = dw.as_mut() {
            let xi = &x[img * g.cin * g.h * g.w..(img + 1) * g.cin * g.h * g.w];
            im2col(g, xi, &mut cols);
            // dW (cout×k) += up (cout×p) · colsᵀ (p×k)
            gemm(g.cout, p, k, up, p, 1, &cols, 1, p, 1.0, dw);
        }
        if let Some(dx) = dx.as_mut() {
            // dcols (k×p) = Wᵀ (k×cout) · up (cout×p)
            gemm(k, g.cout, p, weight, 1, k, up, p, 1, 0.0, &mut cols);
            col2im(g, &cols, &mut dx[img * g.cin * g.h * g.w..(img + 1) * g.cin * g.h * g.w]);
        }
    }
    (dx, dw, db)
}

/// Per-axis interpolation taps for half-pixel-center bilinear resampling with
/// edge clamping: `src = (dst + 0.5) / factor - 0.5`, clamped to `[0, len-1]`.
pub fn bilinear_taps(len: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..len * factor)
        .map(|d| {
            let src = ((d as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (len - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub fn upsample_forward(dims: [usize; 4], factor: usize, x: &[f64]) -> Vec<f64> {
    let [n, c, h, w] = dims;
    let (ho, wo) = (h * factor, w * factor);
    let ty = bilinear_taps(h, factor);
    let tx = bilinear_taps(w, factor);
    let mut out = vec![0.0; n * c * ho * wo];
    for plane in 0..n * c {
        let src = &x[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * ho * wo..(plane + 1) * ho * wo];
        for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
            let r0 = &src[y0 * w..(y0 + 1) * w];
            let r1 = &src[y1 * w..(y1 + 1) * w];
            for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                // Lerp form keeps constant fields exactly constant.
                let top = r0[x0] + wx * (r0[x1] - r0[x0]);
                let bot = r1[x0] + wx * (r1[x1] - r1[x0]);
                dst[oy * wo + ox] = top + wy * (bot - top);
            }
        }
    }
    out
}

pub fn upsample_backward(dims: [usize; 4], factor: usize, upstream: &[f64]) -> Vec<f64> {
    let [n, c, h, w] = dims;
    let (ho, wo) = (h * factor, w * factor);
    let ty = bilinear_taps(h, factor);
    let tx = bilinear_taps(w, factor);
    let mut dx = vec![0.0; n * c * h * w];
    for plane in 0..n * c {
        let up = &upstream[plane * ho * wo..(plane + 1) * ho * wo];
        let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
        for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                let g = up[oy * wo + ox];
                dst[y0 * w + x0] += (1.0 - wy) * (1.0 - wx) * g;
                dst[y0 * w + x1] += (1.0 - wy) * wx * g;
                dst[y1 * w + x0] += wy * (1.0 - wx) * g;
                dst[y1 * w + x1] += wy * wx * g;
            }
        }
    }
    dx
}

/// 2×2 stride-2 max pooling; returns outputs and the linear input index of each maximum
/// (ties resolve to the lowest index).
pub fn maxpool_forward(dims: [usize; 4], x: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let [n, c, h, w] = dims;
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let candidates = [
                    base + 2 * oy * w + 2 * ox,
                    base + 2 * oy * w + 2 * ox + 1,
                    base + (2 * oy + 1) * w + 2 * ox,
                    base + (2 * oy + 1) * w + 2 * ox + 1,
                ];
                let mut best = candidates[0];
                for &i in &candidates[1..] {
                    if x[i] > x[best] {
                        best = i;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}
