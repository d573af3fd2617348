//! Raw numeric kernels on flat slices. No shape checks here; callers own them.

/// `out[m×n] += a[m×k] · b[k×n]`.
pub fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×n] += aᵀ · b` where `a` is `[k×m]` and `b` is `[k×n]`.
pub fn matmul_tn_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×n] += a · bᵀ` where `a` is `[m×k]` and `b` is `[n×k]`.
pub fn matmul_nt_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * n + j] += acc;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }
}

/// Unfolds `x[c_in, h, w]` into `[c_in·kh·kw, oh·ow]` with zero padding.
fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let cols = g.oh * g.ow;
    let mut col = vec![0.0; g.col_rows() * cols];
    for c in 0..g.c_in {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let r = (c * g.kh + i) * g.kw + j;
                let dst = &mut col[r * cols..(r + 1) * cols];
                for oy in 0..g.oh {
                    let y = (oy * g.stride + i) as isize - g.pad as isize;
                    if y < 0 || y >= g.h as isize {
                        continue;
                    }
                    let src = &x[(c * g.h + y as usize) * g.w..(c * g.h + y as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let xx = (ox * g.stride + j) as isize - g.pad as isize;
                        if xx >= 0 && xx < g.w as isize {
                            dst[oy * g.ow + ox] = src[xx as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Scatter-adds a `[c_in·kh·kw, oh·ow]` column buffer back onto `[c_in, h, w]`.
fn col2im(col: &[f64], g: &ConvGeom, out: &mut [f64]) {
    let cols = g.oh * g.ow;
    for c in 0..g.c_in {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let r = (c * g.kh + i) * g.kw + j;
                let src = &col[r * cols..(r + 1) * cols];
                for oy in 0..g.oh {
                    let y = (oy * g.stride + i) as isize - g.pad as isize;
                    if y < 0 || y >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + y as usize) * g.w;
                    for ox in 0..g.ow {
                        let xx = (ox * g.stride + j) as isize - g.pad as isize;
                        if xx >= 0 && xx < g.w as isize {
                            out[base + xx as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Zero-padded cross-correlation of `x[c_in, h, w]` with `kernel[c_out, c_in, kh, kw]`.
/// Returns `[c_out, oh, ow]` values.
pub(crate) fn conv2d_raw(x: &[f64], kernel: &[f64], g: &ConvGeom) -> Vec<f64> {
    let cols = g.oh * g.ow;
    let mut out = vec![0.0; g.c_out * cols];
    if g.is_pointwise() {
        matmul_into(kernel, x, &mut out, g.c_out, g.c_in, cols);
    } else {
        let col = im2col(x, g);
        matmul_into(kernel, &col, &mut out, g.c_out, g.col_rows(), cols);
    }
    out
}

/// Gradients of a convolution with respect to input and kernel.
pub(crate) fn conv2d_backward(
    x: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    g: &ConvGeom,
) -> (Vec<f64>, Vec<f64>) {
    let cols = g.oh * g.ow;
    let rows = g.col_rows();
    let mut grad_k = vec![0.0; g.c_out * rows];
    let mut grad_x = vec![0.0; g.c_in * g.h * g.w];
    if g.is_pointwise() {
        matmul_nt_into(grad_out, x, &mut grad_k, g.c_out, cols, rows);
        matmul_tn_into(kernel, grad_out, &mut grad_x, rows, g.c_out, cols);
    } else {
        let col = im2col(x, g);
        matmul_nt_into(grad_out, &col, &mut grad_k, g.c_out, cols, rows);
        let mut grad_col = vec![0.0; rows * cols];
        matmul_tn_into(kernel, grad_out, &mut grad_col, rows, g.c_out, cols);
        col2im(&grad_col, g, &mut grad_x);
    }
    (grad_x, grad_k)
}

/// Convenience wrapper used by tests and oracles: returns `(values, oh, ow)`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_forward(
    x: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    kernel: &[f64],
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let g = ConvGeom {
        c_in,
        h,
        w,
        c_out,
        kh,
        kw,
        stride,
        pad,
        oh,
        ow,
    };
    (conv2d_raw(x, kernel, &g), oh, ow)
}

/// `[c·r², h, w] → [c, h·r, w·r]`; input channel `c·r² + i·r + j` lands at
/// output offset `(i, j)` inside each `r×r` cell.
pub fn pixel_shuffle_forward(x: &[f64], c: usize, h: usize, w: usize, r: usize) -> Vec<f64> {
    let (oh, ow) = (h * r, w * r);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for i in 0..r {
            for j in 0..r {
                let src_c = ch * r * r + i * r + j;
                let src = &x[src_c * h * w..(src_c + 1) * h * w];
                for y in 0..h {
                    let dst_row = (ch * oh + y * r + i) * ow;
                    for xx in 0..w {
                        out[dst_row + xx * r + j] = src[y * w + xx];
                    }
                }
            }
        }
    }
    out
}

/// Inverse of [`pixel_shuffle_forward`]: `[c, h·r, w·r] → [c·r², h, w]`.
pub fn pixel_unshuffle(x: &[f64], c: usize, h: usize, w: usize, r: usize) -> Vec<f64> {
    let (oh, ow) = (h * r, w * r);
    let mut out = vec![0.0; c * r * r * h * w];
    for ch in 0..c {
        for i in 0..r {
            for j in 0..r {
                let dst_c = ch * r * r + i * r + j;
                for y in 0..h {
                    let src_row = (ch * oh + y * r + i) * ow;
                    for xx in 0..w {
                        out[dst_c * h * w + y * w + xx] = x[src_row + xx * r + j];
                    }
                }
            }
        }
    }
    out
}
