//! Raw array math shared by the forward ops and their backward rules.
//!
//! Everything here is a pure function over `&[f64]` with fixed loop order,
//! which is what makes the tape bit-deterministic: the same inputs always
//! reduce in the same sequence.

/// C[m,n] = A[m,k] * B[k,n]
///
/// 2x2 register tile: two output rows advance together through a two-wide
/// unroll of the inner dimension, which keeps enough independent
/// accumulation chains in flight to saturate the FP units.
pub fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    let mut i = 0;
    while i + 2 <= m {
        let (o_lo, o_hi) = out.split_at_mut((i + 1) * n);
        let row_o0 = &mut o_lo[i * n..];
        let row_o1 = &mut o_hi[..n];
        let ra0 = &a[i * k..(i + 1) * k];
        let ra1 = &a[(i + 1) * k..(i + 2) * k];
        let mut p = 0;
        while p + 2 <= k {
            let a00 = ra0[p];
            let a01 = ra0[p + 1];
            let a10 = ra1[p];
            let a11 = ra1[p + 1];
            let b0 = &b[p * n..][..n];
            let b1 = &b[(p + 1) * n..][..n];
            for j in 0..n {
                row_o0[j] += a00 * b0[j] + a01 * b1[j];
                row_o1[j] += a10 * b0[j] + a11 * b1[j];
            }
            p += 2;
        }
        while p < k {
            let b0 = &b[p * n..][..n];
            for j in 0..n {
                row_o0[j] += ra0[p] * b0[j];
                row_o1[j] += ra1[p] * b0[j];
            }
            p += 1;
        }
        i += 2;
    }
    while i < m {
        let row_o = &mut out[i * n..(i + 1) * n];
        let ra = &a[i * k..(i + 1) * k];
        for p in 0..k {
            let b0 = &b[p * n..][..n];
            for j in 0..n {
                row_o[j] += ra[p] * b0[j];
            }
        }
        i += 1;
    }
    out
}

/// C[k,n] = A^T * G where A: [m,k], G: [m,n]
///
/// Tiled over blocks of rows so the k*n output stays cache-resident while
/// each block streams through once.
pub fn mm_at_b(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    const BLOCK: usize = 128;
    let mut out = vec![0.0; k * n];
    let mut ib = 0;
    while ib < m {
        let ie = (ib + BLOCK).min(m);
        for p in 0..k {
            let row_o = &mut out[p * n..(p + 1) * n];
            let mut i = ib;
            while i + 4 <= ie {
                let a0 = a[i * k + p];
                let a1 = a[(i + 1) * k + p];
                let a2 = a[(i + 2) * k + p];
                let a3 = a[(i + 3) * k + p];
                let g0 = &g[i * n..][..n];
                let g1 = &g[(i + 1) * n..][..n];
                let g2 = &g[(i + 2) * n..][..n];
                let g3 = &g[(i + 3) * n..][..n];
                for j in 0..n {
                    row_o[j] += (a0 * g0[j] + a1 * g1[j]) + (a2 * g2[j] + a3 * g3[j]);
                }
                i += 4;
            }
            while i < ie {
                let a_ip = a[i * k + p];
                let row_g = &g[i * n..][..n];
                for (o, &gv) in row_o.iter_mut().zip(row_g) {
                    *o += a_ip * gv;
                }
                i += 1;
            }
        }
        ib = ie;
    }
    out
}

/// C[m,k] = G * B^T where G: [m,n], B: [k,n]
///
/// Transposes `B` up front so the accumulation runs on independent output
/// lanes instead of a serial dot product; `B` is always the small operand
/// (a weight matrix), so the transpose is cheap next to the product.
pub fn mm_a_bt(g: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut bt = vec![0.0; n * k];
    for p in 0..k {
        for j in 0..n {
            bt[j * k + p] = b[p * n + j];
        }
    }
    mm(g, &bt, m, n, k)
}

/// Output extent of a convolution/pooling axis.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

pub struct ConvDims {
    pub batch: usize,
    pub in_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_ch: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

/// Unrolls every receptive field into one row: `[N*OH*OW, C*kh*kw]`,
/// zero-filled where the field hangs over the padding. `map` is applied to
/// each gathered value (identity for a plain convolution, `max(0)` for a
/// fused pre-activation).
fn im2col_map(x: &[f64], d: &ConvDims, map: impl Fn(f64) -> f64) -> Vec<f64> {
    let ck2 = d.in_ch * d.k_h * d.k_w;
    let rows = d.batch * d.out_h * d.out_w;
    let mut cols = vec![0.0; rows * ck2];
    for n in 0..d.batch {
        for oy in 0..d.out_h {
            for ox in 0..d.out_w {
                let row_base = ((n * d.out_h + oy) * d.out_w + ox) * ck2;
                for c in 0..d.in_ch {
                    let base_x = (n * d.in_ch + c) * d.in_h * d.in_w;
                    for ky in 0..d.k_h {
                        let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                        if iy < 0 || iy >= d.in_h as isize {
                            continue;
                        }
                        let x_row = base_x + iy as usize * d.in_w;
                        let idx = row_base + (c * d.k_h + ky) * d.k_w;
                        for kx in 0..d.k_w {
                            let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                            if ix >= 0 && ix < d.in_w as isize {
                                cols[idx + kx] = map(x[x_row + ix as usize]);
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn im2col(x: &[f64], d: &ConvDims) -> Vec<f64> {
    im2col_map(x, d, |v| v)
}

/// Inverse of [`im2col`]: scatter-adds column gradients back onto the input.
fn col2im(cols: &[f64], d: &ConvDims) -> Vec<f64> {
    let ck2 = d.in_ch * d.k_h * d.k_w;
    let mut dx = vec![0.0; d.batch * d.in_ch * d.in_h * d.in_w];
    for n in 0..d.batch {
        for oy in 0..d.out_h {
            for ox in 0..d.out_w {
                let row_base = ((n * d.out_h + oy) * d.out_w + ox) * ck2;
                for c in 0..d.in_ch {
                    let base_x = (n * d.in_ch + c) * d.in_h * d.in_w;
                    for ky in 0..d.k_h {
                        let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                        if iy < 0 || iy >= d.in_h as isize {
                            continue;
                        }
                        let x_row = base_x + iy as usize * d.in_w;
                        let idx = row_base + (c * d.k_h + ky) * d.k_w;
                        for kx in 0..d.k_w {
                            let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                            if ix >= 0 && ix < d.in_w as isize {
                                dx[x_row + ix as usize] += cols[idx + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// `[rows, F]` pixel-major view of an `[N,F,OH,OW]` gradient.
fn nchw_to_rows(g: &[f64], batch: usize, ch: usize, plane: usize) -> Vec<f64> {
    let mut rows = vec![0.0; g.len()];
    for n in 0..batch {
        for f in 0..ch {
            let src = &g[(n * ch + f) * plane..][..plane];
            let dst_base = n * plane * ch + f;
            for (p, &v) in src.iter().enumerate() {
                rows[dst_base + p * ch] = v;
            }
        }
    }
    rows
}

fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Cross-correlation (no kernel flip), `x: [N,C,H,W]`, `w: [F,C,kh,kw]`.
/// Lowered to `im2col` plus one matrix product.
pub fn conv2d(x: &[f64], w: &[f64], bias: Option<&[f64]>, d: &ConvDims) -> Vec<f64> {
    conv2d_with_cols(x, w, bias, d, false).0
}

/// [`conv2d`] that also hands back the receptive-field matrix so the
/// backward pass can reuse it. With `pre_relu`, the gathered values pass
/// through `max(0, .)` first, fusing the usual ReLU-then-convolve composite
/// into one op.
pub fn conv2d_with_cols(
    x: &[f64],
    w: &[f64],
    bias: Option<&[f64]>,
    d: &ConvDims,
    pre_relu: bool,
) -> (Vec<f64>, Vec<f64>) {
    let ck2 = d.in_ch * d.k_h * d.k_w;
    let rows = d.batch * d.out_h * d.out_w;
    let plane = d.out_h * d.out_w;
    let cols = if pre_relu { im2col_map(x, d, |v| v.max(0.0)) } else { im2col(x, d) };
    let w_t = transpose(w, d.out_ch, ck2);
    let mut y_rows = mm(&cols, &w_t, rows, ck2, d.out_ch);
    if let Some(b) = bias {
        for row in y_rows.chunks_mut(d.out_ch) {
            for (v, &bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
    }
    // pixel-major rows back to [N,F,OH,OW]
    let mut out = vec![0.0; rows * d.out_ch];
    for n in 0..d.batch {
        for f in 0..d.out_ch {
            let dst = &mut out[(n * d.out_ch + f) * plane..][..plane];
            let src_base = n * plane * d.out_ch + f;
            for (p, v) in dst.iter_mut().enumerate() {
                *v = y_rows[src_base + p * d.out_ch];
            }
        }
    }
    (out, cols)
}

/// Gradients of [`conv2d`] given the receptive-field matrix saved from the
/// forward pass. The input itself is not needed: the weight gradient comes
/// from `cols`, the input gradient from scattering `G * W` back.
pub fn conv2d_backward_from_cols(
    cols: &[f64],
    w: &[f64],
    grad_out: &[f64],
    d: &ConvDims,
    want_bias: bool,
    pre_relu_input: Option<&[f64]>,
) -> (Vec<f64>, Vec<f64>, Option<Vec<f64>>) {
    let ck2 = d.in_ch * d.k_h * d.k_w;
    let rows = d.batch * d.out_h * d.out_w;
    let plane = d.out_h * d.out_w;
    let g_rows = nchw_to_rows(grad_out, d.batch, d.out_ch, plane);

    let db = want_bias.then(|| {
        let mut db = vec![0.0; d.out_ch];
        for row in g_rows.chunks(d.out_ch) {
            for (acc, &g) in db.iter_mut().zip(row) {
                *acc += g;
            }
        }
        db
    });

    let dw_t = mm_at_b(cols, &g_rows, rows, ck2, d.out_ch);
    let dw = transpose(&dw_t, ck2, d.out_ch);

    let dx_cols = mm(&g_rows, w, rows, d.out_ch, ck2);
    let mut dx = col2im(&dx_cols, d);
    if let Some(x) = pre_relu_input {
        for (dv, &xv) in dx.iter_mut().zip(x) {
            if xv <= 0.0 {
                *dv = 0.0;
            }
        }
    }
    (dx, dw, db)
}

/// Max pooling with square window == stride. Returns the pooled values and
/// the flat input index of each window maximum (first occurrence wins).
pub fn maxpool2d(
    x: &[f64],
    batch: usize,
    ch: usize,
    h: usize,
    w: usize,
    window: usize,
) -> (Vec<f64>, Vec<usize>) {
    let oh = h / window;
    let ow = w / window;
    let mut out = vec![0.0; batch * ch * oh * ow];
    let mut arg = vec![0usize; out.len()];
    for nc in 0..batch * ch {
        let base_x = nc * h * w;
        let base_o = nc * oh * ow;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_ix = 0;
                for dy in 0..window {
                    for dx in 0..window {
                        let ix = base_x + (oy * window + dy) * w + ox * window + dx;
                        if x[ix] > best {
                            best = x[ix];
                            best_ix = ix;
                        }
                    }
                }
                out[base_o + oy * ow + ox] = best;
                arg[base_o + oy * ow + ox] = best_ix;
            }
        }
    }
    (out, arg)
}

/// Nearest-neighbor upsampling by an integer factor.
pub fn upsample2d(x: &[f64], batch: usize, ch: usize, h: usize, w: usize, factor: usize) -> Vec<f64> {
    let oh = h * factor;
    let ow = w * factor;
    let mut out = vec![0.0; batch * ch * oh * ow];
    for nc in 0..batch * ch {
        let base_x = nc * h * w;
        let base_o = nc * oh * ow;
        for oy in 0..oh {
            let row_x = &x[base_x + (oy / factor) * w..][..w];
            let row_o = &mut out[base_o + oy * ow..][..ow];
            for (ox, o) in row_o.iter_mut().enumerate() {
                *o = row_x[ox / factor];
            }
        }
    }
    out
}

/// Backward of nearest-neighbor upsampling: sum over each replicated block.
pub fn upsample2d_backward(
    grad: &[f64],
    batch: usize,
    ch: usize,
    h: usize,
    w: usize,
    factor: usize,
) -> Vec<f64> {
    let ow = w * factor;
    let mut dx = vec![0.0; batch * ch * h * w];
    for nc in 0..batch * ch {
        let base_x = nc * h * w;
        let base_g = nc * h * factor * ow;
        for oy in 0..h * factor {
            let row_g = &grad[base_g + oy * ow..][..ow];
            let row_dx = &mut dx[base_x + (oy / factor) * w..][..w];
            for (ox, &g) in row_g.iter().enumerate() {
                row_dx[ox / factor] += g;
            }
        }
    }
    dx
}

/// Iteration geometry for slicing a shape along one axis.
pub fn axis_geometry(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

/// Softmax along `axis`, stabilized by per-slice max subtraction.
pub fn softmax(x: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, len, inner) = axis_geometry(shape, axis);
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = f64::NEG_INFINITY;
            for t in 0..len {
                max = max.max(x[base + t * inner]);
            }
            let mut sum = 0.0;
            for t in 0..len {
                let e = (x[base + t * inner] - max).exp();
                out[base + t * inner] = e;
                sum += e;
            }
            for t in 0..len {
                out[base + t * inner] /= sum;
            }
        }
    }
    out
}

/// VJP of softmax: `dx = s * (g - <g, s>)` per slice.
pub fn softmax_backward(s: &[f64], grad: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, len, inner) = axis_geometry(shape, axis);
    let mut dx = vec![0.0; s.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut dot = 0.0;
            for t in 0..len {
                dot += grad[base + t * inner] * s[base + t * inner];
            }
            for t in 0..len {
                dx[base + t * inner] = s[base + t * inner] * (grad[base + t * inner] - dot);
            }
        }
    }
    dx
}

/// Row-major strides of a shape.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Reorders axes: `out[idx[axes[0]], idx[axes[1]], ...] = x[idx]`.
///
/// Walks the output linearly and advances the source offset odometer-style,
/// so there is no per-element division.
pub fn permute(x: &[f64], shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let rank = shape.len();
    let mut out = vec![0.0; x.len()];
    let mut coords = vec![0usize; rank];
    let mut src = 0usize;
    for slot in out.iter_mut() {
        *slot = x[src];
        for d in (0..rank).rev() {
            coords[d] += 1;
            src += src_strides[d];
            if coords[d] < out_shape[d] {
                break;
            }
            src -= src_strides[d] * out_shape[d];
            coords[d] = 0;
        }
    }
    out
}
