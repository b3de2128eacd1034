//! Dense numeric kernels behind the graph operations.
//!
//! Convolutions go through im2col plus a gemm (matrixmultiply's dgemm),
//! which is where essentially all training time is spent. Everything
//! here is sequential and allocation order is fixed, so results are
//! bit-reproducible run to run.

/// C (m x n, row-major) = A (m x k) * B (k x n) + beta * C.
pub fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0, a.as_ptr(), k as isize, 1, b.as_ptr(), n as isize, 1, beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// C (m x n) = A^T * B + beta * C, with A stored k x m row-major.
pub fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0, a.as_ptr(), 1, m as isize, b.as_ptr(), n as isize, 1, beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// C (m x n) = A * B^T + beta * C, with B stored n x k row-major.
pub fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0, a.as_ptr(), k as isize, 1, b.as_ptr(), 1, k as isize, beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// Static extents of one conv2d application.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvDims {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    /// Kernel side, 1 or 3. Stride 1; 3x3 uses zero padding of 1 so the
    /// spatial extent is preserved.
    pub k: usize,
}

impl ConvDims {
    pub fn hw(&self) -> usize {
        self.h * self.w
    }
}

/// Unfolds one image (cin x h x w) into columns (cin*9 x h*w) for a 3x3
/// kernel with zero padding 1.
fn im2col3(x: &[f64], cin: usize, h: usize, w: usize, col: &mut [f64]) {
    let hw = h * w;
    debug_assert_eq!(x.len(), cin * hw);
    debug_assert_eq!(col.len(), cin * 9 * hw);
    for c in 0..cin {
        let xc = &x[c * hw..(c + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut col[((c * 3 + ky) * 3 + kx) * hw..((c * 3 + ky) * 3 + kx + 1) * hw];
                for y in 0..h {
                    let iy = y as isize + ky as isize - 1;
                    let out = &mut row[y * w..(y + 1) * w];
                    if iy < 0 || iy >= h as isize {
                        out.fill(0.0);
                        continue;
                    }
                    let src = &xc[iy as usize * w..(iy as usize + 1) * w];
                    for x_ in 0..w {
                        let ix = x_ as isize + kx as isize - 1;
                        out[x_] = if ix < 0 || ix >= w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Folds columns back, adding overlapping contributions into `dx`.
fn col2im3_add(col: &[f64], cin: usize, h: usize, w: usize, dx: &mut [f64]) {
    let hw = h * w;
    for c in 0..cin {
        let dc = &mut dx[c * hw..(c + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &col[((c * 3 + ky) * 3 + kx) * hw..((c * 3 + ky) * 3 + kx + 1) * hw];
                for y in 0..h {
                    let iy = y as isize + ky as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut dc[iy as usize * w..(iy as usize + 1) * w];
                    let src = &row[y * w..(y + 1) * w];
                    for x_ in 0..w {
                        let ix = x_ as isize + kx as isize - 1;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += src[x_];
                        }
                    }
                }
            }
        }
    }
}

/// y = conv(x, wgt) + bias. Weight layout `[cout, cin, k, k]`, bias `[cout]`.
pub fn conv2d_forward(x: &[f64], wgt: &[f64], bias: &[f64], d: &ConvDims, y: &mut [f64]) {
    let hw = d.hw();
    let kk = d.k * d.k;
    let mut col = if d.k == 3 { vec![0.0; d.cin * 9 * hw] } else { Vec::new() };
    for b in 0..d.batch {
        let xb = &x[b * d.cin * hw..(b + 1) * d.cin * hw];
        let yb = &mut y[b * d.cout * hw..(b + 1) * d.cout * hw];
        if d.k == 1 {
            gemm_nn(d.cout, d.cin, hw, wgt, xb, 0.0, yb);
        } else {
            im2col3(xb, d.cin, d.h, d.w, &mut col);
            gemm_nn(d.cout, d.cin * kk, hw, wgt, &col, 0.0, yb);
        }
        for oc in 0..d.cout {
            let bias_v = bias[oc];
            for v in &mut yb[oc * hw..(oc + 1) * hw] {
                *v += bias_v;
            }
        }
    }
}

/// Accumulates conv gradients into any of `dx`, `dw`, `db` (all +=).
pub fn conv2d_backward(
    x: &[f64],
    wgt: &[f64],
    d: &ConvDims,
    dy: &[f64],
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
    mut db: Option<&mut [f64]>,
) {
    let hw = d.hw();
    let kk = d.k * d.k;
    let cols = d.cin * kk;
    let mut col = if d.k == 3 { vec![0.0; cols * hw] } else { Vec::new() };
    let mut dcol = if d.k == 3 && dx.is_some() { vec![0.0; cols * hw] } else { Vec::new() };
    for b in 0..d.batch {
        let xb = &x[b * d.cin * hw..(b + 1) * d.cin * hw];
        let dyb = &dy[b * d.cout * hw..(b + 1) * d.cout * hw];
        if let Some(db) = db.as_deref_mut() {
            for oc in 0..d.cout {
                db[oc] += dyb[oc * hw..(oc + 1) * hw].iter().sum::<f64>();
            }
        }
        if d.k == 1 {
            if let Some(dw) = dw.as_deref_mut() {
                gemm_nt(d.cout, hw, d.cin, dyb, xb, 1.0, dw);
            }
            if let Some(dx) = dx.as_deref_mut() {
                let dxb = &mut dx[b * d.cin * hw..(b + 1) * d.cin * hw];
                gemm_tn(d.cin, d.cout, hw, wgt, dyb, 1.0, dxb);
            }
        } else {
            if dw.is_some() || dx.is_some() {
                im2col3(xb, d.cin, d.h, d.w, &mut col);
            }
            if let Some(dw) = dw.as_deref_mut() {
                gemm_nt(d.cout, hw, cols, dyb, &col, 1.0, dw);
            }
            if let Some(dx) = dx.as_deref_mut() {
                gemm_tn(cols, d.cout, hw, wgt, dyb, 0.0, &mut dcol);
                let dxb = &mut dx[b * d.cin * hw..(b + 1) * d.cin * hw];
                col2im3_add(&dcol, d.cin, d.h, d.w, dxb);
            }
        }
    }
}

/// Per-channel statistics captured by a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BnStats {
    pub mean: Vec<f64>,
    /// Biased (divide by N) variance, the one used for normalization.
    pub var_biased: Vec<f64>,
    pub inv_std: Vec<f64>,
}

pub fn bn_forward_train(
    x: &[f64],
    batch: usize,
    c: usize,
    hw: usize,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
    y: &mut [f64],
) -> BnStats {
    let n = (batch * hw) as f64;
    let mut stats = BnStats {
        mean: vec![0.0; c],
        var_biased: vec![0.0; c],
        inv_std: vec![0.0; c],
    };
    for ci in 0..c {
        let mut sum = 0.0;
        for b in 0..batch {
            let base = (b * c + ci) * hw;
            sum += x[base..base + hw].iter().sum::<f64>();
        }
        let mean = sum / n;
        let mut var = 0.0;
        for b in 0..batch {
            let base = (b * c + ci) * hw;
            for &v in &x[base..base + hw] {
                let d = v - mean;
                var += d * d;
            }
        }
        var /= n;
        let inv = 1.0 / (var + eps).sqrt();
        stats.mean[ci] = mean;
        stats.var_biased[ci] = var;
        stats.inv_std[ci] = inv;
        let (g, bt) = (gamma[ci], beta[ci]);
        for b in 0..batch {
            let base = (b * c + ci) * hw;
            for i in base..base + hw {
                y[i] = (x[i] - mean) * inv * g + bt;
            }
        }
    }
    stats
}

#[allow(clippy::too_many_arguments)]
pub fn bn_backward_train(
    x: &[f64],
    batch: usize,
    c: usize,
    hw: usize,
    gamma: &[f64],
    stats: &BnStats,
    dy: &[f64],
    dx: &mut [f64],
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) {
    let n = (batch * hw) as f64;
    for ci in 0..c {
        let (mean, inv) = (stats.mean[ci], stats.inv_std[ci]);
        let mut s1 = 0.0; // sum dy
        let mut s2 = 0.0; // sum dy * xhat
        for b in 0..batch {
            let base = (b * c + ci) * hw;
            for i in base..base + hw {
                s1 += dy[i];
                s2 += dy[i] * (x[i] - mean) * inv;
            }
        }
        dgamma[ci] += s2;
        dbeta[ci] += s1;
        let g = gamma[ci];
        for b in 0..batch {
            let base = (b * c + ci) * hw;
            for i in base..base + hw {
                let xhat = (x[i] - mean) * inv;
                dx[i] += g * inv * (dy[i] - s1 / n - xhat * s2 / n);
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn bn_forward_eval(
    x: &[f64],
    batch: usize,
    c: usize,
    hw: usize,
    gamma: &[f64],
    beta: &[f64],
    rmean: &[f64],
    rvar: &[f64],
    eps: f64,
    y: &mut [f64],
) {
    for ci in 0..c {
        let inv = 1.0 / (rvar[ci] + eps).sqrt();
        let (m, g, bt) = (rmean[ci], gamma[ci], beta[ci]);
        for b in 0..batch {
            let base = (b * c + ci) * hw;
            for i in base..base + hw {
                y[i] = (x[i] - m) * inv * g + bt;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn bn_backward_eval(
    x: &[f64],
    batch: usize,
    c: usize,
    hw: usize,
    gamma: &[f64],
    rmean: &[f64],
    rvar: &[f64],
    eps: f64,
    dy: &[f64],
    dx: &mut [f64],
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) {
    for ci in 0..c {
        let inv = 1.0 / (rvar[ci] + eps).sqrt();
        let (m, g) = (rmean[ci], gamma[ci]);
        for b in 0..batch {
            let base = (b * c + ci) * hw;
            for i in base..base + hw {
                dgamma[ci] += dy[i] * (x[i] - m) * inv;
                dbeta[ci] += dy[i];
                dx[i] += dy[i] * g * inv;
            }
        }
    }
}

/// 2x area downsample: each output pixel is the mean of its 2x2 block.
pub fn down2x_area(x: &[f64], planes: usize, h: usize, w: usize, y: &mut [f64]) {
    let (oh, ow) = (h / 2, w / 2);
    for p in 0..planes {
        let xp = &x[p * h * w..(p + 1) * h * w];
        let yp = &mut y[p * oh * ow..(p + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let i = 2 * oy * w + 2 * ox;
                yp[oy * ow + ox] = 0.25 * (xp[i] + xp[i + 1] + xp[i + w] + xp[i + w + 1]);
            }
        }
    }
}

pub fn down2x_area_backward(dy: &[f64], planes: usize, h: usize, w: usize, dx: &mut [f64]) {
    let (oh, ow) = (h / 2, w / 2);
    for p in 0..planes {
        let dyp = &dy[p * oh * ow..(p + 1) * oh * ow];
        let dxp = &mut dx[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let g = 0.25 * dyp[oy * ow + ox];
                let i = 2 * oy * w + 2 * ox;
                dxp[i] += g;
                dxp[i + 1] += g;
                dxp[i + w] += g;
                dxp[i + w + 1] += g;
            }
        }
    }
}

/// 2x nearest downsample: keeps the top-left pixel of each 2x2 block.
pub fn down2x_nearest(x: &[f64], planes: usize, h: usize, w: usize, y: &mut [f64]) {
    let (oh, ow) = (h / 2, w / 2);
    for p in 0..planes {
        let xp = &x[p * h * w..(p + 1) * h * w];
        let yp = &mut y[p * oh * ow..(p + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                yp[oy * ow + ox] = xp[2 * oy * w + 2 * ox];
            }
        }
    }
}

pub fn down2x_nearest_backward(dy: &[f64], planes: usize, h: usize, w: usize, dx: &mut [f64]) {
    let (oh, ow) = (h / 2, w / 2);
    for p in 0..planes {
        let dyp = &dy[p * oh * ow..(p + 1) * oh * ow];
        let dxp = &mut dx[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                dxp[2 * oy * w + 2 * ox] += dyp[oy * ow + ox];
            }
        }
    }
}

pub fn up2x_nearest(x: &[f64], planes: usize, h: usize, w: usize, y: &mut [f64]) {
    let (oh, ow) = (2 * h, 2 * w);
    for p in 0..planes {
        let xp = &x[p * h * w..(p + 1) * h * w];
        let yp = &mut y[p * oh * ow..(p + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                yp[oy * ow + ox] = xp[(oy / 2) * w + ox / 2];
            }
        }
    }
}

pub fn up2x_nearest_backward(dy: &[f64], planes: usize, h: usize, w: usize, dx: &mut [f64]) {
    let (oh, ow) = (2 * h, 2 * w);
    for p in 0..planes {
        let dyp = &dy[p * oh * ow..(p + 1) * oh * ow];
        let dxp = &mut dx[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                dxp[(oy / 2) * w + ox / 2] += dyp[oy * ow + ox];
            }
        }
    }
}

/// Source taps for one bilinear output coordinate (align_corners false,
/// edges replicated).
fn bilinear_taps(out: usize, in_len: usize) -> Vec<(usize, usize, f64)> {
    (0..out)
        .map(|o| {
            let s = (o as f64 + 0.5) / 2.0 - 0.5;
            let f = s.floor();
            let frac = s - f;
            let lo = f.max(0.0).min((in_len - 1) as f64) as usize;
            let hi = (f + 1.0).max(0.0).min((in_len - 1) as f64) as usize;
            (lo, hi, frac)
        })
        .collect()
}

pub fn up2x_bilinear(x: &[f64], planes: usize, h: usize, w: usize, y: &mut [f64]) {
    let (oh, ow) = (2 * h, 2 * w);
    let ty = bilinear_taps(oh, h);
    let tx = bilinear_taps(ow, w);
    for p in 0..planes {
        let xp = &x[p * h * w..(p + 1) * h * w];
        let yp = &mut y[p * oh * ow..(p + 1) * oh * ow];
        for oy in 0..oh {
            let (y0, y1, fy) = ty[oy];
            for ox in 0..ow {
                let (x0, x1, fx) = tx[ox];
                let top = xp[y0 * w + x0] * (1.0 - fx) + xp[y0 * w + x1] * fx;
                let bot = xp[y1 * w + x0] * (1.0 - fx) + xp[y1 * w + x1] * fx;
                yp[oy * ow + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
}

pub fn up2x_bilinear_backward(dy: &[f64], planes: usize, h: usize, w: usize, dx: &mut [f64]) {
    let (oh, ow) = (2 * h, 2 * w);
    let ty = bilinear_taps(oh, h);
    let tx = bilinear_taps(ow, w);
    for p in 0..planes {
        let dyp = &dy[p * oh * ow..(p + 1) * oh * ow];
        let dxp = &mut dx[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            let (y0, y1, fy) = ty[oy];
            for ox in 0..ow {
                let (x0, x1, fx) = tx[ox];
                let g = dyp[oy * ow + ox];
                dxp[y0 * w + x0] += g * (1.0 - fy) * (1.0 - fx);
                dxp[y0 * w + x1] += g * (1.0 - fy) * fx;
                dxp[y1 * w + x0] += g * fy * (1.0 - fx);
                dxp[y1 * w + x1] += g * fy * fx;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_small_oracle() {
        // 2x3 * 3x2, checked by hand.
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0];
        let mut c = [0.0; 4];
        gemm_nn(2, 3, 2, &a, &b, 0.0, &mut c);
        assert_eq!(c, [58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn gemm_transposed_variants_agree_with_nn() {
        let m = 4;
        let k = 5;
        let n = 3;
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64) * 0.3 - 2.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64) * 0.1 + 0.5).collect();
        let mut c0 = vec![0.0; m * n];
        gemm_nn(m, k, n, &a, &b, 0.0, &mut c0);

        // A stored transposed (k x m).
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for l in 0..k {
                at[l * m + i] = a[i * k + l];
            }
        }
        let mut c1 = vec![0.0; m * n];
        gemm_tn(m, k, n, &at, &b, 0.0, &mut c1);
        assert_eq!(c0, c1);

        // B stored transposed (n x k).
        let mut bt = vec![0.0; n * k];
        for l in 0..k {
            for j in 0..n {
                bt[j * k + l] = b[l * n + j];
            }
        }
        let mut c2 = vec![0.0; m * n];
        gemm_nt(m, k, n, &a, &bt, 0.0, &mut c2);
        assert_eq!(c0, c2);
    }

    #[test]
    fn conv3x3_matches_direct_loop() {
        let d = ConvDims { batch: 2, cin: 3, cout: 4, h: 5, w: 6, k: 3 };
        let hw = d.hw();
        let x: Vec<f64> = (0..d.batch * d.cin * hw).map(|i| ((i * 37 % 19) as f64) * 0.21 - 1.7).collect();
        let wgt: Vec<f64> = (0..d.cout * d.cin * 9).map(|i| ((i * 53 % 23) as f64) * 0.13 - 1.1).collect();
        let bias: Vec<f64> = (0..d.cout).map(|i| i as f64 * 0.4).collect();
        let mut y = vec![0.0; d.batch * d.cout * hw];
        conv2d_forward(&x, &wgt, &bias, &d, &mut y);

        for b in 0..d.batch {
            for oc in 0..d.cout {
                for yy in 0..d.h {
                    for xx in 0..d.w {
                        let mut acc = bias[oc];
                        for ic in 0..d.cin {
                            for ky in 0..3usize {
                                for kx in 0..3usize {
                                    let iy = yy as isize + ky as isize - 1;
                                    let ix = xx as isize + kx as isize - 1;
                                    if iy < 0 || ix < 0 || iy >= d.h as isize || ix >= d.w as isize {
                                        continue;
                                    }
                                    acc += wgt[((oc * d.cin + ic) * 3 + ky) * 3 + kx]
                                        * x[(b * d.cin + ic) * hw + iy as usize * d.w + ix as usize];
                                }
                            }
                        }
                        let got = y[(b * d.cout + oc) * hw + yy * d.w + xx];
                        assert!((got - acc).abs() < 1e-9, "mismatch at {b},{oc},{yy},{xx}");
                    }
                }
            }
        }
    }

    #[test]
    fn up2x_bilinear_interior_weights() {
        // One plane, 2x2 -> 4x4. Interior outputs mix 3:1 per axis.
        let x = [0.0, 1.0, 2.0, 3.0];
        let mut y = [0.0; 16];
        up2x_bilinear(&x, 1, 2, 2, &mut y);
        // Corners replicate.
        assert_eq!(y[0], 0.0);
        assert_eq!(y[3], 1.0);
        assert_eq!(y[12], 2.0);
        assert_eq!(y[15], 3.0);
        // y[1] sits 0.25 of the way from x[0] to x[1] on the top edge.
        assert!((y[1] - 0.25).abs() < 1e-12);
        assert!((y[2] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn down2x_area_means_blocks() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0, 13.0, 14.0, 15.0, 16.0];
        let mut y = [0.0; 4];
        down2x_area(&x, 1, 4, 4, &mut y);
        assert_eq!(y, [3.5, 5.5, 11.5, 13.5]);
    }
}
