//! Scalar math kernels behind the tape ops. Forward and backward pairs live
//! next to each other so the loop structures stay in sync.

/// C (m,n) += A (m,k) · B (k,n)
pub fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

/// dA += dC · B^T
pub fn matmul_grad_a(dc: &[f64], b: &[f64], da: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let drow = &dc[i * n..(i + 1) * n];
        for kk in 0..k {
            let brow = &b[kk * n..(kk + 1) * n];
            let mut s = 0.0;
            for j in 0..n {
                s += drow[j] * brow[j];
            }
            da[i * k + kk] += s;
        }
    }
}

/// dB += A^T · dC
pub fn matmul_grad_b(a: &[f64], dc: &[f64], db: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let drow = &dc[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == 0.0 {
                continue;
            }
            let dbrow = &mut db[kk * n..(kk + 1) * n];
            for j in 0..n {
                dbrow[j] += av * drow[j];
            }
        }
    }
}

pub fn conv_out_dim(h: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let num = h + 2 * pad;
    if num < k {
        return None;
    }
    Some((num - k) / stride + 1)
}

/// out (co, oh, ow) = conv of x (ci, h, w) with w (co, ci, k, k).
#[allow(clippy::too_many_arguments)]
pub fn conv2d(
    x: &[f64],
    w: &[f64],
    out: &mut [f64],
    ci: usize,
    h: usize,
    wd: usize,
    co: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) {
    for c_out in 0..co {
        let obase = c_out * oh * ow;
        for c_in in 0..ci {
            let xbase = c_in * h * wd;
            for kh in 0..k {
                for kw in 0..k {
                    let wv = w[((c_out * ci + c_in) * k + kh) * k + kw];
                    if wv == 0.0 {
                        continue;
                    }
                    for r in 0..oh {
                        let ih = (r * stride + kh) as isize - pad as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let xrow = xbase + ih as usize * wd;
                        let orow = obase + r * ow;
                        for c in 0..ow {
                            let iw = (c * stride + kw) as isize - pad as isize;
                            if iw < 0 || iw >= wd as isize {
                                continue;
                            }
                            out[orow + c] += wv * x[xrow + iw as usize];
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_grad(
    x: &[f64],
    w: &[f64],
    dout: &[f64],
    dx: Option<&mut [f64]>,
    dw: Option<&mut [f64]>,
    ci: usize,
    h: usize,
    wd: usize,
    co: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) {
    let mut dx = dx;
    let mut dw = dw;
    for c_out in 0..co {
        let obase = c_out * oh * ow;
        for c_in in 0..ci {
            let xbase = c_in * h * wd;
            for kh in 0..k {
                for kw in 0..k {
                    let widx = ((c_out * ci + c_in) * k + kh) * k + kw;
                    let wv = w[widx];
                    let mut dwsum = 0.0;
                    for r in 0..oh {
                        let ih = (r * stride + kh) as isize - pad as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let xrow = xbase + ih as usize * wd;
                        let orow = obase + r * ow;
                        for c in 0..ow {
                            let iw = (c * stride + kw) as isize - pad as isize;
                            if iw < 0 || iw >= wd as isize {
                                continue;
                            }
                            let g = dout[orow + c];
                            dwsum += g * x[xrow + iw as usize];
                            if let Some(dx) = dx.as_mut() {
                                dx[xrow + iw as usize] += g * wv;
                            }
                        }
                    }
                    if let Some(dw) = dw.as_mut() {
                        dw[widx] += dwsum;
                    }
                }
            }
        }
    }
}

/// Transposed convolution: x (ci, h, w), weight (ci, co, k, k),
/// out (co, (h-1)*stride + k - 2*pad, ...).
#[allow(clippy::too_many_arguments)]
pub fn deconv2d(
    x: &[f64],
    w: &[f64],
    out: &mut [f64],
    ci: usize,
    h: usize,
    wd: usize,
    co: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) {
    for c_in in 0..ci {
        let xbase = c_in * h * wd;
        for c_out in 0..co {
            let obase = c_out * oh * ow;
            for kh in 0..k {
                for kw in 0..k {
                    let wv = w[((c_in * co + c_out) * k + kh) * k + kw];
                    if wv == 0.0 {
                        continue;
                    }
                    for r in 0..h {
                        let or = (r * stride + kh) as isize - pad as isize;
                        if or < 0 || or >= oh as isize {
                            continue;
                        }
                        let orow = obase + or as usize * ow;
                        let xrow = xbase + r * wd;
                        for c in 0..wd {
                            let oc = (c * stride + kw) as isize - pad as isize;
                            if oc < 0 || oc >= ow as isize {
                                continue;
                            }
                            out[orow + oc as usize] += wv * x[xrow + c];
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn deconv2d_grad(
    x: &[f64],
    w: &[f64],
    dout: &[f64],
    dx: Option<&mut [f64]>,
    dw: Option<&mut [f64]>,
    ci: usize,
    h: usize,
    wd: usize,
    co: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) {
    let mut dx = dx;
    let mut dw = dw;
    for c_in in 0..ci {
        let xbase = c_in * h * wd;
        for c_out in 0..co {
            let obase = c_out * oh * ow;
            for kh in 0..k {
                for kw in 0..k {
                    let widx = ((c_in * co + c_out) * k + kh) * k + kw;
                    let wv = w[widx];
                    let mut dwsum = 0.0;
                    for r in 0..h {
                        let or = (r * stride + kh) as isize - pad as isize;
                        if or < 0 || or >= oh as isize {
                            continue;
                        }
                        let orow = obase + or as usize * ow;
                        let xrow = xbase + r * wd;
                        for c in 0..wd {
                            let oc = (c * stride + kw) as isize - pad as isize;
                            if oc < 0 || oc >= ow as isize {
                                continue;
                            }
                            let g = dout[orow + oc as usize];
                            dwsum += g * x[xrow + c];
                            if let Some(dx) = dx.as_mut() {
                                dx[xrow + c] += g * wv;
                            }
                        }
                    }
                    if let Some(dw) = dw.as_mut() {
                        dw[widx] += dwsum;
                    }
                }
            }
        }
    }
}

/// Per-axis sampling plan for bilinear interpolation with half-pixel centers
/// and edge clamping.
pub fn bilinear_axis(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    (0..n_out)
        .map(|o| {
            let s = (o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5;
            if s <= 0.0 {
                (0, 0, 0.0)
            } else if s >= (n_in - 1) as f64 {
                (n_in - 1, n_in - 1, 0.0)
            } else {
                let i0 = s.floor() as usize;
                (i0, i0 + 1, s - i0 as f64)
            }
        })
        .collect()
}

pub fn nearest_axis(n_in: usize, n_out: usize) -> Vec<usize> {
    (0..n_out)
        .map(|o| {
            let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64).floor();
            (s as usize).min(n_in - 1)
        })
        .collect()
}
