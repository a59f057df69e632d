//! Raw dense f64 kernels, all row-major. No autodiff here; the ops in
//! `tensor::mod` wire these into the tape.

/// C += A · B. A: [m,k], B: [k,n], C: [m,n].
pub fn gemm(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &a_val) in a_row.iter().enumerate() {
            if a_val == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for j in 0..n {
                c_row[j] += a_val * b_row[j];
            }
        }
    }
}

/// C += Aᵀ · B. A: [k,m], B: [k,n], C: [m,n].
pub fn gemm_at_b(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let a_val = a_row[i];
            if a_val == 0.0 {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                c_row[j] += a_val * b_row[j];
            }
        }
    }
}

/// C += A · Bᵀ. A: [m,k], B: [n,k], C: [m,n].
pub fn gemm_a_bt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for p in 0..k {
                acc += a_row[p] * b_row[p];
            }
            c_row[j] += acc;
        }
    }
}

/// Decompose `shape` around `axis` into (outer, len, inner) such that the flat
/// index of element (o, l, i) is (o*len + l)*inner + i.
pub fn axis_lanes(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

/// Softmax along `axis` with max-shift. Writes into `out`.
pub fn softmax_axis(x: &[f64], shape: &[usize], axis: usize, out: &mut [f64]) {
    let (outer, len, inner) = axis_lanes(shape, axis);
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = f64::NEG_INFINITY;
            for l in 0..len {
                max = max.max(x[base + l * inner]);
            }
            let mut sum = 0.0;
            for l in 0..len {
                let e = (x[base + l * inner] - max).exp();
                out[base + l * inner] = e;
                sum += e;
            }
            for l in 0..len {
                out[base + l * inner] /= sum;
            }
        }
    }
}

/// Log-softmax along `axis` with max-shift.
pub fn log_softmax_axis(x: &[f64], shape: &[usize], axis: usize, out: &mut [f64]) {
    let (outer, len, inner) = axis_lanes(shape, axis);
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = f64::NEG_INFINITY;
            for l in 0..len {
                max = max.max(x[base + l * inner]);
            }
            let mut sum = 0.0;
            for l in 0..len {
                sum += (x[base + l * inner] - max).exp();
            }
            let lse = max + sum.ln();
            for l in 0..len {
                out[base + l * inner] = x[base + l * inner] - lse;
            }
        }
    }
}

/// Direct cross-correlation. x: [c_in,h,w], k: [c_out,c_in,kh,kw],
/// out: [c_out,h_out,w_out] (caller-zeroed).
#[allow(clippy::too_many_arguments)]
pub fn conv2d(
    x: &[f64],
    k: &[f64],
    out: &mut [f64],
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
) {
    for co in 0..c_out {
        let out_ch = &mut out[co * h_out * w_out..(co + 1) * h_out * w_out];
        for ci in 0..c_in {
            let x_ch = &x[ci * h * w..(ci + 1) * h * w];
            let k_base = (co * c_in + ci) * kh * kw;
            for ky in 0..kh {
                for kx in 0..kw {
                    let k_val = k[k_base + ky * kw + kx];
                    if k_val == 0.0 {
                        continue;
                    }
                    for oy in 0..h_out {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let x_row = &x_ch[iy as usize * w..(iy as usize + 1) * w];
                        let o_row = &mut out_ch[oy * w_out..(oy + 1) * w_out];
                        for ox in 0..w_out {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            o_row[ox] += k_val * x_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Gradient of conv2d w.r.t. input and kernels, accumulated into gx/gk.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    x: &[f64],
    k: &[f64],
    gout: &[f64],
    gx: &mut [f64],
    gk: &mut [f64],
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
) {
    for co in 0..c_out {
        let g_ch = &gout[co * h_out * w_out..(co + 1) * h_out * w_out];
        for ci in 0..c_in {
            let x_ch = &x[ci * h * w..(ci + 1) * h * w];
            let gx_ch = &mut gx[ci * h * w..(ci + 1) * h * w];
            let k_base = (co * c_in + ci) * kh * kw;
            for ky in 0..kh {
                for kx in 0..kw {
                    let k_val = k[k_base + ky * kw + kx];
                    let mut gk_acc = 0.0;
                    for oy in 0..h_out {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = iy as usize * w;
                        let g_row = &g_ch[oy * w_out..(oy + 1) * w_out];
                        for ox in 0..w_out {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let g = g_row[ox];
                            gk_acc += g * x_ch[row + ix as usize];
                            gx_ch[row + ix as usize] += g * k_val;
                        }
                    }
                    gk[k_base + ky * kw + kx] += gk_acc;
                }
            }
        }
    }
}

/// 2x2-style max pooling with window `k` and stride `k`. Records flat argmax
/// indices for the backward pass. x: [c,h,w], out: [c,h/k,w/k].
pub fn max_pool2d(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    out: &mut [f64],
    argmax: &mut [usize],
) {
    let ho = h / k;
    let wo = w / k;
    for ch in 0..c {
        let x_ch = &x[ch * h * w..(ch + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0;
                for dy in 0..k {
                    for dx in 0..k {
                        let idx = (oy * k + dy) * w + (ox * k + dx);
                        if x_ch[idx] > best {
                            best = x_ch[idx];
                            best_idx = idx;
                        }
                    }
                }
                let o_idx = (ch * ho + oy) * wo + ox;
                out[o_idx] = best;
                argmax[o_idx] = ch * h * w + best_idx;
            }
        }
    }
}

/// Standard normal CDF via erf; used by the exact GELU.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Standard normal PDF.
pub fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}
