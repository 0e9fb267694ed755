//! Forward and backward kernels for single-sample `C×H×W` activations.

use matrixmultiply::sgemm;

pub(crate) const GN_EPS: f32 = 1e-5;

/// `c = op(a)·op(b) + beta·c` with row-major storage.
///
/// `a` is stored `m×k` (or `k×m` when `ta`), `b` is stored `k×n` (or `n×k` when `tb`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    ta: bool,
    b: &[f32],
    tb: bool,
    beta: f32,
    c: &mut [f32],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides above address exactly the `m×k`, `k×n` and `m×n`
    // extents whose lengths are checked against the slices.
    unsafe {
        sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfolds 3×3 neighbourhoods (zero padding 1) into a `(C·9)×(H·W)` matrix.
pub(crate) fn im2col3(x: &[f32], c: usize, h: usize, w: usize) -> Vec<f32> {
    let hw = h * w;
    let mut col = vec![0.0f32; c * 9 * hw];
    for ci in 0..c {
        let src = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut col[((ci * 9) + ky * 3 + kx) * hw..][..hw];
                let (x_lo, x_hi) = (1usize.saturating_sub(kx), (w + 1 - kx).min(w));
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let sy = sy as usize;
                    if x_lo < x_hi {
                        let sx_lo = x_lo + kx - 1;
                        row[y * w + x_lo..y * w + x_hi]
                            .copy_from_slice(&src[sy * w + sx_lo..sy * w + sx_lo + (x_hi - x_lo)]);
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col3`].
pub(crate) fn col2im3(col: &[f32], c: usize, h: usize, w: usize) -> Vec<f32> {
    let hw = h * w;
    let mut x = vec![0.0f32; c * hw];
    for ci in 0..c {
        let dst = &mut x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &col[((ci * 9) + ky * 3 + kx) * hw..][..hw];
                let (x_lo, x_hi) = (1usize.saturating_sub(kx), (w + 1 - kx).min(w));
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize || x_lo >= x_hi {
                        continue;
                    }
                    let sy = sy as usize;
                    let sx_lo = x_lo + kx - 1;
                    let d = &mut dst[sy * w + sx_lo..sy * w + sx_lo + (x_hi - x_lo)];
                    for (dv, &cv) in d.iter_mut().zip(&row[y * w + x_lo..y * w + x_hi]) {
                        *dv += cv;
                    }
                }
            }
        }
    }
    x
}

/// Convolution with weights stored `cout×(cin·k²)` applied to an unfolded input.
pub(crate) fn conv_forward(
    col: &[f32],
    weight: &[f32],
    bias: &[f32],
    cout: usize,
    hw: usize,
) -> Vec<f32> {
    let kdim = weight.len() / cout;
    let mut out = vec![0.0f32; cout * hw];
    for (co, b) in bias.iter().enumerate() {
        out[co * hw..(co + 1) * hw].fill(*b);
    }
    gemm(cout, kdim, hw, weight, false, col, false, 1.0, &mut out);
    out
}

/// Accumulates weight/bias gradients and returns the gradient w.r.t. the unfolded input.
pub(crate) fn conv_backward(
    col: &[f32],
    weight: &[f32],
    dy: &[f32],
    cout: usize,
    hw: usize,
    grads: Option<(&mut [f32], &mut [f32])>,
    need_input: bool,
) -> Option<Vec<f32>> {
    let kdim = weight.len() / cout;
    if let Some((dw, db)) = grads {
        gemm(cout, hw, kdim, dy, false, col, true, 1.0, dw);
        for co in 0..cout {
            db[co] += dy[co * hw..(co + 1) * hw].iter().sum::<f32>();
        }
    }
    if !need_input {
        return None;
    }
    let mut dcol = vec![0.0f32; kdim * hw];
    gemm(kdim, cout, hw, weight, true, dy, false, 0.0, &mut dcol);
    Some(dcol)
}

pub(crate) struct GroupNormCache {
    pub xhat: Vec<f32>,
    pub rstd: Vec<f32>,
}

pub(crate) fn group_norm_forward(
    x: &[f32],
    c: usize,
    hw: usize,
    groups: usize,
    gamma: &[f32],
    beta: &[f32],
) -> (Vec<f32>, GroupNormCache) {
    let gs = c / groups * hw;
    let mut xhat = vec![0.0f32; x.len()];
    let mut rstd = Vec::with_capacity(groups);
    for g in 0..groups {
        let xs = &x[g * gs..(g + 1) * gs];
        let mean = xs.iter().map(|&v| v as f64).sum::<f64>() / gs as f64;
        let var = xs.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / gs as f64;
        let r = 1.0 / (var + GN_EPS as f64).sqrt();
        for (o, &v) in xhat[g * gs..(g + 1) * gs].iter_mut().zip(xs) {
            *o = ((v as f64 - mean) * r) as f32;
        }
        rstd.push(r as f32);
    }
    let mut y = vec![0.0f32; x.len()];
    for ch in 0..c {
        let (gm, bt) = (gamma[ch], beta[ch]);
        for (o, &v) in y[ch * hw..(ch + 1) * hw]
            .iter_mut()
            .zip(&xhat[ch * hw..(ch + 1) * hw])
        {
            *o = gm * v + bt;
        }
    }
    (y, GroupNormCache { xhat, rstd })
}

pub(crate) fn group_norm_backward(
    cache: &GroupNormCache,
    dy: &[f32],
    c: usize,
    hw: usize,
    gamma: &[f32],
    grads: Option<(&mut [f32], &mut [f32])>,
) -> Vec<f32> {
    let groups = cache.rstd.len();
    let gs = c / groups * hw;
    if let Some((dgamma, dbeta)) = grads {
        for ch in 0..c {
            let dys = &dy[ch * hw..(ch + 1) * hw];
            let xs = &cache.xhat[ch * hw..(ch + 1) * hw];
            dgamma[ch] += dys.iter().zip(xs).map(|(a, b)| a * b).sum::<f32>();
            dbeta[ch] += dys.iter().sum::<f32>();
        }
    }
    let mut dxhat = vec![0.0f32; dy.len()];
    for ch in 0..c {
        let gm = gamma[ch];
        for (o, &d) in dxhat[ch * hw..(ch + 1) * hw]
            .iter_mut()
            .zip(&dy[ch * hw..(ch + 1) * hw])
        {
            *o = d * gm;
        }
    }
    let mut dx = vec![0.0f32; dy.len()];
    for g in 0..groups {
        let r = g * gs..(g + 1) * gs;
        let (dxh, xh) = (&dxhat[r.clone()], &cache.xhat[r.clone()]);
        let s1 = dxh.iter().map(|&v| v as f64).sum::<f64>() / gs as f64;
        let s2 = dxh
            .iter()
            .zip(xh)
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum::<f64>()
            / gs as f64;
        let rs = cache.rstd[g] as f64;
        for ((o, &d), &xv) in dx[r].iter_mut().zip(dxh).zip(xh) {
            *o = (rs * (d as f64 - s1 - xv as f64 * s2)) as f32;
        }
    }
    dx
}

#[inline]
pub(crate) fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

pub(crate) fn silu(x: &[f32]) -> Vec<f32> {
    x.iter().map(|&v| v * sigmoid(v)).collect()
}

/// `dy ⊙ silu'(x)`.
pub(crate) fn silu_backward(x: &[f32], dy: &[f32]) -> Vec<f32> {
    x.iter()
        .zip(dy)
        .map(|(&v, &d)| {
            let s = sigmoid(v);
            d * s * (1.0 + v * (1.0 - s))
        })
        .collect()
}

/// Dense layer with weights stored `out×in`.
pub(crate) fn linear(x: &[f32], weight: &[f32], bias: &[f32]) -> Vec<f32> {
    let n_in = x.len();
    bias.iter()
        .enumerate()
        .map(|(o, b)| {
            b + weight[o * n_in..(o + 1) * n_in]
                .iter()
                .zip(x)
                .map(|(w, v)| w * v)
                .sum::<f32>()
        })
        .collect()
}

pub(crate) fn linear_backward(
    x: &[f32],
    weight: &[f32],
    dy: &[f32],
    grads: Option<(&mut [f32], &mut [f32])>,
) -> Vec<f32> {
    let n_in = x.len();
    if let Some((dw, db)) = grads {
        for (o, &d) in dy.iter().enumerate() {
            db[o] += d;
            for (g, &v) in dw[o * n_in..(o + 1) * n_in].iter_mut().zip(x) {
                *g += d * v;
            }
        }
    }
    let mut dx = vec![0.0f32; n_in];
    for (o, &d) in dy.iter().enumerate() {
        for (g, &w) in dx.iter_mut().zip(&weight[o * n_in..(o + 1) * n_in]) {
            *g += d * w;
        }
    }
    dx
}

pub(crate) fn avg_pool2(x: &[f32], c: usize, h: usize, w: usize) -> Vec<f32> {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![0.0f32; c * ho * wo];
    for ch in 0..c {
        for y in 0..ho {
            for xx in 0..wo {
                let base = ch * h * w;
                let s = x[base + 2 * y * w + 2 * xx]
                    + x[base + 2 * y * w + 2 * xx + 1]
                    + x[base + (2 * y + 1) * w + 2 * xx]
                    + x[base + (2 * y + 1) * w + 2 * xx + 1];
                out[(ch * ho + y) * wo + xx] = 0.25 * s;
            }
        }
    }
    out
}

/// Adjoint of [`avg_pool2`]; `h`, `w` are the pre-pool dimensions.
pub(crate) fn avg_pool2_backward(dy: &[f32], c: usize, h: usize, w: usize) -> Vec<f32> {
    let (ho, wo) = (h / 2, w / 2);
    let mut dx = vec![0.0f32; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                dx[(ch * h + y) * w + xx] = 0.25 * dy[(ch * ho + y / 2) * wo + xx / 2];
            }
        }
    }
    dx
}

/// Nearest-neighbour 2× upsampling; `h`, `w` are the input dimensions.
pub(crate) fn upsample2(x: &[f32], c: usize, h: usize, w: usize) -> Vec<f32> {
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = vec![0.0f32; c * ho * wo];
    for ch in 0..c {
        for y in 0..ho {
            for xx in 0..wo {
                out[(ch * ho + y) * wo + xx] = x[(ch * h + y / 2) * w + xx / 2];
            }
        }
    }
    out
}

pub(crate) fn upsample2_backward(dy: &[f32], c: usize, h: usize, w: usize) -> Vec<f32> {
    let (ho, wo) = (2 * h, 2 * w);
    let mut dx = vec![0.0f32; c * h * w];
    for ch in 0..c {
        for y in 0..ho {
            for xx in 0..wo {
                dx[(ch * h + y / 2) * w + xx / 2] += dy[(ch * ho + y) * wo + xx];
            }
        }
    }
    dx
}

/// Sinusoidal embedding of a scalar timestep.
pub(crate) fn timestep_embedding(t: f32, dim: usize) -> Vec<f32> {
    let half = dim / 2;
    let mut e = vec![0.0f32; dim];
    for k in 0..half {
        let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        e[k] = arg.sin() as f32;
        e[half + k] = arg.cos() as f32;
    }
    e
}
