//! Raw numeric kernels behind the tape operations. Everything here works on
//! flat row-major slices.

use super::tape::Conv2dParams;
use super::TensorError;

/// Inputs below this are lifted before taking logarithms.
pub const SOFTLIKE_EPS: f64 = 1e-12;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

/// dA += G * B^T
pub fn matmul_grad_a(g: &[f64], b: &[f64], m: usize, k: usize, n: usize, da: &mut [f64]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            da[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// dB += A^T * G
pub fn matmul_grad_b(g: &[f64], a: &[f64], m: usize, k: usize, n: usize, db: &mut [f64]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (d, gv) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                *d += av * gv;
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConvGeometry {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub kh: usize,
    pub kw: usize,
    pub p: Conv2dParams,
}

impl ConvGeometry {
    pub fn new(x: &[usize], w: &[usize], p: Conv2dParams) -> Result<Self, TensorError> {
        if x.len() != 3 || w.len() != 4 || x[0] != w[1] {
            return Err(TensorError::Shape(format!("conv2d input {x:?} with weights {w:?}")));
        }
        if p.stride == 0 || p.dilation == 0 {
            return Err(TensorError::Parameter("conv2d stride and dilation must be >= 1".into()));
        }
        let span_h = p.dilation * (w[2] - 1) + 1;
        let span_w = p.dilation * (w[3] - 1) + 1;
        if x[1] + 2 * p.pad < span_h || x[2] + 2 * p.pad < span_w {
            return Err(TensorError::Shape(format!("conv2d kernel {w:?} larger than input {x:?}")));
        }
        Ok(Self {
            in_c: x[0],
            in_h: x[1],
            in_w: x[2],
            out_c: w[0],
            out_h: (x[1] + 2 * p.pad - span_h) / p.stride + 1,
            out_w: (x[2] + 2 * p.pad - span_w) / p.stride + 1,
            kh: w[2],
            kw: w[3],
            p,
        })
    }

    /// Output column range whose input column `ox*s + off - pad` is in bounds.
    fn col_range(&self, off: usize) -> (usize, usize) {
        range_for(off, self.p.pad, self.p.stride, self.in_w, self.out_w)
    }

    fn row_range(&self, off: usize) -> (usize, usize) {
        range_for(off, self.p.pad, self.p.stride, self.in_h, self.out_h)
    }
}

fn range_for(off: usize, pad: usize, stride: usize, size_in: usize, size_out: usize) -> (usize, usize) {
    // need 0 <= o*stride + off - pad < size_in
    let lo = if pad > off { (pad - off).div_ceil(stride) } else { 0 };
    let hi = if size_in + pad > off { (size_in + pad - off - 1) / stride + 1 } else { 0 };
    (lo.min(size_out), hi.min(size_out))
}

pub fn conv2d_forward(geo: &ConvGeometry, x: &[f64], w: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let g = geo;
    let plane = g.out_h * g.out_w;
    let mut out = vec![0.0; g.out_c * plane];
    let (s, d, pad) = (g.p.stride, g.p.dilation, g.p.pad);
    for o in 0..g.out_c {
        let dst = &mut out[o * plane..(o + 1) * plane];
        if let Some(b) = bias {
            dst.iter_mut().for_each(|v| *v = b[o]);
        }
        for c in 0..g.in_c {
            let src = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
            for ky in 0..g.kh {
                let (oy0, oy1) = g.row_range(ky * d);
                for kx in 0..g.kw {
                    let wv = w[((o * g.in_c + c) * g.kh + ky) * g.kw + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (ox0, ox1) = g.col_range(kx * d);
                    for oy in oy0..oy1 {
                        let iy = oy * s + ky * d - pad;
                        let srow = &src[iy * g.in_w..(iy + 1) * g.in_w];
                        let drow = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                        if s == 1 {
                            let base = ox0 + kx * d - pad;
                            let n = ox1 - ox0;
                            for (dv, sv) in drow[ox0..ox1].iter_mut().zip(&srow[base..base + n]) {
                                *dv += wv * sv;
                            }
                        } else {
                            for ox in ox0..ox1 {
                                drow[ox] += wv * srow[ox * s + kx * d - pad];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn conv2d_grad_input(geo: &ConvGeometry, gout: &[f64], w: &[f64], dx: &mut [f64]) {
    let g = geo;
    let plane = g.out_h * g.out_w;
    let (s, d, pad) = (g.p.stride, g.p.dilation, g.p.pad);
    for o in 0..g.out_c {
        let go = &gout[o * plane..(o + 1) * plane];
        for c in 0..g.in_c {
            let dst = &mut dx[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
            for ky in 0..g.kh {
                let (oy0, oy1) = g.row_range(ky * d);
                for kx in 0..g.kw {
                    let wv = w[((o * g.in_c + c) * g.kh + ky) * g.kw + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (ox0, ox1) = g.col_range(kx * d);
                    for oy in oy0..oy1 {
                        let iy = oy * s + ky * d - pad;
                        let grow = &go[oy * g.out_w..(oy + 1) * g.out_w];
                        let drow = &mut dst[iy * g.in_w..(iy + 1) * g.in_w];
                        if s == 1 {
                            let base = ox0 + kx * d - pad;
                            let n = ox1 - ox0;
                            for (dv, gv) in drow[base..base + n].iter_mut().zip(&grow[ox0..ox1]) {
                                *dv += wv * gv;
                            }
                        } else {
                            for ox in ox0..ox1 {
                                drow[ox * s + kx * d - pad] += wv * grow[ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_grad_weight(geo: &ConvGeometry, gout: &[f64], x: &[f64], dw: &mut [f64]) {
    let g = geo;
    let plane = g.out_h * g.out_w;
    let (s, d, pad) = (g.p.stride, g.p.dilation, g.p.pad);
    for o in 0..g.out_c {
        let go = &gout[o * plane..(o + 1) * plane];
        for c in 0..g.in_c {
            let src = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
            for ky in 0..g.kh {
                let (oy0, oy1) = g.row_range(ky * d);
                for kx in 0..g.kw {
                    let (ox0, ox1) = g.col_range(kx * d);
                    let mut acc = 0.0;
                    for oy in oy0..oy1 {
                        let iy = oy * s + ky * d - pad;
                        let grow = &go[oy * g.out_w..(oy + 1) * g.out_w];
                        let srow = &src[iy * g.in_w..(iy + 1) * g.in_w];
                        if s == 1 {
                            let base = ox0 + kx * d - pad;
                            let n = ox1 - ox0;
                            acc += grow[ox0..ox1]
                                .iter()
                                .zip(&srow[base..base + n])
                                .map(|(a, b)| a * b)
                                .sum::<f64>();
                        } else {
                            for ox in ox0..ox1 {
                                acc += grow[ox] * srow[ox * s + kx * d - pad];
                            }
                        }
                    }
                    dw[((o * g.in_c + c) * g.kh + ky) * g.kw + kx] += acc;
                }
            }
        }
    }
}

pub fn avg_pool(x: &[f64], c: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let (oh, ow) = (h / k, w / k);
    let mut out = vec![0.0; c * oh * ow];
    let inv = 1.0 / (k * k) as f64;
    for ch in 0..c {
        for y in 0..h {
            let src = &x[(ch * h + y) * w..(ch * h + y + 1) * w];
            let dst = &mut out[(ch * oh + y / k) * ow..(ch * oh + y / k + 1) * ow];
            for (ox, cell) in dst.iter_mut().enumerate() {
                *cell += src[ox * k..(ox + 1) * k].iter().sum::<f64>();
            }
        }
    }
    out.iter_mut().for_each(|v| *v *= inv);
    out
}

pub fn avg_pool_grad(g: &[f64], c: usize, h: usize, w: usize, k: usize, dx: &mut [f64]) {
    let (oh, ow) = (h / k, w / k);
    let inv = 1.0 / (k * k) as f64;
    for ch in 0..c {
        for y in 0..h {
            let grow = &g[(ch * oh + y / k) * ow..(ch * oh + y / k + 1) * ow];
            let drow = &mut dx[(ch * h + y) * w..(ch * h + y + 1) * w];
            for (x, d) in drow.iter_mut().enumerate() {
                *d += grow[x / k] * inv;
            }
        }
    }
}

pub fn upsample_chw(x: &[f64], c: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let (oh, ow) = (h * k, w * k);
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for y in 0..oh {
            let src = &x[(ch * h + y / k) * w..(ch * h + y / k + 1) * w];
            for xo in 0..ow {
                out.push(src[xo / k]);
            }
        }
    }
    out
}

pub fn upsample_chw_grad(g: &[f64], c: usize, h: usize, w: usize, k: usize, dx: &mut [f64]) {
    let (oh, ow) = (h * k, w * k);
    for ch in 0..c {
        for y in 0..oh {
            let grow = &g[(ch * oh + y) * ow..(ch * oh + y + 1) * ow];
            let drow = &mut dx[(ch * h + y / k) * w..(ch * h + y / k + 1) * w];
            for (xo, gv) in grow.iter().enumerate() {
                drow[xo / k] += gv;
            }
        }
    }
}

pub fn upsample_hwc(x: &[f64], h: usize, w: usize, c: usize, k: usize) -> Vec<f64> {
    let (oh, ow) = (h * k, w * k);
    let mut out = Vec::with_capacity(oh * ow * c);
    for y in 0..oh {
        for xo in 0..ow {
            let base = ((y / k) * w + xo / k) * c;
            out.extend_from_slice(&x[base..base + c]);
        }
    }
    out
}

pub fn upsample_hwc_grad(g: &[f64], h: usize, w: usize, c: usize, k: usize, dx: &mut [f64]) {
    let (oh, ow) = (h * k, w * k);
    for y in 0..oh {
        for xo in 0..ow {
            let src = (y * ow + xo) * c;
            let dst = ((y / k) * w + xo / k) * c;
            for ch in 0..c {
                dx[dst + ch] += g[src + ch];
            }
        }
    }
}

/// Four `(flat index, weight)` taps for sampling an `h x w` grid at `(u, v)`.
///
/// `u` runs along columns and `v` along rows; cell centres sit at
/// `((j + 0.5) / w, (i + 0.5) / h)`, and indices wrap circularly so the grid
/// behaves as if tiled.
pub fn bilinear_taps(h: usize, w: usize, u: f64, v: f64) -> [(usize, f64); 4] {
    let u = u.rem_euclid(1.0);
    let v = v.rem_euclid(1.0);
    let x = u * w as f64 - 0.5;
    let y = v * h as f64 - 0.5;
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let wrap = |i: f64, n: usize| (i as i64).rem_euclid(n as i64) as usize;
    let (c0, c1) = (wrap(x0, w), wrap(x0 + 1.0, w));
    let (r0, r1) = (wrap(y0, h), wrap(y0 + 1.0, h));
    [
        (r0 * w + c0, (1.0 - fx) * (1.0 - fy)),
        (r0 * w + c1, fx * (1.0 - fy)),
        (r1 * w + c0, (1.0 - fx) * fy),
        (r1 * w + c1, fx * fy),
    ]
}

/// `dst_i = r_i^(1/tau) / sum_j r_j^(1/tau)`, evaluated in log space.
pub fn softlike_row(r: &[f64], tau: f64, dst: &mut [f64]) {
    let logits: Vec<f64> = r.iter().map(|&v| v.max(SOFTLIKE_EPS).ln() / tau).collect();
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
    let lse = m + z.ln();
    for (d, l) in dst.iter_mut().zip(&logits) {
        *d = (l - lse).exp();
    }
}

pub fn softlike_row_grad(r: &[f64], s: &[f64], g: &[f64], tau: f64, dr: &mut [f64]) {
    let dot: f64 = s.iter().zip(g).map(|(a, b)| a * b).sum();
    for j in 0..r.len() {
        if r[j] >= SOFTLIKE_EPS {
            dr[j] += s[j] * (g[j] - dot) / (tau * r[j]);
        }
    }
}

/// Normalized Gaussian taps of length `6*ceil(sigma) - 1`.
pub fn gaussian_kernel(sigma: f64) -> Result<Vec<f64>, TensorError> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(TensorError::Parameter(format!("blur sigma {sigma}")));
    }
    let k = blur_kernel_size(sigma);
    let r = (k / 2) as i64;
    let mut taps: Vec<f64> =
        (-r..=r).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= s);
    Ok(taps)
}

pub fn blur_kernel_size(sigma: f64) -> usize {
    6 * sigma.ceil() as usize - 1
}

pub fn blur_chw(x: &[f64], c: usize, h: usize, w: usize, kernel: &[f64]) -> Vec<f64> {
    let r = kernel.len() / 2;
    let mut tmp = vec![0.0; x.len()];
    for ch in 0..c {
        for y in 0..h {
            let src = &x[(ch * h + y) * w..(ch * h + y + 1) * w];
            let dst = &mut tmp[(ch * h + y) * w..(ch * h + y + 1) * w];
            for (i, &kv) in kernel.iter().enumerate() {
                // dst[xo] += kv * src[xo + i - r]
                let lo = r.saturating_sub(i);
                let hi = (w + r).saturating_sub(i).min(w);
                for xo in lo..hi {
                    dst[xo] += kv * src[xo + i - r];
                }
            }
        }
    }
    let mut out = vec![0.0; x.len()];
    for ch in 0..c {
        let src = &tmp[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * h * w..(ch + 1) * h * w];
        for (i, &kv) in kernel.iter().enumerate() {
            let lo = r.saturating_sub(i);
            let hi = (h + r).saturating_sub(i).min(h);
            for yo in lo..hi {
                let yi = yo + i - r;
                let (s_row, d_row) = (&src[yi * w..(yi + 1) * w], &mut dst[yo * w..(yo + 1) * w]);
                for (d, s) in d_row.iter_mut().zip(s_row) {
                    *d += kv * s;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_size_at_reference_sigma() {
        assert_eq!(blur_kernel_size(2.4), 17);
        assert_eq!(gaussian_kernel(2.4).unwrap().len(), 17);
        assert_eq!(blur_kernel_size(3.0), 17);
        assert_eq!(blur_kernel_size(1.0), 5);
    }

    #[test]
    fn conv_ranges_cover_valid_outputs() {
        // brute force the valid output index window
        for pad in 0..3 {
            for stride in 1..4 {
                for off in 0..5 {
                    let size_in = 7;
                    let size_out = 10;
                    let (lo, hi) = range_for(off, pad, stride, size_in, size_out);
                    for o in 0..size_out {
                        let i = (o * stride + off) as i64 - pad as i64;
                        let valid = i >= 0 && i < size_in as i64;
                        assert_eq!(valid, o >= lo && o < hi, "pad {pad} stride {stride} off {off} o {o}");
                    }
                }
            }
        }
    }

    #[test]
    fn blur_of_impulse_is_kernel() {
        let mut img = vec![0.0; 21 * 21];
        img[10 * 21 + 10] = 1.0;
        let k = gaussian_kernel(1.5).unwrap();
        let out = blur_chw(&img, 1, 21, 21, &k);
        let r = k.len() / 2;
        for (i, ki) in k.iter().enumerate() {
            for (j, kj) in k.iter().enumerate() {
                let v = out[(10 + i - r) * 21 + (10 + j - r)];
                assert!((v - ki * kj).abs() < 1e-15);
            }
        }
        assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
