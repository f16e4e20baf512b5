//! Raw forward/backward kernels on flat slices. The graph layer owns shape
//! checking; these functions assume consistent extents.

/// `a[m×k] · b[k×n]`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// `aᵀ · b` for `a[m×k]`, `b[m×n]`, giving `[k×n]`.
pub fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// `a · bᵀ` for `a[m×n]`, `b[k×n]`, giving `[m×k]`.
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let brow = &b[j * n..(j + 1) * n];
            c[i * k + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    c
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = a[i * cols + j];
        }
    }
    t
}

/// In-place max-subtracted softmax over one row.
pub fn softmax_row(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Given softmax output `p` and upstream grad `dp`, the grad wrt logits.
pub fn softmax_row_backward(p: &[f64], dp: &[f64], out: &mut [f64]) {
    let dot: f64 = p.iter().zip(dp).map(|(a, b)| a * b).sum();
    for ((o, &pv), &g) in out.iter_mut().zip(p).zip(dp) {
        *o += pv * (g - dot);
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Layer norm over rows of width `c`. Returns (output, per-row mean, per-row 1/std).
pub fn layer_norm(x: &[f64], gamma: &[f64], beta: &[f64], c: usize, eps: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let rows = x.len() / c;
    let mut out = vec![0.0; x.len()];
    let mut means = Vec::with_capacity(rows);
    let mut rstds = Vec::with_capacity(rows);
    for r in 0..rows {
        let xr = &x[r * c..(r + 1) * c];
        let mean = xr.iter().sum::<f64>() / c as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let rstd = 1.0 / (var + eps).sqrt();
        let or = &mut out[r * c..(r + 1) * c];
        for j in 0..c {
            or[j] = (xr[j] - mean) * rstd * gamma[j] + beta[j];
        }
        means.push(mean);
        rstds.push(rstd);
    }
    (out, means, rstds)
}

/// Returns (dx, dgamma, dbeta).
pub fn layer_norm_backward(
    x: &[f64],
    gamma: &[f64],
    means: &[f64],
    rstds: &[f64],
    dy: &[f64],
    c: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let rows = x.len() / c;
    let mut dx = vec![0.0; x.len()];
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    let mut xhat = vec![0.0; c];
    let mut dxhat = vec![0.0; c];
    for r in 0..rows {
        let xr = &x[r * c..(r + 1) * c];
        let dyr = &dy[r * c..(r + 1) * c];
        let (mean, rstd) = (means[r], rstds[r]);
        for j in 0..c {
            xhat[j] = (xr[j] - mean) * rstd;
            dxhat[j] = dyr[j] * gamma[j];
            dgamma[j] += dyr[j] * xhat[j];
            dbeta[j] += dyr[j];
        }
        let mean_dxhat = dxhat.iter().sum::<f64>() / c as f64;
        let mean_dxhat_xhat = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / c as f64;
        let dxr = &mut dx[r * c..(r + 1) * c];
        for j in 0..c {
            dxr[j] = rstd * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
        }
    }
    (dx, dgamma, dbeta)
}

/// Geometry of a channels-last 3D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub cin: usize,
    pub cout: usize,
}

impl ConvGeom {
    /// `None` when the kernel is larger than the padded input.
    pub fn output(&self) -> Option<[usize; 3]> {
        let mut out = [0; 3];
        for (a, o) in out.iter_mut().enumerate() {
            let padded = self.input[a] + 2 * self.pad[a];
            if padded < self.kernel[a] || self.stride[a] == 0 {
                return None;
            }
            *o = (padded - self.kernel[a]) / self.stride[a] + 1;
        }
        Some(out)
    }

    /// Input coordinate along axis `a` for output index `o` and kernel tap `k`.
    #[inline]
    fn src(&self, a: usize, o: usize, k: usize) -> Option<usize> {
        let pos = (o * self.stride[a] + k) as isize - self.pad[a] as isize;
        (pos >= 0 && (pos as usize) < self.input[a]).then_some(pos as usize)
    }
}

/// Visit every (output voxel, kernel tap, input voxel) triple that contributes.
fn for_each_tap(g: &ConvGeom, mut f: impl FnMut(usize, usize, usize)) {
    let out = g.output().expect("validated geometry");
    let [_, ih, iw] = g.input;
    let [kz, ky, kx] = g.kernel;
    for oz in 0..out[0] {
        for oy in 0..out[1] {
            for ox in 0..out[2] {
                let o = (oz * out[1] + oy) * out[2] + ox;
                for dz in 0..kz {
                    let Some(iz) = g.src(0, oz, dz) else { continue };
                    for dy in 0..ky {
                        let Some(iy) = g.src(1, oy, dy) else { continue };
                        for dx in 0..kx {
                            let Some(ix) = g.src(2, ox, dx) else { continue };
                            let tap = (dz * ky + dy) * kx + dx;
                            f(o, tap, (iz * ih + iy) * iw + ix);
                        }
                    }
                }
            }
        }
    }
}

pub fn conv3d(x: &[f64], w: &[f64], b: &[f64], g: &ConvGeom) -> Vec<f64> {
    let out = g.output().expect("validated geometry");
    let n_out = out.iter().product::<usize>();
    let (cin, cout) = (g.cin, g.cout);
    let mut y = Vec::with_capacity(n_out * cout);
    for _ in 0..n_out {
        y.extend_from_slice(b);
    }
    for_each_tap(g, |o, tap, i| {
        let xr = &x[i * cin..(i + 1) * cin];
        let yr = &mut y[o * cout..(o + 1) * cout];
        for (ci, &xv) in xr.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let wr = &w[(tap * cin + ci) * cout..(tap * cin + ci + 1) * cout];
            for (yv, &wv) in yr.iter_mut().zip(wr) {
                *yv += xv * wv;
            }
        }
    });
    y
}

/// Returns (dx, dw, db); entries are only computed when requested.
pub fn conv3d_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    g: &ConvGeom,
    want_dx: bool,
    want_dw: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (cin, cout) = (g.cin, g.cout);
    let mut dx = if want_dx { vec![0.0; x.len()] } else { Vec::new() };
    let mut dw = if want_dw { vec![0.0; w.len()] } else { Vec::new() };
    let mut db = vec![0.0; cout];
    for row in dy.chunks_exact(cout) {
        for (d, &v) in db.iter_mut().zip(row) {
            *d += v;
        }
    }
    for_each_tap(g, |o, tap, i| {
        let dyr = &dy[o * cout..(o + 1) * cout];
        for ci in 0..cin {
            let off = (tap * cin + ci) * cout;
            if want_dx {
                let wr = &w[off..off + cout];
                dx[i * cin + ci] += wr.iter().zip(dyr).map(|(a, b)| a * b).sum::<f64>();
            }
            if want_dw {
                let xv = x[i * cin + ci];
                if xv != 0.0 {
                    for (dwv, &gv) in dw[off..off + cout].iter_mut().zip(dyr) {
                        *dwv += xv * gv;
                    }
                }
            }
        }
    });
    (dx, dw, db)
}

/// Per-output-index (i0, i1, w0, w1) taps for 2× linear upsampling with
/// half-pixel centers (corner alignment off), clamped at the borders.
pub fn upsample_taps(n: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..2 * n)
        .map(|j| {
            let src = ((j as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            let l1 = src - i0 as f64;
            (i0, i1, 1.0 - l1, l1)
        })
        .collect()
}

/// Linear 2× upsampling along the middle axis of an `[outer, n, inner]` view.
pub fn upsample_axis(x: &[f64], outer: usize, n: usize, inner: usize) -> Vec<f64> {
    let taps = upsample_taps(n);
    let mut y = vec![0.0; outer * 2 * n * inner];
    for o in 0..outer {
        for (j, &(i0, i1, w0, w1)) in taps.iter().enumerate() {
            let dst = &mut y[(o * 2 * n + j) * inner..(o * 2 * n + j + 1) * inner];
            let a = &x[(o * n + i0) * inner..(o * n + i0 + 1) * inner];
            let b = &x[(o * n + i1) * inner..(o * n + i1 + 1) * inner];
            for k in 0..inner {
                dst[k] = w0 * a[k] + w1 * b[k];
            }
        }
    }
    y
}

/// Adjoint of [`upsample_axis`].
pub fn upsample_axis_adjoint(dy: &[f64], outer: usize, n: usize, inner: usize) -> Vec<f64> {
    let taps = upsample_taps(n);
    let mut dx = vec![0.0; outer * n * inner];
    for o in 0..outer {
        for (j, &(i0, i1, w0, w1)) in taps.iter().enumerate() {
            let src = &dy[(o * 2 * n + j) * inner..(o * 2 * n + j + 1) * inner];
            for k in 0..inner {
                dx[(o * n + i0) * inner + k] += w0 * src[k];
                dx[(o * n + i1) * inner + k] += w1 * src[k];
            }
        }
    }
    dx
}

/// Trilinear 2× upsampling of a `[d, h, w, c]` volume.
pub fn upsample3d(x: &[f64], ext: [usize; 3], c: usize) -> Vec<f64> {
    let [d, h, w] = ext;
    let t = upsample_axis(x, d * h, w, c);
    let t = upsample_axis(&t, d, h, 2 * w * c);
    upsample_axis(&t, 1, d, 4 * h * w * c)
}

pub fn upsample3d_adjoint(dy: &[f64], ext: [usize; 3], c: usize) -> Vec<f64> {
    let [d, h, w] = ext;
    let t = upsample_axis_adjoint(dy, 1, d, 4 * h * w * c);
    let t = upsample_axis_adjoint(&t, d, h, 2 * w * c);
    upsample_axis_adjoint(&t, d * h, w, c)
}

/// Neighbour lists for 3×3×3 stride-1 average pooling that excludes padding.
fn pool_neighbours(ext: [usize; 3], mut f: impl FnMut(usize, usize, f64)) {
    let [d, h, w] = ext;
    let range = |v: usize, n: usize| v.saturating_sub(1)..(v + 2).min(n);
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let o = (z * h + y) * w + x;
                let count = range(z, d).len() * range(y, h).len() * range(x, w).len();
                let inv = 1.0 / count as f64;
                for zz in range(z, d) {
                    for yy in range(y, h) {
                        for xx in range(x, w) {
                            f(o, (zz * h + yy) * w + xx, inv);
                        }
                    }
                }
            }
        }
    }
}

pub fn avg_pool3(x: &[f64], ext: [usize; 3], c: usize) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    pool_neighbours(ext, |o, i, wgt| {
        for k in 0..c {
            y[o * c + k] += wgt * x[i * c + k];
        }
    });
    y
}

pub fn avg_pool3_adjoint(dy: &[f64], ext: [usize; 3], c: usize) -> Vec<f64> {
    let mut dx = vec![0.0; dy.len()];
    pool_neighbours(ext, |o, i, wgt| {
        for k in 0..c {
            dx[i * c + k] += wgt * dy[o * c + k];
        }
    });
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn upsample_ramp_matches_half_pixel_formula() {
        let y = upsample_axis(&[0.0, 1.0], 1, 2, 1);
        assert_eq!(y, vec![0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn upsample_adjoint_is_transpose() {
        // <U x, y> == <x, U^T y>
        let x: Vec<f64> = (0..2 * 3 * 2 * 2).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..4 * 6 * 4 * 2).map(|i| (i as f64 * 0.11).cos()).collect();
        let ux = upsample3d(&x, [2, 3, 2], 2);
        let uty = upsample3d_adjoint(&y, [2, 3, 2], 2);
        let lhs: f64 = ux.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&uty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn pool_adjoint_is_transpose() {
        let x: Vec<f64> = (0..3 * 2 * 4).map(|i| (i as f64 * 0.7).sin()).collect();
        let y: Vec<f64> = (0..3 * 2 * 4).map(|i| (i as f64 * 0.3).cos()).collect();
        let px = avg_pool3(&x, [3, 2, 2], 2);
        let pty = avg_pool3_adjoint(&y, [3, 2, 2], 2);
        let lhs: f64 = px.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&pty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn gelu_grad_matches_difference() {
        for &x in &[-3.0, -0.5, 0.0, 0.7, 2.5] {
            let h = 1e-6;
            let num = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((num - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
