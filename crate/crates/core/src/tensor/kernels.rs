//! Slice-level kernels shared by the differentiable path and the streaming
//! path. Both call the same functions, so their arithmetic agrees.
//!
//! Every convolution multiplies its zero-padded taps too; the analytic MAC
//! counts in `bench` rely on that.

use super::Real;

/// Spatial upsampling used between decoder conv stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Upsample {
    Nearest,
    Bilinear,
}

/// `out[m×n] = x[m×k] · w[n×k]ᵀ (+ b)`.
pub fn linear<T: Real>(x: &[T], m: usize, k: usize, w: &[T], n: usize, b: Option<&[T]>, out: &mut [T]) {
    debug_assert_eq!(x.len(), m * k);
    debug_assert_eq!(w.len(), n * k);
    for i in 0..m {
        let row = &x[i * k..(i + 1) * k];
        for o in 0..n {
            let wr = &w[o * k..(o + 1) * k];
            let mut acc = T::ZERO;
            for (a, c) in row.iter().zip(wr) {
                acc += *a * *c;
            }
            out[i * n + o] = match b {
                Some(b) => acc + b[o],
                None => acc,
            };
        }
    }
}

/// Accumulating backward of [`linear`].
#[allow(clippy::too_many_arguments)]
pub fn linear_backward<T: Real>(
    g: &[T],
    x: &[T],
    m: usize,
    k: usize,
    w: &[T],
    n: usize,
    gx: Option<&mut [T]>,
    gw: Option<&mut [T]>,
    gb: Option<&mut [T]>,
) {
    if let Some(gx) = gx {
        for i in 0..m {
            let gr = &g[i * n..(i + 1) * n];
            let gxr = &mut gx[i * k..(i + 1) * k];
            for (o, &go) in gr.iter().enumerate() {
                let wr = &w[o * k..(o + 1) * k];
                for (d, &wv) in gxr.iter_mut().zip(wr) {
                    *d += go * wv;
                }
            }
        }
    }
    if let Some(gw) = gw {
        for i in 0..m {
            let xr = &x[i * k..(i + 1) * k];
            for o in 0..n {
                let go = g[i * n + o];
                let gwr = &mut gw[o * k..(o + 1) * k];
                for (d, &xv) in gwr.iter_mut().zip(xr) {
                    *d += go * xv;
                }
            }
        }
    }
    if let Some(gb) = gb {
        for i in 0..m {
            for o in 0..n {
                gb[o] += g[i * n + o];
            }
        }
    }
}

/// `out[m×n] = a[m×k] · b[k×n]`.
pub fn matmul<T: Real>(a: &[T], m: usize, k: usize, b: &[T], n: usize, out: &mut [T]) {
    for i in 0..m {
        for j in 0..n {
            let mut acc = T::ZERO;
            for p in 0..k {
                acc += a[i * k + p] * b[p * n + j];
            }
            out[i * n + j] = acc;
        }
    }
}

/// Per-channel causal convolution over `x[L×ch]`, restarting (zero history)
/// every `seg` rows. `w` is `[ch×width]` with tap 0 on the current row.
pub fn causal_conv<T: Real>(x: &[T], ch: usize, w: &[T], width: usize, b: &[T], seg: usize, out: &mut [T]) {
    let len = x.len() / ch;
    for s0 in (0..len).step_by(seg) {
        for s in s0..s0 + seg {
            for c in 0..ch {
                let mut acc = T::ZERO;
                for k in 0..width {
                    let v = if s >= s0 + k { x[(s - k) * ch + c] } else { T::ZERO };
                    acc += w[c * width + k] * v;
                }
                out[s * ch + c] = acc + b[c];
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn causal_conv_backward<T: Real>(
    g: &[T],
    x: &[T],
    ch: usize,
    w: &[T],
    width: usize,
    seg: usize,
    mut gx: Option<&mut [T]>,
    mut gw: Option<&mut [T]>,
    mut gb: Option<&mut [T]>,
) {
    let len = x.len() / ch;
    for s0 in (0..len).step_by(seg) {
        for s in s0..s0 + seg {
            for c in 0..ch {
                let go = g[s * ch + c];
                if let Some(gb) = gb.as_deref_mut() {
                    gb[c] += go;
                }
                for k in 0..width {
                    if s < s0 + k {
                        break;
                    }
                    let src = (s - k) * ch + c;
                    if let Some(gx) = gx.as_deref_mut() {
                        gx[src] += go * w[c * width + k];
                    }
                    if let Some(gw) = gw.as_deref_mut() {
                        gw[c * width + k] += go * x[src];
                    }
                }
            }
        }
    }
}

/// One tick of [`causal_conv`] driven from a history buffer.
/// `history[k-1]` holds the token `k` steps back (zeros before the segment).
pub fn causal_conv_tick<T: Real>(x: &[T], history: &[Vec<T>], w: &[T], width: usize, b: &[T], out: &mut [T]) {
    for c in 0..x.len() {
        let mut acc = T::ZERO;
        for k in 0..width {
            let v = if k == 0 { x[c] } else { history[k - 1][c] };
            acc += w[c * width + k] * v;
        }
        out[c] = acc + b[c];
    }
}

/// Width-3 "same" convolution along rows of `x[L×cin]` followed by a mean over
/// the L output rows. `w` is `[cout×cin×3]`; returns `[cout]`.
pub fn conv1d_mean<T: Real>(x: &[T], len: usize, cin: usize, w: &[T], b: &[T], out: &mut [T]) {
    let xt = transpose_padded(x, len, cin);
    let cout = b.len();
    let lp = len + 2;
    let denom = T::from_usize(len);
    for o in 0..cout {
        let mut acc = T::ZERO;
        for i in 0..cin {
            let col = &xt[i * lp..(i + 1) * lp];
            for k in 0..3 {
                let wv = w[(o * cin + i) * 3 + k];
                for v in &col[k..k + len] {
                    acc += wv * *v;
                }
            }
        }
        out[o] = acc / denom + b[o];
    }
}

#[allow(clippy::too_many_arguments)]
pub fn conv1d_mean_backward<T: Real>(
    g: &[T],
    x: &[T],
    len: usize,
    cin: usize,
    w: &[T],
    gx: Option<&mut [T]>,
    gw: Option<&mut [T]>,
    gb: Option<&mut [T]>,
) {
    let cout = g.len();
    let lp = len + 2;
    let denom = T::from_usize(len);
    if let Some(gb) = gb {
        for o in 0..cout {
            gb[o] += g[o];
        }
    }
    if let Some(gw) = gw {
        let xt = transpose_padded(x, len, cin);
        for i in 0..cin {
            let col = &xt[i * lp..(i + 1) * lp];
            let sums: [T; 3] = std::array::from_fn(|k| col[k..k + len].iter().copied().sum());
            for o in 0..cout {
                let go = g[o] / denom;
                for k in 0..3 {
                    gw[(o * cin + i) * 3 + k] += go * sums[k];
                }
            }
        }
    }
    if let Some(gx) = gx {
        // d/dx[l,i] = Σ_o Σ_k go·w[o,i,k] over every output row l' with l'+k-1 = l
        for i in 0..cin {
            let mut tap = [T::ZERO; 3];
            for o in 0..cout {
                let go = g[o] / denom;
                for (k, t) in tap.iter_mut().enumerate() {
                    *t += go * w[(o * cin + i) * 3 + k];
                }
            }
            for l in 0..len {
                // padded index l+1 is touched by output row l' = l+1-k
                let mut acc = T::ZERO;
                for (k, t) in tap.iter().enumerate() {
                    let lo = l as isize + 1 - k as isize;
                    if lo >= 0 && (lo as usize) < len {
                        acc += *t;
                    }
                }
                gx[l * cin + i] += acc;
            }
        }
    }
}

fn transpose_padded<T: Real>(x: &[T], len: usize, cin: usize) -> Vec<T> {
    let lp = len + 2;
    let mut xt = vec![T::ZERO; cin * lp];
    for l in 0..len {
        for i in 0..cin {
            xt[i * lp + l + 1] = x[l * cin + i];
        }
    }
    xt
}

/// 2× upsampling of a `[c×h×w]` map.
pub fn upsample2x<T: Real>(x: &[T], c: usize, h: usize, w: usize, mode: Upsample, out: &mut [T]) {
    let (h2, w2) = (2 * h, 2 * w);
    match mode {
        Upsample::Nearest => {
            for ch in 0..c {
                for y in 0..h2 {
                    for xo in 0..w2 {
                        out[(ch * h2 + y) * w2 + xo] = x[(ch * h + y / 2) * w + xo / 2];
                    }
                }
            }
        }
        Upsample::Bilinear => {
            let ty = bilinear_taps(h);
            let tx = bilinear_taps(w);
            for ch in 0..c {
                let plane = &x[ch * h * w..(ch + 1) * h * w];
                for (y, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                    for (xo, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                        let v = T::from_f64(wy0 * wx0) * plane[y0 * w + x0]
                            + T::from_f64(wy0 * wx1) * plane[y0 * w + x1]
                            + T::from_f64(wy1 * wx0) * plane[y1 * w + x0]
                            + T::from_f64(wy1 * wx1) * plane[y1 * w + x1];
                        out[(ch * h2 + y) * w2 + xo] = v;
                    }
                }
            }
        }
    }
}

pub fn upsample2x_backward<T: Real>(g: &[T], c: usize, h: usize, w: usize, mode: Upsample, gx: &mut [T]) {
    let (h2, w2) = (2 * h, 2 * w);
    match mode {
        Upsample::Nearest => {
            for ch in 0..c {
                for y in 0..h2 {
                    for xo in 0..w2 {
                        gx[(ch * h + y / 2) * w + xo / 2] += g[(ch * h2 + y) * w2 + xo];
                    }
                }
            }
        }
        Upsample::Bilinear => {
            let ty = bilinear_taps(h);
            let tx = bilinear_taps(w);
            for ch in 0..c {
                let base = ch * h * w;
                for (y, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                    for (xo, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                        let go = g[(ch * h2 + y) * w2 + xo];
                        gx[base + y0 * w + x0] += T::from_f64(wy0 * wx0) * go;
                        gx[base + y0 * w + x1] += T::from_f64(wy0 * wx1) * go;
                        gx[base + y1 * w + x0] += T::from_f64(wy1 * wx0) * go;
                        gx[base + y1 * w + x1] += T::from_f64(wy1 * wx1) * go;
                    }
                }
            }
        }
    }
}

/// Half-pixel-centred source taps for 2× bilinear upsampling along one axis.
fn bilinear_taps(n: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..2 * n)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            let frac = src - i0 as f64;
            (i0, i1, 1.0 - frac, frac)
        })
        .collect()
}

/// "Same"-padded 2-D convolution of `x[cin×h×w]` with `w[cout×cin×k×k]`
/// (k odd). Writes `[cout×h×w]`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d<T: Real>(x: &[T], cin: usize, h: usize, w: usize, weight: &[T], k: usize, b: &[T], out: &mut [T]) {
    let cout = b.len();
    let p = k / 2;
    let (hp, wp) = (h + 2 * p, w + 2 * p);
    let xp = pad2d(x, cin, h, w, p);
    let hw = h * w;
    for o in 0..cout {
        let plane = &mut out[o * hw..(o + 1) * hw];
        plane.iter_mut().for_each(|v| *v = T::ZERO);
        for i in 0..cin {
            let src = &xp[i * hp * wp..(i + 1) * hp * wp];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = weight[((o * cin + i) * k + ky) * k + kx];
                    for y in 0..h {
                        let srow = &src[(y + ky) * wp + kx..(y + ky) * wp + kx + w];
                        let orow = &mut plane[y * w..(y + 1) * w];
                        for (d, s) in orow.iter_mut().zip(srow) {
                            *d += wv * *s;
                        }
                    }
                }
            }
        }
        for v in plane.iter_mut() {
            *v += b[o];
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Real>(
    g: &[T],
    x: &[T],
    cin: usize,
    h: usize,
    w: usize,
    weight: &[T],
    k: usize,
    cout: usize,
    gx: Option<&mut [T]>,
    gw: Option<&mut [T]>,
    gb: Option<&mut [T]>,
) {
    let p = k / 2;
    let (hp, wp) = (h + 2 * p, w + 2 * p);
    let hw = h * w;
    if let Some(gb) = gb {
        for o in 0..cout {
            gb[o] += g[o * hw..(o + 1) * hw].iter().copied().sum::<T>();
        }
    }
    if let Some(gw) = gw {
        let xp = pad2d(x, cin, h, w, p);
        for o in 0..cout {
            let gp = &g[o * hw..(o + 1) * hw];
            for i in 0..cin {
                let src = &xp[i * hp * wp..(i + 1) * hp * wp];
                for ky in 0..k {
                    for kx in 0..k {
                        let mut acc = T::ZERO;
                        for y in 0..h {
                            let srow = &src[(y + ky) * wp + kx..(y + ky) * wp + kx + w];
                            let grow = &gp[y * w..(y + 1) * w];
                            for (a, b) in srow.iter().zip(grow) {
                                acc += *a * *b;
                            }
                        }
                        gw[((o * cin + i) * k + ky) * k + kx] += acc;
                    }
                }
            }
        }
    }
    if let Some(gx) = gx {
        let mut gxp = vec![T::ZERO; cin * hp * wp];
        for o in 0..cout {
            let gp = &g[o * hw..(o + 1) * hw];
            for i in 0..cin {
                let dst = &mut gxp[i * hp * wp..(i + 1) * hp * wp];
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = weight[((o * cin + i) * k + ky) * k + kx];
                        for y in 0..h {
                            let drow = &mut dst[(y + ky) * wp + kx..(y + ky) * wp + kx + w];
                            let grow = &gp[y * w..(y + 1) * w];
                            for (d, gv) in drow.iter_mut().zip(grow) {
                                *d += wv * *gv;
                            }
                        }
                    }
                }
            }
        }
        for i in 0..cin {
            for y in 0..h {
                for xo in 0..w {
                    gx[(i * h + y) * w + xo] += gxp[(i * hp + y + p) * wp + xo + p];
                }
            }
        }
    }
}

fn pad2d<T: Real>(x: &[T], c: usize, h: usize, w: usize, p: usize) -> Vec<T> {
    if p == 0 {
        return x.to_vec();
    }
    let (hp, wp) = (h + 2 * p, w + 2 * p);
    let mut xp = vec![T::ZERO; c * hp * wp];
    for ch in 0..c {
        for y in 0..h {
            let d0 = (ch * hp + y + p) * wp + p;
            xp[d0..d0 + w].copy_from_slice(&x[(ch * h + y) * w..(ch * h + y + 1) * w]);
        }
    }
    xp
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_convolution() {
        // sequence [1,2,3], w=[1,1], b=0, width 2
        let mut out = [0.0f64; 3];
        causal_conv(&[1.0, 2.0, 3.0], 1, &[1.0, 1.0], 2, &[0.0], 3, &mut out);
        assert_eq!(out, [1.0, 3.0, 5.0]);
    }

    #[test]
    fn causal_conv_restarts_per_segment() {
        let mut out = [0.0f64; 4];
        causal_conv(&[1.0, 2.0, 3.0, 4.0], 1, &[1.0, 1.0], 2, &[0.0], 2, &mut out);
        assert_eq!(out, [1.0, 3.0, 3.0, 7.0]);
    }

    #[test]
    fn nearest_upsample_replicates() {
        let mut out = [0.0f64; 16];
        upsample2x(&[1.0, 2.0, 3.0, 4.0], 1, 2, 2, Upsample::Nearest, &mut out);
        assert_eq!(&out[..4], &[1.0, 1.0, 2.0, 2.0]);
        assert_eq!(&out[12..], &[3.0, 3.0, 4.0, 4.0]);
    }

    #[test]
    fn bilinear_upsample_of_constant_is_constant() {
        let mut out = [0.0f64; 36];
        upsample2x(&[2.0; 9], 1, 3, 3, Upsample::Bilinear, &mut out);
        assert!(out.iter().all(|v| (v - 2.0).abs() < 1e-15));
    }

    #[test]
    fn conv2d_identity_kernel() {
        let x: Vec<f64> = (0..9).map(|v| v as f64).collect();
        let mut wk = vec![0.0; 9];
        wk[4] = 1.0;
        let mut out = vec![0.0; 9];
        conv2d(&x, 1, 3, 3, &wk, 3, &[0.5], &mut out);
        for (a, b) in out.iter().zip(&x) {
            assert_eq!(*a, b + 0.5);
        }
    }
}
