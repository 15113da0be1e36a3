//! Selective state-space recurrence shared by the sample- and chirp-level
//! blocks.
//!
//! Each block owns `groups` independent states of width `d_state`. The
//! projection of the convolved token yields three modulation streams
//! (`dt`, `B`, `C`) of width `d_state` that are shared by all groups; the
//! scalar convolved value of group `g` is broadcast across its lanes.
//!
//! ```text
//! A      = -exp(A_log)
//! decay  = exp(dt ⊙ A)
//! h_g    = h_g ⊙ decay + x_g · (dt ⊙ B)
//! y_g    = ⟨h_g, C⟩ + x_g · Σ_j D[j, g]
//! ```

use crate::tensor::Real;

/// Modulation streams of one tick, after the `dt` softplus.
#[derive(Debug, Clone, PartialEq)]
pub struct Modulations<T> {
    pub dt: Vec<T>,
    pub b: Vec<T>,
    pub c: Vec<T>,
}

/// Splits a raw projection `[dt_raw | B | C]` and makes `dt` positive.
pub fn modulations_from_projection<T: Real>(p: &[T], dt_bias: &[T]) -> Modulations<T> {
    let d = dt_bias.len();
    assert_eq!(p.len(), 3 * d, "projection must have width 3·d_state");
    Modulations {
        dt: p[..d].iter().zip(dt_bias).map(|(&r, &b)| (r + b).softplus()).collect(),
        b: p[d..2 * d].to_vec(),
        c: p[2 * d..].to_vec(),
    }
}

/// `p = W_p · x` for `W_p` of shape `(3·d_state) × width`, then the dt
/// softplus. Returns the three streams.
pub fn project_modulations<T: Real>(w_p: &[T], x: &[T], dt_bias: &[T]) -> Modulations<T> {
    let d = dt_bias.len();
    let mut p = vec![T::ZERO; 3 * d];
    crate::tensor::kernels::linear(x, 1, x.len(), w_p, 3 * d, None, &mut p);
    modulations_from_projection(&p, dt_bias)
}

/// `A = -exp(A_log)`.
pub fn decay_rates<T: Real>(a_log: &[T]) -> Vec<T> {
    a_log.iter().map(|v| -v.exp_clamped()).collect()
}

/// `decay = exp(dt ⊙ A)` given `A` from [`decay_rates`].
pub fn compute_decay<T: Real>(dt: &[T], a: &[T]) -> Vec<T> {
    dt.iter().zip(a).map(|(&t, &r)| (t * r).exp_clamped()).collect()
}

/// One group's state update, in place: `h = h ⊙ decay + x̃ ⊙ (dt ⊙ B)`.
pub fn update_state<T: Real>(h: &mut [T], decay: &[T], dt: &[T], b: &[T], x: T) {
    for j in 0..h.len() {
        let bx = dt[j] * b[j];
        h[j] = h[j] * decay[j] + x * bx;
    }
}

/// One group's output `⟨h, C⟩ + x̃ · Σ D_row`.
pub fn emit_output<T: Real>(h: &[T], c: &[T], d_row: &[T], x: T) -> T {
    let mut acc = T::ZERO;
    for (a, b) in h.iter().zip(c) {
        acc += *a * *b;
    }
    let dsum: T = d_row.iter().copied().sum();
    acc + x * dsum
}

/// Values derived once per forward pass from the block parameters.
#[derive(Debug, Clone)]
pub struct ScanConsts<T> {
    pub a: Vec<T>,
    /// Column sums of `D` (one per group).
    pub dsum: Vec<T>,
}

impl<T: Real> ScanConsts<T> {
    /// `d` is row-major `[d_state × groups]`.
    pub fn new(a_log: &[T], d: &[T], groups: usize) -> Self {
        let ds = a_log.len();
        let dsum = (0..groups).map(|g| (0..ds).map(|j| d[j * groups + g]).sum()).collect();
        Self {
            a: decay_rates(a_log),
            dsum,
        }
    }
}

/// Per-tick scratch: post-softplus `dt`, `decay` and `dt ⊙ B`.
#[derive(Debug, Clone)]
pub struct TickScratch<T> {
    pub dt: Vec<T>,
    pub decay: Vec<T>,
    pub bx: Vec<T>,
}

impl<T: Real> TickScratch<T> {
    pub fn new(d_state: usize) -> Self {
        Self {
            dt: vec![T::ZERO; d_state],
            decay: vec![T::ZERO; d_state],
            bx: vec![T::ZERO; d_state],
        }
    }
}

/// Advances all groups by one tick. `h` is `[groups × d_state]`, `p` the raw
/// projection row `[dt_raw | B | C]`; writes one output per group into `y`.
pub fn ssm_tick<T: Real>(
    h: &mut [T],
    x: &[T],
    p: &[T],
    dt_bias: &[T],
    consts: &ScanConsts<T>,
    scratch: &mut TickScratch<T>,
    y: &mut [T],
) {
    let d = dt_bias.len();
    let (bm, cm) = (&p[d..2 * d], &p[2 * d..3 * d]);
    for j in 0..d {
        let dt = (p[j] + dt_bias[j]).softplus();
        scratch.dt[j] = dt;
        scratch.decay[j] = (dt * consts.a[j]).exp_clamped();
        scratch.bx[j] = dt * bm[j];
    }
    for (g, &xg) in x.iter().enumerate() {
        let hg = &mut h[g * d..(g + 1) * d];
        let mut acc = T::ZERO;
        for j in 0..d {
            let hn = hg[j] * scratch.decay[j] + xg * scratch.bx[j];
            hg[j] = hn;
            acc += hn * cm[j];
        }
        y[g] = acc + xg * consts.dsum[g];
    }
}

/// Intermediates kept by [`scan_forward`] for the backward pass.
#[derive(Debug, Clone, Default)]
pub struct ScanCache<T> {
    dt: Vec<T>,
    decay: Vec<T>,
    h: Vec<T>,
}

/// Shapes of one batched scan.
#[derive(Debug, Clone, Copy)]
pub struct ScanDims {
    pub len: usize,
    pub groups: usize,
    pub d_state: usize,
    /// State resets to zero every `seg` ticks.
    pub seg: usize,
}

/// Runs the recurrence over `len` ticks. `p` is `[len × 3d]`, `x` is
/// `[len × groups]`, writes `y[len × groups]`.
#[allow(clippy::too_many_arguments)]
pub fn scan_forward<T: Real>(
    dims: ScanDims,
    p: &[T],
    x: &[T],
    dt_bias: &[T],
    a_log: &[T],
    dmat: &[T],
    y: &mut [T],
    mut cache: Option<&mut ScanCache<T>>,
) {
    let ScanDims {
        len,
        groups,
        d_state: d,
        seg,
    } = dims;
    let consts = ScanConsts::new(a_log, dmat, groups);
    let mut h = vec![T::ZERO; groups * d];
    let mut scratch = TickScratch::new(d);
    if let Some(c) = cache.as_deref_mut() {
        c.dt = vec![T::ZERO; len * d];
        c.decay = vec![T::ZERO; len * d];
        c.h = vec![T::ZERO; len * groups * d];
    }
    for s in 0..len {
        if s % seg == 0 {
            h.iter_mut().for_each(|v| *v = T::ZERO);
        }
        ssm_tick(
            &mut h,
            &x[s * groups..(s + 1) * groups],
            &p[s * 3 * d..(s + 1) * 3 * d],
            dt_bias,
            &consts,
            &mut scratch,
            &mut y[s * groups..(s + 1) * groups],
        );
        if let Some(c) = cache.as_deref_mut() {
            c.dt[s * d..(s + 1) * d].copy_from_slice(&scratch.dt);
            c.decay[s * d..(s + 1) * d].copy_from_slice(&scratch.decay);
            c.h[s * groups * d..(s + 1) * groups * d].copy_from_slice(&h);
        }
    }
}

/// Gradient buffers filled (accumulated) by [`scan_backward`].
pub struct ScanGrads<'a, T> {
    pub p: Option<&'a mut [T]>,
    pub x: Option<&'a mut [T]>,
    pub dt_bias: Option<&'a mut [T]>,
    pub a_log: Option<&'a mut [T]>,
    pub dmat: Option<&'a mut [T]>,
}

/// Reverse pass of [`scan_forward`] given `gy[len × groups]`.
#[allow(clippy::too_many_arguments)]
pub fn scan_backward<T: Real>(
    dims: ScanDims,
    gy: &[T],
    p: &[T],
    x: &[T],
    dt_bias: &[T],
    a_log: &[T],
    dmat: &[T],
    cache: &ScanCache<T>,
    grads: ScanGrads<'_, T>,
) {
    let ScanDims {
        len,
        groups,
        d_state: d,
        seg,
    } = dims;
    let ScanGrads {
        p: mut gp,
        x: mut gx,
        dt_bias: mut gbias,
        a_log: ga_log,
        dmat: gdmat,
    } = grads;
    let consts = ScanConsts::new(a_log, dmat, groups);
    let mut gh = vec![T::ZERO; groups * d];
    let mut ga = vec![T::ZERO; d];
    let mut gdsum = vec![T::ZERO; groups];
    let (mut gbx, mut gdecay, mut gc) = (vec![T::ZERO; d], vec![T::ZERO; d], vec![T::ZERO; d]);
    let zeros = vec![T::ZERO; groups * d];

    for s in (0..len).rev() {
        if (s + 1) % seg == 0 {
            gh.iter_mut().for_each(|v| *v = T::ZERO);
        }
        let dt = &cache.dt[s * d..(s + 1) * d];
        let decay = &cache.decay[s * d..(s + 1) * d];
        let pr = &p[s * 3 * d..(s + 1) * 3 * d];
        let (bm, cm) = (&pr[d..2 * d], &pr[2 * d..]);
        let hs = &cache.h[s * groups * d..(s + 1) * groups * d];
        let hprev = if s % seg == 0 {
            &zeros[..]
        } else {
            &cache.h[(s - 1) * groups * d..s * groups * d]
        };
        gbx.iter_mut().for_each(|v| *v = T::ZERO);
        gdecay.iter_mut().for_each(|v| *v = T::ZERO);
        gc.iter_mut().for_each(|v| *v = T::ZERO);

        for g in 0..groups {
            let gyg = gy[s * groups + g];
            let xg = x[s * groups + g];
            let mut gxg = gyg * consts.dsum[g];
            gdsum[g] += gyg * xg;
            for j in 0..d {
                let idx = g * d + j;
                let ght = gh[idx] + gyg * cm[j];
                gc[j] += gyg * hs[idx];
                gxg += ght * (dt[j] * bm[j]);
                gbx[j] += ght * xg;
                gdecay[j] += ght * hprev[idx];
                gh[idx] = ght * decay[j];
            }
            if let Some(gx) = gx.as_deref_mut() {
                gx[s * groups + g] += gxg;
            }
        }

        for j in 0..d {
            let mut gdt = gbx[j] * bm[j];
            let gb = gbx[j] * dt[j];
            if (dt[j] * consts.a[j]).inside_exp_clamp() {
                let gz = gdecay[j] * decay[j];
                gdt += gz * consts.a[j];
                ga[j] += gz * dt[j];
            }
            let u = pr[j] + dt_bias[j];
            let du = if u.inside_exp_clamp() {
                gdt * u.sigmoid()
            } else {
                T::ZERO
            };
            if let Some(gp) = gp.as_deref_mut() {
                let row = &mut gp[s * 3 * d..(s + 1) * 3 * d];
                row[j] += du;
                row[d + j] += gb;
                row[2 * d + j] += gc[j];
            }
            if let Some(gbias) = gbias.as_deref_mut() {
                gbias[j] += du;
            }
        }
    }

    if let Some(ga_log) = ga_log {
        for j in 0..d {
            if a_log[j].inside_exp_clamp() {
                ga_log[j] += ga[j] * consts.a[j];
            }
        }
    }
    if let Some(gdmat) = gdmat {
        for j in 0..d {
            for g in 0..groups {
                gdmat[j * groups + g] += gdsum[g];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decay_closed_form() {
        let a = decay_rates(&[0.0f64]);
        assert_eq!(a, vec![-1.0]);
        let dec = compute_decay(&[std::f64::consts::LN_2], &a);
        assert!((dec[0] - 0.5).abs() < 1e-15);
        let tiny = compute_decay(&[1e-12f64], &a);
        assert!(tiny[0] < 1.0 && tiny[0] > 1.0 - 1e-11);
    }

    #[test]
    fn decay_per_channel_matches_scalar_evaluation() {
        let a_log: Vec<f64> = (1..=6).map(|j| (j as f64).ln()).collect();
        let dt: Vec<f64> = (0..6).map(|j| 0.01 + 0.05 * j as f64).collect();
        let dec = compute_decay(&dt, &decay_rates(&a_log));
        for j in 0..6 {
            let want = (-((j + 1) as f64) * dt[j]).exp();
            assert!((dec[j] - want).abs() < 1e-14);
            assert!(dec[j] > 0.0 && dec[j] < 1.0);
        }
    }

    #[test]
    fn zero_state_update() {
        let mut h = vec![0.0f64; 3];
        update_state(&mut h, &[0.3, 0.5, 0.9], &[0.1, 0.2, 0.3], &[2.0, -1.0, 4.0], 1.5);
        let want = [1.5 * 0.1 * 2.0, -(1.5 * 0.2), 1.5 * 0.3 * 4.0];
        for (a, b) in h.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn pure_decay_without_input() {
        let mut h = vec![1.0f64, -2.0];
        update_state(&mut h, &[0.5, 0.25], &[0.1, 0.1], &[1.0, 1.0], 0.0);
        assert_eq!(h, vec![0.5, -0.5]);
    }

    #[test]
    fn constant_input_reaches_geometric_fixed_point() {
        let (decay, dt, b, x) = ([0.8f64, 0.6], [0.05, 0.2], [1.3, -0.7], 0.9);
        let mut h = vec![0.0; 2];
        for _ in 0..100 {
            update_state(&mut h, &decay, &dt, &b, x);
        }
        for j in 0..2 {
            let fixed = x * dt[j] * b[j] / (1.0 - decay[j]);
            assert!((h[j] - fixed).abs() < 1e-9, "{} vs {}", h[j], fixed);
        }
    }

    #[test]
    fn output_cases() {
        assert_eq!(emit_output(&[1.0f64, 2.0], &[0.0, 0.0], &[0.0, 0.0], 3.0), 0.0);
        assert_eq!(emit_output(&[0.0f64, 1.0, 0.0], &[0.0, 1.0, 0.0], &[0.0; 3], 7.0), 1.0);
        let (h, c, dr, x) = ([0.3f64, -1.2, 2.0], [0.5, 0.25, -0.1], [0.2, 0.4, -0.3], 1.7);
        let oracle = h.iter().zip(&c).map(|(a, b)| a * b).sum::<f64>() + dr.iter().map(|d| d * x).sum::<f64>();
        assert!((emit_output(&h, &c, &dr, x) - oracle).abs() < 1e-12);
    }

    #[test]
    fn projection_streams() {
        let d = 32;
        let m = project_modulations(&vec![0.0f64; 3 * d * 4], &[0.0; 4], &vec![0.0; d]);
        assert_eq!(m.dt.len(), 32);
        assert_eq!(m.b.len(), 32);
        assert_eq!(m.c.len(), 32);
        assert!(m.dt.iter().all(|v| (v - std::f64::consts::LN_2).abs() < 1e-15));
    }

    #[test]
    fn tick_matches_elementwise_ops() {
        let (groups, d) = (3, 4);
        let p: Vec<f64> = (0..3 * d).map(|i| (i as f64 * 0.37).sin()).collect();
        let x = [0.4f64, -1.1, 0.8];
        let bias: Vec<f64> = (0..d).map(|j| -2.0 + 0.3 * j as f64).collect();
        let a_log: Vec<f64> = (0..d).map(|j| ((j + 1) as f64).ln()).collect();
        let dmat: Vec<f64> = (0..d * groups).map(|i| (i as f64 * 0.11).cos()).collect();
        let consts = ScanConsts::new(&a_log, &dmat, groups);
        let mut h: Vec<f64> = (0..groups * d).map(|i| 0.1 * i as f64).collect();
        let mut href = h.clone();
        let mut y = vec![0.0; groups];
        ssm_tick(&mut h, &x, &p, &bias, &consts, &mut TickScratch::new(d), &mut y);

        let m = modulations_from_projection(&p, &bias);
        let decay = compute_decay(&m.dt, &decay_rates(&a_log));
        for g in 0..groups {
            let hg = &mut href[g * d..(g + 1) * d];
            update_state(hg, &decay, &m.dt, &m.b, x[g]);
            let d_row: Vec<f64> = (0..d).map(|j| dmat[j * groups + g]).collect();
            let want = emit_output(hg, &m.c, &d_row, x[g]);
            assert!((y[g] - want).abs() < 1e-12);
        }
        for (a, b) in h.iter().zip(&href) {
            assert!((a - b).abs() < 1e-14);
        }
    }
}
