//! Reverse-mode tape over a closed set of array primitives.
//!
//! Nodes are appended in evaluation order, so the tape is topologically
//! sorted by construction and `backward` is a single reverse sweep.

use super::array::numel;
use super::kernels::{self, Upsample};
use super::{Array, Real};
use crate::error::{Error, Result};
use crate::model::ssm::{self, ScanCache, ScanDims, ScanGrads};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Exp,
    Ln,
    Sigmoid,
    Silu,
    Softplus,
    /// Huber with β = 1.
    SmoothL1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

/// Segment reduction applied by [`Tape::segment_pool`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pool {
    Mean,
    Last,
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Binary(Binary, Var, Var),
    Scale(Var, T),
    AddConst(Var, T),
    Unary(Unary, Var),
    Clamp(Var, T, T),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    Narrow {
        x: Var,
        start: usize,
    },
    CausalConv {
        x: Var,
        w: Var,
        b: Var,
        seg: usize,
    },
    Scan {
        p: Var,
        x: Var,
        dt_bias: Var,
        a_log: Var,
        d: Var,
        dims: ScanDims,
        cache: Option<ScanCache<T>>,
    },
    SegmentPool {
        x: Var,
        seg: usize,
        mode: Pool,
    },
    Conv1dMean {
        x: Var,
        w: Var,
        b: Var,
    },
    Upsample(Var, Upsample),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        k: usize,
    },
}

struct Node<T> {
    value: Array<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Single-writer record of one forward computation.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    /// Accumulated gradients of leaves, populated by [`Tape::backward`].
    leaf_grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records an input. Gradients are tracked iff `array.requires_grad()`.
    pub fn leaf(&mut self, array: Array<T>) -> Var {
        let rg = array.requires_grad();
        self.push(array, rg, Op::Leaf)
    }

    /// Records a constant input (never differentiated).
    pub fn constant(&mut self, array: Array<T>) -> Var {
        self.push(array, false, Op::Leaf)
    }

    /// Records a trainable input.
    pub fn param(&mut self, shape: &[usize], data: &[T]) -> Var {
        let a = Array::new(shape.to_vec(), data.to_vec()).expect("param shape");
        self.push(a, true, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Array<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    /// Accumulated gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.leaf_grads[v.0].as_deref()
    }

    pub fn zero_grads(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::ZERO; m * n];
        kernels::matmul(self.data(a), m, k, self.data(b), n, &mut out);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Array::new(vec![m, n], out)?, rg, Op::MatMul(a, b)))
    }

    /// `x[m×k] · w[n×k]ᵀ + b[n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] {
            return Err(shape_err("linear", sx, sw));
        }
        let (m, k, n) = (sx[0], sx[1], sw[0]);
        if let Some(b) = b {
            if self.shape(b) != [n] {
                return Err(shape_err("linear bias", self.shape(b), &[n]));
            }
        }
        let mut out = vec![T::ZERO; m * n];
        kernels::linear(self.data(x), m, k, self.data(w), n, b.map(|b| self.data(b)), &mut out);
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(Array::new(vec![m, n], out)?, rg, Op::Linear { x, w, b }))
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (self.value(a).numel(), self.value(b).numel());
        let shape = if self.shape(a) == self.shape(b) || nb == 1 {
            self.shape(a).to_vec()
        } else if na == 1 {
            self.shape(b).to_vec()
        } else {
            return Err(shape_err("elementwise", self.shape(a), self.shape(b)));
        };
        let n = numel(&shape);
        let (da, db) = (self.data(a), self.data(b));
        let out: Vec<T> = (0..n)
            .map(|i| {
                let x = da[if na == 1 { 0 } else { i }];
                let y = db[if nb == 1 { 0 } else { i }];
                match kind {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                    Binary::Div => x / y,
                }
            })
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Array::new(shape, out)?, rg, Op::Binary(kind, a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a);
        let out = Array::new(v.shape().to_vec(), v.data().iter().map(|&x| x * c).collect()).unwrap();
        let rg = self.rg(&[a]);
        self.push(out, rg, Op::Scale(a, c))
    }

    pub fn add_const(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a);
        let out = Array::new(v.shape().to_vec(), v.data().iter().map(|&x| x + c).collect()).unwrap();
        let rg = self.rg(&[a]);
        self.push(out, rg, Op::AddConst(a, c))
    }

    pub fn unary(&mut self, kind: Unary, a: Var) -> Var {
        let v = self.value(a);
        let f = |x: T| match kind {
            Unary::Exp => x.exp_clamped(),
            Unary::Ln => x.ln(),
            Unary::Sigmoid => x.sigmoid(),
            Unary::Silu => x.silu(),
            Unary::Softplus => x.softplus(),
            Unary::SmoothL1 => {
                if x.abs() < T::ONE {
                    T::from_f64(0.5) * x * x
                } else {
                    x.abs() - T::from_f64(0.5)
                }
            }
        };
        let out = Array::new(v.shape().to_vec(), v.data().iter().map(|&x| f(x)).collect()).unwrap();
        let rg = self.rg(&[a]);
        self.push(out, rg, Op::Unary(kind, a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Unary::Exp, a)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(Unary::Ln, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(Unary::Silu, a)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(Unary::Softplus, a)
    }

    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        let v = self.value(a);
        let out = Array::new(
            v.shape().to_vec(),
            v.data().iter().map(|&x| x.max(lo).min(hi)).collect(),
        )
        .unwrap();
        let rg = self.rg(&[a]);
        self.push(out, rg, Op::Clamp(a, lo, hi))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.data(a).iter().copied().sum();
        let rg = self.rg(&[a]);
        self.push(Array::scalar(s), rg, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s: T = v.data().iter().copied().sum::<T>() / T::from_usize(v.numel());
        let rg = self.rg(&[a]);
        self.push(Array::scalar(s), rg, Op::Mean(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshaped(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(v, rg, Op::Reshape(a)))
    }

    /// Columns `start..start+len` of a 2-D array.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || start + len > s[1] {
            return Err(shape_err("slice_cols", &s, &[start, len]));
        }
        let d = self.data(x);
        let mut out = Vec::with_capacity(s[0] * len);
        for r in 0..s[0] {
            out.extend_from_slice(&d[r * s[1] + start..r * s[1] + start + len]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Array::new(vec![s[0], len], out)?, rg, Op::SliceCols { x, start }))
    }

    /// Entries `start..start+len` along the leading axis.
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.is_empty() || start + len > s[0] {
            return Err(shape_err("narrow", &s, &[start, len]));
        }
        let inner: usize = s[1..].iter().product();
        let out = self.data(x)[start * inner..(start + len) * inner].to_vec();
        let mut shape = s.clone();
        shape[0] = len;
        let rg = self.rg(&[x]);
        Ok(self.push(Array::new(shape, out)?, rg, Op::Narrow { x, start }))
    }

    /// Per-channel causal convolution of `x[L×ch]` with `w[ch×width]`, zero
    /// history at the start of every `seg`-row segment.
    pub fn causal_conv(&mut self, x: Var, w: Var, b: Var, seg: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 2 || sw.len() != 2 || sw[0] != sx[1] || self.shape(b) != [sx[1]] {
            return Err(shape_err("causal_conv", &sx, &sw));
        }
        if seg == 0 || sx[0] % seg != 0 {
            return Err(Error::contract(format!(
                "causal_conv: {} rows not divisible into segments of {seg}",
                sx[0]
            )));
        }
        let mut out = vec![T::ZERO; sx[0] * sx[1]];
        kernels::causal_conv(self.data(x), sx[1], self.data(w), sw[1], self.data(b), seg, &mut out);
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(Array::new(sx, out)?, rg, Op::CausalConv { x, w, b, seg }))
    }

    /// Selective scan over `x[L×groups]` with raw projections `p[L×3d]`.
    #[allow(clippy::too_many_arguments)]
    pub fn selective_scan(&mut self, p: Var, x: Var, dt_bias: Var, a_log: Var, d: Var, seg: usize) -> Result<Var> {
        let (sp, sx) = (self.shape(p).to_vec(), self.shape(x).to_vec());
        let ds = self.value(dt_bias).numel();
        if sp.len() != 2 || sx.len() != 2 || sp[0] != sx[0] || sp[1] != 3 * ds {
            return Err(shape_err("selective_scan", &sp, &sx));
        }
        if self.value(a_log).numel() != ds || self.shape(d) != [ds, sx[1]] {
            return Err(shape_err("selective_scan params", self.shape(d), &[ds, sx[1]]));
        }
        if seg == 0 || sx[0] % seg != 0 {
            return Err(Error::contract(
                "selective_scan: length must be a multiple of the segment",
            ));
        }
        let dims = ScanDims {
            len: sx[0],
            groups: sx[1],
            d_state: ds,
            seg,
        };
        let rg = self.rg(&[p, x, dt_bias, a_log, d]);
        let mut cache = rg.then(ScanCache::default);
        let mut y = vec![T::ZERO; sx[0] * sx[1]];
        ssm::scan_forward(
            dims,
            self.data(p),
            self.data(x),
            self.data(dt_bias),
            self.data(a_log),
            self.data(d),
            &mut y,
            cache.as_mut(),
        );
        Ok(self.push(
            Array::new(sx, y)?,
            rg,
            Op::Scan {
                p,
                x,
                dt_bias,
                a_log,
                d,
                dims,
                cache,
            },
        ))
    }

    /// Reduces every `seg` consecutive rows of `x[L×ch]` to one row.
    pub fn segment_pool(&mut self, x: Var, seg: usize, mode: Pool) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || seg == 0 || !s[0].is_multiple_of(seg) {
            return Err(shape_err("segment_pool", &s, &[seg]));
        }
        let (rows, ch) = (s[0] / seg, s[1]);
        let d = self.data(x);
        let mut out = vec![T::ZERO; rows * ch];
        for r in 0..rows {
            let o = &mut out[r * ch..(r + 1) * ch];
            match mode {
                Pool::Mean => {
                    for s in r * seg..(r + 1) * seg {
                        for c in 0..ch {
                            o[c] += d[s * ch + c];
                        }
                    }
                    let n = T::from_usize(seg);
                    o.iter_mut().for_each(|v| *v /= n);
                }
                Pool::Last => o.copy_from_slice(&d[((r + 1) * seg - 1) * ch..(r + 1) * seg * ch]),
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Array::new(vec![rows, ch], out)?, rg, Op::SegmentPool { x, seg, mode }))
    }

    /// Width-3 same-padded convolution along the rows of `x[L×cin]`
    /// (`w[cout×cin×3]`), averaged over rows. Returns `[cout]`.
    pub fn conv1d_mean(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 2 || sw.len() != 3 || sw[1] != sx[1] || sw[2] != 3 || self.shape(b) != [sw[0]] {
            return Err(shape_err("conv1d_mean", &sx, &sw));
        }
        let mut out = vec![T::ZERO; sw[0]];
        kernels::conv1d_mean(self.data(x), sx[0], sx[1], self.data(w), self.data(b), &mut out);
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(Array::new(vec![sw[0]], out)?, rg, Op::Conv1dMean { x, w, b }))
    }

    /// 2× spatial upsampling of `[c×h×w]`.
    pub fn upsample2x(&mut self, x: Var, mode: Upsample) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(shape_err("upsample2x", &s, &[3]));
        }
        let mut out = vec![T::ZERO; s[0] * 4 * s[1] * s[2]];
        kernels::upsample2x(self.data(x), s[0], s[1], s[2], mode, &mut out);
        let rg = self.rg(&[x]);
        Ok(self.push(
            Array::new(vec![s[0], 2 * s[1], 2 * s[2]], out)?,
            rg,
            Op::Upsample(x, mode),
        ))
    }

    /// Same-padded conv of `x[cin×h×w]` with `w[cout×cin×k×k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3
            || sw.len() != 4
            || sw[1] != sx[0]
            || sw[2] != sw[3]
            || sw[2] % 2 == 0
            || self.shape(b) != [sw[0]]
        {
            return Err(shape_err("conv2d", &sx, &sw));
        }
        let (cout, k) = (sw[0], sw[2]);
        let mut out = vec![T::ZERO; cout * sx[1] * sx[2]];
        kernels::conv2d(
            self.data(x),
            sx[0],
            sx[1],
            sx[2],
            self.data(w),
            k,
            self.data(b),
            &mut out,
        );
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(
            Array::new(vec![cout, sx[1], sx[2]], out)?,
            rg,
            Op::Conv2d { x, w, b, k },
        ))
    }

    /// Propagates d`loss`/d· to every reachable leaf that requires gradients,
    /// adding into the leaf accumulators.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::contract("loss is not connected to any trainable input"));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::ONE]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                match &mut self.leaf_grads[i] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                    slot => *slot = Some(g),
                }
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let needs = |v: Var| nodes[v.0].requires_grad;
        let val = |v: Var| nodes[v.0].value.data();
        // Temporarily moves a gradient buffer out so several can be borrowed.
        fn slot<T: Real>(grads: &mut [Option<Vec<T>>], nodes: &[Node<T>], v: Var) -> Vec<T> {
            grads[v.0]
                .take()
                .unwrap_or_else(|| vec![T::ZERO; nodes[v.0].value.numel()])
        }
        macro_rules! with_grad {
            ($v:expr, |$buf:ident| $body:expr) => {{
                let v = $v;
                if needs(v) {
                    let mut $buf = slot(grads, nodes, v);
                    $body;
                    grads[v.0] = Some($buf);
                }
            }};
        }
        let out = nodes[i].value.data();

        match &nodes[i].op {
            Op::Leaf => unreachable!(),
            Op::MatMul(a, b) => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (av, bv) = (val(*a), val(*b));
                with_grad!(*a, |ga| for r in 0..m {
                    for p in 0..k {
                        let mut acc = T::ZERO;
                        for c in 0..n {
                            acc += g[r * n + c] * bv[p * n + c];
                        }
                        ga[r * k + p] += acc;
                    }
                });
                with_grad!(*b, |gb| for p in 0..k {
                    for c in 0..n {
                        let mut acc = T::ZERO;
                        for r in 0..m {
                            acc += av[r * k + p] * g[r * n + c];
                        }
                        gb[p * n + c] += acc;
                    }
                });
            }
            Op::Linear { x, w, b } => {
                let sx = nodes[x.0].value.shape();
                let (m, k, n) = (sx[0], sx[1], nodes[w.0].value.shape()[0]);
                let (xv, wv) = (val(*x), val(*w));
                with_grad!(*x, |gx| kernels::linear_backward(
                    g,
                    xv,
                    m,
                    k,
                    wv,
                    n,
                    Some(&mut gx),
                    None,
                    None
                ));
                with_grad!(*w, |gw| kernels::linear_backward(
                    g,
                    xv,
                    m,
                    k,
                    wv,
                    n,
                    None,
                    Some(&mut gw),
                    None
                ));
                if let Some(b) = b {
                    with_grad!(*b, |gb| kernels::linear_backward(
                        g,
                        xv,
                        m,
                        k,
                        wv,
                        n,
                        None,
                        None,
                        Some(&mut gb)
                    ));
                }
            }
            Op::Binary(kind, a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (na, nb) = (av.len(), bv.len());
                let ia = |j: usize| if na == 1 { 0 } else { j };
                let ib = |j: usize| if nb == 1 { 0 } else { j };
                with_grad!(*a, |ga| for (j, &gj) in g.iter().enumerate() {
                    ga[ia(j)] += match kind {
                        Binary::Add | Binary::Sub => gj,
                        Binary::Mul => gj * bv[ib(j)],
                        Binary::Div => gj / bv[ib(j)],
                    };
                });
                with_grad!(*b, |gb| for (j, &gj) in g.iter().enumerate() {
                    gb[ib(j)] += match kind {
                        Binary::Add => gj,
                        Binary::Sub => -gj,
                        Binary::Mul => gj * av[ia(j)],
                        Binary::Div => -gj * out[j] / bv[ib(j)],
                    };
                });
            }
            Op::Scale(a, c) => with_grad!(*a, |ga| for (d, &gj) in ga.iter_mut().zip(g) {
                *d += gj * *c;
            }),
            Op::AddConst(a, _) => with_grad!(*a, |ga| for (d, &gj) in ga.iter_mut().zip(g) {
                *d += gj;
            }),
            Op::Unary(kind, a) => {
                let av = val(*a);
                with_grad!(*a, |ga| for j in 0..g.len() {
                    let x = av[j];
                    let local = match kind {
                        Unary::Exp => {
                            if x.inside_exp_clamp() {
                                out[j]
                            } else {
                                T::ZERO
                            }
                        }
                        Unary::Ln => T::ONE / x,
                        Unary::Sigmoid => {
                            if x.inside_exp_clamp() {
                                out[j] * (T::ONE - out[j])
                            } else {
                                T::ZERO
                            }
                        }
                        Unary::Silu => {
                            let s = x.sigmoid();
                            let ds = if x.inside_exp_clamp() {
                                s * (T::ONE - s)
                            } else {
                                T::ZERO
                            };
                            s + x * ds
                        }
                        Unary::Softplus => {
                            if x.inside_exp_clamp() {
                                x.sigmoid()
                            } else {
                                T::ZERO
                            }
                        }
                        Unary::SmoothL1 => {
                            if x.abs() < T::ONE {
                                x
                            } else if x > T::ZERO {
                                T::ONE
                            } else {
                                -T::ONE
                            }
                        }
                    };
                    ga[j] += g[j] * local;
                });
            }
            Op::Clamp(a, lo, hi) => {
                let av = val(*a);
                with_grad!(*a, |ga| for j in 0..g.len() {
                    if av[j] >= *lo && av[j] <= *hi {
                        ga[j] += g[j];
                    }
                });
            }
            Op::Sum(a) => with_grad!(*a, |ga| ga.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(a) => {
                let n = T::from_usize(nodes[a.0].value.numel());
                with_grad!(*a, |ga| ga.iter_mut().for_each(|d| *d += g[0] / n));
            }
            Op::Reshape(a) => with_grad!(*a, |ga| ga.iter_mut().zip(g).for_each(|(d, &gj)| *d += gj)),
            Op::SliceCols { x, start } => {
                let cols = nodes[x.0].value.shape()[1];
                let len = nodes[i].value.shape()[1];
                with_grad!(*x, |gx| for r in 0..g.len() / len {
                    for c in 0..len {
                        gx[r * cols + start + c] += g[r * len + c];
                    }
                });
            }
            Op::Narrow { x, start } => {
                let inner: usize = nodes[x.0].value.shape()[1..].iter().product();
                with_grad!(*x, |gx| for (j, &gj) in g.iter().enumerate() {
                    gx[start * inner + j] += gj;
                });
            }
            Op::CausalConv { x, w, b, seg } => {
                let ch = nodes[x.0].value.shape()[1];
                let width = nodes[w.0].value.shape()[1];
                let (xv, wv) = (val(*x), val(*w));
                with_grad!(*x, |gx| kernels::causal_conv_backward(
                    g,
                    xv,
                    ch,
                    wv,
                    width,
                    *seg,
                    Some(&mut gx),
                    None,
                    None
                ));
                with_grad!(*w, |gw| kernels::causal_conv_backward(
                    g,
                    xv,
                    ch,
                    wv,
                    width,
                    *seg,
                    None,
                    Some(&mut gw),
                    None
                ));
                with_grad!(*b, |gb| kernels::causal_conv_backward(
                    g,
                    xv,
                    ch,
                    wv,
                    width,
                    *seg,
                    None,
                    None,
                    Some(&mut gb)
                ));
            }
            Op::Scan {
                p,
                x,
                dt_bias,
                a_log,
                d,
                dims,
                cache,
            } => {
                let cache = cache.as_ref().expect("scan cache recorded when gradients are required");
                let mut take = |v: Var| needs(v).then(|| slot(grads, nodes, v));
                let (mut gp, mut gx, mut gbias, mut ga, mut gd) =
                    (take(*p), take(*x), take(*dt_bias), take(*a_log), take(*d));
                ssm::scan_backward(
                    *dims,
                    g,
                    val(*p),
                    val(*x),
                    val(*dt_bias),
                    val(*a_log),
                    val(*d),
                    cache,
                    ScanGrads {
                        p: gp.as_deref_mut(),
                        x: gx.as_deref_mut(),
                        dt_bias: gbias.as_deref_mut(),
                        a_log: ga.as_deref_mut(),
                        dmat: gd.as_deref_mut(),
                    },
                );
                for (v, buf) in [(*p, gp), (*x, gx), (*dt_bias, gbias), (*a_log, ga), (*d, gd)] {
                    if let Some(buf) = buf {
                        grads[v.0] = Some(buf);
                    }
                }
            }
            Op::SegmentPool { x, seg, mode } => {
                let ch = nodes[x.0].value.shape()[1];
                let rows = g.len() / ch;
                with_grad!(*x, |gx| for r in 0..rows {
                    match mode {
                        Pool::Mean => {
                            let n = T::from_usize(*seg);
                            for s in r * seg..(r + 1) * seg {
                                for c in 0..ch {
                                    gx[s * ch + c] += g[r * ch + c] / n;
                                }
                            }
                        }
                        Pool::Last => {
                            let s = (r + 1) * seg - 1;
                            for c in 0..ch {
                                gx[s * ch + c] += g[r * ch + c];
                            }
                        }
                    }
                });
            }
            Op::Conv1dMean { x, w, b } => {
                let sx = nodes[x.0].value.shape();
                let (len, cin) = (sx[0], sx[1]);
                let (xv, wv) = (val(*x), val(*w));
                with_grad!(*x, |gx| kernels::conv1d_mean_backward(
                    g,
                    xv,
                    len,
                    cin,
                    wv,
                    Some(&mut gx),
                    None,
                    None
                ));
                with_grad!(*w, |gw| kernels::conv1d_mean_backward(
                    g,
                    xv,
                    len,
                    cin,
                    wv,
                    None,
                    Some(&mut gw),
                    None
                ));
                with_grad!(*b, |gb| kernels::conv1d_mean_backward(
                    g,
                    xv,
                    len,
                    cin,
                    wv,
                    None,
                    None,
                    Some(&mut gb)
                ));
            }
            Op::Upsample(x, mode) => {
                let s = nodes[x.0].value.shape();
                let (c, h, w) = (s[0], s[1], s[2]);
                with_grad!(*x, |gx| kernels::upsample2x_backward(g, c, h, w, *mode, &mut gx));
            }
            Op::Conv2d { x, w, b, k } => {
                let s = nodes[x.0].value.shape();
                let (cin, h, wd) = (s[0], s[1], s[2]);
                let cout = nodes[b.0].value.numel();
                let (xv, wv) = (val(*x), val(*w));
                with_grad!(*x, |gx| kernels::conv2d_backward(
                    g,
                    xv,
                    cin,
                    h,
                    wd,
                    wv,
                    *k,
                    cout,
                    Some(&mut gx),
                    None,
                    None
                ));
                with_grad!(*w, |gw| kernels::conv2d_backward(
                    g,
                    xv,
                    cin,
                    h,
                    wd,
                    wv,
                    *k,
                    cout,
                    None,
                    Some(&mut gw),
                    None
                ));
                with_grad!(*b, |gb| kernels::conv2d_backward(
                    g,
                    xv,
                    cin,
                    h,
                    wd,
                    wv,
                    *k,
                    cout,
                    None,
                    None,
                    Some(&mut gb)
                ));
            }
        }
    }
}
