//! Forward and backward kernels shared by the differentiation tape and the
//! plain tensor API. Every function here is pure.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Strided view of a matrix inside a flat buffer.
#[derive(Clone, Copy, Debug)]
struct MatView {
    rows: usize,
    cols: usize,
    rs: isize,
    cs: isize,
}

impl MatView {
    fn row_major(rows: usize, cols: usize, transposed: bool) -> Self {
        // `rows x cols` is the logical (possibly transposed) shape.
        if transposed {
            Self {
                rows,
                cols,
                rs: 1,
                cs: rows as isize,
            }
        } else {
            Self {
                rows,
                cols,
                rs: cols as isize,
                cs: 1,
            }
        }
    }

    fn span(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            return 0;
        }
        ((self.rows - 1) as isize * self.rs + (self.cols - 1) as isize * self.cs) as usize + 1
    }
}

#[allow(clippy::too_many_arguments)]
/// `c <- alpha * a * b + beta * c` with bounds checked against the slices.
fn gemm<T: Scalar>(
    alpha: T,
    a: &[T],
    av: MatView,
    b: &[T],
    bv: MatView,
    beta: T,
    c: &mut [T],
    cv: MatView,
) {
    assert_eq!(av.cols, bv.rows);
    assert_eq!((av.rows, bv.cols), (cv.rows, cv.cols));
    assert!(av.span() <= a.len() && bv.span() <= b.len() && cv.span() <= c.len());
    if cv.rows == 0 || cv.cols == 0 {
        return;
    }
    // SAFETY: spans were checked above and `c` is a distinct mutable borrow.
    unsafe {
        T::gemm_raw(
            av.rows,
            av.cols,
            bv.cols,
            alpha,
            a.as_ptr(),
            av.rs,
            av.cs,
            b.as_ptr(),
            bv.rs,
            bv.cs,
            beta,
            c.as_mut_ptr(),
            cv.rs,
            cv.cs,
        );
    }
}

/// Plain matrix product of two rank-2 tensors.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 || a.dims()[1] != b.dims()[0] {
        return Err(Error::shape("matmul", a.dims(), b.dims()));
    }
    batched_matmul(a, b, false, false)
}

/// Shape bookkeeping for [`batched_matmul`].
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct BmmShape {
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub a_batched: bool,
    pub b_batched: bool,
    pub out_dims: Vec<usize>,
}

pub(crate) fn bmm_shape(
    a: &[usize],
    b: &[usize],
    trans_a: bool,
    trans_b: bool,
) -> Result<BmmShape> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::shape("matmul", a, b));
    }
    let (ra, rb) = (a.len(), b.len());
    let (m, ka) = if trans_a {
        (a[ra - 1], a[ra - 2])
    } else {
        (a[ra - 2], a[ra - 1])
    };
    let (kb, n) = if trans_b {
        (b[rb - 1], b[rb - 2])
    } else {
        (b[rb - 2], b[rb - 1])
    };
    if ka != kb {
        return Err(Error::shape("matmul", a, b));
    }
    let (lead_a, lead_b) = (&a[..ra - 2], &b[..rb - 2]);
    let lead = match (lead_a.is_empty(), lead_b.is_empty()) {
        (true, true) => Vec::new(),
        (false, true) => lead_a.to_vec(),
        (true, false) => lead_b.to_vec(),
        (false, false) if lead_a == lead_b => lead_a.to_vec(),
        _ => return Err(Error::shape("matmul", a, b)),
    };
    let mut out_dims = lead.clone();
    out_dims.extend([m, n]);
    Ok(BmmShape {
        batch: lead.iter().product(),
        m,
        k: ka,
        n,
        a_batched: !lead_a.is_empty(),
        b_batched: !lead_b.is_empty(),
        out_dims,
    })
}

/// Matrix product over the two trailing axes with optional transposes.
/// A rank-2 operand is broadcast across the batch of the other operand.
pub fn batched_matmul<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    trans_a: bool,
    trans_b: bool,
) -> Result<Tensor<T>> {
    let s = bmm_shape(a.dims(), b.dims(), trans_a, trans_b)?;
    let mut out = Tensor::zeros(&s.out_dims);
    let (a_stride, b_stride) = (s.m * s.k, s.k * s.n);
    let av = MatView::row_major(s.m, s.k, trans_a);
    let bv = MatView::row_major(s.k, s.n, trans_b);
    let cv = MatView::row_major(s.m, s.n, false);
    for (i, c) in out.data_mut().chunks_mut(s.m * s.n).enumerate() {
        let ao = if s.a_batched { i * a_stride } else { 0 };
        let bo = if s.b_batched { i * b_stride } else { 0 };
        gemm(
            T::one(),
            &a.data()[ao..ao + a_stride],
            av,
            &b.data()[bo..bo + b_stride],
            bv,
            T::zero(),
            c,
            cv,
        );
    }
    Ok(out)
}

/// Gradients of `C = op(A) op(B)` given `dC`. A broadcast operand receives
/// the sum over the batch.
pub(crate) fn batched_matmul_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    trans_a: bool,
    trans_b: bool,
    dc: &Tensor<T>,
    need: [bool; 2],
) -> [Option<Tensor<T>>; 2] {
    let s = bmm_shape(a.dims(), b.dims(), trans_a, trans_b).expect("validated in forward");
    let (a_stride, b_stride, c_stride) = (s.m * s.k, s.k * s.n, s.m * s.n);
    let av = MatView::row_major(s.m, s.k, trans_a);
    let bv = MatView::row_major(s.k, s.n, trans_b);
    let dcv = MatView::row_major(s.m, s.n, false);
    let dct = MatView::row_major(s.n, s.m, true);
    let mut da = need[0].then(|| Tensor::zeros(a.dims()));
    let mut db = need[1].then(|| Tensor::zeros(b.dims()));
    for i in 0..s.batch {
        let ao = if s.a_batched { i * a_stride } else { 0 };
        let bo = if s.b_batched { i * b_stride } else { 0 };
        let dc_i = &dc.data()[i * c_stride..(i + 1) * c_stride];
        let a_i = &a.data()[ao..ao + a_stride];
        let b_i = &b.data()[bo..bo + b_stride];
        if let Some(da) = da.as_mut() {
            let beta = if s.a_batched || i == 0 { T::zero() } else { T::one() };
            let dst = &mut da.data_mut()[ao..ao + a_stride];
            if trans_a {
                // dA (k x m) = op(B) dC^T
                let dv = MatView::row_major(s.k, s.m, false);
                gemm(T::one(), b_i, bv, dc_i, dct, beta, dst, dv);
            } else {
                // dA (m x k) = dC op(B)^T
                let btv = MatView {
                    rows: s.n,
                    cols: s.k,
                    rs: bv.cs,
                    cs: bv.rs,
                };
                let dv = MatView::row_major(s.m, s.k, false);
                gemm(T::one(), dc_i, dcv, b_i, btv, beta, dst, dv);
            }
        }
        if let Some(db) = db.as_mut() {
            let beta = if s.b_batched || i == 0 { T::zero() } else { T::one() };
            let dst = &mut db.data_mut()[bo..bo + b_stride];
            if trans_b {
                // dB (n x k) = dC^T op(A)
                let dv = MatView::row_major(s.n, s.k, false);
                gemm(T::one(), dc_i, dct, a_i, av, beta, dst, dv);
            } else {
                // dB (k x n) = op(A)^T dC
                let atv = MatView {
                    rows: s.k,
                    cols: s.m,
                    rs: av.cs,
                    cs: av.rs,
                };
                let dv = MatView::row_major(s.k, s.n, false);
                gemm(T::one(), a_i, atv, dc_i, dcv, beta, dst, dv);
            }
        }
    }
    [da, db]
}

/// Softmax along the last axis with per-row max subtraction.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let n = *x.dims().last().expect("rank >= 1");
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(n) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = T::one() / sum;
        row.iter_mut().for_each(|v| *v *= inv);
    }
    out
}

pub(crate) fn softmax_rows_backward<T: Scalar>(s: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let n = *s.dims().last().unwrap();
    let mut dx = dy.clone();
    for (row_dx, row_s) in dx.data_mut().chunks_mut(n).zip(s.data().chunks(n)) {
        let dot: T = row_dx.iter().zip(row_s).map(|(&g, &p)| g * p).sum();
        row_dx
            .iter_mut()
            .zip(row_s)
            .for_each(|(g, &p)| *g = p * (*g - dot));
    }
    dx
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PoolMode {
    Max,
    Avg,
}

impl std::str::FromStr for PoolMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" | "m" => Ok(PoolMode::Max),
            "avg" | "a" | "mean" => Ok(PoolMode::Avg),
            other => Err(Error::Config(format!("unknown pool kind `{other}`"))),
        }
    }
}

impl std::fmt::Display for PoolMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PoolMode::Max => "max",
            PoolMode::Avg => "avg",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding chosen so that every output extent is `ceil(in / stride)`.
    Same,
    Valid,
}

/// Window geometry over the trailing three axes (t, h, w).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub output: [usize; 3],
}

impl Window {
    pub fn new(
        input: [usize; 3],
        kernel: [usize; 3],
        stride: [usize; 3],
        padding: Padding,
    ) -> Result<Self> {
        if kernel.contains(&0) || stride.contains(&0) {
            return Err(Error::Config(format!(
                "kernel {kernel:?} and stride {stride:?} must be positive"
            )));
        }
        let mut pad = [0; 3];
        let mut output = [0; 3];
        for a in 0..3 {
            match padding {
                Padding::Same => {
                    output[a] = input[a].div_ceil(stride[a]);
                    let total = ((output[a] - 1) * stride[a] + kernel[a]).saturating_sub(input[a]);
                    pad[a] = total / 2;
                }
                Padding::Valid => {
                    if input[a] < kernel[a] {
                        return Err(Error::shape("window", &input, &kernel));
                    }
                    output[a] = (input[a] - kernel[a]) / stride[a] + 1;
                }
            }
        }
        Ok(Self {
            input,
            kernel,
            stride,
            pad,
            output,
        })
    }

    /// Explicit symmetric padding (as used by the strided stem pooling).
    pub fn with_pad(
        input: [usize; 3],
        kernel: [usize; 3],
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Result<Self> {
        let mut output = [0; 3];
        for a in 0..3 {
            let span = input[a] + 2 * pad[a];
            if span < kernel[a] || stride[a] == 0 {
                return Err(Error::shape("window", &input, &kernel));
            }
            output[a] = (span - kernel[a]) / stride[a] + 1;
        }
        Ok(Self {
            input,
            kernel,
            stride,
            pad,
            output,
        })
    }

    fn in_volume(&self) -> usize {
        self.input.iter().product()
    }

    fn out_volume(&self) -> usize {
        self.output.iter().product()
    }

    fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Input coordinate touched by output `o` at kernel offset `k` along axis `a`.
    #[inline]
    fn source(&self, a: usize, o: usize, k: usize) -> Option<usize> {
        let p = (o * self.stride[a] + k) as isize - self.pad[a] as isize;
        (p >= 0 && (p as usize) < self.input[a]).then_some(p as usize)
    }
}

fn trailing3(dims: &[usize]) -> Result<([usize; 3], usize)> {
    let r = dims.len();
    if r < 3 {
        return Err(Error::shape("pool3d", dims, &[0, 0, 0]));
    }
    Ok((
        [dims[r - 3], dims[r - 2], dims[r - 1]],
        dims[..r - 3].iter().product(),
    ))
}

/// Same-size pooling with stride 1 over the trailing (t, h, w) axes.
///
/// Kernel extents must be odd. Max mode ignores padded positions; avg mode
/// divides by the number of in-bounds elements of each window.
pub fn pool3d<T: Scalar>(x: &Tensor<T>, kernel: [usize; 3], mode: PoolMode) -> Result<Tensor<T>> {
    if kernel.iter().any(|&k| k % 2 == 0) {
        return Err(Error::Config(format!(
            "pooling kernel {kernel:?} must have odd extents"
        )));
    }
    let (input, _) = trailing3(x.dims())?;
    let win = Window::new(input, kernel, [1, 1, 1], Padding::Same)?;
    Ok(pool_forward(x, &win, mode).0)
}

/// Pooling with an explicit window; returns the argmax map for max mode.
pub(crate) fn pool_forward<T: Scalar>(
    x: &Tensor<T>,
    win: &Window,
    mode: PoolMode,
) -> (Tensor<T>, Option<Vec<u32>>) {
    let (input, lead) = trailing3(x.dims()).expect("rank checked");
    debug_assert_eq!(input, win.input);
    let mut dims = x.dims()[..x.rank() - 3].to_vec();
    dims.extend(win.output);
    let (iv, ov) = (win.in_volume(), win.out_volume());
    let mut out = vec![T::zero(); lead * ov];
    let mut arg = (mode == PoolMode::Max).then(|| vec![0u32; lead * ov]);
    let [_, ih, iw] = win.input;
    let [ot, oh, ow] = win.output;
    for s in 0..lead {
        let src = &x.data()[s * iv..(s + 1) * iv];
        for t in 0..ot {
            for y in 0..oh {
                for xo in 0..ow {
                    let o = (t * oh + y) * ow + xo;
                    let mut best = T::neg_infinity();
                    let mut best_i = usize::MAX;
                    let mut sum = T::zero();
                    let mut count = 0usize;
                    for kt in 0..win.kernel[0] {
                        let Some(pt) = win.source(0, t, kt) else { continue };
                        for ky in 0..win.kernel[1] {
                            let Some(py) = win.source(1, y, ky) else { continue };
                            for kx in 0..win.kernel[2] {
                                let Some(px) = win.source(2, xo, kx) else { continue };
                                let i = (pt * ih + py) * iw + px;
                                let v = src[i];
                                match mode {
                                    PoolMode::Max => {
                                        if best_i == usize::MAX || v > best {
                                            best = v;
                                            best_i = i;
                                        }
                                    }
                                    PoolMode::Avg => {
                                        sum += v;
                                        count += 1;
                                    }
                                }
                            }
                        }
                    }
                    out[s * ov + o] = match mode {
                        PoolMode::Max => {
                            arg.as_mut().unwrap()[s * ov + o] = best_i as u32;
                            best
                        }
                        PoolMode::Avg => sum / T::from_usize(count).unwrap(),
                    };
                }
            }
        }
    }
    (Tensor::new(&dims, out).expect("pool dims"), arg)
}

/// Smallest gap between the largest and second-largest in-bounds value of
/// any max-pooling window; infinite when every window has one element.
pub(crate) fn pool_max_gap<T: Scalar>(x: &Tensor<T>, win: &Window) -> f64 {
    let (_, lead) = trailing3(x.dims()).expect("rank checked");
    let iv = win.in_volume();
    let [_, ih, iw] = win.input;
    let [ot, oh, ow] = win.output;
    let mut gap = f64::INFINITY;
    for s in 0..lead {
        let src = &x.data()[s * iv..(s + 1) * iv];
        for t in 0..ot {
            for y in 0..oh {
                for xo in 0..ow {
                    let (mut top, mut second) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
                    for kt in 0..win.kernel[0] {
                        let Some(pt) = win.source(0, t, kt) else { continue };
                        for ky in 0..win.kernel[1] {
                            let Some(py) = win.source(1, y, ky) else { continue };
                            for kx in 0..win.kernel[2] {
                                let Some(px) = win.source(2, xo, kx) else { continue };
                                let v = src[(pt * ih + py) * iw + px].as_f64();
                                if v > top {
                                    second = top;
                                    top = v;
                                } else if v > second {
                                    second = v;
                                }
                            }
                        }
                    }
                    if second > f64::NEG_INFINITY {
                        gap = gap.min(top - second);
                    }
                }
            }
        }
    }
    gap
}

pub(crate) fn pool_backward<T: Scalar>(
    in_dims: &[usize],
    win: &Window,
    mode: PoolMode,
    argmax: Option<&[u32]>,
    dy: &Tensor<T>,
) -> Tensor<T> {
    let (_, lead) = trailing3(in_dims).expect("rank");
    let (iv, ov) = (win.in_volume(), win.out_volume());
    let mut dx = Tensor::zeros(in_dims);
    let dxd = dx.data_mut();
    match mode {
        PoolMode::Max => {
            let arg = argmax.expect("argmax recorded for max pooling");
            for s in 0..lead {
                for o in 0..ov {
                    dxd[s * iv + arg[s * ov + o] as usize] += dy.data()[s * ov + o];
                }
            }
        }
        PoolMode::Avg => {
            let [_, ih, iw] = win.input;
            let [ot, oh, ow] = win.output;
            for s in 0..lead {
                for t in 0..ot {
                    for y in 0..oh {
                        for xo in 0..ow {
                            let o = (t * oh + y) * ow + xo;
                            let mut idx = Vec::with_capacity(win.kernel_volume());
                            for kt in 0..win.kernel[0] {
                                let Some(pt) = win.source(0, t, kt) else { continue };
                                for ky in 0..win.kernel[1] {
                                    let Some(py) = win.source(1, y, ky) else { continue };
                                    for kx in 0..win.kernel[2] {
                                        let Some(px) = win.source(2, xo, kx) else { continue };
                                        idx.push((pt * ih + py) * iw + px);
                                    }
                                }
                            }
                            let g = dy.data()[s * ov + o] / T::from_usize(idx.len()).unwrap();
                            for i in idx {
                                dxd[s * iv + i] += g;
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Split `(…, c, t, h, w)` into (batch, c, t·h·w).
fn channel_layout(dims: &[usize]) -> Result<(usize, usize, usize)> {
    match dims.len() {
        4 => Ok((1, dims[0], dims[1] * dims[2] * dims[3])),
        5 => Ok((dims[0], dims[1], dims[2] * dims[3] * dims[4])),
        _ => Err(Error::shape("conv_channel_mix", dims, &[0, 0, 0, 0])),
    }
}

/// Kernel-size-1 convolution without bias: every (t, h, w) site's channel
/// vector is multiplied by `w` (c_out x c_in). Accepts rank-4 volumes and
/// rank-5 batches.
pub fn conv_channel_mix<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    let (batch, c_in, sites) = channel_layout(x.dims())?;
    if w.rank() != 2 || w.dims()[1] != c_in {
        return Err(Error::shape("conv_channel_mix", x.dims(), w.dims()));
    }
    let c_out = w.dims()[0];
    let mut dims = x.dims().to_vec();
    dims[x.rank() - 4] = c_out;
    let xv = x.reshape(&[batch, c_in, sites])?;
    batched_matmul(w, &xv, false, false)?.into_reshape(&dims)
}

pub(crate) fn conv_channel_mix_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    need: [bool; 2],
) -> [Option<Tensor<T>>; 2] {
    let (batch, c_in, sites) = channel_layout(x.dims()).expect("validated");
    let c_out = w.dims()[0];
    let xv = x.reshape(&[batch, c_in, sites]).unwrap();
    let dyv = dy.reshape(&[batch, c_out, sites]).unwrap();
    let [dw, dx] = batched_matmul_backward(w, &xv, false, false, &dyv, need);
    [
        dx.map(|d| d.into_reshape(x.dims()).unwrap()),
        dw,
    ]
}

/// Parameters of a 3-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv3dParams {
    pub stride: [usize; 3],
    pub padding: Padding,
}

impl Default for Conv3dParams {
    fn default() -> Self {
        Self {
            stride: [1, 1, 1],
            padding: Padding::Same,
        }
    }
}

pub(crate) struct ConvPlan {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub win: Window,
    pub out_dims: Vec<usize>,
    /// 1x1x1 kernel at stride 1: the input already is the column matrix.
    pub pointwise: bool,
}

pub(crate) fn conv_plan(x: &[usize], w: &[usize], p: Conv3dParams) -> Result<ConvPlan> {
    let (batch, rest) = match x.len() {
        5 => (x[0], &x[1..]),
        4 => (1, x),
        _ => return Err(Error::shape("conv3d", x, w)),
    };
    if w.len() != 5 || w[1] != rest[0] {
        return Err(Error::shape("conv3d", x, w));
    }
    if p.stride.contains(&0) {
        return Err(Error::Config("conv3d strides must be >= 1".into()));
    }
    let kernel = [w[2], w[3], w[4]];
    let win = Window::new([rest[1], rest[2], rest[3]], kernel, p.stride, p.padding)?;
    let mut out_dims = if x.len() == 5 { vec![batch] } else { vec![] };
    out_dims.push(w[0]);
    out_dims.extend(win.output);
    Ok(ConvPlan {
        batch,
        c_in: rest[0],
        c_out: w[0],
        win,
        out_dims,
        pointwise: kernel == [1, 1, 1] && p.stride == [1, 1, 1],
    })
}

/// Unfold one sample (c_in, t, h, w) into a (c_in·k) x (out sites) matrix.
fn im2col<T: Scalar>(src: &[T], c_in: usize, win: &Window, col: &mut [T]) {
    let [_, ih, iw] = win.input;
    let [ot, oh, ow] = win.output;
    let [kt, kh, kw] = win.kernel;
    let (iv, ov) = (win.in_volume(), win.out_volume());
    let mut row = 0;
    for c in 0..c_in {
        let plane = &src[c * iv..(c + 1) * iv];
        for a in 0..kt {
            for b in 0..kh {
                for d in 0..kw {
                    let dst = &mut col[row * ov..(row + 1) * ov];
                    for t in 0..ot {
                        let pt = win.source(0, t, a);
                        for y in 0..oh {
                            let py = win.source(1, y, b);
                            let base = (t * oh + y) * ow;
                            match (pt, py) {
                                (Some(pt), Some(py)) => {
                                    let line = &plane[(pt * ih + py) * iw..(pt * ih + py + 1) * iw];
                                    for x in 0..ow {
                                        dst[base + x] = match win.source(2, x, d) {
                                            Some(px) => line[px],
                                            None => T::zero(),
                                        };
                                    }
                                }
                                _ => dst[base..base + ow].fill(T::zero()),
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn col2im<T: Scalar>(col: &[T], c_in: usize, win: &Window, dst: &mut [T]) {
    let [_, ih, iw] = win.input;
    let [ot, oh, ow] = win.output;
    let [kt, kh, kw] = win.kernel;
    let (iv, ov) = (win.in_volume(), win.out_volume());
    let mut row = 0;
    for c in 0..c_in {
        let plane = &mut dst[c * iv..(c + 1) * iv];
        for a in 0..kt {
            for b in 0..kh {
                for d in 0..kw {
                    let src = &col[row * ov..(row + 1) * ov];
                    for t in 0..ot {
                        let Some(pt) = win.source(0, t, a) else { continue };
                        for y in 0..oh {
                            let Some(py) = win.source(1, y, b) else { continue };
                            let base = (t * oh + y) * ow;
                            let off = (pt * ih + py) * iw;
                            for x in 0..ow {
                                if let Some(px) = win.source(2, x, d) {
                                    plane[off + px] += src[base + x];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// 3-D cross-correlation of `x` (n, c_in, t, h, w) or (c_in, t, h, w) with a
/// kernel bank `w` (c_out, c_in, k_t, k_h, k_w). No bias.
pub fn conv3d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, p: Conv3dParams) -> Result<Tensor<T>> {
    let plan = conv_plan(x.dims(), w.dims(), p)?;
    let k_rows = plan.c_in * plan.win.kernel_volume();
    let (iv, ov) = (plan.c_in * plan.win.in_volume(), plan.win.out_volume());
    let mut out = Tensor::zeros(&plan.out_dims);
    let mut col = if plan.pointwise {
        Vec::new()
    } else {
        vec![T::zero(); k_rows * ov]
    };
    let wv = MatView::row_major(plan.c_out, k_rows, false);
    let colv = MatView::row_major(k_rows, ov, false);
    let outv = MatView::row_major(plan.c_out, ov, false);
    for s in 0..plan.batch {
        let src = &x.data()[s * iv..(s + 1) * iv];
        let dst = &mut out.data_mut()[s * plan.c_out * ov..(s + 1) * plan.c_out * ov];
        let cols: &[T] = if plan.pointwise {
            src
        } else {
            im2col(src, plan.c_in, &plan.win, &mut col);
            &col
        };
        gemm(T::one(), w.data(), wv, cols, colv, T::zero(), dst, outv);
    }
    Ok(out)
}

pub(crate) fn conv3d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    p: Conv3dParams,
    dy: &Tensor<T>,
    need: [bool; 2],
) -> [Option<Tensor<T>>; 2] {
    let plan = conv_plan(x.dims(), w.dims(), p).expect("validated in forward");
    let k_rows = plan.c_in * plan.win.kernel_volume();
    let (iv, ov) = (plan.c_in * plan.win.in_volume(), plan.win.out_volume());
    let mut dx = need[0].then(|| Tensor::zeros(x.dims()));
    let mut dw = need[1].then(|| Tensor::zeros(w.dims()));
    let mut col = vec![T::zero(); if plan.pointwise { 0 } else { k_rows * ov }];
    let mut dcol = vec![T::zero(); if plan.pointwise || dx.is_none() { 0 } else { k_rows * ov }];
    let wtv = MatView::row_major(k_rows, plan.c_out, true);
    let colt = MatView::row_major(ov, k_rows, true);
    let dyv = MatView::row_major(plan.c_out, ov, false);
    let dcolv = MatView::row_major(k_rows, ov, false);
    for s in 0..plan.batch {
        let src = &x.data()[s * iv..(s + 1) * iv];
        let g = &dy.data()[s * plan.c_out * ov..(s + 1) * plan.c_out * ov];
        if let Some(dw) = dw.as_mut() {
            let cols: &[T] = if plan.pointwise {
                src
            } else {
                im2col(src, plan.c_in, &plan.win, &mut col);
                &col
            };
            let beta = if s == 0 { T::zero() } else { T::one() };
            gemm(
                T::one(),
                g,
                dyv,
                cols,
                colt,
                beta,
                dw.data_mut(),
                MatView::row_major(plan.c_out, k_rows, false),
            );
        }
        if let Some(dx) = dx.as_mut() {
            let dst = &mut dx.data_mut()[s * iv..(s + 1) * iv];
            if plan.pointwise {
                gemm(T::one(), w.data(), wtv, g, dyv, T::zero(), dst, dcolv);
            } else {
                gemm(T::one(), w.data(), wtv, g, dyv, T::zero(), &mut dcol, dcolv);
                col2im(&dcol, plan.c_in, &plan.win, dst);
            }
        }
    }
    [dx, dw]
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(dims: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(dims, |_| rng.gen_range(-1.0..1.0))
    }

    fn naive_matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let (m, k, n) = (a.dims()[0], a.dims()[1], b.dims()[1]);
        let mut c = Tensor::zeros(&[m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.get(&[i, p]) * b.get(&[p, j]);
                }
                c.set(&[i, j], s);
            }
        }
        c
    }

    #[test]
    fn matmul_examples() {
        let a = Tensor::<f64>::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let b = Tensor::<f64>::from_rows(&[&[5.0, 6.0], &[7.0, 8.0]]).unwrap();
        // frozen from the triple-loop oracle
        assert_eq!(naive_matmul(&a, &b).data(), &[19.0, 22.0, 43.0, 50.0]);
        assert_eq!(matmul(&a, &b).unwrap().data(), &[19.0, 22.0, 43.0, 50.0]);
        assert_eq!(matmul(&Tensor::eye(2), &a).unwrap(), a);
        assert_eq!(matmul(&a, &Tensor::zeros(&[2, 2])).unwrap(), Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn matmul_shape_error_names_both_operands() {
        let err = matmul(&Tensor::<f32>::zeros(&[2, 3]), &Tensor::zeros(&[4, 2])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn transposed_products_match_naive() {
        let a = random(&[3, 5], 1);
        let b = random(&[3, 4], 2);
        let got = batched_matmul(&a, &b, true, false).unwrap();
        let want = naive_matmul(&a.transpose_last2(), &b);
        assert!(got.max_abs_diff(&want) < 1e-12);
        let c = random(&[4, 5], 3);
        let got = batched_matmul(&a, &c, false, true).unwrap();
        let want = naive_matmul(&a, &c.transpose_last2());
        assert!(got.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn softmax_closed_forms() {
        let x = Tensor::<f64>::from_rows(&[&[0.0, 2f64.ln()], &[7.0, 7.0]]).unwrap();
        let s = softmax_rows(&x);
        assert!((s.get(&[0, 0]) - 1.0 / 3.0).abs() < 1e-15);
        assert!((s.get(&[0, 1]) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(s.get(&[1, 0]), 0.5);
        let u = softmax_rows(&Tensor::<f32>::full(&[1, 4], 3.0));
        assert_eq!(u.data(), &[0.25; 4]);
    }

    #[test]
    fn max_pool_temporal_window() {
        let x = Tensor::<f32>::new(&[1, 4, 1, 1], vec![1.0, 5.0, 2.0, 0.0]).unwrap();
        let y = pool3d(&x, [3, 1, 1], PoolMode::Max).unwrap();
        assert_eq!(y.data(), &[5.0, 5.0, 5.0, 2.0]);
    }

    #[test]
    fn avg_pool_keeps_constants_at_borders() {
        let x = Tensor::<f32>::full(&[2, 3, 4, 5], 1.75);
        let y = pool3d(&x, [3, 5, 5], PoolMode::Avg).unwrap();
        assert!(y.data().iter().all(|&v| (v - 1.75).abs() < 1e-6));
    }

    #[test]
    fn even_pool_kernel_is_rejected() {
        let x = Tensor::<f32>::zeros(&[1, 4, 4, 4]);
        assert!(matches!(pool3d(&x, [2, 1, 1], PoolMode::Max), Err(Error::Config(_))));
    }

    #[test]
    fn channel_mix_examples() {
        let x = Tensor::<f64>::new(&[2, 1, 1, 3], vec![1.0, 2.0, 3.0, 10.0, 20.0, 30.0]).unwrap();
        let w = Tensor::new(&[1, 2], vec![1.0, 1.0]).unwrap();
        let y = conv_channel_mix(&x, &w).unwrap();
        assert_eq!(y.dims(), &[1, 1, 1, 3]);
        assert_eq!(y.data(), &[11.0, 22.0, 33.0]);
        assert_eq!(conv_channel_mix(&x, &Tensor::eye(2)).unwrap(), x);
        assert!(conv_channel_mix(&x, &Tensor::zeros(&[1, 3])).is_err());
    }

    fn naive_conv3d(x: &Tensor<f64>, w: &Tensor<f64>, win: &Window) -> Tensor<f64> {
        let (n, ci) = (x.dims()[0], x.dims()[1]);
        let co = w.dims()[0];
        let [ot, oh, ow] = win.output;
        let mut out = Tensor::zeros(&[n, co, ot, oh, ow]);
        for b in 0..n {
            for o in 0..co {
                for t in 0..ot {
                    for y in 0..oh {
                        for xx in 0..ow {
                            let mut s = 0.0;
                            for c in 0..ci {
                                for a in 0..win.kernel[0] {
                                    for bb in 0..win.kernel[1] {
                                        for d in 0..win.kernel[2] {
                                            let pt = (t * win.stride[0] + a) as isize - win.pad[0] as isize;
                                            let py = (y * win.stride[1] + bb) as isize - win.pad[1] as isize;
                                            let px = (xx * win.stride[2] + d) as isize - win.pad[2] as isize;
                                            if pt < 0 || py < 0 || px < 0 {
                                                continue;
                                            }
                                            let (pt, py, px) = (pt as usize, py as usize, px as usize);
                                            if pt >= win.input[0] || py >= win.input[1] || px >= win.input[2] {
                                                continue;
                                            }
                                            s += x.get(&[b, c, pt, py, px]) * w.get(&[o, c, a, bb, d]);
                                        }
                                    }
                                }
                            }
                            out.set(&[b, o, t, y, xx], s);
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv3d_matches_direct_summation() {
        for (k, stride, seed) in [([3, 3, 3], [1, 1, 1], 5), ([1, 3, 3], [1, 2, 2], 6), ([3, 1, 1], [1, 1, 1], 7), ([1, 7, 7], [1, 2, 2], 8), ([1, 1, 1], [1, 2, 2], 9)] {
            let x = random(&[2, 3, 4, 7, 5], seed);
            let w = random(&[4, 3, k[0], k[1], k[2]], seed + 100);
            let p = Conv3dParams { stride, padding: Padding::Same };
            let plan = conv_plan(x.dims(), w.dims(), p).unwrap();
            let got = conv3d(&x, &w, p).unwrap();
            let want = naive_conv3d(&x, &w, &plan.win);
            assert!(got.max_abs_diff(&want) < 1e-12, "kernel {k:?}");
            for (a, &s) in stride.iter().enumerate() {
                assert_eq!(plan.win.output[a], x.dims()[2 + a].div_ceil(s));
            }
        }
    }

    #[test]
    fn conv3d_small_cases() {
        let x = Tensor::<f32>::ones(&[1, 1, 1, 3, 3]);
        let w = Tensor::<f32>::ones(&[1, 1, 1, 3, 3]);
        let p = Conv3dParams { stride: [1, 1, 1], padding: Padding::Valid };
        let y = conv3d(&x, &w, p).unwrap();
        assert_eq!(y.dims(), &[1, 1, 1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);

        let x = Tensor::<f32>::from_fn(&[2, 3, 2, 2, 2], |i| i as f32);
        let id = Tensor::<f32>::from_fn(&[3, 3, 1, 1, 1], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
        assert_eq!(conv3d(&x, &id, Conv3dParams::default()).unwrap(), x);
        let zero = Tensor::<f32>::zeros(&[2, 3, 3, 3, 3]);
        assert_eq!(conv3d(&x, &zero, Conv3dParams::default()).unwrap().max_abs(), 0.0);
        assert!(conv3d(&x, &Tensor::zeros(&[2, 4, 1, 1, 1]), Conv3dParams::default()).is_err());
    }

    #[test]
    fn strided_stem_pool_geometry() {
        let win = Window::with_pad([4, 128, 64], [1, 3, 3], [1, 2, 2], [0, 1, 1]).unwrap();
        assert_eq!(win.output, [4, 64, 32]);
    }

    #[test]
    fn bmm_broadcast_backward_sums_batch() {
        let w = random(&[2, 3], 11);
        let x = random(&[4, 3, 5], 12);
        let y = batched_matmul(&w, &x, false, false).unwrap();
        assert_eq!(y.dims(), &[4, 2, 5]);
        let dy = Tensor::ones(y.dims());
        let [dw, _] = batched_matmul_backward(&w, &x, false, false, &dy, [true, false]);
        let dw = dw.unwrap();
        for i in 0..2 {
            for j in 0..3 {
                let want: f64 = (0..4).map(|b| (0..5).map(|n| x.get(&[b, j, n])).sum::<f64>()).sum();
                assert!((dw.get(&[i, j]) - want).abs() < 1e-12);
            }
        }
    }
}
