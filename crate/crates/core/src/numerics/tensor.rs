//! Dense row-major tensor and the closed set of numeric kernels.
//!
//! Tensors are immutable once built. Buffers are reference counted, so
//! cloning and reshaping never copy (and never charge the allocation
//! counter); every kernel that produces new data allocates exactly one
//! output buffer.

use std::fmt;
use std::sync::Arc;

use super::alloc::AllocCounter;
use crate::error::{Error, Result};
use crate::scalar::Real;

struct Buffer<T> {
    data: Vec<T>,
    counter: Option<Arc<AllocCounter>>,
}

impl<T> Buffer<T> {
    fn new(data: Vec<T>) -> Self {
        let counter = AllocCounter::active();
        if let Some(c) = &counter {
            c.charge(data.len());
        }
        Buffer { data, counter }
    }
}

impl<T> Drop for Buffer<T> {
    fn drop(&mut self) {
        if let Some(c) = &self.counter {
            c.credit(self.data.len());
        }
    }
}

#[derive(Clone)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    buf: Arc<Buffer<T>>,
}

impl<T: Real> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let data = self.data();
        let shown = &data[..data.len().min(16)];
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &shown)
            .field("truncated", &(data.len() > shown.len()))
            .finish()
    }
}

impl<T: Real> PartialEq for Tensor<T> {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data() == other.data()
    }
}

fn check_shape(op: &'static str, shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::invalid_shape(op, shape, "rank must be at least 1"));
    }
    if shape.contains(&0) {
        return Err(Error::invalid_shape(op, shape, "extents must be positive"));
    }
    Ok(shape.iter().product())
}

/// Binary elementwise operators.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

/// Unary elementwise operators. `Scale` and `AddScalar` carry their scalar as f64.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UnaryOp {
    Square,
    Scale(f64),
    AddScalar(f64),
    Exp,
    Abs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    Max,
}

/// Tanh-approximation constant sqrt(2/pi) used by [`Tensor::gelu`].
pub const GELU_SQRT_2_OVER_PI: f64 = 0.7978845608;
pub const GELU_CUBIC: f64 = 0.044715;

impl<T: Real> Tensor<T> {
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n = check_shape("from_vec", shape)?;
        if n != data.len() {
            return Err(Error::invalid_shape(
                "from_vec",
                shape,
                format!("expects {n} elements, got {}", data.len()),
            ));
        }
        Ok(Self::from_parts(shape.to_vec(), data))
    }

    fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            buf: Arc::new(Buffer::new(data)),
        }
    }

    pub fn full(shape: &[usize], value: T) -> Result<Self> {
        let n = check_shape("full", shape)?;
        Ok(Self::from_parts(shape.to_vec(), vec![value; n]))
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::one())
    }

    pub fn scalar(x: T) -> Self {
        Self::from_parts(vec![1], vec![x])
    }

    pub fn eye(n: usize) -> Result<Self> {
        let mut data = vec![T::zero(); n * n];
        for i in 0..n {
            data[i * n + i] = T::one();
        }
        Self::from_vec(&[n, n], data)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Result<Self> {
        let n = check_shape("from_fn", shape)?;
        Ok(Self::from_parts(shape.to_vec(), (0..n).map(&mut f).collect()))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.buf.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.buf.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.buf.data.clone()
    }

    /// Extent of the last axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().unwrap()
    }

    /// Number of rows when viewed as `[numel / last_dim, last_dim]`.
    pub fn rows(&self) -> usize {
        self.numel() / self.last_dim()
    }

    pub fn item(&self) -> Result<T> {
        if self.numel() != 1 {
            return Err(Error::invalid_shape("item", &self.shape, "expected a single element"));
        }
        Ok(self.data()[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data().iter().all(|x| x.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor::from_parts(
            self.shape.clone(),
            self.data().iter().map(|&x| U::lit(x.to_f64_lossy())).collect(),
        )
    }

    /// Largest absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        if self.shape != other.shape {
            return Err(Error::shape("max_abs_diff", &self.shape, &other.shape));
        }
        Ok(self
            .data()
            .iter()
            .zip(other.data())
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs())))
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_parts(self.shape.clone(), self.data().iter().map(|&x| f(x)).collect())
    }

    // ---- elementwise -------------------------------------------------

    pub fn unary(&self, op: UnaryOp) -> Self {
        match op {
            UnaryOp::Square => self.map(|x| x * x),
            UnaryOp::Scale(c) => {
                let c = T::lit(c);
                self.map(|x| x * c)
            }
            UnaryOp::AddScalar(c) => {
                let c = T::lit(c);
                self.map(|x| x + c)
            }
            UnaryOp::Exp => self.map(|x| x.exp()),
            UnaryOp::Abs => self.map(|x| x.abs()),
        }
    }

    pub fn square(&self) -> Self {
        self.unary(UnaryOp::Square)
    }

    pub fn scale(&self, c: f64) -> Self {
        self.unary(UnaryOp::Scale(c))
    }

    pub fn add_scalar(&self, c: f64) -> Self {
        self.unary(UnaryOp::AddScalar(c))
    }

    /// Applies `op(a, b)` where `b` either matches `a`'s shape or broadcasts
    /// into it: `b` is aligned to the trailing axes of `a` and each of its
    /// extents equals the corresponding extent of `a` or is 1.
    pub fn binary(&self, op: BinaryOp, b: &Self) -> Result<Self> {
        Ok(self.binary_report(op, b)?.0)
    }

    /// Like [`binary`](Self::binary) and also returns the smallest absolute
    /// divisor seen (`+inf` for operators other than `Div`).
    pub fn binary_report(&self, op: BinaryOp, b: &Self) -> Result<(Self, f64)> {
        let bidx = BroadcastIndex::new("elementwise", &self.shape, &b.shape)?;
        let ad = self.data();
        let bd = b.data();
        let f = |x: T, y: T| match op {
            BinaryOp::Add => x + y,
            BinaryOp::Sub => x - y,
            BinaryOp::Mul => x * y,
            BinaryOp::Div => x / y,
        };
        if op == BinaryOp::Div {
            let min_abs = bd.iter().fold(f64::INFINITY, |m, y| m.min(y.abs().to_f64_lossy()));
            if min_abs == 0.0 {
                return Err(Error::DivideByZero { min_abs_divisor: 0.0 });
            }
            let out = bidx.zip_map(ad, bd, f);
            return Ok((Self::from_parts(self.shape.clone(), out), min_abs));
        }
        let out = bidx.zip_map(ad, bd, f);
        Ok((Self::from_parts(self.shape.clone(), out), f64::INFINITY))
    }

    pub fn add(&self, b: &Self) -> Result<Self> {
        self.binary(BinaryOp::Add, b)
    }

    pub fn sub(&self, b: &Self) -> Result<Self> {
        self.binary(BinaryOp::Sub, b)
    }

    pub fn mul(&self, b: &Self) -> Result<Self> {
        self.binary(BinaryOp::Mul, b)
    }

    pub fn div(&self, b: &Self) -> Result<Self> {
        self.binary(BinaryOp::Div, b)
    }

    /// Sums `self` down to `target` shape, undoing a broadcast of `target` into `self`.
    pub fn sum_to_shape(&self, target: &[usize]) -> Result<Self> {
        if target == self.shape.as_slice() {
            return Ok(self.clone());
        }
        let bidx = BroadcastIndex::new("sum_to_shape", &self.shape, target)?;
        let mut out = vec![T::zero(); target.iter().product()];
        bidx.for_each(|i, j| out[j] = out[j] + self.data()[i]);
        Ok(Self::from_parts(target.to_vec(), out))
    }

    // ---- reductions --------------------------------------------------

    pub fn reduce(&self, op: ReduceOp, axis: usize, keepdim: bool) -> Result<Self> {
        let rank = self.rank();
        if axis >= rank {
            return Err(Error::AxisOutOfRange { op: "reduce", axis, rank });
        }
        let (outer, len, inner) = split_axis(&self.shape, axis);
        let d = self.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            let base = o * len * inner;
            let dst = &mut out[o * inner..(o + 1) * inner];
            match op {
                ReduceOp::Sum | ReduceOp::Mean => {
                    for k in 0..len {
                        let src = &d[base + k * inner..base + (k + 1) * inner];
                        for (acc, &x) in dst.iter_mut().zip(src) {
                            *acc = *acc + x;
                        }
                    }
                    if op == ReduceOp::Mean {
                        let n = T::from_usize(len).unwrap();
                        dst.iter_mut().for_each(|x| *x = *x / n);
                    }
                }
                ReduceOp::Max => {
                    dst.copy_from_slice(&d[base..base + inner]);
                    for k in 1..len {
                        let src = &d[base + k * inner..base + (k + 1) * inner];
                        for (acc, &x) in dst.iter_mut().zip(src) {
                            if x > *acc {
                                *acc = x;
                            }
                        }
                    }
                }
            }
        }
        Ok(Self::from_parts(reduced_shape(&self.shape, axis, keepdim), out))
    }

    pub fn sum(&self, axis: usize) -> Result<Self> {
        self.reduce(ReduceOp::Sum, axis, false)
    }

    pub fn mean(&self, axis: usize) -> Result<Self> {
        self.reduce(ReduceOp::Mean, axis, false)
    }

    pub fn max(&self, axis: usize) -> Result<Self> {
        self.reduce(ReduceOp::Max, axis, false)
    }

    pub fn sum_all(&self) -> T {
        self.data().iter().copied().sum()
    }

    /// Inverse of a reduction over `axis`: copies each reduced value along the axis.
    pub(crate) fn expand_axis(&self, full_shape: &[usize], axis: usize) -> Self {
        let (outer, len, inner) = split_axis(full_shape, axis);
        let d = self.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            for _ in 0..len {
                out.extend_from_slice(&d[o * inner..(o + 1) * inner]);
            }
        }
        Self::from_parts(full_shape.to_vec(), out)
    }

    // ---- layout ------------------------------------------------------

    /// Reinterprets the buffer with a new shape. Never copies.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n = check_shape("reshape", shape)?;
        if n != self.numel() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            buf: Arc::clone(&self.buf),
        })
    }

    /// General axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::invalid_shape(
                "permute",
                &self.shape,
                format!("invalid permutation {perm:?}"),
            ));
        }
        if perm.iter().enumerate().all(|(i, &p)| i == p) {
            return Ok(self.clone());
        }
        let in_strides = strides(&self.shape);
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let d = self.data();
        let n = self.numel();
        let mut out = Vec::with_capacity(n);
        // innermost axis handled as a strided run
        let last = rank - 1;
        let run = out_shape[last];
        let run_stride = src_strides[last];
        let mut idx = vec![0usize; rank];
        let mut base = 0usize;
        while out.len() < n {
            out.extend((0..run).map(|k| d[base + k * run_stride]));
            // advance the outer multi-index
            let mut ax = last;
            while ax > 0 {
                ax -= 1;
                idx[ax] += 1;
                base += src_strides[ax];
                if idx[ax] < out_shape[ax] {
                    break;
                }
                base -= src_strides[ax] * idx[ax];
                idx[ax] = 0;
            }
        }
        Ok(Self::from_parts(out_shape, out))
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Self> {
        let rank = self.rank();
        if rank < 2 {
            return Err(Error::invalid_shape("transpose", &self.shape, "rank must be at least 2"));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(&perm)
    }

    /// Row gather over the last axis: output row `r` is input row `rows[r]`
    /// (rows are `[.., C]` slices). `out_shape` must end in the same `C`.
    pub fn gather_rows(&self, rows: &[usize], out_shape: &[usize]) -> Result<Self> {
        let c = self.last_dim();
        let n = check_shape("gather_rows", out_shape)?;
        if *out_shape.last().unwrap() != c || n != rows.len() * c {
            return Err(Error::shape("gather_rows", &self.shape, out_shape));
        }
        let nrows = self.rows();
        let d = self.data();
        let mut out = Vec::with_capacity(n);
        for &r in rows {
            if r >= nrows {
                return Err(Error::invalid_shape(
                    "gather_rows",
                    &self.shape,
                    format!("row index {r} out of range"),
                ));
            }
            out.extend_from_slice(&d[r * c..(r + 1) * c]);
        }
        Ok(Self::from_parts(out_shape.to_vec(), out))
    }

    /// Adjoint of [`gather_rows`](Self::gather_rows): accumulates rows of
    /// `self` into a zero tensor of `target` shape.
    pub fn scatter_add_rows(&self, rows: &[usize], target: &[usize]) -> Result<Self> {
        let c = self.last_dim();
        let mut out = vec![T::zero(); check_shape("scatter_add_rows", target)?];
        let d = self.data();
        for (i, &r) in rows.iter().enumerate() {
            let dst = &mut out[r * c..(r + 1) * c];
            for (o, &x) in dst.iter_mut().zip(&d[i * c..(i + 1) * c]) {
                *o = *o + x;
            }
        }
        Ok(Self::from_parts(target.to_vec(), out))
    }

    /// Concatenates along the last axis; leading extents must agree.
    pub fn concat_last(&self, other: &Self) -> Result<Self> {
        let r = self.rank();
        if r != other.rank() || self.shape[..r - 1] != other.shape[..r - 1] {
            return Err(Error::shape("concat_last", &self.shape, &other.shape));
        }
        let (ca, cb) = (self.last_dim(), other.last_dim());
        let mut out = Vec::with_capacity(self.numel() + other.numel());
        for (ra, rb) in self.data().chunks_exact(ca).zip(other.data().chunks_exact(cb)) {
            out.extend_from_slice(ra);
            out.extend_from_slice(rb);
        }
        let mut shape = self.shape.clone();
        shape[r - 1] = ca + cb;
        Ok(Self::from_parts(shape, out))
    }

    /// Columns `start..start + len` of the last axis.
    pub fn slice_last(&self, start: usize, len: usize) -> Result<Self> {
        let c = self.last_dim();
        if len == 0 || start + len > c {
            return Err(Error::invalid_shape(
                "slice_last",
                &self.shape,
                format!("range {start}..{} out of bounds", start + len),
            ));
        }
        let mut out = Vec::with_capacity(self.rows() * len);
        for row in self.data().chunks_exact(c) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let mut shape = self.shape.clone();
        *shape.last_mut().unwrap() = len;
        Ok(Self::from_parts(shape, out))
    }

    // ---- linear algebra ----------------------------------------------

    /// Batched matrix product of the last two axes, with optional transposes:
    /// `op(a) · op(b)`. Leading (batch) extents must match exactly.
    pub fn matmul_t(&self, b: &Self, trans_a: bool, trans_b: bool) -> Result<Self> {
        let (ra, rb) = (self.rank(), b.rank());
        if ra < 2 || rb < 2 || self.shape[..ra - 2] != b.shape[..rb - 2] {
            return Err(Error::shape("matmul", &self.shape, &b.shape));
        }
        let (ar, ac) = (self.shape[ra - 2], self.shape[ra - 1]);
        let (br, bc) = (b.shape[rb - 2], b.shape[rb - 1]);
        let (m, k) = if trans_a { (ac, ar) } else { (ar, ac) };
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(Error::shape("matmul", &self.shape, &b.shape));
        }
        let batch: usize = self.shape[..ra - 2].iter().product();
        let mut out = vec![T::zero(); batch * m * n];
        let (ad, bd) = (self.data(), b.data());
        for bi in 0..batch {
            let a = &ad[bi * ar * ac..(bi + 1) * ar * ac];
            let bm = &bd[bi * br * bc..(bi + 1) * br * bc];
            let o = &mut out[bi * m * n..(bi + 1) * m * n];
            gemm(a, bm, o, m, k, n, trans_a, trans_b);
        }
        let mut shape = self.shape[..ra - 2].to_vec();
        shape.extend_from_slice(&[m, n]);
        Ok(Self::from_parts(shape, out))
    }

    pub fn matmul(&self, b: &Self) -> Result<Self> {
        self.matmul_t(b, false, false)
    }

    /// Row-wise Kronecker square: `[.., d] -> [.., d*d]`, row `i` becoming
    /// the row-major flattening of `x_i ⊗ x_i`.
    pub fn row_kron(&self) -> Self {
        let d = self.last_dim();
        let mut out = Vec::with_capacity(self.numel() * d);
        for row in self.data().chunks_exact(d) {
            for &xa in row {
                out.extend(row.iter().map(|&xb| xa * xb));
            }
        }
        let mut shape = self.shape.clone();
        *shape.last_mut().unwrap() = d * d;
        Self::from_parts(shape, out)
    }

    // ---- image ops ---------------------------------------------------

    /// 3x3 convolution, stride 1, zero padding 1, NHWC layout,
    /// weights `[3, 3, Cin, Cout]`, optional bias `[Cout]`.
    pub fn conv2d_3x3(&self, w: &Self, bias: Option<&Self>) -> Result<Self> {
        let (b, h, wd, cin) = dims4("conv2d_3x3", &self.shape)?;
        let (kh, kw, wcin, cout) = dims4("conv2d_3x3", &w.shape)?;
        if kh != 3 || kw != 3 || wcin != cin {
            return Err(Error::shape("conv2d_3x3", &self.shape, &w.shape));
        }
        if let Some(bs) = bias {
            if bs.shape != [cout] {
                return Err(Error::shape("conv2d_3x3", &w.shape, &bs.shape));
            }
        }
        let x = self.data();
        let wt = w.data();
        let mut out = vec![T::zero(); b * h * wd * cout];
        for bi in 0..b {
            for y in 0..h {
                for xx in 0..wd {
                    let o = &mut out[((bi * h + y) * wd + xx) * cout..][..cout];
                    if let Some(bs) = bias {
                        o.copy_from_slice(bs.data());
                    }
                    for ky in 0..3 {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let sx = xx as isize + kx as isize - 1;
                            if sx < 0 || sx >= wd as isize {
                                continue;
                            }
                            let src = &x[((bi * h + sy as usize) * wd + sx as usize) * cin..][..cin];
                            let wk = &wt[(ky * 3 + kx) * cin * cout..][..cin * cout];
                            for (ci, &xv) in src.iter().enumerate() {
                                axpy(xv, &wk[ci * cout..(ci + 1) * cout], o);
                            }
                        }
                    }
                }
            }
        }
        Ok(Self::from_parts(vec![b, h, wd, cout], out))
    }

    /// Gradients of [`conv2d_3x3`](Self::conv2d_3x3) given upstream `g`:
    /// returns `(d_input, d_weight, d_bias)`.
    pub(crate) fn conv2d_3x3_backward(&self, w: &Self, g: &Self) -> (Self, Self, Self) {
        let (b, h, wd, cin) = (self.shape[0], self.shape[1], self.shape[2], self.shape[3]);
        let cout = w.shape[3];
        let x = self.data();
        let wt = w.data();
        let gd = g.data();
        let mut dx = vec![T::zero(); self.numel()];
        let mut dw = vec![T::zero(); w.numel()];
        let mut db = vec![T::zero(); cout];
        for bi in 0..b {
            for y in 0..h {
                for xx in 0..wd {
                    let go = &gd[((bi * h + y) * wd + xx) * cout..][..cout];
                    for (acc, &v) in db.iter_mut().zip(go) {
                        *acc = *acc + v;
                    }
                    for ky in 0..3 {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let sx = xx as isize + kx as isize - 1;
                            if sx < 0 || sx >= wd as isize {
                                continue;
                            }
                            let off = ((bi * h + sy as usize) * wd + sx as usize) * cin;
                            let kbase = (ky * 3 + kx) * cin * cout;
                            for ci in 0..cin {
                                let wrow = &wt[kbase + ci * cout..][..cout];
                                dx[off + ci] = dx[off + ci] + dot(wrow, go);
                                axpy(x[off + ci], go, &mut dw[kbase + ci * cout..][..cout]);
                            }
                        }
                    }
                }
            }
        }
        (
            Self::from_parts(self.shape.clone(), dx),
            Self::from_parts(w.shape.clone(), dw),
            Self::from_parts(vec![cout], db),
        )
    }

    /// Sub-pixel rearrangement `[B, H, W, C*s*s] -> [B, H*s, W*s, C]`.
    /// Channel `c*s*s + i*s + j` lands at output pixel `(y*s + i, x*s + j)`.
    pub fn pixel_shuffle(&self, s: usize) -> Result<Self> {
        let (b, h, w, cs) = dims4("pixel_shuffle", &self.shape)?;
        if s == 0 || cs % (s * s) != 0 {
            return Err(Error::invalid_shape(
                "pixel_shuffle",
                &self.shape,
                format!("channels not divisible by {s}^2"),
            ));
        }
        let c = cs / (s * s);
        self.reshape(&[b, h, w, c, s, s])?
            .permute(&[0, 1, 4, 2, 5, 3])?
            .reshape(&[b, h * s, w * s, c])
    }

    /// Inverse of [`pixel_shuffle`](Self::pixel_shuffle).
    pub fn pixel_unshuffle(&self, s: usize) -> Result<Self> {
        let (b, hs, ws, c) = dims4("pixel_unshuffle", &self.shape)?;
        if s == 0 || hs % s != 0 || ws % s != 0 {
            return Err(Error::invalid_shape(
                "pixel_unshuffle",
                &self.shape,
                format!("spatial extents not divisible by {s}"),
            ));
        }
        let (h, w) = (hs / s, ws / s);
        self.reshape(&[b, h, s, w, s, c])?
            .permute(&[0, 1, 3, 5, 2, 4])?
            .reshape(&[b, h, w, c * s * s])
    }

    // ---- normalization / activation ----------------------------------

    /// Layer normalization over the last axis. Returns the output and the
    /// per-row reciprocal standard deviations (needed by the backward pass).
    pub(crate) fn layer_norm_parts(&self, gamma: &Self, beta: &Self, eps: f64) -> Result<(Self, Self, Self)> {
        let c = self.last_dim();
        if gamma.shape != [c] || beta.shape != [c] {
            return Err(Error::shape("layer_norm", &self.shape, &gamma.shape));
        }
        if !(eps > 0.0) {
            return Err(Error::InvalidArgument(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let eps = T::lit(eps);
        let n = T::from_usize(c).unwrap();
        let mut xhat = Vec::with_capacity(self.numel());
        let mut rstd = Vec::with_capacity(self.rows());
        for row in self.data().chunks_exact(c) {
            let mu = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&x| (x - mu) * (x - mu)).sum::<T>() / n;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            xhat.extend(row.iter().map(|&x| (x - mu) * r));
        }
        let y: Vec<T> = xhat
            .chunks_exact(c)
            .flat_map(|row| {
                row.iter()
                    .zip(gamma.data().iter().zip(beta.data()))
                    .map(|(&xh, (&g, &bb))| xh * g + bb)
            })
            .collect();
        let mut rshape = self.shape.clone();
        *rshape.last_mut().unwrap() = 1;
        Ok((
            Self::from_parts(self.shape.clone(), y),
            Self::from_parts(self.shape.clone(), xhat),
            Self::from_parts(rshape, rstd),
        ))
    }

    pub fn layer_norm(&self, gamma: &Self, beta: &Self, eps: f64) -> Result<Self> {
        Ok(self.layer_norm_parts(gamma, beta, eps)?.0)
    }

    /// GELU, tanh approximation: `0.5 x (1 + tanh(0.7978845608 (x + 0.044715 x^3)))`.
    pub fn gelu(&self) -> Self {
        let k = T::lit(GELU_SQRT_2_OVER_PI);
        let c = T::lit(GELU_CUBIC);
        let h = T::half();
        self.map(|x| h * x * (T::one() + (k * (x + c * x * x * x)).tanh()))
    }

    pub(crate) fn gelu_grad(&self) -> Self {
        let k = T::lit(GELU_SQRT_2_OVER_PI);
        let c = T::lit(GELU_CUBIC);
        let three = T::lit(3.0);
        let h = T::half();
        self.map(|x| {
            let t = (k * (x + c * x * x * x)).tanh();
            h * (T::one() + t) + h * x * (T::one() - t * t) * k * (T::one() + three * c * x * x)
        })
    }
}

pub(crate) fn dims4(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [a, b, c, d] => Ok((a, b, c, d)),
        _ => Err(Error::invalid_shape(op, shape, "expected rank 4")),
    }
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn reduced_shape(shape: &[usize], axis: usize, keepdim: bool) -> Vec<usize> {
    let mut s = shape.to_vec();
    if keepdim || s.len() == 1 {
        s[axis] = 1;
    } else {
        s.remove(axis);
    }
    s
}

#[inline]
fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * xi;
    }
}

#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

#[allow(clippy::too_many_arguments)]
fn gemm<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize, ta: bool, tb: bool) {
    match (ta, tb) {
        // a: [m,k], b: [k,n]
        (false, false) => {
            for i in 0..m {
                let o = &mut out[i * n..(i + 1) * n];
                for p in 0..k {
                    axpy(a[i * k + p], &b[p * n..(p + 1) * n], o);
                }
            }
        }
        // a: [m,k], b: [n,k]
        (false, true) => {
            for i in 0..m {
                let ar = &a[i * k..(i + 1) * k];
                for j in 0..n {
                    out[i * n + j] = dot(ar, &b[j * k..(j + 1) * k]);
                }
            }
        }
        // a: [k,m], b: [k,n]
        (true, false) => {
            for p in 0..k {
                let br = &b[p * n..(p + 1) * n];
                for i in 0..m {
                    axpy(a[p * m + i], br, &mut out[i * n..(i + 1) * n]);
                }
            }
        }
        // a: [k,m], b: [n,k]
        (true, true) => {
            for i in 0..m {
                for j in 0..n {
                    let mut acc = T::zero();
                    for p in 0..k {
                        acc = acc + a[p * m + i] * b[j * k + p];
                    }
                    out[i * n + j] = acc;
                }
            }
        }
    }
}

/// Index mapping for `b` broadcast into `a`'s shape.
struct BroadcastIndex {
    shape: Vec<usize>,
    b_strides: Vec<usize>,
    kind: BroadcastKind,
}

enum BroadcastKind {
    Same,
    /// `b` repeats with period equal to its length (suffix broadcast).
    Cyclic(usize),
    /// Each element of `b` covers a run of this many elements of `a`
    /// (prefix broadcast, e.g. `[N, N]` by `[N, 1]`).
    Repeat(usize),
    General,
}

impl BroadcastIndex {
    fn new(op: &'static str, a: &[usize], b: &[usize]) -> Result<Self> {
        if a == b {
            return Ok(Self { shape: a.to_vec(), b_strides: vec![], kind: BroadcastKind::Same });
        }
        if b.len() > a.len() {
            return Err(Error::shape(op, a, b));
        }
        let pad = a.len() - b.len();
        let bfull: Vec<usize> = std::iter::repeat_n(1, pad).chain(b.iter().copied()).collect();
        for (&ae, &be) in a.iter().zip(&bfull) {
            if be != ae && be != 1 {
                return Err(Error::shape(op, a, b));
            }
        }
        let bs = strides(&bfull);
        let b_strides: Vec<usize> = bfull
            .iter()
            .zip(&bs)
            .map(|(&e, &s)| if e == 1 { 0 } else { s })
            .collect();
        // Cyclic when b's non-unit extents form a contiguous suffix matching a.
        let first_full = bfull.iter().position(|&e| e != 1).unwrap_or(bfull.len());
        let last_full = bfull.iter().rposition(|&e| e != 1).map_or(0, |p| p + 1);
        let kind = if bfull[first_full..] == a[first_full..] {
            BroadcastKind::Cyclic(b.iter().product())
        } else if bfull[..last_full] == a[..last_full] {
            BroadcastKind::Repeat(a[last_full..].iter().product())
        } else {
            BroadcastKind::General
        };
        Ok(Self { shape: a.to_vec(), b_strides, kind })
    }

    fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        let n: usize = self.shape.iter().product();
        match self.kind {
            BroadcastKind::Same => (0..n).for_each(|i| f(i, i)),
            BroadcastKind::Cyclic(p) => (0..n).for_each(|i| f(i, i % p)),
            BroadcastKind::Repeat(q) => (0..n).for_each(|i| f(i, i / q)),
            BroadcastKind::General => {
                let rank = self.shape.len();
                let mut idx = vec![0usize; rank];
                let mut j = 0usize;
                for i in 0..n {
                    f(i, j);
                    for ax in (0..rank).rev() {
                        idx[ax] += 1;
                        j += self.b_strides[ax];
                        if idx[ax] < self.shape[ax] {
                            break;
                        }
                        j -= self.b_strides[ax] * idx[ax];
                        idx[ax] = 0;
                    }
                }
            }
        }
    }

    fn zip_map<T: Real>(&self, a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
        match self.kind {
            BroadcastKind::Same => a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect(),
            BroadcastKind::Cyclic(p) => {
                let mut out = Vec::with_capacity(a.len());
                for chunk in a.chunks_exact(p) {
                    out.extend(chunk.iter().zip(b).map(|(&x, &y)| f(x, y)));
                }
                out
            }
            BroadcastKind::Repeat(q) => {
                let mut out = Vec::with_capacity(a.len());
                for (chunk, &y) in a.chunks_exact(q).zip(b) {
                    out.extend(chunk.iter().map(|&x| f(x, y)));
                }
                out
            }
            BroadcastKind::General => {
                let mut out = Vec::with_capacity(a.len());
                self.for_each(|i, j| out.push(f(a[i], b[j])));
                out
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn prefix_and_suffix_broadcasts_match_index_arithmetic() {
        let a = Tensor::<f64>::from_fn(&[2, 3, 4], |i| i as f64 + 1.0).unwrap();
        for bshape in [[2usize, 3, 1], [2, 1, 1], [1, 3, 4], [1, 1, 4], [2, 1, 4]] {
            let b = Tensor::<f64>::from_fn(&bshape, |i| 0.5 + i as f64).unwrap();
            let got = a.div(&b).unwrap();
            for i in 0..2 {
                for j in 0..3 {
                    for k in 0..4 {
                        let bi = [i, j, k].iter().zip(&bshape).fold(0, |acc, (&x, &e)| acc * e + if e == 1 { 0 } else { x });
                        let want = a.data()[(i * 3 + j) * 4 + k] / b.data()[bi];
                        assert_eq!(got.data()[(i * 3 + j) * 4 + k], want, "{bshape:?}");
                    }
                }
            }
        }
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::<f64>::from_vec(&[2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::<f64>::zeros(&[]).is_err());
        assert!(Tensor::<f64>::zeros(&[2, 0]).is_err());
    }

    #[test]
    fn matmul_examples() {
        let a = t(&[2, 2], &[1., 2., 3., 4.]);
        assert_eq!(Tensor::eye(2).unwrap().matmul(&a).unwrap(), a);
        let r = t(&[1, 2], &[1., 2.]).matmul(&t(&[2, 1], &[3., 4.])).unwrap();
        assert_eq!(r.data(), &[11.0]);
        let z = Tensor::<f64>::zeros(&[3, 4]).unwrap();
        let any = Tensor::from_fn(&[4, 2], |i| i as f64 - 3.5).unwrap();
        assert_eq!(z.matmul(&any).unwrap(), Tensor::zeros(&[3, 2]).unwrap());
    }

    #[test]
    fn matmul_reports_both_shapes() {
        let err = t(&[2, 3], &[0.; 6]).matmul(&t(&[2, 3], &[0.; 6])).unwrap_err();
        assert_eq!(err, Error::shape("matmul", &[2, 3], &[2, 3]));
    }

    #[test]
    fn matmul_transpose_flags_agree() {
        let a = Tensor::from_fn(&[2, 3, 4], |i| (i as f64 * 0.37).sin()).unwrap();
        let b = Tensor::from_fn(&[2, 4, 5], |i| (i as f64 * 0.11).cos()).unwrap();
        let want = a.matmul(&b).unwrap();
        let at = a.transpose().unwrap();
        let bt = b.transpose().unwrap();
        for (x, ta, y, tb) in [(&at, true, &b, false), (&a, false, &bt, true), (&at, true, &bt, true)] {
            let got = x.matmul_t(y, ta, tb).unwrap();
            assert!(got.max_abs_diff(&want).unwrap() < 1e-14);
        }
    }

    #[test]
    fn elementwise_examples() {
        assert_eq!(t(&[1, 2], &[2., -3.]).square().data(), &[4., 9.]);
        assert_eq!(t(&[1, 2], &[6., 8.]).div(&t(&[1, 2], &[2., 4.])).unwrap().data(), &[3., 2.]);
        assert_eq!(t(&[1, 2], &[0., 1.]).add_scalar(1.0).data(), &[1., 2.]);
    }

    #[test]
    fn div_reports_min_divisor_and_zero() {
        let (_, m) = t(&[3], &[1., 2., 3.])
            .binary_report(BinaryOp::Div, &t(&[3], &[-0.5, 4., 2.]))
            .unwrap();
        assert_eq!(m, 0.5);
        let err = t(&[2], &[1., 1.]).div(&t(&[2], &[1., 0.])).unwrap_err();
        assert!(matches!(err, Error::DivideByZero { .. }));
    }

    #[test]
    fn broadcasting() {
        let a = t(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
        // bias-style suffix
        let r = a.add(&t(&[3], &[10., 20., 30.])).unwrap();
        assert_eq!(r.data(), &[11., 22., 33., 14., 25., 36.]);
        // column-style
        let r = a.div(&t(&[2, 1], &[1., 2.])).unwrap();
        assert_eq!(r.data(), &[1., 2., 3., 2., 2.5, 3.]);
        assert!(a.add(&t(&[2], &[1., 1.])).is_err());
        let back = a.sum_to_shape(&[2, 1]).unwrap();
        assert_eq!(back.data(), &[6., 15.]);
        let back = a.sum_to_shape(&[3]).unwrap();
        assert_eq!(back.data(), &[5., 7., 9.]);
    }

    #[test]
    fn reduce_examples() {
        let a = t(&[2, 2], &[1., 2., 3., 4.]);
        assert_eq!(a.sum(1).unwrap().data(), &[3., 7.]);
        assert_eq!(a.sum(1).unwrap().shape(), &[2]);
        assert_eq!(a.reduce(ReduceOp::Sum, 1, true).unwrap().shape(), &[2, 1]);
        assert_eq!(t(&[1, 2], &[2., 4.]).mean(1).unwrap().data(), &[3.]);
        assert_eq!(t(&[1, 3], &[-1., 5., 2.]).max(1).unwrap().data(), &[5.]);
        assert!(matches!(a.sum(2), Err(Error::AxisOutOfRange { .. })));
        assert_eq!(a.sum(0).unwrap().data(), &[4., 6.]);
    }

    #[test]
    fn reshape_and_transpose() {
        let a = t(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
        let back = a.reshape(&[3, 2]).unwrap().reshape(&[2, 3]).unwrap();
        assert_eq!(back, a);
        assert!(a.reshape(&[4, 2]).is_err());
        let tr = t(&[2, 2], &[1., 2., 3., 4.]).transpose().unwrap();
        assert_eq!(tr.data(), &[1., 3., 2., 4.]);
        let sq = t(&[1, 4], &[1., 2., 3., 4.]).reshape(&[2, 2]).unwrap();
        assert_eq!(sq.data(), &[1., 2., 3., 4.]);
        assert!(a.permute(&[0, 0]).is_err());
    }

    #[test]
    fn permute_matches_naive_indexing() {
        let shape = [2, 3, 4, 5];
        let a = Tensor::from_fn(&shape, |i| i as f64).unwrap();
        let perm = [2, 0, 3, 1];
        let p = a.permute(&perm).unwrap();
        assert_eq!(p.shape(), &[4, 2, 5, 3]);
        let s = strides(&shape);
        let ps = strides(p.shape());
        for i0 in 0..4 {
            for i1 in 0..2 {
                for i2 in 0..5 {
                    for i3 in 0..3 {
                        let out_idx = [i0, i1, i2, i3];
                        let mut src = [0; 4];
                        for (k, &pk) in perm.iter().enumerate() {
                            src[pk] = out_idx[k];
                        }
                        let si: usize = src.iter().zip(&s).map(|(a, b)| a * b).sum();
                        let oi: usize = out_idx.iter().zip(&ps).map(|(a, b)| a * b).sum();
                        assert_eq!(p.data()[oi], a.data()[si]);
                    }
                }
            }
        }
    }

    #[test]
    fn conv_examples() {
        let x = Tensor::from_fn(&[1, 4, 5, 2], |i| (i as f64 * 0.3).sin()).unwrap();
        let mut w = vec![0.0; 9 * 4];
        // identity: center tap, ci == co
        w[4 * 4] = 1.0;
        w[4 * 4 + 3] = 1.0;
        let w = t(&[3, 3, 2, 2], &w);
        assert_eq!(x.conv2d_3x3(&w, None).unwrap(), x);

        let c = Tensor::<f64>::full(&[1, 5, 5, 2], 0.7).unwrap();
        let ones = Tensor::ones(&[3, 3, 2, 1]).unwrap();
        let y = c.conv2d_3x3(&ones, None).unwrap();
        // interior: 9 taps x 2 channels
        assert!((y.data()[2 * 5 + 2] - 9.0 * 0.7 * 2.0).abs() < 1e-12);
        // corner sees only 4 taps
        assert!((y.data()[0] - 4.0 * 0.7 * 2.0).abs() < 1e-12);

        let zero = Tensor::zeros(&[3, 3, 2, 3]).unwrap();
        let bias = t(&[3], &[0.5, -1., 2.]);
        let y = x.conv2d_3x3(&zero, Some(&bias)).unwrap();
        assert!(y.data().chunks(3).all(|p| p == [0.5, -1., 2.]));

        let wrong = Tensor::zeros(&[3, 3, 3, 1]).unwrap();
        assert!(x.conv2d_3x3(&wrong, None).is_err());
    }

    #[test]
    fn pixel_shuffle_examples() {
        let x = Tensor::from_fn(&[1, 2, 3, 4], |i| i as f64).unwrap();
        assert_eq!(x.pixel_shuffle(1).unwrap(), x);
        let y = t(&[1, 1, 1, 4], &[1., 2., 3., 4.]).pixel_shuffle(2).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2, 1]);
        assert_eq!(y.data(), &[1., 2., 3., 4.]);
        let z = Tensor::from_fn(&[2, 3, 2, 18], |i| i as f64).unwrap();
        assert_eq!(z.pixel_shuffle(3).unwrap().pixel_unshuffle(3).unwrap(), z);
        assert!(x.pixel_shuffle(3).is_err());
    }

    #[test]
    fn layer_norm_and_gelu() {
        let x = t(&[2, 4], &[3., 3., 3., 3., 1., 2., 3., 4.]);
        let g = Tensor::ones(&[4]).unwrap();
        let b = Tensor::zeros(&[4]).unwrap();
        let y = x.layer_norm(&g, &b, 1e-5).unwrap();
        assert!(y.data()[..4].iter().all(|&v| v == 0.0));
        let row = &y.data()[4..];
        let mean: f64 = row.iter().sum::<f64>() / 4.0;
        let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-4);
        assert!(x.layer_norm(&g, &b, 0.0).is_err());

        let gx = t(&[3], &[0., 10., -10.]).gelu();
        assert_eq!(gx.data()[0], 0.0);
        assert!((gx.data()[1] - 10.0).abs() < 1e-6);
        assert!(gx.data()[2].abs() < 1e-6);
    }

    #[test]
    fn row_kron_examples() {
        assert_eq!(t(&[1, 2], &[1., 0.]).row_kron().data(), &[1., 0., 0., 0.]);
        assert_eq!(t(&[1, 2], &[1., 2.]).row_kron().data(), &[1., 2., 2., 4.]);
        let q = t(&[1, 2], &[1., 2.]).row_kron();
        let k = t(&[1, 2], &[3., 4.]).row_kron();
        let d: f64 = q.data().iter().zip(k.data()).map(|(a, b)| a * b).sum();
        assert_eq!(d, 121.0);
    }

    #[test]
    fn gather_scatter_rows() {
        let x = Tensor::from_fn(&[3, 2], |i| i as f64).unwrap();
        let g = x.gather_rows(&[2, 0, 2], &[3, 2]).unwrap();
        assert_eq!(g.data(), &[4., 5., 0., 1., 4., 5.]);
        let s = g.scatter_add_rows(&[2, 0, 2], &[3, 2]).unwrap();
        assert_eq!(s.data(), &[0., 1., 0., 0., 8., 10.]);
        assert!(x.gather_rows(&[3], &[1, 2]).is_err());
    }

    #[test]
    fn concat_and_slice() {
        let a = t(&[2, 2], &[1., 2., 3., 4.]);
        let b = t(&[2, 1], &[9., 8.]);
        let c = a.concat_last(&b).unwrap();
        assert_eq!(c.data(), &[1., 2., 9., 3., 4., 8.]);
        assert_eq!(c.slice_last(0, 2).unwrap(), a);
        assert_eq!(c.slice_last(2, 1).unwrap(), b);
        assert!(c.slice_last(2, 2).is_err());
    }
}
