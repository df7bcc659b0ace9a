//! Softmax attention and the two TaylorShift evaluation orders.
//!
//! All functions take `[.., N, d]` operands (any number of leading batch
//! axes, shared by Q, K and V) and are composed from the differentiable
//! primitives in [`numerics`](crate::numerics), so they work unchanged on
//! constants and on tape-recorded values.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tensor, Var};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Softmax,
    DirectTaylor,
    EfficientTaylor,
    /// Resolved per call by [`select_variant`].
    Auto,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Softmax => "softmax",
            Variant::DirectTaylor => "direct",
            Variant::EfficientTaylor => "efficient",
            Variant::Auto => "auto",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(Variant::Softmax),
            "direct" | "direct_taylor" => Ok(Variant::DirectTaylor),
            "efficient" | "efficient_taylor" => Ok(Variant::EfficientTaylor),
            "auto" => Ok(Variant::Auto),
            other => Err(Error::InvalidArgument(format!("unknown attention variant `{other}`"))),
        }
    }
}

/// Multiplier applied to `QK^T` before normalization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreScale {
    /// `d_head^(-1/2)`.
    InvSqrtHeadDim,
    Fixed(f64),
}

impl ScoreScale {
    pub fn resolve(self, d_head: usize) -> f64 {
        match self {
            ScoreScale::InvSqrtHeadDim => 1.0 / (d_head as f64).sqrt(),
            ScoreScale::Fixed(s) => s,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttentionSpec {
    pub variant: Variant,
    pub heads: usize,
    pub score_scale: ScoreScale,
    /// `c` in the `N > c * d_head^2` rule used by [`Variant::Auto`].
    pub auto_threshold_c: f64,
}

impl Default for AttentionSpec {
    fn default() -> Self {
        AttentionSpec {
            variant: Variant::Auto,
            heads: 1,
            score_scale: ScoreScale::InvSqrtHeadDim,
            auto_threshold_c: 1.0,
        }
    }
}

impl AttentionSpec {
    pub fn new(variant: Variant, heads: usize) -> Self {
        AttentionSpec { variant, heads, ..Default::default() }
    }

    pub fn validate(&self, embed_dim: usize) -> Result<()> {
        if self.heads == 0 || !embed_dim.is_multiple_of(self.heads) {
            return Err(Error::InvalidArgument(format!(
                "embed dimension {embed_dim} is not divisible by {} heads",
                self.heads
            )));
        }
        if let ScoreScale::Fixed(s) = self.score_scale {
            if !(s > 0.0) || !s.is_finite() {
                return Err(Error::InvalidArgument(format!("score scale must be > 0, got {s}")));
            }
        }
        if !(self.auto_threshold_c > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "auto threshold must be > 0, got {}",
                self.auto_threshold_c
            )));
        }
        Ok(())
    }
}

/// Picks the TaylorShift evaluation order: efficient iff `n > c * d_head^2`.
/// Equality resolves to direct.
pub fn select_variant(n: usize, d_head: usize, c: f64) -> Variant {
    if (n as f64) > c * (d_head * d_head) as f64 {
        Variant::EfficientTaylor
    } else {
        Variant::DirectTaylor
    }
}

fn ensure_finite<T: Real>(op: &'static str, xs: &[&Var<T>]) -> Result<()> {
    if xs.iter().all(|x| x.value().is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

/// Checks `[.., Nq, d]`, `[.., Nkv, d]`, `[.., Nkv, dv]` and returns `(d, dv)`.
fn check_qkv<T: Real>(op: &'static str, q: &Var<T>, k: &Var<T>, v: &Var<T>) -> Result<(usize, usize)> {
    let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
    let r = qs.len();
    if r < 2 || ks.len() != r || vs.len() != r {
        return Err(Error::shape(op, qs, ks));
    }
    if qs[r - 1] != ks[r - 1] || qs[..r - 2] != ks[..r - 2] {
        return Err(Error::shape(op, qs, ks));
    }
    if ks[..r - 1] != vs[..r - 1] {
        return Err(Error::shape(op, ks, vs));
    }
    Ok((qs[r - 1], vs[r - 1]))
}

/// `scale * Q K^T`, with the scale applied to `Q` rather than the `N x N` result.
pub fn scores<T: Real>(q: &Var<T>, k: &Var<T>, scale: f64) -> Result<Var<T>> {
    q.scale(scale)?.matmul_t(k, false, true)
}

/// Row-wise softmax over the last axis, shifted by the row maximum.
pub fn softmax<T: Real>(a: &Var<T>) -> Result<Var<T>> {
    let axis = a.shape().len() - 1;
    let m = a.max(axis, true)?;
    let e = a.sub(&m)?.exp()?;
    drop(m);
    let z = e.sum(axis, true)?;
    e.div(&z)
}

pub fn softmax_attention<T: Real>(q: &Var<T>, k: &Var<T>, v: &Var<T>, scale: f64) -> Result<Var<T>> {
    check_qkv("softmax_attention", q, k, v)?;
    ensure_finite("softmax_attention", &[q, k, v])?;
    let a = scores(q, k, scale)?;
    let p = softmax(&a)?;
    drop(a);
    p.matmul(v)
}

/// Taylor softmax: rows of `1 + A + A^2/2`, each normalized to sum to one.
///
/// Evaluated as `(A + 1)^2 + 1`, twice the polynomial; the factor cancels in
/// the normalization and saves two passes over `A`.
pub fn taylor_softmax<T: Real>(a: &Var<T>) -> Result<Var<T>> {
    ensure_finite("taylor_softmax", &[a])?;
    let axis = a.shape().len() - 1;
    let shifted = a.add_scalar(1.0)?;
    let sq = shifted.square()?;
    drop(shifted);
    let num = sq.add_scalar(1.0)?;
    drop(sq);
    let den = num.sum(axis, true)?;
    num.div(&den)
}

/// TaylorShift through the explicit `N x N` score matrix. O(N^2 d).
pub fn direct_taylorshift<T: Real>(q: &Var<T>, k: &Var<T>, v: &Var<T>, scale: f64) -> Result<Var<T>> {
    check_qkv("direct_taylorshift", q, k, v)?;
    ensure_finite("direct_taylorshift", &[q, k, v])?;
    let a = scores(q, k, scale)?;
    let p = taylor_softmax(&a)?;
    drop(a);
    p.matmul(v)
}

/// Row-wise Kronecker square `X ⊠ X`: `[.., N, d] -> [.., N, d^2]`.
pub fn row_kron<T: Real>(x: &Var<T>) -> Result<Var<T>> {
    if x.shape().len() < 2 {
        return Err(Error::invalid_shape("row_kron", x.shape(), "rank must be at least 2"));
    }
    x.row_kron()
}

/// TaylorShift with normalization after mixing: never forms an `N x N` tensor.
///
/// With `V' = [V | 1]` and scaled scores `A = s Q K^T`,
///
/// ```text
/// [1 + A + A⊙A/2] V' = 1 (1^T V') + s Q (K^T V') + (s^2/2) (Q⊠Q) ((K⊠K)^T V')
/// ```
///
/// whose last column is the normalizer. Peak transient storage is
/// `O(N d^2 + d^2 d_v)`.
pub fn efficient_taylorshift<T: Real>(q: &Var<T>, k: &Var<T>, v: &Var<T>, scale: f64) -> Result<Var<T>> {
    let (_, dv) = check_qkv("efficient_taylorshift", q, k, v)?;
    ensure_finite("efficient_taylorshift", &[q, k, v])?;
    let r = v.shape().len();
    let mut ones_shape = v.shape().to_vec();
    ones_shape[r - 1] = 1;
    let ones = Var::constant(Tensor::ones(&ones_shape)?);
    let vp = v.concat_last(&ones)?;
    drop(ones);

    // Quadratic term; K⊠K is released before Q⊠Q is built.
    let kk = row_kron(k)?;
    let kkv_raw = kk.matmul_t(&vp, true, false)?;
    drop(kk);
    let kkv = kkv_raw.scale(0.5 * scale * scale)?;
    drop(kkv_raw);
    let qq = row_kron(q)?;
    let quad = qq.matmul(&kkv)?;
    drop(qq);
    drop(kkv);

    let ktv_raw = k.matmul_t(&vp, true, false)?;
    let ktv = ktv_raw.scale(scale)?;
    drop(ktv_raw);
    let lin = q.matmul(&ktv)?;
    drop(ktv);

    let colsum = vp.sum(r - 2, true)?;
    drop(vp);
    let acc = quad.add(&lin)?;
    drop(quad);
    drop(lin);
    let both = acc.add(&colsum)?;
    drop(acc);

    let nom = both.slice_last(0, dv)?;
    let den = both.slice_last(dv, 1)?;
    drop(both);
    if let Some(bad) = den.value().data().iter().find(|&&x| !(x > T::zero())) {
        return Err(Error::Invariant(format!("normalizer entry {bad} is not positive")));
    }
    nom.div(&den)
}

/// Single-head attention with an already resolved, non-`Auto` variant.
pub fn attend<T: Real>(variant: Variant, q: &Var<T>, k: &Var<T>, v: &Var<T>, scale: f64) -> Result<Var<T>> {
    match variant {
        Variant::Softmax => softmax_attention(q, k, v, scale),
        Variant::DirectTaylor => direct_taylorshift(q, k, v, scale),
        Variant::EfficientTaylor => efficient_taylorshift(q, k, v, scale),
        Variant::Auto => {
            let r = k.shape().len();
            let (n, d) = (k.shape()[r - 2], k.shape()[r - 1]);
            attend(select_variant(n, d, 1.0), q, k, v, scale)
        }
    }
}

/// Splits the last axis into `spec.heads` slices, runs the selected variant
/// per head and concatenates the heads back in order.
pub fn multi_head<T: Real>(q: &Var<T>, k: &Var<T>, v: &Var<T>, spec: &AttentionSpec) -> Result<Var<T>> {
    let (d, dv) = check_qkv("multi_head", q, k, v)?;
    spec.validate(d)?;
    if dv % spec.heads != 0 {
        return Err(Error::InvalidArgument(format!(
            "value dimension {dv} is not divisible by {} heads",
            spec.heads
        )));
    }
    let h = spec.heads;
    let d_head = d / h;
    let r = q.shape().len();
    let n_kv = k.shape()[r - 2];
    let variant = match spec.variant {
        Variant::Auto => select_variant(n_kv, d_head, spec.auto_threshold_c),
        other => other,
    };
    let scale = spec.score_scale.resolve(d_head);
    if h == 1 {
        return attend(variant, q, k, v, scale);
    }

    // [.., N, d] -> [.., h, N, d/h]
    let mut perm: Vec<usize> = (0..=r).collect();
    perm.swap(r - 2, r - 1);
    let split = |x: &Var<T>| -> Result<Var<T>> {
        let mut s = x.shape().to_vec();
        let last = s.pop().unwrap();
        s.extend_from_slice(&[h, last / h]);
        x.reshape(&s)?.permute(&perm)
    };
    let y = attend(variant, &split(q)?, &split(k)?, &split(v)?, scale)?;
    let merged = y.permute(&perm)?;
    let mut out_shape = q.shape().to_vec();
    out_shape[r - 1] = dv;
    merged.reshape(&out_shape)
}
