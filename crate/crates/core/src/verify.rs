//! Invariant suites run by `taylorir verify` and the acceptance tests.
//!
//! Each property reports a measured error next to its tolerance. The
//! attention suite takes its implementations as function pointers so a
//! deliberately broken variant can be checked to fail.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;

use crate::attention::{
    direct_taylorshift, efficient_taylorshift, multi_head, row_kron, softmax, taylor_softmax, AttentionSpec, Variant,
};
use crate::error::{Error, Result};
use crate::metrics::{bicubic_resize_f64, psnr, ssim, Resize};
use crate::model::{forward, forward_tensor, init_params, ModelConfig};
use crate::numerics::{finite_diff_check, finite_diff_check_coords, Tape, Tensor, Var};
use crate::rng::{randn, seeded, uniform, SeededRng};
use crate::windowing::{pixel_embed, window_merge, window_partition, WindowSpec};

/// Largest `|T-SM(A) - softmax(A)|` over rows with `|A_ij| <= 0.1`, frozen
/// from a dense-grid search (worst case 8.2754e-5, two-column rows).
pub const SOFTMAX_PROXIMITY_BOUND: f64 = 8.3e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Attention,
    Gradients,
    Windowing,
    Metrics,
    All,
}

impl Suite {
    pub const NAMES: [&'static str; 5] = ["attention", "gradients", "windowing", "metrics", "all"];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Attention => "attention",
            Suite::Gradients => "gradients",
            Suite::Windowing => "windowing",
            Suite::Metrics => "metrics",
            Suite::All => "all",
        }
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "attention" => Suite::Attention,
            "gradients" => Suite::Gradients,
            "windowing" => Suite::Windowing,
            "metrics" => Suite::Metrics,
            "all" => Suite::All,
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown suite '{other}', expected one of {}",
                    Suite::NAMES.join(", ")
                )))
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bound {
    /// Pass iff `measured <= limit`.
    AtMost(f64),
    /// Pass iff `measured > limit`.
    Above(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropertyResult {
    pub name: String,
    pub measured: f64,
    pub bound: Bound,
    pub pass: bool,
    pub note: Option<String>,
}

impl PropertyResult {
    fn new(name: &str, measured: f64, bound: Bound) -> Self {
        let pass = match bound {
            Bound::AtMost(t) => measured <= t,
            Bound::Above(t) => measured > t,
        };
        PropertyResult { name: name.to_string(), measured, bound, pass, note: None }
    }

    fn from_result(name: &str, r: Result<f64>, bound: Bound) -> Self {
        match r {
            Ok(m) => Self::new(name, m, bound),
            Err(e) => PropertyResult { name: name.to_string(), measured: f64::NAN, bound, pass: false, note: Some(e.to_string()) },
        }
    }
}

impl fmt::Display for PropertyResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (rel, lim) = match self.bound {
            Bound::AtMost(t) => ("<=", t),
            Bound::Above(t) => (">", t),
        };
        write!(
            f,
            "{} {:<40} measured {:.3e}  required {rel} {:.1e}",
            if self.pass { "PASS" } else { "FAIL" },
            self.name,
            self.measured,
            lim
        )?;
        if let Some(n) = &self.note {
            write!(f, "  ({n})")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub suite: &'static str,
    pub properties: Vec<PropertyResult>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.properties.iter().all(|p| p.pass)
    }
}

type AttnFn = fn(&Var<f64>, &Var<f64>, &Var<f64>, f64) -> Result<Var<f64>>;
type MapFn = fn(&Var<f64>) -> Result<Var<f64>>;

/// The 64-bit implementations the attention suite exercises.
#[derive(Clone, Copy)]
pub struct AttentionImpls {
    pub direct: AttnFn,
    pub efficient: AttnFn,
    pub taylor_softmax: MapFn,
    pub row_kron: MapFn,
}

impl Default for AttentionImpls {
    fn default() -> Self {
        AttentionImpls {
            direct: direct_taylorshift::<f64>,
            efficient: efficient_taylorshift::<f64>,
            taylor_softmax: taylor_softmax::<f64>,
            row_kron: row_kron::<f64>,
        }
    }
}

pub fn run(suite: Suite, seed: u64) -> Vec<SuiteReport> {
    match suite {
        Suite::Attention => vec![attention_suite(seed, &AttentionImpls::default())],
        Suite::Gradients => vec![gradients_suite(seed)],
        Suite::Windowing => vec![windowing_suite(seed)],
        Suite::Metrics => vec![metrics_suite(seed)],
        Suite::All => vec![
            attention_suite(seed, &AttentionImpls::default()),
            gradients_suite(seed),
            windowing_suite(seed),
            metrics_suite(seed),
        ],
    }
}

fn rand_var(shape: &[usize], rng: &mut SeededRng) -> Result<Var<f64>> {
    Ok(Var::constant(randn(shape, rng)?))
}

fn max_abs(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
    a.max_abs_diff(b)
}

// ---- attention ------------------------------------------------------------

pub fn attention_suite(seed: u64, imp: &AttentionImpls) -> SuiteReport {
    let mut rng = seeded(seed);
    let props = vec![
        PropertyResult::from_result("direct_vs_efficient_f64", equivalence_f64(&mut rng, imp), Bound::AtMost(1e-10)),
        PropertyResult::from_result("direct_vs_efficient_f32", equivalence_f32(&mut rng), Bound::AtMost(1e-4)),
        PropertyResult::from_result("tsm_row_sum_error", tsm_row_sums(&mut rng, imp), Bound::AtMost(1e-12)),
        PropertyResult::from_result("tsm_min_weight", tsm_min_weight(&mut rng, imp), Bound::Above(0.0)),
        PropertyResult::from_result("row_kron_identity_rel", kron_identity(&mut rng, imp), Bound::AtMost(1e-12)),
        PropertyResult::from_result(
            "softmax_proximity_small_scores",
            softmax_proximity(&mut rng, imp),
            Bound::AtMost(SOFTMAX_PROXIMITY_BOUND),
        ),
        PropertyResult::from_result("multi_head_block_diagonal", multi_head_blocks(&mut rng, imp), Bound::AtMost(1e-12)),
        PropertyResult::from_result("output_in_value_hull", value_hull(&mut rng, imp), Bound::AtMost(1e-12)),
    ];
    SuiteReport { suite: "attention", properties: props }
}

fn equivalence_f64(rng: &mut SeededRng, imp: &AttentionImpls) -> Result<f64> {
    let mut worst = 0.0f64;
    for _ in 0..40 {
        let n = rng.random_range(1..=64);
        let d = rng.random_range(1..=16);
        let dv = rng.random_range(1..=16);
        let q = rand_var(&[n, d], rng)?;
        let k = rand_var(&[n, d], rng)?;
        let v = rand_var(&[n, dv], rng)?;
        let s = 1.0 / (d as f64).sqrt();
        let a = (imp.direct)(&q, &k, &v, s)?;
        let b = (imp.efficient)(&q, &k, &v, s)?;
        worst = worst.max(max_abs(a.value(), b.value())?);
    }
    Ok(worst)
}

fn equivalence_f32(rng: &mut SeededRng) -> Result<f64> {
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let n = rng.random_range(1..=64);
        let d = rng.random_range(1..=16);
        let q = Var::constant(randn::<f32>(&[n, d], rng)?);
        let k = Var::constant(randn::<f32>(&[n, d], rng)?);
        let v = Var::constant(randn::<f32>(&[n, d], rng)?);
        let s = 1.0 / (d as f64).sqrt();
        let a = direct_taylorshift(&q, &k, &v, s)?;
        let b = efficient_taylorshift(&q, &k, &v, s)?;
        worst = worst.max(a.value().max_abs_diff(b.value())? as f64);
    }
    Ok(worst)
}

fn random_scores(rng: &mut SeededRng) -> Result<Var<f64>> {
    let n = rng.random_range(1..=32);
    let m = rng.random_range(1..=32);
    let spread = rng.random_range(0.1..4.0);
    Ok(Var::constant(randn::<f64>(&[n, m], rng)?.scale(spread)))
}

fn tsm_row_sums(rng: &mut SeededRng, imp: &AttentionImpls) -> Result<f64> {
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let p = (imp.taylor_softmax)(&random_scores(rng)?)?;
        let sums = p.value().sum(1)?;
        for &s in sums.data() {
            worst = worst.max((s - 1.0).abs());
        }
    }
    Ok(worst)
}

fn tsm_min_weight(rng: &mut SeededRng, imp: &AttentionImpls) -> Result<f64> {
    let mut lowest = f64::INFINITY;
    for _ in 0..200 {
        let p = (imp.taylor_softmax)(&random_scores(rng)?)?;
        lowest = p.value().data().iter().fold(lowest, |m, &x| m.min(x));
    }
    Ok(lowest)
}

fn kron_identity(rng: &mut SeededRng, imp: &AttentionImpls) -> Result<f64> {
    let mut worst = 0.0f64;
    for _ in 0..500 {
        let d = rng.random_range(1..=64);
        let q = rand_var(&[1, d], rng)?;
        let k = rand_var(&[1, d], rng)?;
        let qq = (imp.row_kron)(&q)?;
        let kk = (imp.row_kron)(&k)?;
        let lhs: f64 = qq.value().data().iter().zip(kk.value().data()).map(|(a, b)| a * b).sum();
        let dot: f64 = q.value().data().iter().zip(k.value().data()).map(|(a, b)| a * b).sum();
        let mag: f64 = q.value().data().iter().zip(k.value().data()).map(|(a, b)| (a * b).abs()).sum();
        worst = worst.max(kron_rel_err(lhs, dot * dot, mag * mag));
    }
    Ok(worst)
}

/// `|lhs - rhs|` relative to `(sum_i |q_i k_i|)^2`, the size of the terms
/// being summed. Plain `|lhs - rhs| / rhs` is unbounded when `q . k` nearly
/// cancels.
pub fn kron_rel_err(lhs: f64, rhs: f64, term_scale: f64) -> f64 {
    (lhs - rhs).abs() / term_scale.max(rhs.abs()).max(f64::MIN_POSITIVE)
}

fn softmax_proximity(rng: &mut SeededRng, imp: &AttentionImpls) -> Result<f64> {
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let n = rng.random_range(1..=8);
        let m = rng.random_range(1..=32);
        let a = Var::constant(uniform::<f64>(&[n, m], -0.1, 0.1, rng)?);
        let t = (imp.taylor_softmax)(&a)?;
        let s = softmax(&a)?;
        worst = worst.max(max_abs(t.value(), s.value())?);
    }
    Ok(worst)
}

fn multi_head_blocks(rng: &mut SeededRng, imp: &AttentionImpls) -> Result<f64> {
    let mut worst = 0.0f64;
    for heads in [1usize, 2, 4] {
        let (n, dh) = (rng.random_range(1..=24), rng.random_range(1..=4));
        let d = heads * dh;
        let q = rand_var(&[n, d], rng)?;
        let k = rand_var(&[n, d], rng)?;
        let v = rand_var(&[n, d], rng)?;
        let got = multi_head(&q, &k, &v, &AttentionSpec::new(Variant::DirectTaylor, heads))?;
        let s = 1.0 / (dh as f64).sqrt();
        let mut want: Option<Var<f64>> = None;
        for h in 0..heads {
            let sl = |x: &Var<f64>| x.slice_last(h * dh, dh);
            let y = (imp.direct)(&sl(&q)?, &sl(&k)?, &sl(&v)?, s)?;
            want = Some(match want {
                None => y,
                Some(acc) => acc.concat_last(&y)?,
            });
        }
        worst = worst.max(max_abs(got.value(), want.unwrap().value())?);
    }
    Ok(worst)
}

/// Rows of the output are convex combinations of the rows of `V`: distance
/// outside the per-column range of `V`.
fn value_hull(rng: &mut SeededRng, imp: &AttentionImpls) -> Result<f64> {
    let mut worst = 0.0f64;
    for _ in 0..40 {
        let n = rng.random_range(1..=48);
        let d = rng.random_range(1..=8);
        let dv = rng.random_range(1..=8);
        let q = rand_var(&[n, d], rng)?;
        let k = rand_var(&[n, d], rng)?;
        let v = rand_var(&[n, dv], rng)?;
        let s = 1.0 / (d as f64).sqrt();
        for out in [(imp.direct)(&q, &k, &v, s)?, (imp.efficient)(&q, &k, &v, s)?] {
            let vd = v.value().data();
            for (i, &y) in out.value().data().iter().enumerate() {
                let col = i % dv;
                let (lo, hi) = (0..n).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| {
                    let x = vd[r * dv + col];
                    (lo.min(x), hi.max(x))
                });
                worst = worst.max(lo - y).max(y - hi);
            }
        }
    }
    Ok(worst)
}

// ---- gradients --------------------------------------------------------------

type Probe = Box<dyn Fn(&Var<f64>) -> Result<Var<f64>>>;

/// Sum of `y` weighted by a fixed, non-uniform pattern so every output entry
/// contributes a distinct amount.
fn weighted_sum(y: &Var<f64>) -> Result<Var<f64>> {
    let w = Tensor::from_fn(y.shape(), |i| (i as f64 * 0.7371 + 0.3).sin() + 0.1)?;
    y.mul(&Var::constant(w))?.sum_all()
}

fn primitive_probes(rng: &mut SeededRng) -> Result<Vec<(String, Tensor<f64>, Probe)>> {
    let mut out: Vec<(String, Tensor<f64>, Probe)> = Vec::new();
    let mut r = |s: &[usize]| randn::<f64>(s, rng);

    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let a_shape = if ta { [2, 4, 3] } else { [2, 3, 4] };
        let b_shape = if tb { [2, 5, 4] } else { [2, 4, 5] };
        let (a, b) = (r(&a_shape)?, r(&b_shape)?);
        let bc = Var::constant(b.clone());
        out.push((
            format!("matmul_t({ta},{tb}).a"),
            a.clone(),
            Box::new(move |x| weighted_sum(&x.matmul_t(&bc, ta, tb)?)),
        ));
        let ac = Var::constant(a);
        out.push((
            format!("matmul_t({ta},{tb}).b"),
            b,
            Box::new(move |x| weighted_sum(&ac.matmul_t(x, ta, tb)?)),
        ));
    }

    let a = r(&[3, 4])?;
    let b = r(&[4])?.map(|x| if x >= 0.0 { x + 1.0 } else { x - 1.0 });
    for name in ["add", "sub", "mul", "div"] {
        let f = move |x: &Var<f64>, y: &Var<f64>| -> Result<Var<f64>> {
            match name {
                "add" => x.add(y),
                "sub" => x.sub(y),
                "mul" => x.mul(y),
                _ => x.div(y),
            }
        };
        let bc = Var::constant(b.clone());
        out.push((format!("{name}.lhs"), a.clone(), Box::new(move |x| weighted_sum(&f(x, &bc)?))));
        let ac = Var::constant(a.clone());
        out.push((format!("{name}.rhs_broadcast"), b.clone(), Box::new(move |y| weighted_sum(&f(&ac, y)?))));
    }

    let x = r(&[4, 5])?;
    let away = x.map(|v| if v >= 0.0 { v + 0.2 } else { v - 0.2 });
    out.push(("square".into(), x.clone(), Box::new(|x| weighted_sum(&x.square()?))));
    out.push(("scale".into(), x.clone(), Box::new(|x| weighted_sum(&x.scale(1.7)?))));
    out.push(("add_scalar".into(), x.clone(), Box::new(|x| weighted_sum(&x.add_scalar(0.3)?))));
    out.push(("exp".into(), x.clone(), Box::new(|x| weighted_sum(&x.exp()?))));
    out.push(("abs".into(), away, Box::new(|x| weighted_sum(&x.abs()?))));
    out.push(("gelu".into(), x.clone(), Box::new(|x| weighted_sum(&x.gelu()?))));
    for axis in 0..2 {
        for keep in [false, true] {
            out.push((format!("sum(axis={axis},keep={keep})"), x.clone(), Box::new(move |x| weighted_sum(&x.sum(axis, keep)?))));
            out.push((format!("mean(axis={axis},keep={keep})"), x.clone(), Box::new(move |x| weighted_sum(&x.mean(axis, keep)?))));
            out.push((format!("max(axis={axis},keep={keep})"), x.clone(), Box::new(move |x| weighted_sum(&x.max(axis, keep)?))));
        }
    }

    let t = r(&[2, 3, 4])?;
    out.push(("reshape".into(), t.clone(), Box::new(|x| weighted_sum(&x.reshape(&[4, 6])?))));
    out.push(("permute".into(), t.clone(), Box::new(|x| weighted_sum(&x.permute(&[2, 0, 1])?))));
    let rows = Arc::new(vec![5usize, 0, 0, 3, 2]);
    out.push((
        "gather_rows".into(),
        t.clone(),
        Box::new(move |x| weighted_sum(&x.gather_rows(rows.clone(), &[5, 4])?)),
    ));
    let other = Var::constant(r(&[2, 3, 2])?);
    out.push(("concat_last".into(), t.clone(), Box::new(move |x| weighted_sum(&x.concat_last(&other)?))));
    out.push(("slice_last".into(), t.clone(), Box::new(|x| weighted_sum(&x.slice_last(1, 2)?))));
    out.push(("row_kron".into(), r(&[2, 3, 3])?, Box::new(|x| weighted_sum(&x.row_kron()?))));

    let img = r(&[1, 4, 5, 2])?;
    let w = r(&[3, 3, 2, 3])?;
    let bias = r(&[3])?;
    {
        let (wc, bc) = (Var::constant(w.clone()), Var::constant(bias.clone()));
        out.push(("conv2d_3x3.input".into(), img.clone(), Box::new(move |x| weighted_sum(&x.conv2d_3x3(&wc, Some(&bc))?))));
        let (ic, bc) = (Var::constant(img.clone()), Var::constant(bias.clone()));
        out.push(("conv2d_3x3.weight".into(), w.clone(), Box::new(move |x| weighted_sum(&ic.conv2d_3x3(x, Some(&bc))?))));
        let (ic, wc) = (Var::constant(img), Var::constant(w));
        out.push(("conv2d_3x3.bias".into(), bias, Box::new(move |x| weighted_sum(&ic.conv2d_3x3(&wc, Some(x))?))));
    }
    out.push(("pixel_shuffle".into(), r(&[1, 2, 2, 8])?, Box::new(|x| weighted_sum(&x.pixel_shuffle(2)?))));

    let ln_x = r(&[3, 5])?;
    let gamma = r(&[5])?;
    let beta = r(&[5])?;
    {
        let (g, b) = (Var::constant(gamma.clone()), Var::constant(beta.clone()));
        out.push(("layer_norm.input".into(), ln_x.clone(), Box::new(move |x| weighted_sum(&x.layer_norm(&g, &b, 1e-5)?))));
        let (xc, b) = (Var::constant(ln_x.clone()), Var::constant(beta.clone()));
        out.push(("layer_norm.gamma".into(), gamma.clone(), Box::new(move |g| weighted_sum(&xc.layer_norm(g, &b, 1e-5)?))));
        let (xc, g) = (Var::constant(ln_x), Var::constant(gamma));
        out.push(("layer_norm.beta".into(), beta, Box::new(move |b| weighted_sum(&xc.layer_norm(&g, b, 1e-5)?))));
    }
    Ok(out)
}

/// Worst relative error over all primitive probes, and the probe name.
pub fn primitive_gradients(seed: u64) -> Result<(f64, String)> {
    let mut rng = seeded(seed);
    let mut worst = (0.0f64, String::new());
    for (name, x, f) in primitive_probes(&mut rng)? {
        let rep = finite_diff_check(&f, &x, 1e-5, 1e-5)?;
        if rep.max_rel_err >= worst.0 {
            worst = (rep.max_rel_err, name);
        }
    }
    Ok(worst)
}

/// Tape vs central differences for `sum(variant(Q, K, V))` w.r.t. each input,
/// `N = 8`, `d = 4`, `h = 1e-5`.
pub fn attention_gradients(seed: u64, variant: Variant) -> Result<f64> {
    let mut rng = seeded(seed);
    let q = randn::<f64>(&[8, 4], &mut rng)?;
    let k = randn::<f64>(&[8, 4], &mut rng)?;
    let v = randn::<f64>(&[8, 4], &mut rng)?;
    let s = 0.5;
    let f = |q: &Var<f64>, k: &Var<f64>, v: &Var<f64>| match variant {
        Variant::EfficientTaylor => efficient_taylorshift(q, k, v, s),
        _ => direct_taylorshift(q, k, v, s),
    };
    let (qc, kc, vc) = (Var::constant(q.clone()), Var::constant(k.clone()), Var::constant(v.clone()));
    let rq = finite_diff_check(|x| f(x, &kc, &vc)?.sum_all(), &q, 1e-5, 1e-4)?;
    let rk = finite_diff_check(|x| f(&qc, x, &vc)?.sum_all(), &k, 1e-5, 1e-4)?;
    let rv = finite_diff_check(|x| f(&qc, &kc, x)?.sum_all(), &v, 1e-5, 1e-4)?;
    Ok(rq.max_rel_err.max(rk.max_rel_err).max(rv.max_rel_err))
}

/// Config for the end-to-end gradient check: 2 blocks, 8x8 input.
pub fn gradient_check_config() -> ModelConfig {
    ModelConfig { embed_dim: 8, heads: 2, window: 4, blocks_per_group: 2, groups: 1, ..Default::default() }
}

/// L1-loss gradient of the full network w.r.t. each named tensor, checked on
/// up to `coords_per_tensor` coordinates each. Weights are rescaled to a
/// standard deviation near 0.2 so gradients are well above rounding noise.
pub fn model_gradients(seed: u64, names: &[&str], coords_per_tensor: usize) -> Result<Vec<(String, f64)>> {
    let config = gradient_check_config();
    let base = init_params::<f64>(&config, seed)?.try_map(|n, t| {
        Ok(if n.ends_with("weight") { t.scale(10.0) } else { t.clone() })
    })?;
    let mut rng = seeded(seed ^ 0x9e37_79b9);
    let lr = uniform::<f64>(&[1, 8, 8, 3], 0.0, 1.0, &mut rng)?;
    let hr = uniform::<f64>(&[1, 16, 16, 3], 0.6, 1.0, &mut rng)?;
    let (lr_c, hr_c) = (Var::constant(lr), Var::constant(hr));
    let mut out = Vec::new();
    for &name in names {
        let target = base
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("no parameter named {name}")))?
            .clone();
        let f = |x: &Var<f64>| -> Result<Var<f64>> {
            let ps = base.try_map(|n, t| Ok(if n == name { x.clone() } else { Var::constant(t.clone()) }))?;
            let y = forward(&lr_c, &ps, &config)?;
            y.sub(&hr_c)?.abs()?.mean_all()
        };
        let stride = (target.numel() / coords_per_tensor.max(1)).max(1);
        let coords: Vec<usize> = (0..target.numel()).step_by(stride).take(coords_per_tensor).collect();
        let rep = finite_diff_check_coords(f, &target, 1e-5, 1e-3, coords)?;
        out.push((name.to_string(), rep.max_rel_err));
    }
    Ok(out)
}

pub const MODEL_GRADIENT_TENSORS: [&str; 8] = [
    "shallow.weight",
    "embed.weight",
    "groups.0.blocks.0.qkv.weight",
    "groups.0.blocks.1.proj.weight",
    "groups.0.blocks.0.norm1.gamma",
    "groups.0.blocks.1.fc1.weight",
    "groups.0.conv.weight",
    "upsample.weight",
];

pub fn gradients_suite(seed: u64) -> SuiteReport {
    let mut props = Vec::new();
    match primitive_gradients(seed) {
        Ok((err, name)) => {
            let mut p = PropertyResult::new("primitives_vs_finite_diff", err, Bound::AtMost(1e-5));
            p.note = Some(format!("worst: {name}"));
            props.push(p);
        }
        Err(e) => props.push(PropertyResult::from_result("primitives_vs_finite_diff", Err(e), Bound::AtMost(1e-5))),
    }
    props.push(PropertyResult::from_result(
        "direct_taylorshift_qkv_grad",
        attention_gradients(seed, Variant::DirectTaylor),
        Bound::AtMost(1e-4),
    ));
    props.push(PropertyResult::from_result(
        "efficient_taylorshift_qkv_grad",
        attention_gradients(seed, Variant::EfficientTaylor),
        Bound::AtMost(1e-4),
    ));
    let e2e = model_gradients(seed, &MODEL_GRADIENT_TENSORS, 12).map(|v| {
        v.into_iter().fold((0.0f64, String::new()), |acc, (n, e)| if e >= acc.0 { (e, n) } else { acc })
    });
    match e2e {
        Ok((err, name)) => {
            let mut p = PropertyResult::new("model_l1_grad_two_blocks", err, Bound::AtMost(1e-3));
            p.note = Some(format!("worst: {name}"));
            props.push(p);
        }
        Err(e) => props.push(PropertyResult::from_result("model_l1_grad_two_blocks", Err(e), Bound::AtMost(1e-3))),
    }
    props.push(PropertyResult::from_result("tape_reuse_after_reset", tape_reuse(), Bound::AtMost(0.0)));
    SuiteReport { suite: "gradients", properties: props }
}

/// Recording the same function twice on one tape (with a reset between)
/// must give identical gradients.
fn tape_reuse() -> Result<f64> {
    let tape = Tape::new();
    let x = Tensor::from_fn(&[3, 3], |i| (i as f64 * 0.41).cos())?;
    let mut grads = Vec::new();
    for _ in 0..2 {
        tape.reset();
        let v = tape.leaf(x.clone());
        let y = v.matmul(&v)?.gelu()?.sum_all()?;
        grads.push(y.backward()?.wrt(&v)?);
    }
    max_abs(&grads[0], &grads[1])
}

// ---- windowing ---------------------------------------------------------------

/// Largest round-trip error of partition then merge over a grid of map
/// sizes, window sides and shifts, plus the number of cases.
pub fn window_round_trip_grid(seed: u64, max_hw: usize, max_w: usize) -> Result<(f64, usize)> {
    let mut rng = seeded(seed);
    let mut worst = 0.0f64;
    let mut cases = 0;
    for h in 1..=max_hw {
        for w in 1..=max_hw {
            let x = Var::constant(randn::<f64>(&[2, h, w, 3], &mut rng)?);
            for win in 1..=max_w {
                for shift in 0..win {
                    let spec = WindowSpec::new(win, shift)?;
                    let (wins, _) = window_partition(&x, &spec)?;
                    let back = window_merge(&wins, &spec, h, w)?;
                    worst = worst.max(max_abs(x.value(), back.value())?);
                    cases += 1;
                }
            }
        }
    }
    Ok((worst, cases))
}

/// With `w >= max(H, W)` every shift gives the single raster-order window.
pub fn global_window_equivalence(seed: u64) -> Result<f64> {
    let mut rng = seeded(seed);
    let mut worst = 0.0f64;
    for (h, w) in [(5usize, 7usize), (8, 8), (3, 1), (6, 4)] {
        let x = Var::constant(randn::<f64>(&[1, h, w, 2], &mut rng)?);
        let flat = x.value().reshape(&[1, h * w, 2])?;
        for win in [h.max(w), h.max(w) + 3] {
            for shift in [0, win / 2, win - 1] {
                let (wins, layout) = window_partition(&x, &WindowSpec::new(win, shift)?)?;
                if layout.num_windows() != 1 {
                    return Err(Error::Invariant(format!("{h}x{w} with w={win} gave {} windows", layout.num_windows())));
                }
                worst = worst.max(max_abs(wins.value(), &flat)?);
            }
        }
    }
    Ok(worst)
}

/// Output of the toy network with `w >= H = W` does not depend on the shift flag.
pub fn global_window_model_shift_invariance(seed: u64) -> Result<f64> {
    let base = ModelConfig { embed_dim: 8, heads: 2, window: 8, ..Default::default() };
    let p = init_params::<f64>(&base, seed)?;
    let x = uniform::<f64>(&[1, 8, 8, 3], 0.0, 1.0, &mut seeded(seed))?;
    let a = forward_tensor(&x, &p, &ModelConfig { shift_windows: true, ..base.clone() })?;
    let b = forward_tensor(&x, &p, &ModelConfig { shift_windows: false, ..base })?;
    max_abs(&a, &b)
}

fn pixel_embed_matches_loop(seed: u64) -> Result<f64> {
    let mut rng = seeded(seed);
    let img = randn::<f64>(&[2, 3, 4, 3], &mut rng)?;
    let w = randn::<f64>(&[3, 5], &mut rng)?;
    let b = randn::<f64>(&[5], &mut rng)?;
    let got = pixel_embed(&Var::constant(img.clone()), &Var::constant(w.clone()), &Var::constant(b.clone()))?;
    let mut worst = 0.0f64;
    for p in 0..24 {
        for c in 0..5 {
            let mut acc = b.data()[c];
            for i in 0..3 {
                acc += img.data()[p * 3 + i] * w.data()[i * 5 + c];
            }
            worst = worst.max((acc - got.value().data()[p * 5 + c]).abs());
        }
    }
    Ok(worst)
}

fn window_token_count(seed: u64) -> Result<f64> {
    let _ = seed;
    let spec = WindowSpec::plain(48)?;
    let layout = spec.layout(1, 48, 48)?;
    Ok((layout.tokens_per_window() as f64 - 2304.0).abs() + (layout.num_windows() as f64 - 1.0).abs())
}

pub fn windowing_suite(seed: u64) -> SuiteReport {
    let rt = match window_round_trip_grid(seed, 9, 5) {
        Ok((err, cases)) => {
            let mut p = PropertyResult::new("partition_merge_round_trip", err, Bound::AtMost(0.0));
            p.note = Some(format!("{cases} cases"));
            p
        }
        Err(e) => PropertyResult::from_result("partition_merge_round_trip", Err(e), Bound::AtMost(0.0)),
    };
    SuiteReport {
        suite: "windowing",
        properties: vec![
            rt,
            PropertyResult::from_result("global_window_is_raster_order", global_window_equivalence(seed), Bound::AtMost(0.0)),
            PropertyResult::from_result(
                "global_window_shift_irrelevant_in_model",
                global_window_model_shift_invariance(seed),
                Bound::AtMost(0.0),
            ),
            PropertyResult::from_result("pixel_embed_is_per_pixel_affine", pixel_embed_matches_loop(seed), Bound::AtMost(1e-12)),
            PropertyResult::from_result("w48_single_window_2304_tokens", window_token_count(seed), Bound::AtMost(0.0)),
        ],
    }
}

// ---- metrics -----------------------------------------------------------------

/// Plain double loop over every 11x11 window with explicit Gaussian weights.
pub fn ssim_scalar_oracle(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
    let (h, w) = match *a.shape() {
        [h, w] if a.shape() == b.shape() => (h, w),
        _ => return Err(Error::shape("ssim_scalar_oracle", a.shape(), b.shape())),
    };
    let k = 11usize;
    if h < k || w < k {
        return Err(Error::invalid_shape("ssim_scalar_oracle", a.shape(), "smaller than the window"));
    }
    let mut g = [[0.0f64; 11]; 11];
    let mut total = 0.0;
    for (i, row) in g.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (y, x) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(x * x + y * y) / (2.0 * 1.5 * 1.5)).exp();
            total += *v;
        }
    }
    let c1 = (0.01f64 * 255.0).powi(2);
    let c2 = (0.03f64 * 255.0).powi(2);
    let (ad, bd) = (a.data(), b.data());
    let mut sum = 0.0;
    for y0 in 0..=h - k {
        for x0 in 0..=w - k {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..k {
                for j in 0..k {
                    let wgt = g[i][j] / total;
                    let (p, q) = (ad[(y0 + i) * w + x0 + j], bd[(y0 + i) * w + x0 + j]);
                    ma += wgt * p;
                    mb += wgt * q;
                    saa += wgt * p * p;
                    sbb += wgt * q * q;
                    sab += wgt * p * q;
                }
            }
            let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
    }
    Ok(sum / ((h - k + 1) * (w - k + 1)) as f64)
}

fn luma_pair(rng: &mut SeededRng, h: usize, w: usize) -> Result<(Tensor<f64>, Tensor<f64>)> {
    let a = Tensor::from_fn(&[h, w], |_| rng.random_range(16.0..235.0))?;
    let noise = rng.random_range(1.0..40.0);
    let b = a.map(|x| x);
    let b = Tensor::from_fn(&[h, w], |i| (b.data()[i] + noise * (rng.random::<f64>() - 0.5)).clamp(0.0, 255.0))?;
    Ok((a, b))
}

/// Largest `|ssim - oracle|` over `pairs` random luminance pairs.
pub fn ssim_vs_oracle(seed: u64, pairs: usize) -> Result<f64> {
    let mut rng = seeded(seed);
    let mut worst = 0.0f64;
    for _ in 0..pairs {
        let h = rng.random_range(11..=24);
        let w = rng.random_range(11..=24);
        let (a, b) = luma_pair(&mut rng, h, w)?;
        worst = worst.max((ssim(&a, &b)? - ssim_scalar_oracle(&a, &b)?).abs());
    }
    Ok(worst)
}

pub fn metrics_suite(seed: u64) -> SuiteReport {
    let unit = || -> Result<f64> {
        let a = Tensor::full(&[12, 12], 100.0)?;
        let b = Tensor::full(&[12, 12], 101.0)?;
        Ok((psnr(&a, &b, 0)? - 20.0 * 255f64.log10()).abs())
    };
    let full = || -> Result<f64> {
        let a = Tensor::full(&[12, 12], 0.0)?;
        let b = Tensor::full(&[12, 12], 255.0)?;
        Ok(psnr(&a, &b, 2)?.abs())
    };
    let ident = || -> Result<f64> {
        let a = Tensor::from_fn(&[12, 12], |i| (i % 256) as f64)?;
        let p = psnr(&a, &a, 2)?;
        Ok(if p == f64::INFINITY { 0.0 } else { 1.0 })
    };
    let ssim_ident = || -> Result<f64> {
        let a = Tensor::from_fn(&[16, 16], |i| ((i * 37) % 256) as f64)?;
        Ok((ssim(&a, &a)? - 1.0).abs())
    };
    let bicubic_const = || -> Result<f64> {
        let src = vec![0.37; 7 * 5 * 3];
        let mut worst = 0.0f64;
        for f in [Resize::Up(2), Resize::Up(3), Resize::Down(2), Resize::Down(4)] {
            let (out, _, _) = bicubic_resize_f64(&src, 7, 5, 3, f)?;
            worst = out.iter().fold(worst, |m, &x| m.max((x - 0.37).abs()));
        }
        Ok(worst)
    };
    SuiteReport {
        suite: "metrics",
        properties: vec![
            PropertyResult::from_result("psnr_unit_offset_48.1308", unit(), Bound::AtMost(1e-3)),
            PropertyResult::from_result("psnr_full_offset_0db", full(), Bound::AtMost(1e-3)),
            PropertyResult::from_result("psnr_identity_is_inf", ident(), Bound::AtMost(0.0)),
            PropertyResult::from_result("ssim_identity_is_one", ssim_ident(), Bound::AtMost(1e-12)),
            PropertyResult::from_result("ssim_vs_scalar_oracle", ssim_vs_oracle(seed, 20), Bound::AtMost(1e-6)),
            PropertyResult::from_result("bicubic_preserves_constants", bicubic_const(), Bound::AtMost(1e-12)),
        ],
    }
}
