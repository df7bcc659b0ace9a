//! Timing and allocation measurements for the attention variants.

use std::time::Instant;

use crate::attention::{attend, Variant};
use crate::error::{Error, Result};
use crate::numerics::{AllocCounter, Var};
use crate::rng::{randn, seeded};

pub const WARMUP_RUNS: usize = 2;
pub const MIN_REPS: usize = 5;
pub const CSV_HEADER: [&str; 7] = ["variant", "N", "d", "d_v", "reps", "median_s", "peak_elements"];

/// Cells whose predicted peak exceeds this many elements are skipped and
/// marked infeasible. Overridable through `TAYLORIR_MAX_ELEMENTS`.
pub const DEFAULT_ELEMENT_BUDGET: usize = 600_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRecord {
    pub variant: Variant,
    pub n: usize,
    pub d: usize,
    pub d_v: usize,
    pub reps: usize,
    /// `None` when the cell was not run or timing was disabled.
    pub median_s: Option<f64>,
    pub peak_elements: usize,
    pub feasible: bool,
}

impl BenchRecord {
    pub fn elements_per_token(&self) -> f64 {
        self.peak_elements as f64 / self.n.max(1) as f64
    }

    /// Row values in [`CSV_HEADER`] order. Infeasible or untimed cells leave
    /// `median_s` empty.
    pub fn csv_fields(&self) -> [String; 7] {
        [
            self.variant.name().to_string(),
            self.n.to_string(),
            self.d.to_string(),
            self.d_v.to_string(),
            self.reps.to_string(),
            self.median_s.map(|t| format!("{t:.9}")).unwrap_or_default(),
            if self.feasible { self.peak_elements.to_string() } else { String::new() },
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingFit {
    pub variant: Variant,
    pub d: usize,
    pub exponent: f64,
    pub intercept: f64,
    pub r2: f64,
    pub n_min: usize,
    pub n_max: usize,
    pub points: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossoverRow {
    pub d: usize,
    /// Analytic estimate `d^2`.
    pub predicted: usize,
    /// Smallest grid `N` where efficient beats direct, `None` if beyond grid.
    pub measured: Option<usize>,
    pub records: Vec<BenchRecord>,
}

impl CrossoverRow {
    pub fn ratio(&self) -> Option<f64> {
        self.measured.map(|m| m as f64 / self.predicted as f64)
    }
}

fn concrete(variant: Variant) -> Result<Variant> {
    match variant {
        Variant::Auto => Err(Error::InvalidArgument("benchmarks need a concrete variant, not auto".into())),
        v => Ok(v),
    }
}

/// Rough upper estimate of live elements during one call, used only to decide
/// feasibility before allocating.
pub fn predicted_peak_elements(variant: Variant, n: usize, d: usize, d_v: usize) -> usize {
    let inputs = n * (2 * d + d_v);
    inputs
        + match variant {
            Variant::Softmax | Variant::DirectTaylor | Variant::Auto => 3 * n * n + n * d_v,
            Variant::EfficientTaylor => 2 * n * d * d + (d * d + d + 2) * (d_v + 1) + 3 * n * (d_v + 1),
        }
}

pub fn element_budget() -> usize {
    std::env::var("TAYLORIR_MAX_ELEMENTS")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or(DEFAULT_ELEMENT_BUDGET)
}

/// Makes the process allocator keep freed memory instead of returning it to
/// the OS.
///
/// glibc serves large blocks with fresh `mmap` pages and moves that size
/// threshold based on earlier frees, so whether a timed rep pays page faults
/// depends on allocation history rather than on the code being timed. After
/// this call every block comes from the heap and warmup runs leave it
/// faulted in. Process-wide and irreversible; call once before timing. Does
/// nothing on other platforms. Returns whether the setting was applied.
pub fn retain_freed_memory() -> bool {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    {
        // SAFETY: mallopt only adjusts allocator tunables.
        unsafe { libc::mallopt(libc::M_MMAP_MAX, 0) == 1 && libc::mallopt(libc::M_TRIM_THRESHOLD, -1) == 1 }
    }
    #[cfg(not(all(target_os = "linux", target_env = "gnu")))]
    {
        false
    }
}

/// Worker count from `TAYLORIR_THREADS` (0 or unset means all cores).
pub fn worker_threads() -> usize {
    let auto = || std::thread::available_parallelism().map_or(1, |n| n.get());
    match std::env::var("TAYLORIR_THREADS").ok().and_then(|s| s.parse::<usize>().ok()) {
        Some(0) | None => auto(),
        Some(n) => n,
    }
}

fn inputs(n: usize, d: usize, d_v: usize, seed: u64) -> Result<(Var<f32>, Var<f32>, Var<f32>)> {
    let mut rng = seeded(seed);
    let q = randn::<f32>(&[n, d], &mut rng)?;
    let k = randn::<f32>(&[n, d], &mut rng)?;
    let v = randn::<f32>(&[n, d_v], &mut rng)?;
    Ok((Var::constant(q), Var::constant(k), Var::constant(v)))
}

fn check_dims(n: usize, d: usize, d_v: usize) -> Result<()> {
    if n == 0 || d == 0 || d_v == 0 {
        return Err(Error::InvalidArgument(format!("N, d and d_v must be positive, got {n}, {d}, {d_v}")));
    }
    Ok(())
}

fn infeasible(variant: Variant, n: usize, d: usize, d_v: usize, reps: usize) -> BenchRecord {
    BenchRecord { variant, n, d, d_v, reps, median_s: None, peak_elements: 0, feasible: false }
}

/// Times `reps` calls (after warmups) in 32-bit floats and records the peak
/// transient element count of each call.
pub fn measure_attention(variant: Variant, n: usize, d: usize, d_v: usize, reps: usize, seed: u64) -> Result<BenchRecord> {
    let variant = concrete(variant)?;
    check_dims(n, d, d_v)?;
    if reps < MIN_REPS {
        return Err(Error::InvalidArgument(format!("reps must be at least {MIN_REPS}, got {reps}")));
    }
    if predicted_peak_elements(variant, n, d, d_v) > element_budget() {
        return Ok(infeasible(variant, n, d, d_v, reps));
    }
    let counter = AllocCounter::new();
    let _guard = counter.install();
    let (q, k, v) = inputs(n, d, d_v, seed)?;
    let scale = 1.0 / (d as f64).sqrt();
    let baseline = counter.live_elements();

    for _ in 0..WARMUP_RUNS {
        drop(attend(variant, &q, &k, &v, scale)?);
    }
    let mut times = Vec::with_capacity(reps);
    let mut peaks = Vec::with_capacity(reps);
    for _ in 0..reps {
        counter.reset();
        let t0 = Instant::now();
        let out = attend(variant, &q, &k, &v, scale)?;
        times.push(t0.elapsed().as_secs_f64());
        peaks.push(counter.transient_since(baseline));
        drop(out);
    }
    if peaks.iter().any(|&p| p != peaks[0]) {
        return Err(Error::Invariant(format!("peak elements differ across reps: {peaks:?}")));
    }
    Ok(BenchRecord {
        variant,
        n,
        d,
        d_v,
        reps,
        median_s: Some(median(&mut times)),
        peak_elements: peaks[0],
        feasible: true,
    })
}

/// Peak transient elements of a single untimed call.
pub fn measure_peak(variant: Variant, n: usize, d: usize, d_v: usize, seed: u64) -> Result<BenchRecord> {
    let variant = concrete(variant)?;
    check_dims(n, d, d_v)?;
    if predicted_peak_elements(variant, n, d, d_v) > element_budget() {
        return Ok(infeasible(variant, n, d, d_v, 1));
    }
    let counter = AllocCounter::new();
    let _guard = counter.install();
    let (q, k, v) = inputs(n, d, d_v, seed)?;
    let baseline = counter.live_elements();
    counter.reset();
    let out = attend(variant, &q, &k, &v, 1.0 / (d as f64).sqrt())?;
    let peak = counter.transient_since(baseline);
    drop(out);
    Ok(BenchRecord { variant, n, d, d_v, reps: 1, median_s: None, peak_elements: peak, feasible: true })
}

/// Allocation-only sweep over `(variant, N, d, d_v)` cells. Untimed, so the
/// cells are spread over [`worker_threads`] threads; results keep input order.
pub fn peak_sweep(cells: &[(Variant, usize, usize, usize)], seed: u64) -> Result<Vec<BenchRecord>> {
    let threads = worker_threads().clamp(1, cells.len().max(1));
    let chunk = cells.len().div_ceil(threads).max(1);
    std::thread::scope(|s| {
        let handles: Vec<_> = cells
            .chunks(chunk)
            .map(|part| {
                s.spawn(move || {
                    part.iter()
                        .map(|&(v, n, d, dv)| measure_peak(v, n, d, dv, seed))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        let mut out = Vec::with_capacity(cells.len());
        for h in handles {
            out.extend(h.join().map_err(|_| Error::Invariant("sweep worker panicked".into()))??);
        }
        Ok(out)
    })
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(|a, b| a.total_cmp(b));
    let m = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[m]
    } else {
        0.5 * (xs[m - 1] + xs[m])
    }
}

/// Ordinary least squares of `ln y` on `ln x`: `(slope, intercept, r^2)`.
pub fn log_log_fit(xs: &[f64], ys: &[f64]) -> Result<(f64, f64, f64)> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::InvalidArgument("need at least two paired points".into()));
    }
    if xs.iter().chain(ys).any(|&v| !(v > 0.0) || !v.is_finite()) {
        return Err(Error::InvalidArgument("log-log fit needs positive finite values".into()));
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ly.iter().map(|y| (y - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidArgument("x values are all equal".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 { 1.0 } else { (sxy * sxy) / (sxx * syy) };
    Ok((slope, intercept, r2))
}

/// Fits `time ~ c * N^p` over the feasible records of one variant at one `d`.
pub fn fit_scaling(records: &[BenchRecord]) -> Result<ScalingFit> {
    let usable: Vec<&BenchRecord> = records.iter().filter(|r| r.feasible && r.median_s.is_some()).collect();
    let first = usable
        .first()
        .ok_or_else(|| Error::InvalidArgument("no feasible timed records".into()))?;
    if usable.iter().any(|r| r.variant != first.variant || r.d != first.d) {
        return Err(Error::InvalidArgument("records mix variants or head dimensions".into()));
    }
    let mut ns: Vec<usize> = usable.iter().map(|r| r.n).collect();
    ns.sort_unstable();
    ns.dedup();
    if ns.len() < 5 {
        return Err(Error::InvalidArgument(format!("need at least 5 distinct N values, got {}", ns.len())));
    }
    let (n_min, n_max) = (ns[0], ns[ns.len() - 1]);
    if n_max < 8 * n_min {
        return Err(Error::InvalidArgument(format!("N range {n_min}..{n_max} spans less than 8x")));
    }
    let xs: Vec<f64> = usable.iter().map(|r| r.n as f64).collect();
    let ys: Vec<f64> = usable.iter().map(|r| r.median_s.unwrap()).collect();
    let (exponent, intercept, r2) = log_log_fit(&xs, &ys)?;
    Ok(ScalingFit {
        variant: first.variant,
        d: first.d,
        exponent,
        intercept,
        r2,
        n_min,
        n_max,
        points: usable.len(),
    })
}

/// For each `d`, the first grid `N` where the efficient variant's median time
/// drops below the direct one's (`d_v = d`).
pub fn crossover_report(ds: &[usize], grid: &[usize], reps: usize, seed: u64) -> Result<Vec<CrossoverRow>> {
    if grid.is_empty() || ds.is_empty() {
        return Err(Error::InvalidArgument("crossover needs non-empty d and N lists".into()));
    }
    if grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument("N grid must be strictly ascending".into()));
    }
    let mut rows = Vec::with_capacity(ds.len());
    for &d in ds {
        let mut records = Vec::new();
        let mut measured = None;
        for &n in grid {
            let dir = measure_attention(Variant::DirectTaylor, n, d, d, reps, seed)?;
            let eff = measure_attention(Variant::EfficientTaylor, n, d, d, reps, seed)?;
            let wins = match (dir.median_s, eff.median_s) {
                (Some(a), Some(b)) => b < a,
                (None, Some(_)) => true,
                _ => false,
            };
            records.push(dir);
            records.push(eff);
            if wins {
                measured = Some(n);
                break;
            }
        }
        rows.push(CrossoverRow { d, predicted: d * d, measured, records });
    }
    Ok(rows)
}

/// Relative saving `1 - efficient / direct`.
pub fn memory_reduction(direct: &BenchRecord, efficient: &BenchRecord) -> Result<f64> {
    if !direct.feasible || !efficient.feasible || direct.peak_elements == 0 {
        return Err(Error::InvalidArgument("memory reduction needs two feasible records".into()));
    }
    Ok(1.0 - efficient.peak_elements as f64 / direct.peak_elements as f64)
}
