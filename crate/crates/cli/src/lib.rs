//! Command implementations behind the `taylorir` binary.
//!
//! Exit codes: 0 success, 1 a checked property or metric failed (or the
//! computation itself failed), 2 usage or input error.

mod image_io;

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use taylorir::attention::Variant;
use taylorir::bench::{self, BenchRecord, CSV_HEADER, MIN_REPS};
use taylorir::metrics::{evaluate_y, ImageU8};
use taylorir::model::{forward_tensor, init_params, load_checkpoint, to_images, ModelConfig, ModelParams};
use taylorir::verify::{self, Suite};
use taylorir::{Real, Tensor};
use thiserror::Error;

pub use image_io::{png_read, png_write};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {msg}")]
    Image { path: PathBuf, msg: String },
    #[error(transparent)]
    Lib(#[from] taylorir::Error),
}

impl CliError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.to_path_buf(), source }
    }

    pub fn exit_code(&self) -> i32 {
        use taylorir::Error as E;
        match self {
            CliError::Usage(_) | CliError::Io { .. } | CliError::Image { .. } => EXIT_USAGE,
            CliError::Lib(E::Checkpoint(_) | E::InvalidArgument(_) | E::ShapeMismatch { .. } | E::InvalidShape { .. }) => {
                EXIT_USAGE
            }
            CliError::Lib(_) => EXIT_FAILURE,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "taylorir", version, about = "TaylorShift attention checks, benchmarks and toy super-resolution")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the numerical property suites.
    Verify(VerifyArgs),
    /// Time and count allocations of the attention variants.
    Bench(BenchArgs),
    /// Upscale a PNG with the toy network.
    Sr(SrArgs),
    /// Luminance PSNR and SSIM between two PNGs.
    Metrics(MetricsArgs),
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// attention, gradients, windowing, metrics or all.
    #[arg(long, default_value = "all")]
    pub suite: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BenchMode {
    Sweep,
    Crossover,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, value_enum, default_value = "sweep")]
    pub mode: BenchMode,
    /// Token counts: `512,1024,2048` or a doubling range `512..8192`.
    #[arg(long, default_value = "512..8192")]
    pub n: String,
    /// Head dimensions, same syntax as `--n`. Crossover mode defaults to `4,8`.
    #[arg(long)]
    pub d: Option<String>,
    /// Value width; defaults to `d`.
    #[arg(long)]
    pub d_v: Option<usize>,
    /// Variants timed in sweep mode.
    #[arg(long, default_value = "direct,efficient")]
    pub variants: String,
    #[arg(long, default_value_t = MIN_REPS)]
    pub reps: usize,
    /// Skip timing and only count allocations (spread over `TAYLORIR_THREADS`).
    #[arg(long)]
    pub memory_only: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// CSV destination.
    #[arg(long, default_value = "bench.csv")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    #[default]
    F64,
}

#[derive(Debug, Args)]
pub struct SrArgs {
    pub input: PathBuf,
    #[arg(long, short)]
    pub output: PathBuf,
    /// Upscaling factor (2, 3 or 4). Defaults to the checkpoint's or 2.
    #[arg(long)]
    pub scale: Option<usize>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Flat JSON model configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub window: Option<usize>,
    /// softmax, direct, efficient or auto.
    #[arg(long)]
    pub variant: Option<Variant>,
    /// Seed for random initialization when no checkpoint is given.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "f64")]
    pub dtype: Dtype,
    /// High-resolution reference for `--report-metrics`.
    #[arg(long)]
    pub ground_truth: Option<PathBuf>,
    #[arg(long, requires = "ground_truth")]
    pub report_metrics: bool,
    /// Print the resolved run configuration as JSON before running.
    #[arg(long)]
    pub print_config: bool,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    pub a: PathBuf,
    pub b: PathBuf,
    /// Border crop in pixels, usually the upscaling factor.
    #[arg(long, default_value_t = 0)]
    pub scale: usize,
}

/// Fully resolved settings of an `sr` run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Initialization seed when no checkpoint is given. Default 0.
    pub seed: u64,
    /// Inference precision. Default f64.
    pub dtype: Dtype,
    /// Default [`ModelConfig::default`].
    pub model: ModelConfig,
    /// Default none (random initialization).
    pub checkpoint: Option<PathBuf>,
    /// Default none.
    pub ground_truth: Option<PathBuf>,
    /// Default false.
    pub report_metrics: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            dtype: Dtype::F64,
            model: ModelConfig::default(),
            checkpoint: None,
            ground_truth: None,
            report_metrics: false,
        }
    }
}

impl RunConfig {
    pub fn from_json(s: &str) -> Result<Self, CliError> {
        serde_json::from_str(s).map_err(|e| CliError::Usage(format!("run config: {e}")))
    }
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<i32, CliError> {
    match cli.command {
        Command::Verify(a) => cmd_verify(&a, out),
        Command::Bench(a) => cmd_bench(&a, out),
        Command::Sr(a) => cmd_sr(&a, out),
        Command::Metrics(a) => cmd_metrics(&a, out),
    }
}

fn emit(out: &mut dyn Write, line: std::fmt::Arguments<'_>) -> Result<(), CliError> {
    writeln!(out, "{line}").map_err(|e| CliError::io(Path::new("<stdout>"), e))
}

pub fn cmd_verify(args: &VerifyArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    let suite: Suite = args.suite.parse().map_err(|e: taylorir::Error| CliError::Usage(e.to_string()))?;
    let reports = verify::run(suite, args.seed);
    let mut all = true;
    for r in &reports {
        emit(out, format_args!("[{}]", r.suite))?;
        for p in &r.properties {
            emit(out, format_args!("  {p}"))?;
        }
        all &= r.passed();
    }
    let (passed, total) = reports
        .iter()
        .flat_map(|r| &r.properties)
        .fold((0, 0), |(p, t), x| (p + x.pass as usize, t + 1));
    emit(out, format_args!("{passed}/{total} properties passed"))?;
    Ok(if all { EXIT_OK } else { EXIT_FAILURE })
}

/// Parses `a,b,c` or a doubling range `lo..hi`.
pub fn parse_list(s: &str) -> Result<Vec<usize>, CliError> {
    let bad = |m: String| CliError::Usage(m);
    let s = s.trim();
    let values: Vec<usize> = if let Some((lo, hi)) = s.split_once("..") {
        let lo: usize = lo.trim().parse().map_err(|_| bad(format!("bad range start in `{s}`")))?;
        let hi: usize = hi.trim().parse().map_err(|_| bad(format!("bad range end in `{s}`")))?;
        if lo == 0 || hi < lo {
            return Err(bad(format!("range `{s}` must satisfy 0 < lo <= hi")));
        }
        std::iter::successors(Some(lo), |&x| x.checked_mul(2)).take_while(|&x| x <= hi).collect()
    } else {
        s.split(',')
            .filter(|t| !t.trim().is_empty())
            .map(|t| t.trim().parse().map_err(|_| bad(format!("`{t}` is not a positive integer"))))
            .collect::<Result<_, _>>()?
    };
    if values.is_empty() {
        return Err(bad("empty list".into()));
    }
    if values.contains(&0) {
        return Err(bad("list entries must be positive".into()));
    }
    Ok(values)
}

fn write_csv(path: &Path, records: &[BenchRecord]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let fail = |e: csv::Error| CliError::Usage(format!("{}: {e}", path.display()));
    w.write_record(CSV_HEADER).map_err(fail)?;
    for r in records {
        w.write_record(r.csv_fields()).map_err(fail)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn cmd_bench(args: &BenchArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    let ns = parse_list(&args.n)?;
    let default_d = match args.mode {
        BenchMode::Sweep => "16",
        BenchMode::Crossover => "4,8",
    };
    let ds = parse_list(args.d.as_deref().unwrap_or(default_d))?;
    if args.reps < MIN_REPS {
        return Err(CliError::Usage(format!("--reps must be at least {MIN_REPS}")));
    }
    if args.d_v == Some(0) {
        return Err(CliError::Usage("--d-v must be positive".into()));
    }
    // fail on an unwritable destination before spending minutes measuring
    std::fs::File::create(&args.out).map_err(|e| CliError::io(&args.out, e))?;

    let records = match args.mode {
        BenchMode::Sweep => bench_sweep(args, &ns, &ds, out)?,
        BenchMode::Crossover => bench_crossover(args, &ns, &ds, out)?,
    };
    write_csv(&args.out, &records)?;
    emit(out, format_args!("wrote {} rows to {}", records.len(), args.out.display()))?;
    Ok(EXIT_OK)
}

fn bench_sweep(args: &BenchArgs, ns: &[usize], ds: &[usize], out: &mut dyn Write) -> Result<Vec<BenchRecord>, CliError> {
    let variants: Vec<Variant> = args
        .variants
        .split(',')
        .map(|s| s.trim().parse::<Variant>())
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    if variants.is_empty() || variants.contains(&Variant::Auto) {
        return Err(CliError::Usage("--variants needs concrete variants (softmax, direct, efficient)".into()));
    }
    let cells: Vec<(Variant, usize, usize, usize)> = ds
        .iter()
        .flat_map(|&d| variants.iter().flat_map(move |&v| ns.iter().map(move |&n| (v, n, d, args.d_v.unwrap_or(d)))))
        .collect();
    let records = if args.memory_only {
        bench::peak_sweep(&cells, args.seed)?
    } else {
        bench::retain_freed_memory();
        cells
            .iter()
            .map(|&(v, n, d, dv)| bench::measure_attention(v, n, d, dv, args.reps, args.seed))
            .collect::<Result<Vec<_>, _>>()?
    };

    emit(out, format_args!("{:<10} {:>7} {:>4} {:>4} {:>12} {:>14}", "variant", "N", "d", "d_v", "median_s", "peak_elements"))?;
    for r in &records {
        let t = r.median_s.map_or("-".to_string(), |t| format!("{t:.6}"));
        let p = if r.feasible { r.peak_elements.to_string() } else { "infeasible".into() };
        emit(out, format_args!("{:<10} {:>7} {:>4} {:>4} {:>12} {:>14}", r.variant.name(), r.n, r.d, r.d_v, t, p))?;
    }
    if !args.memory_only {
        for &d in ds {
            for &v in &variants {
                let group: Vec<BenchRecord> = records.iter().filter(|r| r.variant == v && r.d == d).cloned().collect();
                match bench::fit_scaling(&group) {
                    Ok(f) => emit(out, format_args!(
                        "fit {:<10} d={:<3} exponent {:.3}  r^2 {:.4}  (N {}..{}, {} points)",
                        v.name(), d, f.exponent, f.r2, f.n_min, f.n_max, f.points
                    ))?,
                    Err(e) => emit(out, format_args!("fit {:<10} d={:<3} unavailable: {e}", v.name(), d))?,
                }
            }
        }
    }
    for &d in ds {
        for &n in ns {
            let find = |v| records.iter().find(|r| r.variant == v && r.n == n && r.d == d);
            if let (Some(a), Some(b)) = (find(Variant::DirectTaylor), find(Variant::EfficientTaylor)) {
                if let Ok(saved) = bench::memory_reduction(a, b) {
                    emit(out, format_args!("memory d={d} N={n}: efficient uses {:.1}% fewer elements", saved * 100.0))?;
                }
            }
        }
    }
    Ok(records)
}

fn bench_crossover(args: &BenchArgs, ns: &[usize], ds: &[usize], out: &mut dyn Write) -> Result<Vec<BenchRecord>, CliError> {
    bench::retain_freed_memory();
    let mut grid = ns.to_vec();
    grid.sort_unstable();
    grid.dedup();
    let rows = bench::crossover_report(ds, &grid, args.reps, args.seed)?;
    emit(out, format_args!("{:>4} {:>10} {:>10} {:>8}", "d", "predicted", "measured", "ratio"))?;
    let mut records = Vec::new();
    for row in rows {
        let m = row.measured.map_or(format!(">{}", grid[grid.len() - 1]), |m| m.to_string());
        let ratio = row.ratio().map_or("-".to_string(), |r| format!("{r:.2}"));
        emit(out, format_args!("{:>4} {:>10} {:>10} {:>8}", row.d, row.predicted, m, ratio))?;
        records.extend(row.records);
    }
    Ok(records)
}

fn resolve_run_config(args: &SrArgs) -> Result<(RunConfig, Option<ModelParams<f32>>), CliError> {
    let from_file = match &args.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            Some(serde_json::from_str::<ModelConfig>(&text).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?)
        }
        None => None,
    };
    let (mut model, params) = match &args.checkpoint {
        Some(p) => {
            let (c, params) = load_checkpoint(p)?;
            (from_file.unwrap_or(c), Some(params))
        }
        None => (from_file.unwrap_or_default(), None),
    };
    if let Some(s) = args.scale {
        model.scale = s;
    }
    if let Some(w) = args.window {
        model.window = w;
    }
    if let Some(v) = args.variant {
        model.variant = v;
    }
    model.validate()?;
    if let Some(p) = &params {
        p.check_shapes(&model)
            .map_err(|e| taylorir::Error::Checkpoint(format!("checkpoint does not fit the requested configuration: {e}")))?;
    }
    let rc = RunConfig {
        seed: args.seed,
        dtype: args.dtype,
        model,
        checkpoint: args.checkpoint.clone(),
        ground_truth: args.ground_truth.clone(),
        report_metrics: args.report_metrics,
    };
    Ok((rc, params))
}

fn upscale<T: Real>(img: &ImageU8, params: Option<&ModelParams<f32>>, rc: &RunConfig) -> Result<ImageU8, CliError> {
    let params: ModelParams<T> = match params {
        Some(p) => p.cast(),
        None => init_params(&rc.model, rc.seed)?,
    };
    let px = img.to_unit_f64().into_iter().map(T::lit).collect();
    let x = Tensor::from_vec(&[1, img.height(), img.width(), 3], px)?;
    let y = forward_tensor(&x, &params, &rc.model)?;
    Ok(to_images(&y)?.remove(0))
}

pub fn cmd_sr(args: &SrArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    let (rc, params) = resolve_run_config(args)?;
    if args.print_config {
        let json = serde_json::to_string_pretty(&rc).map_err(|e| CliError::Usage(e.to_string()))?;
        emit(out, format_args!("{json}"))?;
    }
    let img = png_read(&args.input)?;
    let truth = match (&rc.ground_truth, rc.report_metrics) {
        (Some(p), true) => {
            let t = png_read(p)?;
            let want = (img.height() * rc.model.scale, img.width() * rc.model.scale);
            if (t.height(), t.width()) != want {
                return Err(CliError::Usage(format!(
                    "ground truth is {}x{}, expected {}x{}",
                    t.height(), t.width(), want.0, want.1
                )));
            }
            Some(t)
        }
        _ => None,
    };
    let sr = match rc.dtype {
        Dtype::F32 => upscale::<f32>(&img, params.as_ref(), &rc)?,
        Dtype::F64 => upscale::<f64>(&img, params.as_ref(), &rc)?,
    };
    png_write(&args.output, &sr)?;
    emit(out, format_args!("wrote {}x{} image to {}", sr.width(), sr.height(), args.output.display()))?;
    if let Some(t) = truth {
        let (p, s) = evaluate_y(&sr, &t, rc.model.scale)?;
        emit(out, format_args!("{}", metrics_line(p, s)))?;
    }
    Ok(EXIT_OK)
}

pub fn metrics_line(psnr: f64, ssim: f64) -> String {
    let p = if psnr.is_infinite() { "inf".to_string() } else { format!("{psnr:.4}") };
    format!("PSNR: {p}  SSIM: {ssim:.4}")
}

pub fn cmd_metrics(args: &MetricsArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    let a = png_read(&args.a)?;
    let b = png_read(&args.b)?;
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(CliError::Usage(format!(
            "image extents differ: {}x{} vs {}x{}",
            a.height(), a.width(), b.height(), b.width()
        )));
    }
    let (p, s) = evaluate_y(&a, &b, args.scale)?;
    emit(out, format_args!("{}", metrics_line(p, s)))?;
    Ok(EXIT_OK)
}
