use std::path::Path;
use std::process::{Command, Output};

use taylorir::metrics::ImageU8;
use taylorir::model::{init_params, save_checkpoint, ModelConfig};
use taylorir_cli::{png_read, png_write};

fn taylorir(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_taylorir")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn gradient(h: usize, w: usize, offset: u8) -> ImageU8 {
    ImageU8::from_fn(h, w, |y, x, c| (20 + y * 5 + x * 3 + c * 17) as u8 + offset).unwrap()
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_string()
}

#[test]
fn verify_attention_passes_and_unknown_suite_is_usage_error() {
    let o = taylorir(&["verify", "--suite", "attention", "--seed", "7"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let text = stdout(&o);
    assert!(text.lines().filter(|l| l.trim_start().starts_with("PASS")).count() >= 6);
    assert_eq!(taylorir(&["verify", "--suite", "nope"]).status.code(), Some(2));
}

#[test]
fn metrics_identity_offset_and_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    png_write(&dir.path().join("a.png"), &gradient(16, 16, 0)).unwrap();
    png_write(&dir.path().join("b.png"), &gradient(16, 16, 1)).unwrap();
    png_write(&dir.path().join("c.png"), &gradient(16, 12, 0)).unwrap();

    let o = taylorir(&["metrics", &p(dir.path(), "a.png"), &p(dir.path(), "a.png"), "--scale", "2"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o).trim(), "PSNR: inf  SSIM: 1.0000");

    // one RGB step is 219/255 of a luma step
    let o = taylorir(&["metrics", &p(dir.path(), "a.png"), &p(dir.path(), "b.png"), "--scale", "2"]);
    let line = stdout(&o);
    let db: f64 = line.split_whitespace().nth(1).unwrap().parse().unwrap();
    let expected = 20.0 * (255.0f64 / (219.0 / 255.0)).log10();
    assert!((db - expected).abs() < 1e-3, "{line}");

    let o = taylorir(&["metrics", &p(dir.path(), "a.png"), &p(dir.path(), "c.png")]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn sr_shapes_variants_and_global_window() {
    let dir = tempfile::tempdir().unwrap();
    let input = p(dir.path(), "in.png");
    png_write(Path::new(&input), &gradient(24, 24, 0)).unwrap();

    let o = taylorir(&["sr", &input, "-o", &p(dir.path(), "x2.png"), "--scale", "2"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let out = png_read(&dir.path().join("x2.png")).unwrap();
    assert_eq!((out.height(), out.width()), (48, 48));

    let o = taylorir(&["sr", &input, "-o", &p(dir.path(), "x3.png"), "--scale", "3", "--seed", "4"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(png_read(&dir.path().join("x3.png")).unwrap().height(), 72);

    let big = p(dir.path(), "big.png");
    png_write(Path::new(&big), &gradient(48, 48, 0)).unwrap();
    let o = taylorir(&["sr", &big, "-o", &p(dir.path(), "g.png"), "--window", "48", "--variant", "efficient", "--print-config"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("\"window\": 48"));
    assert_eq!(png_read(&dir.path().join("g.png")).unwrap().width(), 96);
}

#[test]
fn sr_checkpoint_mismatch_and_metrics_report() {
    let dir = tempfile::tempdir().unwrap();
    let input = p(dir.path(), "in.png");
    png_write(Path::new(&input), &gradient(12, 12, 0)).unwrap();
    let ckpt = dir.path().join("m.ckpt");
    let c = ModelConfig::default();
    save_checkpoint(&ckpt, &c, &init_params::<f32>(&c, 3).unwrap()).unwrap();
    let ckpt = ckpt.to_str().unwrap();

    // scale 3 needs a different upsampling convolution
    let o = taylorir(&["sr", &input, "-o", &p(dir.path(), "o.png"), "--checkpoint", ckpt, "--scale", "3"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("checkpoint"));

    let gt = p(dir.path(), "gt.png");
    png_write(Path::new(&gt), &gradient(24, 24, 0)).unwrap();
    let o = taylorir(&["sr", &input, "-o", &p(dir.path(), "o.png"), "--checkpoint", ckpt, "--ground-truth", &gt, "--report-metrics"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).lines().any(|l| l.starts_with("PSNR: ")));

    std::fs::write(dir.path().join("bad.png"), b"garbage").unwrap();
    let o = taylorir(&["sr", &p(dir.path(), "bad.png"), "-o", &p(dir.path(), "o.png")]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn sr_is_deterministic_and_config_file_is_honoured() {
    let dir = tempfile::tempdir().unwrap();
    let input = p(dir.path(), "in.png");
    png_write(Path::new(&input), &gradient(10, 10, 0)).unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"scale": 4, "window": 4}"#).unwrap();
    let run = |name: &str| {
        let o = taylorir(&["sr", &input, "-o", &p(dir.path(), name), "--config", cfg.to_str().unwrap(), "--seed", "9"]);
        assert_eq!(o.status.code(), Some(0));
        std::fs::read(dir.path().join(name)).unwrap()
    };
    assert_eq!(run("a.png"), run("b.png"));
    assert_eq!(png_read(&dir.path().join("a.png")).unwrap().height(), 40);

    std::fs::write(&cfg, r#"{"scael": 4}"#).unwrap();
    let o = taylorir(&["sr", &input, "-o", &p(dir.path(), "c.png"), "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bench_sweep_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let csv_path = p(dir.path(), "b.csv");
    let o = taylorir(&["bench", "--n", "32..512", "--d", "4", "--reps", "5", "--out", &csv_path]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("fit direct"));
    let mut rdr = csv::Reader::from_path(&csv_path).unwrap();
    assert_eq!(rdr.headers().unwrap(), vec!["variant", "N", "d", "d_v", "reps", "median_s", "peak_elements"]);
    let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.iter().filter(|r| &r[0] == "direct").count(), 5);
    assert_eq!(rows.iter().filter(|r| &r[0] == "efficient").count(), 5);
    assert!(rows.iter().all(|r| r[5].parse::<f64>().unwrap() > 0.0));
}

#[test]
fn bench_memory_only_and_crossover() {
    let dir = tempfile::tempdir().unwrap();
    let csv_path = p(dir.path(), "m.csv");
    let o = taylorir(&["bench", "--n", "64,128", "--d", "8", "--memory-only", "--out", &csv_path]);
    assert_eq!(o.status.code(), Some(0));
    let text = std::fs::read_to_string(&csv_path).unwrap();
    assert!(text.lines().skip(1).all(|l| l.split(',').nth(5) == Some("")));

    let o = taylorir(&["bench", "--mode", "crossover", "--d", "4,8", "--n", "4..1024", "--out", &csv_path]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("predicted"));
}

#[test]
fn bench_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let csv_path = p(dir.path(), "b.csv");
    assert_eq!(taylorir(&["bench", "--n", "", "--out", &csv_path]).status.code(), Some(2));
    assert_eq!(taylorir(&["bench", "--reps", "2", "--out", &csv_path]).status.code(), Some(2));
    assert_eq!(taylorir(&["bench", "--n", "8", "--out", "/nonexistent/dir/x.csv"]).status.code(), Some(2));
    assert_eq!(taylorir(&["bogus"]).status.code(), Some(2));
}
