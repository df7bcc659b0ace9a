//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails. Pass criterion numbers as arguments to run a
//! subset, e.g. `cargo test -p taylorir-cli --test acceptance -- 5 6`.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::Rng;
use taylorir::attention::{direct_taylorshift, efficient_taylorshift, row_kron, taylor_softmax, Variant};
use taylorir::bench::{fit_scaling, measure_attention, measure_peak, memory_reduction, retain_freed_memory, MIN_REPS};
use taylorir::metrics::{bicubic_resize, evaluate_y, psnr, ImageU8, Resize};
use taylorir::model::{init_params, overfit_single, save_checkpoint, ModelConfig};
use taylorir::rng::{randn, seeded};
use taylorir::verify::{
    attention_gradients, gradient_check_config, kron_rel_err, model_gradients, ssim_vs_oracle,
};
use taylorir::windowing::{window_merge, window_partition, WindowSpec};
use taylorir::{Tensor, Var};
use taylorir_cli::png_write;

type Outcome = Result<(bool, String), String>;
type Criterion = (&'static str, fn() -> Outcome);

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn c1_variant_equivalence() -> Outcome {
    let mut rng = seeded(101);
    let (mut w64, mut w32) = (0.0f64, 0.0f64);
    for _ in 0..200 {
        let n = rng.random_range(1..=512);
        let d = rng.random_range(1..=64);
        let dv = rng.random_range(1..=64);
        let s = 1.0 / (d as f64).sqrt();
        let q = randn::<f64>(&[n, d], &mut rng).map_err(err)?;
        let k = randn::<f64>(&[n, d], &mut rng).map_err(err)?;
        let v = randn::<f64>(&[n, dv], &mut rng).map_err(err)?;
        let (a, b) = (
            direct_taylorshift(&Var::constant(q.clone()), &Var::constant(k.clone()), &Var::constant(v.clone()), s),
            efficient_taylorshift(&Var::constant(q.clone()), &Var::constant(k.clone()), &Var::constant(v.clone()), s),
        );
        w64 = w64.max(a.map_err(err)?.value().max_abs_diff(b.map_err(err)?.value()).map_err(err)?);
        let (q, k, v) = (Var::constant(q.cast::<f32>()), Var::constant(k.cast::<f32>()), Var::constant(v.cast::<f32>()));
        let a = direct_taylorshift(&q, &k, &v, s).map_err(err)?;
        let b = efficient_taylorshift(&q, &k, &v, s).map_err(err)?;
        w32 = w32.max(a.value().max_abs_diff(b.value()).map_err(err)? as f64);
    }
    Ok((w64 <= 1e-10 && w32 <= 1e-4, format!("200 cases, f64 max {w64:.2e} (<= 1e-10), f32 max {w32:.2e} (<= 1e-4)")))
}

fn c2_taylor_softmax() -> Outcome {
    let mut rng = seeded(202);
    let (mut sum_err, mut min_w) = (0.0f64, f64::INFINITY);
    for _ in 0..10_000 {
        let n = rng.random_range(1..=16);
        let m = rng.random_range(1..=32);
        let spread = rng.random_range(0.01..10.0);
        let a = randn::<f64>(&[n, m], &mut rng).map_err(err)?.scale(spread);
        let p = taylor_softmax(&Var::constant(a)).map_err(err)?;
        for row in p.value().data().chunks(m) {
            sum_err = sum_err.max((row.iter().sum::<f64>() - 1.0).abs());
            min_w = row.iter().fold(min_w, |x, &y| x.min(y));
        }
    }
    Ok((sum_err <= 1e-12 && min_w > 0.0, format!("10^4 matrices, row-sum error {sum_err:.2e} (<= 1e-12), min entry {min_w:.3e} (> 0)")))
}

fn c3_kron_identity() -> Outcome {
    let mut rng = seeded(303);
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let d = rng.random_range(1..=64);
        let q = randn::<f64>(&[1, d], &mut rng).map_err(err)?;
        let k = randn::<f64>(&[1, d], &mut rng).map_err(err)?;
        let qq = row_kron(&Var::constant(q.clone())).map_err(err)?;
        let kk = row_kron(&Var::constant(k.clone())).map_err(err)?;
        let lhs: f64 = qq.value().data().iter().zip(kk.value().data()).map(|(a, b)| a * b).sum();
        let dot: f64 = q.data().iter().zip(k.data()).map(|(a, b)| a * b).sum();
        let mag: f64 = q.data().iter().zip(k.data()).map(|(a, b)| (a * b).abs()).sum();
        worst = worst.max(kron_rel_err(lhs, dot * dot, mag * mag));
    }
    Ok((worst <= 1e-12, format!("10^4 pairs, relative error {worst:.2e} (<= 1e-12, relative to (sum|q_i k_i|)^2)")))
}

fn c4_gradients() -> Outcome {
    let d = attention_gradients(404, Variant::DirectTaylor).map_err(err)?;
    let e = attention_gradients(404, Variant::EfficientTaylor).map_err(err)?;
    let config = gradient_check_config();
    let names: Vec<String> = init_params::<f64>(&config, 0).map_err(err)?.named().into_iter().map(|(n, _)| n).collect();
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let per = model_gradients(404, &refs, 4).map_err(err)?;
    let (m, worst) = per.iter().fold((0.0f64, ""), |acc, (n, e)| if *e >= acc.0 { (*e, n.as_str()) } else { acc });
    Ok((
        d <= 1e-4 && e <= 1e-4 && m <= 1e-3,
        format!(
            "direct {d:.2e}, efficient {e:.2e} (<= 1e-4); model {m:.2e} over {} tensors, worst {worst} (<= 1e-3)",
            per.len()
        ),
    ))
}

fn c5_scaling() -> Outcome {
    let ns = [512usize, 1024, 2048, 4096, 8192];
    retain_freed_memory();
    let mut parts = Vec::new();
    let mut pass = true;
    for (variant, lo, hi) in [(Variant::DirectTaylor, 1.8, 2.2), (Variant::EfficientTaylor, 0.85, 1.15)] {
        let recs = ns
            .iter()
            .map(|&n| measure_attention(variant, n, 16, 16, MIN_REPS, 505))
            .collect::<Result<Vec<_>, _>>()
            .map_err(err)?;
        let fit = fit_scaling(&recs).map_err(err)?;
        pass &= (lo..=hi).contains(&fit.exponent) && fit.r2 >= 0.98;
        parts.push(format!("{} exponent {:.3} in [{lo}, {hi}] r^2 {:.4}", variant.name(), fit.exponent, fit.r2));
    }
    Ok((pass, format!("d=16, N 512..8192: {} (r^2 >= 0.98)", parts.join("; "))))
}

fn c6_memory() -> Outcome {
    let dir = measure_peak(Variant::DirectTaylor, 2304, 32, 32, 606).map_err(err)?;
    let eff = measure_peak(Variant::EfficientTaylor, 2304, 32, 32, 606).map_err(err)?;
    let saved = memory_reduction(&dir, &eff).map_err(err)?;
    let ratio = 1.0 - saved;
    Ok((
        ratio <= 0.5,
        format!(
            "N=2304 d=d_v=32: direct {} elements, efficient {} elements, efficient/direct {:.1}% (<= 50%), reduction {:.1}%",
            dir.peak_elements,
            eff.peak_elements,
            ratio * 100.0,
            saved * 100.0
        ),
    ))
}

fn c7_windowing() -> Outcome {
    let mut rng = seeded(707);
    let mut cases = 0usize;
    let mut mismatches = 0usize;
    for h in 1..=64 {
        for w in 1..=64 {
            let x = Var::constant(randn::<f64>(&[1, h, w, 2], &mut rng).map_err(err)?);
            for win in [2usize, 4, 8, 16] {
                for shift in [0, win / 2] {
                    let spec = WindowSpec::new(win, shift).map_err(err)?;
                    let (wins, _) = window_partition(&x, &spec).map_err(err)?;
                    let back = window_merge(&wins, &spec, h, w).map_err(err)?;
                    mismatches += (back.value().data() != x.value().data()) as usize;
                    cases += 1;
                }
            }
        }
    }
    let mut global_bad = 0usize;
    for (h, w) in [(7usize, 5usize), (16, 16), (1, 9), (12, 3)] {
        let x = Var::constant(randn::<f64>(&[1, h, w, 3], &mut rng).map_err(err)?);
        for win in [h.max(w), h.max(w) + 5] {
            let (wins, layout) = window_partition(&x, &WindowSpec::new(win, 0).map_err(err)?).map_err(err)?;
            global_bad += (layout.num_windows() != 1 || wins.value().data() != x.value().data()) as usize;
        }
    }
    Ok((
        mismatches == 0 && global_bad == 0,
        format!("{cases} (H, W, w, shift) cases, {mismatches} inexact round trips; global window mismatches {global_bad}"),
    ))
}

fn c8_metrics() -> Outcome {
    let a = Tensor::from_fn(&[32, 32], |i| 20.0 + (i % 181) as f64).map_err(err)?;
    let unit = psnr(&a, &a.add_scalar(1.0), 2).map_err(err)?;
    let zero = Tensor::<f64>::zeros(&[32, 32]).map_err(err)?;
    let full = Tensor::full(&[32, 32], 255.0).map_err(err)?;
    let zero_db = psnr(&zero, &full, 0).map_err(err)?;
    let same = psnr(&a, &a, 2).map_err(err)?;
    let ssim_err = ssim_vs_oracle(808, 20).map_err(err)?;
    let pass = (unit - 48.1308).abs() <= 1e-3 && zero_db.abs() <= 1e-3 && same == f64::INFINITY && ssim_err <= 1e-6;
    Ok((pass, format!("unit offset {unit:.4} dB, 255 offset {zero_db:.4} dB, identity {same}; SSIM vs oracle {ssim_err:.2e} on 20 pairs (<= 1e-6)")))
}

/// Smooth multi-frequency colour texture with a coarse checkerboard.
fn texture(h: usize, w: usize) -> ImageU8 {
    ImageU8::from_fn(h, w, |y, x, c| {
        let (fy, fx, fc) = (y as f64, x as f64, c as f64);
        let v = 0.5
            + 0.2 * (fx * 0.45 + fy * 0.2 + fc).sin()
            + 0.15 * ((fy * 0.7 - fx * 0.3) * (1.0 + 0.3 * fc)).cos()
            + if (x / 12 + y / 12) % 2 == 0 { 0.1 } else { -0.1 };
        (v.clamp(0.0, 1.0) * 255.0).round() as u8
    })
    .unwrap()
}

fn to_tensor(img: &ImageU8) -> Tensor<f32> {
    let data = img.to_unit_f64().into_iter().map(|v| v as f32).collect();
    Tensor::from_vec(&[1, img.height(), img.width(), 3], data).unwrap()
}

/// Frozen from the first oracle run (three seeds reached 40.4 to 41.2 dB
/// against a 31.57 dB bicubic baseline).
const OVERFIT_MARGIN_DB: f64 = 3.0;

fn c9_overfit() -> Outcome {
    let hr = texture(48, 48);
    let lr = bicubic_resize(&hr, Resize::Down(2)).map_err(err)?;
    let (bicubic, _) = evaluate_y(&bicubic_resize(&lr, Resize::Up(2)).map_err(err)?, &hr, 2).map_err(err)?;
    let c = ModelConfig::default();
    let p = init_params::<f32>(&c, 909).map_err(err)?;
    let r = overfit_single(&to_tensor(&lr), &to_tensor(&hr), &p, &c, 200, 5e-3).map_err(err)?;
    let fin = r.final_psnr();
    Ok((
        fin > bicubic + OVERFIT_MARGIN_DB,
        format!("48x48 crop, 200 steps: final {fin:.2} dB vs bicubic {bicubic:.2} dB (margin > {OVERFIT_MARGIN_DB} dB)"),
    ))
}

fn c10_cli_quantized_equivalence() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let c = ModelConfig::default();
    let hr = texture(48, 48);
    let lr = bicubic_resize(&hr, Resize::Down(2)).map_err(err)?;
    let p = init_params::<f32>(&c, 1010).map_err(err)?;
    let trained = overfit_single(&to_tensor(&lr), &to_tensor(&hr), &p, &c, 20, 5e-3).map_err(err)?.params;
    let ckpt = dir.path().join("toy.ckpt");
    save_checkpoint(&ckpt, &c, &trained).map_err(err)?;
    let input = dir.path().join("in.png");
    png_write(&input, &lr).map_err(err)?;

    let run = |variant: &str| -> Result<Vec<u8>, String> {
        let out = dir.path().join(format!("{variant}.png"));
        let o = Command::new(env!("CARGO_BIN_EXE_taylorir"))
            .arg("sr")
            .arg(&input)
            .args(["--variant", variant, "--checkpoint"])
            .arg(&ckpt)
            .arg("-o")
            .arg(&out)
            .output()
            .map_err(err)?;
        if !o.status.success() {
            return Err(format!("sr --variant {variant} failed: {}", String::from_utf8_lossy(&o.stderr)));
        }
        std::fs::read(Path::new(&out)).map_err(err)
    };
    let (a, b) = (run("direct")?, run("efficient")?);
    Ok((a == b, format!("24x24 input, x2, {} PNG bytes each, identical: {}", a.len(), a == b)))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("variant equivalence", c1_variant_equivalence),
        ("taylor-softmax rows", c2_taylor_softmax),
        ("row-kron identity", c3_kron_identity),
        ("gradient fidelity", c4_gradients),
        ("complexity scaling", c5_scaling),
        ("memory reduction", c6_memory),
        ("windowing bijection", c7_windowing),
        ("metrics correctness", c8_metrics),
        ("overfit smoke", c9_overfit),
        ("cli quantized equivalence", c10_cli_quantized_equivalence),
    ];
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let id = i + 1;
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let (pass, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
        failed += !pass as usize;
        println!(
            "{} criterion {id:>2} {name}: {detail} [{:.1}s]",
            if pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
