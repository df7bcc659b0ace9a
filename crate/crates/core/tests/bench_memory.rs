use taylorir::attention::Variant;
use taylorir::bench::{measure_attention, measure_peak, memory_reduction, peak_sweep};

#[test]
fn w48_regime_halves_peak() {
    let dir = measure_peak(Variant::DirectTaylor, 2304, 32, 32, 0).unwrap();
    let eff = measure_peak(Variant::EfficientTaylor, 2304, 32, 32, 0).unwrap();
    assert!(dir.peak_elements >= 2304 * 2304, "{}", dir.peak_elements);
    assert!(eff.peak_elements <= 2_600_000, "{}", eff.peak_elements);
    let saved = memory_reduction(&dir, &eff).unwrap();
    eprintln!("direct {} efficient {} saved {:.1}%", dir.peak_elements, eff.peak_elements, saved * 100.0);
    assert!(saved >= 0.5);
}

#[test]
fn efficient_peak_grows_linearly() {
    let cells: Vec<_> = [256usize, 512, 1024, 2048].iter().map(|&n| (Variant::EfficientTaylor, n, 16, 16)).collect();
    let recs = peak_sweep(&cells, 3).unwrap();
    for w in recs.windows(2) {
        let ratio = w[1].peak_elements as f64 / w[0].peak_elements as f64;
        assert!(ratio <= 2.0 * 1.1, "{} -> {}: {ratio}", w[0].n, w[1].n);
    }
}

#[test]
fn direct_peak_grows_quadratically() {
    let a = measure_peak(Variant::DirectTaylor, 256, 8, 8, 0).unwrap();
    let b = measure_peak(Variant::DirectTaylor, 512, 8, 8, 0).unwrap();
    let ratio = b.peak_elements as f64 / a.peak_elements as f64;
    assert!(ratio > 3.5, "{ratio}");
}

#[test]
fn peaks_are_deterministic() {
    let a = measure_attention(Variant::EfficientTaylor, 300, 8, 8, 5, 11).unwrap();
    let b = measure_attention(Variant::EfficientTaylor, 300, 8, 8, 5, 12).unwrap();
    assert_eq!(a.peak_elements, b.peak_elements);
    let c = measure_peak(Variant::DirectTaylor, 300, 8, 8, 11).unwrap();
    let d = measure_peak(Variant::DirectTaylor, 300, 8, 8, 11).unwrap();
    assert_eq!(c.peak_elements, d.peak_elements);
}

#[test]
fn single_token_is_tiny() {
    for v in [Variant::DirectTaylor, Variant::EfficientTaylor] {
        let r = measure_attention(v, 1, 16, 16, 5, 0).unwrap();
        assert!(r.median_s.unwrap() < 1e-3);
        assert!(r.peak_elements <= 4 * 16 * 16 * 17, "{}", r.peak_elements);
    }
}

#[test]
fn over_budget_cell_is_infeasible_not_fatal() {
    // 600M elements is far below the direct cost at this N
    let r = measure_peak(Variant::DirectTaylor, 100_000, 4, 4, 0).unwrap();
    assert!(!r.feasible);
    assert_eq!(r.csv_fields()[6], "");
}
