use taylorir::attention::direct_taylorshift;
use taylorir::numerics::Var;
use taylorir::verify::{
    attention_suite, gradients_suite, metrics_suite, model_gradients, windowing_suite, AttentionImpls, Suite,
};
use taylorir::Result;

fn show(r: &taylorir::verify::SuiteReport) -> String {
    r.properties.iter().map(|p| p.to_string()).collect::<Vec<_>>().join("\n")
}

#[test]
fn every_suite_passes() {
    for r in [attention_suite(7, &AttentionImpls::default()), windowing_suite(7), metrics_suite(7), gradients_suite(7)] {
        assert!(r.passed(), "{}:\n{}", r.suite, show(&r));
    }
}

#[test]
fn attention_suite_reports_six_or_more() {
    assert!(attention_suite(1, &AttentionImpls::default()).properties.len() >= 6);
}

/// `1 + A - A^2/2` instead of `1 + A + A^2/2`.
fn flipped_quadratic(q: &Var<f64>, k: &Var<f64>, v: &Var<f64>, scale: f64) -> Result<Var<f64>> {
    let a = q.matmul_t(k, false, true)?.scale(scale)?;
    let num = a.sub(&a.square()?.scale(0.5)?)?.add_scalar(1.0)?;
    let den = num.sum(1, true)?;
    num.div(&den)?.matmul(v)
}

#[test]
fn sign_flip_in_quadratic_term_is_caught() {
    let imp = AttentionImpls { direct: flipped_quadratic, ..Default::default() };
    let r = attention_suite(7, &imp);
    assert!(!r.passed());
    let eq = r.properties.iter().find(|p| p.name == "direct_vs_efficient_f64").unwrap();
    assert!(!eq.pass);
    // The unmutated reference still agrees with itself.
    let ok = AttentionImpls { direct: direct_taylorshift::<f64>, ..Default::default() };
    assert!(attention_suite(7, &ok).passed());
}

#[test]
fn model_gradient_every_tensor() {
    let config = taylorir::verify::gradient_check_config();
    let shapes = taylorir::model::init_params::<f64>(&config, 0).unwrap();
    let names: Vec<String> = shapes.named().into_iter().map(|(n, _)| n).collect();
    let refs: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
    for (name, err) in model_gradients(3, &refs, 4).unwrap() {
        assert!(err <= 1e-3, "{name}: relative error {err:e}");
    }
}

#[test]
fn suite_all_runs_each() {
    let names: Vec<_> = taylorir::verify::run(Suite::Windowing, 2).iter().map(|r| r.suite).collect();
    assert_eq!(names, ["windowing"]);
}
