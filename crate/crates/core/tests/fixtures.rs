use std::path::PathBuf;

use serde_json::Value;
use tabula::model::{
    load_dataset, load_model, plaintext_infer_float, plaintext_infer_quantized, quant_sweep, OracleMode, PlanStep,
};

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

fn golden() -> Value {
    serde_json::from_str(&std::fs::read_to_string(fixture("golden.json")).unwrap()).unwrap()
}

const MODELS: [&str; 2] = ["mlp_mnist_16", "conv_digits"];

#[test]
fn mlp_fixture_has_three_linear_layers() {
    let m = load_model(fixture("mlp_mnist_16.json")).unwrap();
    assert_eq!(m.linear_layer_count(), 3);
    assert_eq!(m.activation_layer_count(), 2);
    let c = m.compile().unwrap();
    assert_eq!(c.activation_count(), 32);
}

#[test]
fn conv_fixture_shapes() {
    let c = load_model(fixture("conv_digits.json")).unwrap().compile().unwrap();
    let kinds: Vec<_> = c.plan.iter().map(|l| l.kind_name()).collect();
    assert_eq!(kinds, ["conv2d", "activation", "avgpool", "flatten", "dense"]);
    assert_eq!(c.activation_count(), 256);
    assert_eq!(c.output_scale_bits(), 36);
    assert!(matches!(c.plan[3].step, PlanStep::Flatten));
}

#[test]
fn float_logits_match_golden() {
    let g = golden();
    let data = load_dataset(fixture("digits_test.json")).unwrap();
    for name in MODELS {
        let m = load_model(fixture(&format!("{name}.json"))).unwrap();
        let got = plaintext_infer_float(&m, &data.inputs[0]);
        let want: Vec<f64> = serde_json::from_value(g[name]["float_logits"].clone()).unwrap();
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-9, "{name}: {a} vs {b}");
        }
    }
}

#[test]
fn quantized_logits_match_golden() {
    let g = golden();
    let data = load_dataset(fixture("digits_test.json")).unwrap();
    for name in MODELS {
        let m = load_model(fixture(&format!("{name}.json"))).unwrap();
        let q = plaintext_infer_quantized(&m, &data.inputs[0]).unwrap();
        let want: Vec<u64> = serde_json::from_value(g[name]["quantized_logits"].clone()).unwrap();
        assert_eq!(q.logits.iter().map(|v| v.value()).collect::<Vec<_>>(), want, "{name}");
        assert_eq!(q.scale_bits as u64, g[name]["quantized_scale_bits"].as_u64().unwrap());
    }
}

#[test]
fn input0_file_matches_dataset() {
    let data = load_dataset(fixture("digits_test.json")).unwrap();
    let x: Vec<f32> = serde_json::from_str(&std::fs::read_to_string(fixture("input0.json")).unwrap()).unwrap();
    assert_eq!(x, data.inputs[0]);
}

#[test]
fn sweep_full_precision_equals_unquantized() {
    let data = load_dataset(fixture("digits_test.json")).unwrap();
    for name in MODELS {
        let m = load_model(fixture(&format!("{name}.json"))).unwrap();
        let rows = quant_sweep(&m, &data, &[1, 4, 8, 12, 16]).unwrap();
        let unquantized = m.compile().unwrap().accuracy(&data, OracleMode::Unbounded);
        assert_eq!(rows.last().unwrap().accuracy, unquantized, "{name}");
        assert!(rows[0].accuracy <= unquantized, "{name}");
        assert!(unquantized > 0.9, "{name}: {unquantized}");
    }
}

#[test]
fn oracle_modes_agree_with_float_argmax() {
    let data = load_dataset(fixture("digits_test.json")).unwrap();
    let m = load_model(fixture("mlp_mnist_16.json")).unwrap();
    let c = m.compile().unwrap();
    let mut agree = 0;
    for x in &data.inputs {
        let f = plaintext_infer_float(&m, x);
        let q = c.infer_quantized(x, OracleMode::Protocol).unwrap();
        if tabula::model::argmax_f64(&f) == q.argmax(c.field()) {
            agree += 1;
        }
    }
    assert!(agree as f64 >= 0.99 * data.len() as f64, "{agree}/{}", data.len());
}
