use a2o_core::gradsuite::{self, GROUPS};
use a2o_tensor::GradCheckConfig;

fn group(name: &str) {
    let results = gradsuite::run(Some(name), &GradCheckConfig::default()).unwrap();
    assert!(!results.is_empty());
    for (check, report) in results {
        assert!(report.checked > 0, "{check}");
        assert!(report.passed(), "{check}: {report}");
    }
}

#[test]
fn illumination_gradients() {
    group("illumination");
}

#[test]
fn fosf_gradients() {
    group("fosf");
}

#[test]
fn raster_gradients() {
    group("raster");
}

#[test]
fn asco_gradients() {
    group("asco");
}

#[test]
fn encoder_gradients() {
    group("encoder");
}

#[test]
fn objective_gradients() {
    group("objectives");
}

#[test]
fn toy_model_gradients() {
    group("model");
}

#[test]
fn unknown_group_is_an_error() {
    assert!(gradsuite::run(Some("nope"), &GradCheckConfig::default()).is_err());
    assert_eq!(GROUPS.len(), 8);
}
