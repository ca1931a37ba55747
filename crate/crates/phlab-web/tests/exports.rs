use phlab_web::{close_json, degree_json, splitting_json};
use serde_json::Value;

#[test]
fn close_product_fixed_point() {
    let v: Value = serde_json::from_str(&close_json("product", 0.0, 0.0, 0.3, 2).unwrap()).unwrap();
    let w = 2f64.sqrt() - 1.0;
    // over the fixed point the nearest integer to omega + tau is 0
    assert_eq!(v["k"], 1);
    assert!((v["tau"].as_f64().unwrap() + w).abs() < 1e-9);
    assert!(v["residual"].as_f64().unwrap() < 1e-9);
}

#[test]
fn degree_export() {
    let v: Value = serde_json::from_str(&degree_json(3, 2).unwrap()).unwrap();
    assert_eq!(v["initial_degree"], 1);
    assert!(v["residual"].as_f64().unwrap() < 1e-6);
}

#[test]
fn splitting_export_on_product() {
    let v: Value = serde_json::from_str(&splitting_json("product", 0.1, 0.2, 0.3).unwrap()).unwrap();
    let r: Vec<f64> = v["rates"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
    let ls = (3.0 - 5f64.sqrt()) / 2.0;
    assert!((r[0] - ls).abs() < 1e-8 && (r[1] - 1.0).abs() < 1e-12 && (r[2] - 1.0 / ls).abs() < 1e-8);
}

#[test]
fn unknown_system_is_an_error() {
    assert!(splitting_json("anosov", 0.0, 0.0, 0.0).is_err());
}
