//! Browser bindings. Every export takes plain numbers and returns a JSON
//! string; the page in `www/` renders it.

use phlab::closing::{close_global, ClosingOptions};
use phlab::degree::{degree_fixed_point, AdmissibleMap, BoxDomain};
use phlab::geometry::Point3;
use phlab::perturbation::VectorFieldSpec;
use phlab::splitting::{estimate_splitting, one_step_rates, DEFAULT_DEPTH};
use phlab::systems::MapSpec;
use serde::Serialize;
use wasm_bindgen::prelude::*;

fn system(name: &str) -> Result<MapSpec, String> {
    match name {
        "product" => Ok(MapSpec::product()),
        "skew" => Ok(MapSpec::skew(0.05)),
        "reversing" => Ok(MapSpec::reversing()),
        other => Err(format!("unknown system {other:?}")),
    }
}

fn to_json<T: Serialize>(v: &T) -> Result<String, String> {
    serde_json::to_string(v).map_err(|e| e.to_string())
}

/// Closes the orbit of `(x, y, theta)` with a perturbation of size at most
/// `1/n` along the vertical field.
pub fn close_json(name: &str, x: f64, y: f64, theta: f64, n: usize) -> Result<String, String> {
    let f = system(name)?.instance();
    let opts = ClosingOptions { diagnostics: false, ..ClosingOptions::default() };
    let r = close_global(&f, &Point3::xyz(x, y, theta), &VectorFieldSpec::vertical(), n.max(1), &opts)
        .map_err(|e| e.to_string())?;
    to_json(&r)
}

#[derive(Serialize)]
struct DegreeView {
    seed: u64,
    s: usize,
    t: f64,
    v: [f64; 2],
    residual: f64,
    initial_degree: i32,
}

/// Fixed point of a random admissible map on `[-1, 1] x D^s`.
pub fn degree_json(seed: u64, s: usize) -> Result<String, String> {
    let dom = BoxDomain::new(-1.0, 1.0, s).map_err(|e| e.to_string())?;
    let m = AdmissibleMap::random(dom, seed);
    let h = |t: f64, v: [f64; 2]| m.eval(t, v);
    let fp = degree_fixed_point(&h, &dom, 1e-12).map_err(|e| e.to_string())?;
    let (t, v) = m.eval(fp.t, fp.v);
    let residual = ((t - fp.t).powi(2) + (v[0] - fp.v[0]).powi(2) + (v[1] - fp.v[1]).powi(2)).sqrt();
    to_json(&DegreeView { seed, s, t: fp.t, v: fp.v, residual, initial_degree: fp.initial_degree })
}

#[derive(Serialize)]
struct SplittingView {
    es: [f64; 3],
    ec: [f64; 3],
    eu: [f64; 3],
    rates: [f64; 3],
    residual: f64,
}

/// Invariant splitting at a point with one-step growth rates.
pub fn splitting_json(name: &str, x: f64, y: f64, theta: f64) -> Result<String, String> {
    let f = system(name)?.instance();
    let fr = estimate_splitting(&f, &Point3::xyz(x, y, theta), DEFAULT_DEPTH).map_err(|e| e.to_string())?;
    let (s, c, u) = one_step_rates(&f, &fr);
    let arr = |v: phlab::geometry::Vec3| [v[0], v[1], v[2]];
    to_json(&SplittingView {
        es: arr(fr.es_vec()),
        ec: arr(fr.ec),
        eu: arr(fr.eu_vec()),
        rates: [s, c, u],
        residual: fr.residual,
    })
}

#[wasm_bindgen]
pub fn close(name: &str, x: f64, y: f64, theta: f64, n: usize) -> Result<String, JsValue> {
    close_json(name, x, y, theta, n).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn degree(seed: u64, s: usize) -> Result<String, JsValue> {
    degree_json(seed, s).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn splitting(name: &str, x: f64, y: f64, theta: f64) -> Result<String, JsValue> {
    splitting_json(name, x, y, theta).map_err(|e| JsValue::from_str(&e))
}
