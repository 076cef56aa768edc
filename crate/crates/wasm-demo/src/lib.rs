//! Browser bindings for the demo page in `www/`.

use diffsort_core::diffsort::relaxed_sort;
use diffsort_core::sigmoid::soft_min_with_zero;
use diffsort_core::topk::topk_rows;
use diffsort_core::{NetworkKind, SigmoidKind, SigmoidSpec, SortingNetwork};
use wasm_bindgen::prelude::*;

fn spec(kind: &str, beta: f64) -> Result<SigmoidSpec, String> {
    let kind: SigmoidKind = kind.parse().map_err(|e| format!("{e}"))?;
    SigmoidSpec::new(kind, beta).map_err(|e| e.to_string())
}

fn network(kind: &str, n: usize) -> Result<SortingNetwork, String> {
    let kind: NetworkKind = kind.parse().map_err(|e| format!("{e}"))?;
    SortingNetwork::build(kind, n).map_err(|e| e.to_string())
}

/// `f(x)` and `min_f(x, 0)` on `points` equally spaced samples of `[lo, hi]`,
/// interleaved as `[x, f, min_f, ...]`.
pub fn curve(kind: &str, beta: f64, lo: f64, hi: f64, points: usize) -> Result<Vec<f64>, String> {
    let s = spec(kind, beta)?;
    if points < 2 || !(hi > lo) {
        return Err("need at least two points on a non-empty interval".into());
    }
    let mut out = Vec::with_capacity(3 * points);
    for i in 0..points {
        let x = lo + (hi - lo) * i as f64 / (points - 1) as f64;
        out.extend([x, s.value(x), soft_min_with_zero(&s, x)]);
    }
    Ok(out)
}

/// Row-major relaxed permutation matrix followed by the relaxed sorted values.
pub fn permutation(kind: &str, beta: f64, net: &str, values: &[f64]) -> Result<Vec<f64>, String> {
    let s = spec(kind, beta)?;
    let net = network(net, values.len())?;
    let r = relaxed_sort(&net, &s, values, true).map_err(|e| e.to_string())?;
    let mut out = r.perm.expect("requested").as_slice().to_vec();
    out.extend(r.sorted_values);
    Ok(out)
}

/// Probability that each score lands in the top `k` positions, ranking
/// larger scores first.
pub fn topk(kind: &str, beta: f64, scores: &[f64], k: usize) -> Result<Vec<f64>, String> {
    let s = spec(kind, beta)?;
    let net = network("odd_even", scores.len())?;
    let neg: Vec<f64> = scores.iter().map(|v| -v).collect();
    let rows = topk_rows(&net, &s, &neg, k).map_err(|e| e.to_string())?;
    Ok((0..scores.len()).map(|c| (0..k).map(|r| rows[(r, c)]).sum()).collect())
}

#[wasm_bindgen]
pub fn sigmoid_curve(kind: &str, beta: f64, lo: f64, hi: f64, points: usize) -> Result<Vec<f64>, JsError> {
    curve(kind, beta, lo, hi, points).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn relaxed_permutation(kind: &str, beta: f64, net: &str, values: Vec<f64>) -> Result<Vec<f64>, JsError> {
    permutation(kind, beta, net, &values).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn topk_membership(kind: &str, beta: f64, scores: Vec<f64>, k: usize) -> Result<Vec<f64>, JsError> {
    topk(kind, beta, &scores, k).map_err(|e| JsError::new(&e))
}
