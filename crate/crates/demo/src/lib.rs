//! Browser bindings for the static demo page in `www/`.
//!
//! Three operations: the NEP decision field over 2-D prototypes, accuracy
//! curves of a small synthetic incremental run (calibrated vs raw), and the
//! gradient check. Each has a plain Rust function (tested natively) and a
//! thin `#[wasm_bindgen]` wrapper.

use ept_core::embedding_store::{generate_synthetic, TestCount};
use ept_core::gradcheck::{run_grad_check, GradCheckOptions};
use ept_core::linalg::Matrix;
use ept_core::nep::NepModel;
use ept_core::protocol::run_protocol;
use ept_core::{ClassId, ProtocolSpec, RunConfig, SynthSpec};
use serde_json::json;
use wasm_bindgen::prelude::*;

fn model_2d(prototypes: &[f64], lambda: f64) -> Result<NepModel<f64>, String> {
    if prototypes.is_empty() || !prototypes.len().is_multiple_of(2) {
        return Err("prototypes must be a non-empty list of (x, y) pairs".into());
    }
    let n = prototypes.len() / 2;
    let k = Matrix::from_vec(n, 2, prototypes.to_vec()).map_err(|e| e.to_string())?;
    let ids = (0..n as u32).map(ClassId).collect();
    NepModel::new(k, ids, lambda, 1e-8).map_err(|e| e.to_string())
}

/// Predicted prototype index for every pixel of a `width × height` grid over
/// `[x0, x1] × [y0, y1]`, row-major from the top-left corner.
pub fn decision_field(
    prototypes: &[f64],
    lambda: f64,
    width: usize,
    height: usize,
    extent: [f64; 4],
) -> Result<Vec<u8>, String> {
    let model = model_2d(prototypes, lambda)?;
    if model.class_ids().len() > 255 {
        return Err("at most 255 prototypes".into());
    }
    let [x0, x1, y0, y1] = extent;
    let mut out = Vec::with_capacity(width * height);
    for row in 0..height {
        let y = y1 - (y1 - y0) * (row as f64 + 0.5) / height as f64;
        for col in 0..width {
            let x = x0 + (x1 - x0) * (col as f64 + 0.5) / width as f64;
            let d = model.classify(&[x, y]).map_err(|e| e.to_string())?;
            out.push(d.predicted.0 as u8);
        }
    }
    Ok(out)
}

/// Coefficients, residuals and prediction for one query point, as JSON.
pub fn probe(prototypes: &[f64], lambda: f64, x: f64, y: f64) -> Result<String, String> {
    let model = model_2d(prototypes, lambda)?;
    let d = model.classify(&[x, y]).map_err(|e| e.to_string())?;
    Ok(json!({ "coefficients": d.coefficients, "residuals": d.residuals, "predicted": d.predicted.0 }).to_string())
}

/// Per-stage accuracy of the full method and the raw-prototype baseline on
/// a fresh 20-class Gaussian dataset (10 base classes, five 2-way 5-shot stages).
pub fn run_curves(mean_scale: f64, support_bias: f64, seed: u64) -> Result<String, String> {
    let spec = SynthSpec { num_classes: 20, dim: 32, samples_per_class: 150, mean_scale, noise_std: 1.0 };
    spec.validate().map_err(|e| e.to_string())?;
    let ds = generate_synthetic(&spec, seed).map_err(|e| e.to_string())?;
    let mut cfg = RunConfig {
        protocol: ProtocolSpec {
            base_classes: 10,
            stages: 5,
            ways: 2,
            shots: 5,
            test_per_class: TestCount::Count(50),
            base_support: Some(100),
        },
        support_bias,
        ..Default::default()
    };
    cfg.train.seed = seed;
    cfg.validate().map_err(|e| e.to_string())?;
    let mut raw_cfg = cfg.clone();
    raw_cfg.ablation.apply_token("nep-only").map_err(|e| e.to_string())?;

    let full = run_protocol(&ds, &cfg).map_err(|e| e.to_string())?;
    let raw = run_protocol(&ds, &raw_cfg).map_err(|e| e.to_string())?;
    let acc = |r: &ept_core::protocol::RunReport| r.stages.iter().map(|s| s.accuracy).collect::<Vec<_>>();
    Ok(json!({
        "full": acc(&full),
        "raw": acc(&raw),
        "full_average": full.average,
        "raw_average": raw.average,
        "params": full.params_trainable,
    })
    .to_string())
}

pub fn grad_check(trials: usize, seed: u64, float32: bool) -> Result<String, String> {
    let report =
        run_grad_check(&GradCheckOptions { trials, seed, float32, metrics: true }).map_err(|e| e.to_string())?;
    let tolerance = if float32 { 1e-2 } else { 1e-4 };
    let mut v = serde_json::to_value(&report).map_err(|e| e.to_string())?;
    v["tolerance"] = json!(tolerance);
    v["passed"] = json!(report.passes(tolerance));
    Ok(v.to_string())
}

#[wasm_bindgen(js_name = decisionField)]
#[allow(clippy::too_many_arguments)]
pub fn decision_field_js(
    prototypes: &[f64],
    lambda: f64,
    width: usize,
    height: usize,
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
) -> Result<Vec<u8>, JsError> {
    decision_field(prototypes, lambda, width, height, [x0, x1, y0, y1]).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = probe)]
pub fn probe_js(prototypes: &[f64], lambda: f64, x: f64, y: f64) -> Result<String, JsError> {
    probe(prototypes, lambda, x, y).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = runCurves)]
pub fn run_curves_js(mean_scale: f64, support_bias: f64, seed: u32) -> Result<String, JsError> {
    run_curves(mean_scale, support_bias, seed as u64).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = gradCheck)]
pub fn grad_check_js(trials: usize, seed: u32, float32: bool) -> Result<String, JsError> {
    grad_check(trials, seed as u64, float32).map_err(|e| JsError::new(&e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn field_matches_the_worked_example() {
        // K = [[1,0],[2,0]], f = (1,0) at λ = 0.3 goes to the second prototype.
        let v: serde_json::Value = serde_json::from_str(&probe(&[1.0, 0.0, 2.0, 0.0], 0.3, 1.0, 0.0).unwrap()).unwrap();
        assert_eq!(v["predicted"], 1);
        assert!((v["coefficients"][0].as_f64().unwrap() - 0.1887).abs() < 1e-3);
        let field = decision_field(&[1.0, 0.0, 2.0, 0.0], 0.3, 8, 4, [-3.0, 3.0, -3.0, 3.0]).unwrap();
        assert_eq!(field.len(), 32);
        assert!(field.iter().all(|&c| c < 2));
    }

    #[test]
    fn each_prototype_claims_its_own_neighbourhood() {
        let protos = [4.0, 0.0, 0.0, 4.0, -3.0, -3.0];
        for (i, p) in protos.chunks(2).enumerate() {
            let e = [p[0] - 0.1, p[0] + 0.1, p[1] - 0.1, p[1] + 0.1];
            assert_eq!(decision_field(&protos, 0.3, 3, 3, e).unwrap(), vec![i as u8; 9]);
        }
    }

    #[test]
    fn bad_prototype_list_is_an_error() {
        assert!(decision_field(&[1.0, 2.0, 3.0], 0.3, 2, 2, [0.0, 1.0, 0.0, 1.0]).is_err());
        assert!(probe(&[], 0.3, 0.0, 0.0).is_err());
    }

    #[test]
    fn curves_have_one_point_per_stage() {
        let v: serde_json::Value = serde_json::from_str(&run_curves(10.0, 0.0, 1).unwrap()).unwrap();
        assert_eq!(v["full"].as_array().unwrap().len(), 6);
        assert_eq!(v["raw"].as_array().unwrap().len(), 6);
        assert!(v["full_average"].as_f64().unwrap() > 0.9);
    }

    #[test]
    fn grad_check_summary() {
        let v: serde_json::Value = serde_json::from_str(&grad_check(4, 0, false).unwrap()).unwrap();
        assert_eq!(v["passed"], true);
        assert_eq!(v["trials"], 4);
    }
}
