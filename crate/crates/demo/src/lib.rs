//! WebAssembly bindings for the static demo page.
//!
//! Each export takes a JSON parameter object (missing fields take their
//! defaults) and returns a JSON string. The same operations are available
//! natively through [`ops`] for testing.

use wasm_bindgen::prelude::*;

pub mod ops;

fn to_js(r: Result<serde_json::Value, ops::DemoError>) -> Result<String, JsError> {
    r.map(|v| v.to_string())
        .map_err(|e| JsError::new(&e.to_string()))
}

/// Class-averaged raw and trained concept scores next to the planted
/// prototypes.
#[wasm_bindgen]
pub fn concept_scores(params: &str) -> Result<String, JsError> {
    to_js(ops::parse(params).and_then(|p| ops::concept_scores(&p)))
}

/// Test concept and class accuracy against labels per class.
#[wasm_bindgen]
pub fn label_budget_curve(params: &str) -> Result<String, JsError> {
    to_js(ops::parse(params).and_then(|p| ops::label_budget_curve(&p)))
}

/// Error matrices before and after intervening on the worst class pair.
#[wasm_bindgen]
pub fn intervention(params: &str) -> Result<String, JsError> {
    to_js(ops::parse(params).and_then(|p| ops::intervention(&p)))
}
