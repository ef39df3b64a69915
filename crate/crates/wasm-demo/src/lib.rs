//! Browser bindings for three small interactive views of the library.
//!
//! Every export takes plain numbers or a TOML string and returns JSON, so
//! the page needs no generated bindings beyond `wasm-bindgen`'s glue. The
//! [`demo`] functions hold the logic and are what native tests exercise.

use wasm_bindgen::prelude::*;

pub mod demo;

fn to_js(r: Result<String, String>) -> Result<String, JsValue> {
    r.map_err(|e| JsValue::from_str(&e))
}

/// `[ε_th(1), …, ε_th(T)]` as a JSON array.
#[wasm_bindgen]
pub fn thresholds(epsilon: f64, tasks: usize) -> Result<String, JsValue> {
    to_js(demo::thresholds(epsilon, tasks))
}

/// Memory and rank-1 `B` for two 2-D point clouds; see [`demo::design_2d`].
#[wasm_bindgen]
pub fn design_2d(
    old_angle_deg: f64,
    new_angle_deg: f64,
    spread: f64,
    epsilon: f64,
    variant: &str,
) -> Result<String, JsValue> {
    to_js(demo::design_2d(
        old_angle_deg,
        new_angle_deg,
        spread,
        epsilon,
        variant,
    ))
}

/// Runs a TOML experiment config and returns accuracy matrices as JSON.
#[wasm_bindgen]
pub fn run_stream(config_toml: &str) -> Result<String, JsValue> {
    to_js(demo::run_stream(config_toml))
}

/// A small config that finishes in a few seconds in the browser.
#[wasm_bindgen]
pub fn default_config() -> String {
    demo::DEFAULT_CONFIG.to_string()
}
