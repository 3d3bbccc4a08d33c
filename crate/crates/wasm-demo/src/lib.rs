//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Every export takes hex text and returns a JSON (or DOT) string. The plain
//! functions are also usable natively; the `#[wasm_bindgen]` wrappers only
//! turn error strings into JS exceptions.

use evmhunt_core::avp::{score_nodes, PatternTable, ScoreConfig, VulnClass};
use evmhunt_core::cfg::{build_cfg, Cfg};
use evmhunt_core::disasm::{disassemble, strip_trailing_metadata, ContractBytecode};
use serde::Serialize;
use wasm_bindgen::prelude::*;

fn parse(hex: &str, strip_metadata: bool) -> Result<ContractBytecode, String> {
    let code = ContractBytecode::from_hex("input", hex).map_err(|e| e.to_string())?;
    Ok(if strip_metadata { strip_trailing_metadata(&code) } else { code })
}

fn graph(hex: &str, strip_metadata: bool) -> Result<Cfg, String> {
    Ok(build_cfg(&parse(hex, strip_metadata)?))
}

/// `[{offset, mnemonic, immediate, truncated}]`.
pub fn disassemble_json(hex: &str, strip_metadata: bool) -> Result<String, String> {
    let seq = disassemble(&parse(hex, strip_metadata)?);
    serde_json::to_string(&seq).map_err(|e| e.to_string())
}

/// `{blocks, edges, unresolved}` as printed by `evmhunt cfg`.
pub fn cfg_json(hex: &str, strip_metadata: bool) -> Result<String, String> {
    Ok(graph(hex, strip_metadata)?.to_json().to_string())
}

pub fn cfg_dot(hex: &str, strip_metadata: bool) -> Result<String, String> {
    Ok(graph(hex, strip_metadata)?.to_dot())
}

#[derive(Serialize)]
struct Scored {
    scores: Vec<f64>,
    matched: Vec<bool>,
    chains: Vec<Vec<usize>>,
    classes: Vec<&'static str>,
}

/// Per-node scores and matched chains for `vuln`, plus every class whose
/// default table matches somewhere at depth `l`.
pub fn score_json(hex: &str, strip_metadata: bool, vuln: &str, l: usize, xi: f64, nu: f64) -> Result<String, String> {
    let class: VulnClass = vuln.parse().map_err(|e: evmhunt_core::Error| e.to_string())?;
    let config = ScoreConfig {
        l,
        xi,
        nu,
        feature_dim: 1,
    };
    config.validate().map_err(|e| e.to_string())?;
    let cfg = graph(hex, strip_metadata)?;
    let s = score_nodes(&cfg, &PatternTable::default_for(class), &config);
    let classes = evmhunt_core::avp::triage_contract(&cfg, &PatternTable::defaults(), l)
        .into_iter()
        .map(VulnClass::as_str)
        .collect();
    let out = Scored {
        scores: s.scores,
        matched: s.matched,
        chains: s.matched_chains.into_iter().map(|c| c.node_indices).collect(),
        classes,
    };
    serde_json::to_string(&out).map_err(|e| e.to_string())
}

fn js<T>(r: Result<T, String>) -> Result<T, JsValue> {
    r.map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = disassemble)]
pub fn wasm_disassemble(hex: &str, strip_metadata: bool) -> Result<String, JsValue> {
    js(disassemble_json(hex, strip_metadata))
}

#[wasm_bindgen(js_name = cfgJson)]
pub fn wasm_cfg_json(hex: &str, strip_metadata: bool) -> Result<String, JsValue> {
    js(cfg_json(hex, strip_metadata))
}

#[wasm_bindgen(js_name = cfgDot)]
pub fn wasm_cfg_dot(hex: &str, strip_metadata: bool) -> Result<String, JsValue> {
    js(cfg_dot(hex, strip_metadata))
}

#[wasm_bindgen(js_name = scoreNodes)]
pub fn wasm_score_nodes(
    hex: &str,
    strip_metadata: bool,
    vuln: &str,
    l: usize,
    xi: f64,
    nu: f64,
) -> Result<String, JsValue> {
    js(score_json(hex, strip_metadata, vuln, l, xi, nu))
}
